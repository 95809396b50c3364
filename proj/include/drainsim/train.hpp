#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "drainsim/surrogate.hpp"

namespace drainsim {

struct TrainConfig {
    int window_size = 60;   // [min]
    int epochs = 2000;
    int patience = 500;     // stop once validation stalls this long
    double lr_start = 1e-3;
    double lr_end = 1e-4;
    uint64_t seed = 0;
    int batch = 0;          // windows per gradient step, 0 = all

    void validate() const {
        if (window_size < 1) throw NumericalError("window_size must be >= 1");
        if (!(lr_start >= lr_end && lr_end > 0))
            throw NumericalError("requires lr_start >= lr_end > 0");
        if (epochs < 1) throw NumericalError("epochs must be >= 1");
    }
};

/// Exponential decay from lr_start to lr_end over the configured epochs.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    return cfg.lr_start *
           std::pow(cfg.lr_end / cfg.lr_start, static_cast<double>(epoch) / cfg.epochs);
}

/// A contiguous chunk of the labeled trajectory: the surrogate starts from
/// the labeled state at `start` and must reproduce the next `length` rows.
struct Window {
    int start = 0;
    Eigen::VectorXd x0_full;      // raw labeled state at `start` [2N+M]
    Eigen::MatrixXd labels_full;  // raw labels, column per step [2N+M × W]
    Eigen::MatrixXd runoff;       // raw forcing, column per step [N × W]
};

/// Contiguous non-overlapping windows; a trailing partial window is dropped.
inline std::vector<Window> make_windows(const Trajectory& traj, const RunoffSeries& runoff,
                                        int window_size) {
    const int T = traj.steps();
    if (window_size < 1 || window_size > T)
        throw NumericalError("window_size must lie in [1, trajectory length]");
    if (runoff.steps() < T) throw NumericalError("make_windows: runoff shorter than trajectory");
    std::vector<Window> out;
    for (int start = 0; start + window_size <= T; start += window_size) {
        Window w;
        w.start = start;
        w.x0_full = traj.states.row(start);
        w.labels_full = traj.states.middleRows(start + 1, window_size).transpose();
        w.runoff = runoff.rate.middleRows(start, window_size).transpose();
        out.push_back(std::move(w));
    }
    return out;
}

/**
 * Batched loss/gradient engine. Windows are laid out as matrix columns so
 * every rollout step is a single dense pass over the whole batch; reverse
 * accumulation then walks the cached activations backwards through time,
 * through the min-max scaling and - for the constrained model - through the
 * mass-balance layer (whose clamp contributes zero gradient on the clamped
 * branch).
 *
 * The MSE always covers all of h, Q and Q_w: the constrained model's Q_w
 * comes out of the constraint layer in physical units and is scaled with the
 * Q_w scaler before entering the loss. A window whose rollout leaves
 * |scaled state| < kDivergenceLimit contributes its squared errors; a
 * diverged window contributes the fixed penalty loss instead and is dropped
 * from the gradient.
 */
class WindowedObjective {
public:
    static constexpr double kPenaltyLoss = 1e3;

    WindowedObjective(const SurrogateModel& proto, std::vector<Window> windows)
        : windows_(std::move(windows)) {
        if (windows_.empty()) throw NumericalError("objective needs at least one window");
        D_ = proto.state_dim();
        N_ = proto.n_nodes;
        M_ = proto.n_links;
        W_ = static_cast<int>(windows_[0].runoff.cols());
        B_ = static_cast<int>(windows_.size());
        constrained_ = proto.constrained;
        full_ = 2 * N_ + M_;
        for (const auto& w : windows_)
            if (w.runoff.cols() != W_ || w.labels_full.rows() != full_)
                throw NumericalError("objective: inconsistent window shapes");

        smin_ = proto.scaler.state_min.head(D_);
        srange_ = proto.scaler.state_range.head(D_);
        sinv_ = proto.scaler.state_inv.head(D_);
        qwmin_ = proto.scaler.state_min.tail(N_);
        qwinv_ = proto.scaler.state_inv.tail(N_);
        link_up_.resize(M_);
        link_dn_.resize(M_);
        for (int j = 0; j < M_; ++j) {
            link_up_[j] = proto.link_ends[j].first;
            link_dn_[j] = proto.link_ends[j].second;
        }
        outlet_ = proto.outlet;

        // batch matrices, one column per (window, step)
        x0_.resize(D_, B_);
        labels_.assign(W_, Eigen::MatrixXd(D_, B_));
        qw_labels_.assign(constrained_ ? W_ : 0, Eigen::MatrixXd(N_, B_));
        runoff_scaled_.assign(W_, Eigen::MatrixXd(N_, B_));
        runoff_raw_.assign(constrained_ ? W_ : 0, Eigen::MatrixXd(N_, B_));
        for (int b = 0; b < B_; ++b) {
            const Window& w = windows_[b];
            x0_.col(b) = scale_state(w.x0_full.head(D_));
            for (int k = 0; k < W_; ++k) {
                labels_[k].col(b) = scale_state(w.labels_full.col(k).head(D_));
                runoff_scaled_[k].col(b) = (w.runoff.col(k) - proto.scaler.runoff_min)
                                               .cwiseProduct(proto.scaler.runoff_inv);
                if (constrained_) {
                    qw_labels_[k].col(b) =
                        (w.labels_full.col(k).tail(N_) - qwmin_).cwiseProduct(qwinv_);
                    runoff_raw_[k].col(b) = w.runoff.col(k);
                }
            }
        }

        prior_cache_.resize(W_);
        residue_cache_.resize(W_);
        ys_.assign(W_, Eigen::MatrixXd(D_, B_));
        x_raw_.assign(W_, Eigen::MatrixXd(D_, B_));
        xs_pred_.assign(W_, Eigen::MatrixXd(D_, B_));
        qws_.assign(constrained_ ? W_ : 0, Eigen::MatrixXd(N_, B_));
        clamp_open_.assign(constrained_ ? W_ : 0, Eigen::MatrixXd(N_, B_));
    }

    int window_count() const { return B_; }
    int window_size() const { return W_; }
    const std::vector<Window>& windows() const { return windows_; }
    int last_divergent_count() const { return last_divergent_; }

    /// Mean loss over all windows (no gradient), e.g. for validation.
    double loss(const SurrogateModel& m) { return forward(m, 0, B_); }

    /// Mean loss and gradient over windows [first, first+count).
    double loss_grad(const SurrogateModel& m, Eigen::VectorXd& grad, int first = 0,
                     int count = -1) {
        if (count < 0) count = B_ - first;
        double loss = forward(m, first, count);
        backward(m, grad, first, count);
        for (int i = 0; i < grad.size(); ++i)
            if (!std::isfinite(grad[i]))
                throw NumericalError("non-finite gradient at parameter " + std::to_string(i));
        return loss;
    }

private:
    Eigen::VectorXd scale_state(const Eigen::VectorXd& x) const {
        return (x - smin_).cwiseProduct(sinv_);
    }

    double forward(const SurrogateModel& m, int first, int count) {
        const int b = count;
        const double denom = static_cast<double>(b) * W_ * full_;
        active_ = Eigen::VectorXd::Ones(b);
        Eigen::MatrixXd xs = x0_.middleCols(first, b);
        Eigen::MatrixXd u(D_ + N_, b);
        double sq_sum = 0.0;

        for (int k = 0; k < W_; ++k) {
            mlp_forward(m.prior_shape, m.prior_params(), xs, prior_cache_[k]);
            u.topRows(D_) = xs;
            u.bottomRows(N_) = runoff_scaled_[k].middleCols(first, b);
            mlp_forward(m.residue_shape, m.residue_params(), u, residue_cache_[k]);
            Eigen::MatrixXd& ys = ys_[k];
            ys = prior_cache_[k].act.back() + residue_cache_[k].act.back();

            // divergence bookkeeping: a blown-up window switches to the
            // penalty loss and stops influencing anything downstream
            for (int c = 0; c < b; ++c) {
                if (active_[c] == 0.0) {
                    ys.col(c).setZero();
                    continue;
                }
                double mag = ys.col(c).cwiseAbs().maxCoeff();
                if (!std::isfinite(mag) || mag > SurrogateModel::kDivergenceLimit) {
                    active_[c] = 0.0;
                    ys.col(c).setZero();
                }
            }

            // the prediction in physical units and back in scaled space -
            // the same op sequence the inference rollout walks, so degenerate
            // states pin to their constant instead of leaking phantom error
            Eigen::MatrixXd& x_raw = x_raw_[k];
            x_raw = (ys.array().colwise() * srange_.array()).matrix();
            x_raw.colwise() += smin_;
            Eigen::MatrixXd& xs_pred = xs_pred_[k];
            xs_pred = ((x_raw.colwise() - smin_).array().colwise() * sinv_.array()).matrix();

            Eigen::MatrixXd err = xs_pred - labels_[k].middleCols(first, b);
            sq_sum += (err.array().square().matrix() * active_.asDiagonal()).sum();

            if (constrained_) {
                // mass balance over the raw predicted flows
                Eigen::MatrixXd g = runoff_raw_[k].middleCols(first, b);
                for (int j = 0; j < M_; ++j) {
                    g.row(link_dn_[j]) += x_raw.row(N_ + j);
                    g.row(link_up_[j]) -= x_raw.row(N_ + j);
                }
                clamp_open_[k] = (g.array() > 0.0).cast<double>().matrix();
                clamp_open_[k].row(outlet_).setZero();
                Eigen::MatrixXd qw = g.cwiseMax(0.0);
                qw.row(outlet_).setZero();
                qws_[k] = ((qw.colwise() - qwmin_).array().colwise() * qwinv_.array()).matrix();
                Eigen::MatrixXd qerr = qws_[k] - qw_labels_[k].middleCols(first, b);
                sq_sum += (qerr.array().square().matrix() * active_.asDiagonal()).sum();
            }

            if (k + 1 < W_) xs = xs_pred;
        }

        last_divergent_ = b - static_cast<int>(active_.sum());
        return (sq_sum + kPenaltyLoss * W_ * full_ * last_divergent_) / denom;
    }

    void backward(const SurrogateModel& m, Eigen::VectorXd& grad, int first, int count) {
        const int b = count;
        const double c_norm = 2.0 / (static_cast<double>(b) * W_ * full_);
        grad.setZero(m.params.size());
        double* grad_prior = grad.data();
        double* grad_residue = grad.data() + m.prior_shape.param_count();

        Eigen::MatrixXd carry;  // dLoss/d(xs of the following step)
        Eigen::MatrixXd d_xs_pred, d_x_raw, d_ys, d_u, d_xs_prior;
        for (int k = W_ - 1; k >= 0; --k) {
            d_xs_pred = c_norm * (xs_pred_[k] - labels_[k].middleCols(first, b));
            d_xs_pred = d_xs_pred * active_.asDiagonal();
            if (k + 1 < W_) d_xs_pred += carry;

            d_x_raw = (d_xs_pred.array().colwise() * sinv_.array()).matrix();
            if (constrained_) {
                Eigen::MatrixXd d_qws =
                    c_norm * (qws_[k] - qw_labels_[k].middleCols(first, b));
                d_qws = d_qws * active_.asDiagonal();
                Eigen::MatrixXd d_g =
                    ((d_qws.array().colwise() * qwinv_.array()) * clamp_open_[k].array())
                        .matrix();
                for (int j = 0; j < M_; ++j)
                    d_x_raw.row(N_ + j) += d_g.row(link_dn_[j]) - d_g.row(link_up_[j]);
            }
            d_ys = (d_x_raw.array().colwise() * srange_.array()).matrix();

            mlp_backward(m.prior_shape, m.prior_params(), prior_cache_[k], d_ys, grad_prior,
                         &d_xs_prior);
            mlp_backward(m.residue_shape, m.residue_params(), residue_cache_[k], d_ys,
                         grad_residue, &d_u);
            if (k > 0) carry = d_xs_prior + d_u.topRows(D_);
        }
    }

    std::vector<Window> windows_;
    int D_ = 0, N_ = 0, M_ = 0, W_ = 0, B_ = 0, full_ = 0, outlet_ = -1;
    bool constrained_ = true;
    Eigen::VectorXd smin_, srange_, sinv_, qwmin_, qwinv_;
    std::vector<int> link_up_, link_dn_;

    Eigen::MatrixXd x0_;
    std::vector<Eigen::MatrixXd> labels_, qw_labels_, runoff_scaled_, runoff_raw_;

    // per-call caches
    std::vector<MlpCache> prior_cache_, residue_cache_;
    std::vector<Eigen::MatrixXd> ys_, x_raw_, xs_pred_, qws_, clamp_open_;
    Eigen::VectorXd active_;
    int last_divergent_ = 0;
};

/// Loss of a single window (the batched engine with one column).
inline double window_loss(const SurrogateModel& m, const Window& w) {
    WindowedObjective obj(m, {w});
    return obj.loss(m);
}

/// Batch loss and its exact gradient with respect to all parameters.
inline std::pair<double, Eigen::VectorXd> loss_gradient(const SurrogateModel& m,
                                                        const std::vector<Window>& windows) {
    WindowedObjective obj(m, windows);
    Eigen::VectorXd grad;
    double loss = obj.loss_grad(m, grad);
    return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    Eigen::VectorXd m, v;
    long steps = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline void adam_step(AdamState& opt, Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                      double lr) {
    if (params.size() != grad.size()) throw NumericalError("adam_step: shape mismatch");
    if (opt.m.size() != params.size()) {
        opt.m = Eigen::VectorXd::Zero(params.size());
        opt.v = Eigen::VectorXd::Zero(params.size());
        opt.steps = 0;
    }
    ++opt.steps;
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad;
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.steps));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.steps));
    params -= lr * ((opt.m / bc1).array() / ((opt.v / bc2).array().sqrt() + opt.eps)).matrix();
    for (int i = 0; i < params.size(); ++i)
        if (!std::isfinite(params[i])) throw NumericalError("adam_step: non-finite update");
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainReport {
    std::vector<double> train_loss, val_loss, lr;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
    bool early_stopped = false;
    bool aborted = false;  // a full epoch diverged
    double wall_seconds = 0.0;
    uint64_t seed = 0;
    int train_windows = 0, val_windows = 0;

    nlohmann::json to_json() const {
        return {{"train_loss", train_loss},
                {"val_loss", val_loss},
                {"lr", lr},
                {"best_epoch", best_epoch},
                {"best_val", best_val},
                {"epochs_run", epochs_run},
                {"early_stopped", early_stopped},
                {"aborted", aborted},
                {"wall_seconds", wall_seconds},
                {"seed", seed},
                {"train_windows", train_windows},
                {"val_windows", val_windows}};
    }
};

/**
 * Windowed training with Adam, exponential learning-rate decay, per-epoch
 * validation and early stopping. The returned model carries the parameter
 * snapshot with the best validation loss seen.
 */
inline TrainReport train(SurrogateModel& model, const Trajectory& train_labels,
                         const RunoffSeries& train_runoff, const Trajectory& val_labels,
                         const RunoffSeries& val_runoff, const TrainConfig& cfg) {
    cfg.validate();
    if (!model.scaler.fitted()) throw NumericalError("train: scaler must be fitted first");
    auto t0 = std::chrono::steady_clock::now();

    WindowedObjective obj_train(model, make_windows(train_labels, train_runoff, cfg.window_size));
    WindowedObjective obj_val(model, make_windows(val_labels, val_runoff, cfg.window_size));

    TrainReport report;
    report.seed = cfg.seed;
    report.train_windows = obj_train.window_count();
    report.val_windows = obj_val.window_count();

    AdamState adam;
    Eigen::VectorXd grad, best_params = model.params;
    int stall = 0;
    const int B = obj_train.window_count();
    const int batch = cfg.batch > 0 ? std::min(cfg.batch, B) : B;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        double epoch_loss = 0.0;
        int divergent = 0;
        for (int first = 0; first < B; first += batch) {
            int count = std::min(batch, B - first);
            epoch_loss += obj_train.loss_grad(model, grad, first, count) * count;
            divergent += obj_train.last_divergent_count();
            adam_step(adam, model.params, grad, lr);
        }
        epoch_loss /= B;

        double val = obj_val.loss(model);
        report.train_loss.push_back(epoch_loss);
        report.val_loss.push_back(val);
        report.lr.push_back(lr);
        report.epochs_run = epoch + 1;

        if (val < report.best_val) {
            report.best_val = val;
            report.best_epoch = epoch;
            best_params = model.params;
            stall = 0;
        } else if (++stall >= cfg.patience) {
            report.early_stopped = true;
            break;
        }
        if (divergent >= B) {
            report.aborted = true;
            break;
        }
    }

    model.params = best_params;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace drainsim

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "drainsim/hifi.hpp"
#include "drainsim/mlp.hpp"
#include "drainsim/network.hpp"

namespace drainsim {

// ---------------------------------------------------------------------------
// min-max scaling
// ---------------------------------------------------------------------------

/// Per-state min/max over the training labels (full layout, Q_w included)
/// plus per-node runoff bounds. States whose observed range is below
/// kDegenerate are flagged: they scale to 0 and unscale back to their min.
struct Scaler {
    static constexpr double kDegenerate = 1e-9;

    Eigen::VectorXd state_min, state_max, state_range, state_inv;
    Eigen::VectorXd runoff_min, runoff_max, runoff_range, runoff_inv;

    bool fitted() const { return state_min.size() > 0; }
    int degenerate_states() const {
        return static_cast<int>((state_inv.array() == 0.0).count());
    }

    static void finalize(const Eigen::VectorXd& mn, const Eigen::VectorXd& mx,
                         Eigen::VectorXd& range, Eigen::VectorXd& inv) {
        range = mx - mn;
        inv = (range.array() < kDegenerate).select(0.0, range.array().inverse());
    }
};

inline Scaler fit_scaler(const Trajectory& labels, const RunoffSeries& runoff) {
    if (labels.states.rows() == 0) throw NumericalError("fit_scaler: empty trajectory");
    if (!labels.layout.include_qw || runoff.rate.cols() != labels.layout.n_nodes)
        throw NumericalError("fit_scaler: labels must carry Q_w and align with the runoff");
    Scaler s;
    s.state_min = labels.states.colwise().minCoeff();
    s.state_max = labels.states.colwise().maxCoeff();
    s.runoff_min = runoff.rate.colwise().minCoeff();
    s.runoff_max = runoff.rate.colwise().maxCoeff();
    Scaler::finalize(s.state_min, s.state_max, s.state_range, s.state_inv);
    Scaler::finalize(s.runoff_min, s.runoff_max, s.runoff_range, s.runoff_inv);
    return s;
}

inline Eigen::VectorXd minmax_scale(const Eigen::VectorXd& x, const Eigen::VectorXd& mn,
                                    const Eigen::VectorXd& inv) {
    return (x - mn).cwiseProduct(inv);
}
inline Eigen::VectorXd minmax_unscale(const Eigen::VectorXd& s, const Eigen::VectorXd& mn,
                                      const Eigen::VectorXd& range) {
    return mn + s.cwiseProduct(range);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// Residue-network size: the hidden stack of N. S1..S4 follow the standard
/// grid; anything else is a custom stack.
struct ResidueSpec {
    std::string name = "S1";
    std::vector<int> hidden{10, 10};

    static ResidueSpec from_name(const std::string& name) {
        if (name == "S1") return {"S1", {10, 10}};
        if (name == "S2") return {"S2", {20, 20, 20, 20}};
        if (name == "S3") return {"S3", {50, 50, 50, 50, 50, 50}};
        if (name == "S4") return {"S4", {100, 100, 100, 100, 100, 100}};
        throw NumericalError("unknown residue spec: " + name);
    }
    static ResidueSpec custom(std::vector<int> hidden) {
        return {"custom", std::move(hidden)};
    }
};

/**
 * One-step autoregressive surrogate
 *     x̂(t+Δt) = L(x_t) + N(x_t, R_t)
 * evaluated in min-max-scaled space with Δt fixed at one minute. The prior L
 * is a single-hidden-layer network over the state alone; the residue N also
 * sees the runoff. With `constrained` set the state excludes Q_w and excess
 * flows come from the local mass balance
 *     Q_w,i = max(Σ Q_in,i − Σ Q_out,i + R_i, 0)
 * applied to the predicted flows in physical units.
 */
struct SurrogateModel {
    static constexpr int kFormatVersion = 1;
    static constexpr double kDivergenceLimit = 10.0;  // on |scaled state|

    int n_nodes = 0, n_links = 0;
    bool constrained = true;
    double dt_seconds = 60.0;
    std::vector<std::string> node_ids, link_ids;
    std::vector<std::pair<int, int>> link_ends;  // (upstream node, downstream node)
    int outlet = -1;

    Scaler scaler;
    ResidueSpec spec;
    MlpShape prior_shape, residue_shape;
    Eigen::VectorXd params;  // prior block then residue block

    uint64_t seed = 0;
    std::string dataset_hash;

    int state_dim() const { return n_nodes + n_links + (constrained ? 0 : n_nodes); }
    int full_dim() const { return 2 * n_nodes + n_links; }
    StateLayout model_layout() const { return StateLayout{n_nodes, n_links, !constrained}; }

    const double* prior_params() const { return params.data(); }
    const double* residue_params() const { return params.data() + prior_shape.param_count(); }
    double* prior_params() { return params.data(); }
    double* residue_params() { return params.data() + prior_shape.param_count(); }

    Eigen::VectorXd scale_state(const Eigen::VectorXd& x) const {
        const int d = state_dim();
        if (x.size() != d) throw NumericalError("scale_state: dimension mismatch");
        return minmax_scale(x, scaler.state_min.head(d), scaler.state_inv.head(d));
    }
    Eigen::VectorXd unscale_state(const Eigen::VectorXd& s) const {
        const int d = state_dim();
        if (s.size() != d) throw NumericalError("unscale_state: dimension mismatch");
        return minmax_unscale(s, scaler.state_min.head(d), scaler.state_range.head(d));
    }
    Eigen::VectorXd scale_runoff(const Eigen::VectorXd& r) const {
        if (r.size() != n_nodes) throw NumericalError("scale_runoff: dimension mismatch");
        return minmax_scale(r, scaler.runoff_min, scaler.runoff_inv);
    }
};

inline SurrogateModel make_surrogate(const Network& net, bool constrained,
                                     const ResidueSpec& spec, uint64_t seed) {
    SurrogateModel m;
    m.n_nodes = net.node_count();
    m.n_links = net.link_count();
    m.constrained = constrained;
    m.spec = spec;
    m.seed = seed;
    m.outlet = net.outlet();
    for (const Node& n : net.nodes()) m.node_ids.push_back(n.id);
    for (const Link& l : net.links()) m.link_ids.push_back(l.id);
    for (int j = 0; j < net.link_count(); ++j)
        m.link_ends.emplace_back(net.link_upstream_node(j), net.link_downstream_node(j));

    const int d = m.state_dim();
    m.prior_shape.dims = {d, d, d};  // hidden width matches the layout length
    m.residue_shape.dims.push_back(d + m.n_nodes);
    for (int h : spec.hidden) m.residue_shape.dims.push_back(h);
    m.residue_shape.dims.push_back(d);

    m.params.resize(m.prior_shape.param_count() + m.residue_shape.param_count());
    std::mt19937_64 rng(seed);
    mlp_init(m.prior_shape, m.prior_params(), rng);
    mlp_init(m.residue_shape, m.residue_params(), rng);
    return m;
}

// ---------------------------------------------------------------------------
// forward evaluation
// ---------------------------------------------------------------------------

/// Reusable buffers for repeated one-step evaluations.
struct StepWorkspace {
    MlpCache prior_cache, residue_cache;
    Eigen::MatrixXd u;   // residue input, state ⊕ runoff
    Eigen::MatrixXd ys;  // scaled prediction
};

inline Eigen::VectorXd prior_forward(const SurrogateModel& m, const Eigen::VectorXd& x_scaled) {
    if (x_scaled.size() != m.state_dim()) throw NumericalError("prior_forward: dimension mismatch");
    MlpCache cache;
    return mlp_forward(m.prior_shape, m.prior_params(), x_scaled, cache);
}

inline Eigen::VectorXd residue_forward(const SurrogateModel& m, const Eigen::VectorXd& x_scaled,
                                       const Eigen::VectorXd& r_scaled) {
    if (x_scaled.size() != m.state_dim() || r_scaled.size() != m.n_nodes)
        throw NumericalError("residue_forward: dimension mismatch");
    Eigen::VectorXd u(x_scaled.size() + r_scaled.size());
    u << x_scaled, r_scaled;
    MlpCache cache;
    return mlp_forward(m.residue_shape, m.residue_params(), u, cache);
}

/// Scaled one-step map ŷ = L(x_s) + N(x_s, r_s) into ws.ys.
inline const Eigen::MatrixXd& step_scaled(const SurrogateModel& m, const Eigen::MatrixXd& x_scaled,
                                          const Eigen::MatrixXd& r_scaled, StepWorkspace& ws) {
    const int d = m.state_dim();
    ws.u.resize(d + m.n_nodes, x_scaled.cols());
    ws.u.topRows(d) = x_scaled;
    ws.u.bottomRows(m.n_nodes) = r_scaled;
    mlp_forward(m.prior_shape, m.prior_params(), x_scaled, ws.prior_cache);
    mlp_forward(m.residue_shape, m.residue_params(), ws.u, ws.residue_cache);
    ws.ys = ws.prior_cache.act.back() + ws.residue_cache.act.back();
    return ws.ys;
}

/// Local mass balance in physical units; the outlet never spills.
inline Eigen::VectorXd constraint_excess(const SurrogateModel& m,
                                         const Eigen::Ref<const Eigen::VectorXd>& flows,
                                         const Eigen::Ref<const Eigen::VectorXd>& runoff) {
    if (flows.size() != m.n_links || runoff.size() != m.n_nodes)
        throw NumericalError("constraint_excess: dimension mismatch");
    Eigen::VectorXd qw = runoff;
    for (int j = 0; j < m.n_links; ++j) {
        qw[m.link_ends[j].second] += flows[j];
        qw[m.link_ends[j].first] -= flows[j];
    }
    qw = qw.cwiseMax(0.0);
    qw[m.outlet] = 0.0;
    return qw;
}

/// Network-based variant of the same computation.
inline Eigen::VectorXd constraint_excess(const Network& net, const Eigen::VectorXd& flows,
                                         const Eigen::VectorXd& runoff) {
    Eigen::VectorXd qw = runoff;
    for (int j = 0; j < net.link_count(); ++j) {
        qw[net.link_downstream_node(j)] += flows[j];
        qw[net.link_upstream_node(j)] -= flows[j];
    }
    qw = qw.cwiseMax(0.0);
    qw[net.outlet()] = 0.0;
    return qw;
}

/// One autoregressive step in physical units; returns the next state and the
/// per-node excess flows.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> surrogate_step(const SurrogateModel& m,
                                                                  const Eigen::VectorXd& x_raw,
                                                                  const Eigen::VectorXd& r_raw) {
    StepWorkspace ws;
    Eigen::VectorXd ys = step_scaled(m, m.scale_state(x_raw), m.scale_runoff(r_raw), ws);
    for (int i = 0; i < ys.size(); ++i)
        if (!std::isfinite(ys[i]))
            throw NumericalError("surrogate_step: non-finite prediction at state index " +
                                 std::to_string(i));
    Eigen::VectorXd next = m.unscale_state(ys);
    Eigen::VectorXd qw = m.constrained
                             ? constraint_excess(m, next.segment(m.n_nodes, m.n_links), r_raw)
                             : Eigen::VectorXd(next.tail(m.n_nodes));
    return {std::move(next), std::move(qw)};
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

struct RolloutOptions {
    bool throw_on_divergence = true;  // otherwise hold the last state and mark
};

/**
 * Autoregressive simulation: each prediction is fed back as the next input.
 * The result always uses the full (Q_w-carrying) layout so reference and
 * surrogate trajectories compare directly. Row 0 echoes the initial state.
 */
inline Trajectory rollout(const SurrogateModel& m, const Eigen::VectorXd& x0_raw,
                          const RunoffSeries& runoff, int steps, RolloutOptions opt = {}) {
    if (steps > runoff.steps()) throw NumericalError("rollout: steps exceed the runoff series");
    if (x0_raw.size() != m.state_dim()) throw NumericalError("rollout: initial state mismatch");
    const int N = m.n_nodes, M = m.n_links;

    Trajectory traj;
    traj.layout = StateLayout{N, M, true};
    traj.names.reserve(traj.layout.size());
    for (const auto& id : m.node_ids) traj.names.push_back("h:" + id);
    for (const auto& id : m.link_ids) traj.names.push_back("q:" + id);
    for (const auto& id : m.node_ids) traj.names.push_back("qw:" + id);
    traj.states.setZero(steps + 1, traj.layout.size());
    traj.runoff = runoff.rate.topRows(steps);
    traj.outlet_rate.setZero(steps + 1);
    traj.storage_total.setZero(steps + 1);

    traj.states.row(0).head(N + M) = x0_raw.head(N + M);
    if (!m.constrained) traj.states.row(0).tail(N) = x0_raw.tail(N);

    const int d = m.state_dim();
    const auto& smin = m.scaler.state_min.head(d);
    const auto& srange = m.scaler.state_range.head(d);
    const auto& sinv = m.scaler.state_inv.head(d);

    // the loop walks in scaled space with preallocated buffers; every
    // emitted value goes through the same unscale/rescale ops as
    // surrogate_step, so the two paths agree to the last bit
    StepWorkspace ws;
    Eigen::VectorXd xs = m.scale_state(x0_raw);
    Eigen::VectorXd rs(N), x_raw(d), qw(N), r_raw(N);
    for (int t = 0; t < steps; ++t) {
        r_raw = runoff.rate.row(t);
        rs = (r_raw - m.scaler.runoff_min).cwiseProduct(m.scaler.runoff_inv);
        const Eigen::MatrixXd& ys = step_scaled(m, xs, rs, ws);
        for (int i = 0; i < d; ++i)
            if (!std::isfinite(ys(i, 0)))
                throw NumericalError("rollout: non-finite prediction at state index " +
                                     std::to_string(i));
        x_raw = smin + ys.col(0).cwiseProduct(srange);
        xs = (x_raw - smin).cwiseProduct(sinv);
        if (xs.cwiseAbs().maxCoeff() > SurrogateModel::kDivergenceLimit) {
            if (opt.throw_on_divergence)
                throw NumericalError("rollout diverged at step " + std::to_string(t + 1));
            traj.diverged_at = t + 1;
            for (int k = t; k < steps; ++k) traj.states.row(k + 1) = traj.states.row(t);
            return traj;
        }
        if (m.constrained)
            qw = constraint_excess(m, x_raw.segment(N, M), r_raw);
        else
            qw = x_raw.tail(N);
        traj.states.row(t + 1).head(N + M) = x_raw.head(N + M);
        traj.states.row(t + 1).tail(N) = qw;
    }
    return traj;
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json mlp_to_json(const MlpShape& shape, const double* params) {
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < shape.layers(); ++l) {
        const int in = shape.dims[l], out = shape.dims[l + 1];
        Eigen::Map<const Eigen::MatrixXd> W(params + shape.weight_offset(l), out, in);
        std::vector<double> w_rowmajor;
        w_rowmajor.reserve(static_cast<size_t>(in) * out);
        for (int r = 0; r < out; ++r)
            for (int c = 0; c < in; ++c) w_rowmajor.push_back(W(r, c));
        std::vector<double> b(params + shape.bias_offset(l), params + shape.bias_offset(l) + out);
        layers.push_back({{"rows", out}, {"cols", in}, {"weights", w_rowmajor}, {"bias", b}});
    }
    return layers;
}

inline void mlp_from_json(const nlohmann::json& layers, const MlpShape& shape, double* params) {
    if (static_cast<int>(layers.size()) != shape.layers())
        throw NumericalError("checkpoint: layer count mismatch");
    for (int l = 0; l < shape.layers(); ++l) {
        const int in = shape.dims[l], out = shape.dims[l + 1];
        const auto& jl = layers[l];
        if (jl.at("rows").get<int>() != out || jl.at("cols").get<int>() != in)
            throw NumericalError("checkpoint: layer shape mismatch");
        auto w = jl.at("weights").get<std::vector<double>>();
        auto b = jl.at("bias").get<std::vector<double>>();
        if (static_cast<int>(w.size()) != in * out || static_cast<int>(b.size()) != out)
            throw NumericalError("checkpoint: parameter count mismatch");
        Eigen::Map<Eigen::MatrixXd> W(params + shape.weight_offset(l), out, in);
        for (int r = 0; r < out; ++r)
            for (int c = 0; c < in; ++c) W(r, c) = w[static_cast<size_t>(r) * in + c];
        std::copy(b.begin(), b.end(), params + shape.bias_offset(l));
    }
}

inline std::vector<double> to_vec(const Eigen::VectorXd& v) {
    return {v.data(), v.data() + v.size()};
}
inline Eigen::VectorXd from_vec(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const SurrogateModel& m) {
    nlohmann::json links = nlohmann::json::array();
    for (int j = 0; j < m.n_links; ++j)
        links.push_back({{"id", m.link_ids[j]},
                         {"up", m.link_ends[j].first},
                         {"dn", m.link_ends[j].second}});
    return {
        {"format", "drainsim-checkpoint"},
        {"version", SurrogateModel::kFormatVersion},
        {"constrained", m.constrained},
        {"dt_seconds", m.dt_seconds},
        {"seed", m.seed},
        {"nodes", m.node_ids},
        {"links", links},
        {"outlet", m.outlet},
        {"residue_spec", {{"name", m.spec.name}, {"hidden", m.spec.hidden}}},
        {"scaler",
         {{"state_min", detail::to_vec(m.scaler.state_min)},
          {"state_max", detail::to_vec(m.scaler.state_max)},
          {"runoff_min", detail::to_vec(m.scaler.runoff_min)},
          {"runoff_max", detail::to_vec(m.scaler.runoff_max)}}},
        {"prior", detail::mlp_to_json(m.prior_shape, m.prior_params())},
        {"residue", detail::mlp_to_json(m.residue_shape, m.residue_params())},
        {"provenance", {{"dataset_hash", m.dataset_hash}}},
    };
}

inline void save_checkpoint(const SurrogateModel& m, const std::string& path) {
    write_file(path, checkpoint_to_json(m).dump(1));
}

inline SurrogateModel checkpoint_from_json(const nlohmann::json& doc) {
    if (doc.value("format", "") != "drainsim-checkpoint")
        throw NumericalError("not a checkpoint document");
    if (doc.at("version").get<int>() != SurrogateModel::kFormatVersion)
        throw NumericalError("checkpoint version mismatch: expected " +
                             std::to_string(SurrogateModel::kFormatVersion) + ", found " +
                             doc.at("version").dump());
    SurrogateModel m;
    m.constrained = doc.at("constrained").get<bool>();
    m.dt_seconds = doc.at("dt_seconds").get<double>();
    m.seed = doc.at("seed").get<uint64_t>();
    m.node_ids = doc.at("nodes").get<std::vector<std::string>>();
    m.n_nodes = static_cast<int>(m.node_ids.size());
    for (const auto& jl : doc.at("links")) {
        m.link_ids.push_back(jl.at("id").get<std::string>());
        m.link_ends.emplace_back(jl.at("up").get<int>(), jl.at("dn").get<int>());
    }
    m.n_links = static_cast<int>(m.link_ids.size());
    m.outlet = doc.at("outlet").get<int>();
    m.spec.name = doc.at("residue_spec").at("name").get<std::string>();
    m.spec.hidden = doc.at("residue_spec").at("hidden").get<std::vector<int>>();
    m.dataset_hash = doc.at("provenance").value("dataset_hash", "");

    const auto& js = doc.at("scaler");
    m.scaler.state_min = detail::from_vec(js.at("state_min").get<std::vector<double>>());
    m.scaler.state_max = detail::from_vec(js.at("state_max").get<std::vector<double>>());
    m.scaler.runoff_min = detail::from_vec(js.at("runoff_min").get<std::vector<double>>());
    m.scaler.runoff_max = detail::from_vec(js.at("runoff_max").get<std::vector<double>>());
    Scaler::finalize(m.scaler.state_min, m.scaler.state_max, m.scaler.state_range,
                     m.scaler.state_inv);
    Scaler::finalize(m.scaler.runoff_min, m.scaler.runoff_max, m.scaler.runoff_range,
                     m.scaler.runoff_inv);

    const int d = m.state_dim();
    m.prior_shape.dims = {d, d, d};
    m.residue_shape.dims.push_back(d + m.n_nodes);
    for (int h : m.spec.hidden) m.residue_shape.dims.push_back(h);
    m.residue_shape.dims.push_back(d);
    m.params.resize(m.prior_shape.param_count() + m.residue_shape.param_count());
    detail::mlp_from_json(doc.at("prior"), m.prior_shape, m.prior_params());
    detail::mlp_from_json(doc.at("residue"), m.residue_shape, m.residue_params());
    for (int i = 0; i < m.params.size(); ++i)
        if (!std::isfinite(m.params[i])) throw NumericalError("checkpoint: non-finite parameter");
    return m;
}

inline SurrogateModel load_checkpoint(const std::string& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(slurp_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw NumericalError(std::string("cannot parse checkpoint: ") + e.what());
    }
    return checkpoint_from_json(doc);
}

}  // namespace drainsim

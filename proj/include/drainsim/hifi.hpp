#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "drainsim/network.hpp"
#include "drainsim/runoff.hpp"

namespace drainsim {

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/**
 * Reference solver configuration. The solver advances with a fixed explicit
 * time step and samples the hydraulic state once per minute.
 *
 * max_cell_length > 0 subdivides every pipe into storage cells of roughly
 * that length, which resolves in-pipe wave propagation the way grid-based
 * engines do; 0 keeps one cell per pipe.
 */
struct HifiConfig {
    double dt = 5.0;                 // [s]
    int sampling_minutes = 1;
    double gravity = 9.81;           // [m/s²]
    double max_velocity = 10.0;      // flow clamp [m/s]
    double max_cell_length = 0.0;    // [m], 0 = one cell per pipe
    double slot_width_fraction = 0.15;  // pressurized (Preissmann-style) slot width / diameter
};

/// Observable solver state: stored volumes for every storage element (nodes
/// first, then pipe cells) and one flow per storage-to-storage connection.
struct HifiState {
    Eigen::VectorXd storage_volume;   // [m³]
    Eigen::VectorXd connection_flow;  // [m³/s]
};

namespace detail {

/// Circular-section lookup tables over depth ratio eta = depth/diameter:
/// area fraction, surface-width fraction, and the inverse fill->depth map.
struct CircleTables {
    static constexpr int kN = 128;
    std::array<double, kN + 1> area_frac;   // by eta
    std::array<double, kN + 1> width_frac;  // by eta
    std::array<double, kN + 1> depth_of_fill;  // by fill fraction

    CircleTables() {
        for (int k = 0; k <= kN; ++k) {
            double eta = static_cast<double>(k) / kN;
            double theta = 2.0 * std::acos(std::clamp(1.0 - 2.0 * eta, -1.0, 1.0));
            area_frac[k] = (theta - std::sin(theta)) / (2.0 * M_PI);
            width_frac[k] = 2.0 * std::sqrt(std::max(eta * (1.0 - eta), 0.0));
        }
        area_frac[0] = 0.0;
        area_frac[kN] = 1.0;
        // invert area_frac by bisection on the monotone table
        for (int k = 0; k <= kN; ++k) {
            double phi = static_cast<double>(k) / kN;
            int lo = 0, hi = kN;
            while (hi - lo > 1) {
                int mid = (lo + hi) / 2;
                (area_frac[mid] <= phi ? lo : hi) = mid;
            }
            double f0 = area_frac[lo], f1 = area_frac[hi];
            double w = f1 > f0 ? (phi - f0) / (f1 - f0) : 0.0;
            depth_of_fill[k] = (lo + w) / kN;
        }
    }

    static double interp(const std::array<double, kN + 1>& tab, double x) {
        x = std::clamp(x, 0.0, 1.0) * kN;
        int k = std::min(static_cast<int>(x), kN - 1);
        double w = x - k;
        return tab[k] * (1.0 - w) + tab[k + 1] * w;
    }
};

inline const CircleTables& circle_tables() {
    static const CircleTables tables;
    return tables;
}

}  // namespace detail

/**
 * Explicit storage-routing network solver, the in-repo stand-in for a
 * high-fidelity engine. Nodes and pipe cells hold volume; flows on the
 * connections between them relax toward a Manning-style head-driven value
 *     Q* = sign(Δh)·K·f·sqrt(|Δh|),   K = A_full·R_full^(2/3) / (n·sqrt(L)),
 * with the conveyance fraction f from the driving-side depth, capped at the
 * full section. Water above a node's weir crest discharges over a
 * rectangular weir and leaves the system permanently (spilling
 * configuration); the outlet discharges freely. Every transported volume is
 * tallied, so mass is conserved to rounding.
 */
class HifiSolver {
public:
    static constexpr double kHeadScale = 0.005;  // rating-curve smoothing [m]

    HifiSolver(const Network& net, HifiConfig cfg) : net_(&net), cfg_(cfg) {
        if (!(cfg_.dt > 0)) throw NumericalError("hifi: dt must be positive");
        double sampling_s = cfg_.sampling_minutes * 60.0;
        steps_per_sample_ = static_cast<int>(std::round(sampling_s / cfg_.dt));
        if (std::abs(steps_per_sample_ * cfg_.dt - sampling_s) > 1e-9)
            throw NumericalError("hifi: dt must divide the sampling interval");
        build();
        reset();
    }

    int steps_per_sample() const { return steps_per_sample_; }
    int storage_count() const { return static_cast<int>(vol_.size()); }
    int connection_count() const { return static_cast<int>(conn_.size()); }

    /// Back to the dry initial condition: volumes at invert, zero flows.
    void reset() {
        std::fill(vol_.begin(), vol_.end(), 0.0);
        std::fill(q_.begin(), q_.end(), 0.0);
        excess_rate_.assign(net_->node_count(), 0.0);
        outlet_rate_ = 0.0;
        time_s_ = 0.0;
        update_surfaces();
    }

    /// Advance one dt with per-node inflow [m³/s] held constant.
    void step(const Eigen::VectorXd& inflow) {
        const double dt = cfg_.dt;
        const int n_nodes = net_->node_count();

        // provisional connection flows from current surfaces; the conveying
        // depth is the water depth of the driving (higher-surface) side
        for (size_t c = 0; c < conn_.size(); ++c) {
            const Conn& cn = conn_[c];
            double la = lvl_[cn.a], lb = lvl_[cn.b];
            double dh = la - lb;
            double depth = dh >= 0 ? la - bed_[cn.a] : lb - bed_[cn.b];
            double q = q_[c];
            if (depth <= 0.0) {
                q += std::min(1.0, dt / cn.tau) * (0.0 - q);
            } else {
                // Manning conveyance of the partially filled circular
                // section, capped at the full section
                double eta = std::min(depth / cn.diameter, 1.0);
                double theta = 2.0 * std::acos(1.0 - 2.0 * eta);
                double area = cn.diameter * cn.diameter * 0.125 * (theta - std::sin(theta));
                double perimeter = 0.5 * theta * cn.diameter;
                double radius = perimeter > 0 ? area / perimeter : 0.0;
                double conveyance = area * std::pow(radius, 2.0 / 3.0) * cn.inv_n_sqrt_len;
                // rating Q* ≈ C·sqrt(|dh|), smoothed over kHeadScale so the
                // slope stays bounded through dh = 0
                double x = std::abs(dh);
                double root = std::sqrt(x + kHeadScale);
                double qstar = conveyance * dh / root;
                // damp the stiff storage-head coupling without biasing the
                // steady state: scale the update gain, not the target
                double slope = conveyance * (0.5 * x + kHeadScale) / ((x + kHeadScale) * root);
                double gain = dt * slope * (1.0 / plan_[cn.a] + 1.0 / plan_[cn.b]);
                double alpha = std::min({1.0, dt / cn.tau, 0.35 / std::max(gain, 0.35)});
                q += alpha * (qstar - q);
            }
            q = std::clamp(q, -cn.q_clamp, cn.q_clamp);
            q_[c] = q;
        }

        // weir spills from current levels; a step cannot draw the pool below
        // the crest
        for (int i = 0; i < n_nodes; ++i) {
            double qw = 0.0;
            if (i != net_->outlet()) {
                const Node& nd = net_->node(i);
                double head = lvl_[i] - nd.weir_crest;
                if (head > 0.0) {
                    qw = nd.weir_coefficient * nd.weir_width * head * std::sqrt(head);
                    qw = std::min(qw, 0.8 * head * nd.storage_area / dt);
                }
            }
            weir_q_[i] = qw;
        }

        // outflow limiting: an element cannot export more volume than it
        // holds plus its guaranteed inflow this step
        std::fill(out_rate_.begin(), out_rate_.end(), 0.0);
        for (size_t c = 0; c < conn_.size(); ++c)
            out_rate_[q_[c] >= 0 ? conn_[c].a : conn_[c].b] += std::abs(q_[c]);
        for (int i = 0; i < n_nodes; ++i) out_rate_[i] += weir_q_[i];
        for (size_t s = 0; s < vol_.size(); ++s) {
            double budget = vol_[s];
            if (s < static_cast<size_t>(n_nodes)) budget += dt * inflow[s];
            lambda_[s] = out_rate_[s] * dt > budget && out_rate_[s] > 0
                             ? budget / (out_rate_[s] * dt)
                             : 1.0;
        }

        // apply transported volumes
        for (size_t c = 0; c < conn_.size(); ++c) {
            const Conn& cn = conn_[c];
            double q = q_[c] * lambda_[q_[c] >= 0 ? cn.a : cn.b];
            q_[c] = q;
            vol_[cn.a] -= q * dt;
            vol_[cn.b] += q * dt;
        }
        for (int i = 0; i < n_nodes; ++i) {
            double qw = weir_q_[i] * lambda_[i];
            vol_[i] += dt * inflow[i] - qw * dt;
            excess_rate_[i] = qw;
        }
        int out = net_->outlet();
        outlet_rate_ = vol_[out] / dt;
        vol_[out] = 0.0;
        for (double& v : vol_) v = std::max(v, 0.0);

        update_surfaces();
        time_s_ += dt;
    }

    // observed quantities -----------------------------------------------

    double node_level(int i) const { return lvl_[i]; }
    double node_volume(int i) const { return vol_[i]; }
    /// Pipe flow reported as the mean over the pipe's connections.
    double link_flow(int j) const {
        double s = 0.0;
        for (int c = link_conn_begin_[j]; c < link_conn_begin_[j + 1]; ++c) s += q_[c];
        return s / (link_conn_begin_[j + 1] - link_conn_begin_[j]);
    }
    /// Weir discharge per node during the last step [m³/s].
    const std::vector<double>& excess_rate() const { return excess_rate_; }
    double outlet_rate() const { return outlet_rate_; }
    double stored_volume() const {
        double s = 0.0;
        for (double v : vol_) s += v;
        return s;
    }
    double time_seconds() const { return time_s_; }

    void check_finite() const {
        for (size_t s = 0; s < vol_.size(); ++s)
            if (!std::isfinite(vol_[s]) || !std::isfinite(lvl_[s]))
                throw NumericalError("non-finite state at t=" + std::to_string(time_s_) +
                                     " s in element '" + storage_name(static_cast<int>(s)) + "'");
        for (size_t c = 0; c < q_.size(); ++c)
            if (!std::isfinite(q_[c]))
                throw NumericalError("non-finite flow at t=" + std::to_string(time_s_) +
                                     " s in link '" + net_->link(conn_[c].pipe).id + "'");
    }

    HifiState state() const {
        HifiState st;
        st.storage_volume = Eigen::Map<const Eigen::VectorXd>(vol_.data(), vol_.size());
        st.connection_flow = Eigen::Map<const Eigen::VectorXd>(q_.data(), q_.size());
        return st;
    }
    void set_state(const HifiState& st) {
        if (st.storage_volume.size() != static_cast<int>(vol_.size()) ||
            st.connection_flow.size() != static_cast<int>(q_.size()))
            throw NumericalError("hifi state shape mismatch");
        Eigen::Map<Eigen::VectorXd>(vol_.data(), vol_.size()) = st.storage_volume;
        Eigen::Map<Eigen::VectorXd>(q_.data(), q_.size()) = st.connection_flow;
        update_surfaces();
    }

private:
    struct Conn {
        int pipe;
        int a, b;                // storage indices, a is the upstream side
        double length;           // [m]
        double diameter;         // [m]
        double inv_n_sqrt_len;   // 1 / (n·sqrt(L)) for the Manning rating
        double tau;              // relaxation time scale [s]
        double q_clamp;          // velocity-based flow bound [m³/s]
    };
    struct Cell {
        int pipe;
        double z_center;   // pipe invert at the cell midpoint [m]
        double length;     // [m]
        double diameter;
        double full_volume;
        double slot_plan;  // plan area once pressurized [m²]
    };

    void build() {
        const int n_nodes = net_->node_count();
        cells_.clear();
        conn_.clear();
        link_conn_begin_.assign(net_->link_count() + 1, 0);
        for (int j = 0; j < net_->link_count(); ++j) {
            const Link& l = net_->link(j);
            int n_cells = 1;
            if (cfg_.max_cell_length > 0)
                n_cells = std::max(1, static_cast<int>(std::ceil(l.length / cfg_.max_cell_length)));
            // reserve the single-cell formulation when no subdivision is asked:
            // one direct node-to-node connection, no in-pipe storage
            if (cfg_.max_cell_length <= 0) n_cells = 0;

            link_conn_begin_[j] = static_cast<int>(conn_.size());
            double area_full = M_PI * l.diameter * l.diameter / 4.0;
            double drop = l.upstream_invert - l.downstream_invert;
            auto z_at = [&](double x) { return l.upstream_invert - drop * x / l.length; };
            auto make_conn = [&](int a, int b, double seg_len) {
                Conn c;
                c.pipe = j;
                c.a = a;
                c.b = b;
                c.length = seg_len;
                c.diameter = l.diameter;
                c.inv_n_sqrt_len = 1.0 / (l.manning_n * std::sqrt(seg_len));
                c.tau = std::max(seg_len / std::sqrt(cfg_.gravity * l.diameter), cfg_.dt);
                c.q_clamp = cfg_.max_velocity * area_full;
                conn_.push_back(c);
            };

            int up = net_->link_upstream_node(j);
            int dn = net_->link_downstream_node(j);
            if (n_cells == 0) {
                make_conn(up, dn, l.length);
            } else {
                double cell_len = l.length / n_cells;
                int first_cell = n_nodes + static_cast<int>(cells_.size());
                for (int k = 0; k < n_cells; ++k) {
                    Cell cell;
                    cell.pipe = j;
                    cell.length = cell_len;
                    cell.diameter = l.diameter;
                    cell.z_center = z_at((k + 0.5) * cell_len);
                    cell.full_volume = area_full * cell_len;
                    cell.slot_plan = cfg_.slot_width_fraction * l.diameter * cell_len;
                    cells_.push_back(cell);
                }
                make_conn(up, first_cell, 0.5 * cell_len);
                for (int k = 0; k + 1 < n_cells; ++k)
                    make_conn(first_cell + k, first_cell + k + 1, cell_len);
                make_conn(first_cell + n_cells - 1, dn, 0.5 * cell_len);
            }
        }
        link_conn_begin_[net_->link_count()] = static_cast<int>(conn_.size());

        vol_.assign(n_nodes + cells_.size(), 0.0);
        q_.assign(conn_.size(), 0.0);
        lvl_.assign(vol_.size(), 0.0);
        plan_.assign(vol_.size(), 1.0);
        bed_.assign(vol_.size(), 0.0);
        for (int i = 0; i < n_nodes; ++i) bed_[i] = net_->node(i).invert_elevation;
        for (size_t k = 0; k < cells_.size(); ++k) bed_[n_nodes + k] = cells_[k].z_center;
        out_rate_.assign(vol_.size(), 0.0);
        lambda_.assign(vol_.size(), 1.0);
        weir_q_.assign(n_nodes, 0.0);
        excess_rate_.assign(n_nodes, 0.0);
    }

    void update_surfaces() {
        const auto& tab = detail::circle_tables();
        const int n_nodes = net_->node_count();
        for (int i = 0; i < n_nodes; ++i) {
            const Node& nd = net_->node(i);
            lvl_[i] = nd.invert_elevation + vol_[i] / nd.storage_area;
            plan_[i] = nd.storage_area;
        }
        for (size_t k = 0; k < cells_.size(); ++k) {
            const Cell& c = cells_[k];
            size_t s = n_nodes + k;
            double fill = vol_[s] / c.full_volume;
            if (fill >= 1.0) {
                lvl_[s] = c.z_center + c.diameter + (vol_[s] - c.full_volume) / c.slot_plan;
                plan_[s] = c.slot_plan;
            } else {
                double eta = detail::CircleTables::interp(tab.depth_of_fill, fill);
                lvl_[s] = c.z_center + eta * c.diameter;
                double width = detail::CircleTables::interp(tab.width_frac, eta) * c.diameter;
                plan_[s] = std::max(width * c.length, 0.02 * c.diameter * c.length);
            }
        }
    }

    std::string storage_name(int s) const {
        if (s < net_->node_count()) return net_->node(s).id;
        return net_->link(cells_[s - net_->node_count()].pipe).id;
    }

    const Network* net_;
    HifiConfig cfg_;
    int steps_per_sample_ = 12;
    std::vector<Cell> cells_;
    std::vector<Conn> conn_;
    std::vector<int> link_conn_begin_;  // connection range per pipe
    std::vector<double> vol_, lvl_, plan_, bed_, out_rate_, lambda_, weir_q_, excess_rate_, q_;
    double outlet_rate_ = 0.0;
    double time_s_ = 0.0;
};

/// Single-step convenience wrapper matching the operation contract.
inline std::pair<HifiState, Eigen::VectorXd> hifi_step(const Network& net, const HifiState& state,
                                                       const Eigen::VectorXd& inflow,
                                                       const HifiConfig& cfg) {
    HifiSolver solver(net, cfg);
    solver.set_state(state);
    solver.step(inflow);
    solver.check_finite();
    Eigen::VectorXd excess =
        Eigen::Map<const Eigen::VectorXd>(solver.excess_rate().data(), net.node_count());
    return {solver.state(), excess};
}

/**
 * Labeled state record at 1-minute resolution. Row t is the state at minute
 * t (row 0 = initial condition); runoff row t is the forcing that drove the
 * transition t -> t+1; Q_w at row t is the average spill rate during the
 * minute ending at t. outlet_rate and storage_total are exact solver
 * tallies kept for mass-balance auditing.
 */
struct Trajectory {
    StateLayout layout;
    std::vector<std::string> names;
    Eigen::MatrixXd states;         // [T+1 × layout.size()]
    Eigen::MatrixXd runoff;         // [T × N]
    Eigen::VectorXd outlet_rate;    // [T+1] avg m³/s
    Eigen::VectorXd storage_total;  // [T+1] m³
    int diverged_at = -1;           // row where a surrogate rollout blew up, -1 = clean

    int steps() const { return static_cast<int>(states.rows()) - 1; }
};

inline Trajectory hifi_simulate(const Network& net, const RunoffSeries& runoff,
                                const HifiConfig& cfg = {}) {
    const int N = net.node_count();
    if (runoff.rate.cols() != N) throw NumericalError("runoff/network node count mismatch");
    if (cfg.sampling_minutes != 1)
        throw NumericalError("trajectories are recorded on the 1-minute grid");
    const int T = runoff.steps();

    HifiSolver solver(net, cfg);
    Trajectory traj;
    traj.layout = state_layout(net, true);
    traj.names = traj.layout.names(net);
    traj.states.setZero(T + 1, traj.layout.size());
    traj.runoff = runoff.rate;
    traj.outlet_rate.setZero(T + 1);
    traj.storage_total.setZero(T + 1);

    auto record = [&](int row, double excess_vol_per_node[], double outlet_vol, double minutes) {
        for (int i = 0; i < N; ++i) traj.states(row, traj.layout.h_index(i)) = solver.node_level(i);
        for (int j = 0; j < net.link_count(); ++j)
            traj.states(row, traj.layout.q_index(j)) = solver.link_flow(j);
        for (int i = 0; i < N; ++i)
            traj.states(row, traj.layout.qw_index(i)) =
                minutes > 0 ? excess_vol_per_node[i] / (minutes * 60.0) : 0.0;
        traj.outlet_rate[row] = minutes > 0 ? outlet_vol / (minutes * 60.0) : 0.0;
        traj.storage_total[row] = solver.stored_volume();
    };

    std::vector<double> excess_vol(N, 0.0);
    record(0, excess_vol.data(), 0.0, 0.0);
    Eigen::VectorXd inflow(N);
    for (int m = 0; m < T; ++m) {
        inflow = runoff.rate.row(m);
        std::fill(excess_vol.begin(), excess_vol.end(), 0.0);
        double outlet_vol = 0.0;
        for (int s = 0; s < solver.steps_per_sample(); ++s) {
            solver.step(inflow);
            for (int i = 0; i < N; ++i) excess_vol[i] += solver.excess_rate()[i] * cfg.dt;
            outlet_vol += solver.outlet_rate() * cfg.dt;
        }
        solver.check_finite();
        record(m + 1, excess_vol.data(), outlet_vol, cfg.sampling_minutes);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// mass balance audit
// ---------------------------------------------------------------------------

struct BalanceReport {
    double runoff_volume = 0.0;     // [m³]
    double storage_change = 0.0;    // [m³]
    double outlet_volume = 0.0;     // [m³]
    double overflow_volume = 0.0;   // spills at overflow-class nodes [m³]
    double surcharge_volume = 0.0;  // spills at surcharge-class nodes [m³]
    double closure_error = 0.0;     // [m³]
    double closure_relative = 0.0;  // |error| / runoff volume

    nlohmann::json to_json() const {
        return {{"runoff_m3", runoff_volume},       {"storage_change_m3", storage_change},
                {"outlet_m3", outlet_volume},       {"overflow_m3", overflow_volume},
                {"surcharge_m3", surcharge_volume}, {"closure_error_m3", closure_error},
                {"closure_relative", closure_relative}};
    }
};

inline BalanceReport mass_balance_audit(const Trajectory& traj, const RunoffSeries& runoff,
                                        const Network& net) {
    if (traj.runoff.rows() != runoff.rate.rows() || traj.runoff.cols() != runoff.rate.cols() ||
        traj.layout.n_nodes != net.node_count() || !traj.layout.include_qw)
        throw NumericalError("audit: trajectory, runoff and network do not align");
    BalanceReport r;
    r.runoff_volume = runoff.total_volume();
    r.storage_change = traj.storage_total[traj.steps()] - traj.storage_total[0];
    r.outlet_volume = traj.outlet_rate.sum() * 60.0;
    for (int i = 0; i < net.node_count(); ++i) {
        double vol = traj.states.col(traj.layout.qw_index(i)).sum() * 60.0;
        if (net.classify(i) == NodeClass::overflow)
            r.overflow_volume += vol;
        else
            r.surcharge_volume += vol;
    }
    r.closure_error = r.runoff_volume - (r.storage_change + r.outlet_volume + r.overflow_volume +
                                         r.surcharge_volume);
    r.closure_relative = r.runoff_volume > 0 ? std::abs(r.closure_error) / r.runoff_volume : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// file format
// ---------------------------------------------------------------------------

inline void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
    std::string s = "minute";
    for (const auto& n : traj.names) s += "," + n;
    s += ",outlet_m3s,storage_m3\n";
    for (int t = 0; t < traj.states.rows(); ++t) {
        s += std::to_string(t);
        for (int c = 0; c < traj.states.cols(); ++c) s += "," + format_double(traj.states(t, c));
        s += "," + format_double(traj.outlet_rate[t]) + "," + format_double(traj.storage_total[t]);
        s += "\n";
    }
    write_file(path, s);
}

/// Reads states written by write_trajectory_csv; the runoff matrix is left
/// empty and is paired back in by the caller.
inline Trajectory read_trajectory_csv(const std::string& path) {
    std::vector<std::string> header;
    auto rows = read_csv(path, &header);
    if (header.size() < 4) throw IoError("malformed trajectory file: " + path);
    Trajectory traj;
    int n_state = static_cast<int>(header.size()) - 3;  // minute + two tally columns
    traj.names.assign(header.begin() + 1, header.begin() + 1 + n_state);
    int n_h = 0, n_q = 0, n_qw = 0;
    for (const auto& n : traj.names) {
        if (n.rfind("h:", 0) == 0) ++n_h;
        else if (n.rfind("q:", 0) == 0) ++n_q;
        else if (n.rfind("qw:", 0) == 0) ++n_qw;
    }
    if (n_h + n_q + n_qw != n_state || (n_qw != 0 && n_qw != n_h))
        throw IoError("unrecognized state columns in " + path);
    traj.layout = StateLayout{n_h, n_q, n_qw > 0};
    traj.states.resize(static_cast<int>(rows.size()), n_state);
    traj.outlet_rate.resize(rows.size());
    traj.storage_total.resize(rows.size());
    for (size_t t = 0; t < rows.size(); ++t) {
        if (rows[t].size() != header.size()) throw IoError("short row in " + path);
        for (int c = 0; c < n_state; ++c) traj.states(t, c) = parse_double(rows[t][c + 1], path);
        traj.outlet_rate[t] = parse_double(rows[t][n_state + 1], path);
        traj.storage_total[t] = parse_double(rows[t][n_state + 2], path);
    }
    return traj;
}

}  // namespace drainsim

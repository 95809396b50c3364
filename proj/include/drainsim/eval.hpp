#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "drainsim/hifi.hpp"
#include "drainsim/rain.hpp"
#include "drainsim/surrogate.hpp"

namespace drainsim {

/// Root-mean-square error in the units of the inputs.
inline double rmse(const Eigen::VectorXd& obs, const Eigen::VectorXd& pred) {
    if (obs.size() != pred.size() || obs.size() == 0)
        throw NumericalError("rmse: series must align and be non-empty");
    return std::sqrt((obs - pred).squaredNorm() / obs.size());
}

/// Coefficient of determination; nullopt when the observations carry no
/// variance (the score is undefined there, not zero).
inline std::optional<double> r2(const Eigen::VectorXd& obs, const Eigen::VectorXd& pred) {
    if (obs.size() != pred.size() || obs.size() < 2)
        throw NumericalError("r2: series must align with length >= 2");
    double mean = obs.mean();
    double ss_tot = (obs.array() - mean).square().sum();
    if (ss_tot < 1e-12) return std::nullopt;
    double ss_res = (obs - pred).squaredNorm();
    return 1.0 - ss_res / ss_tot;
}

/// Half-open row range of one rain event inside an assembled series.
struct EventBounds {
    std::string id;
    int begin = 0;
    int end = 0;  // exclusive
};

inline std::vector<EventBounds> event_bounds(const std::vector<RainEvent>& events, int max_rows) {
    std::vector<EventBounds> out;
    for (const RainEvent& e : events) {
        EventBounds b{e.id, e.offset, std::min(e.offset + e.length(), max_rows)};
        if (b.end > b.begin) out.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// event-wise excess volumes (overflow/surcharge fidelity)
// ---------------------------------------------------------------------------

struct ExcessVolumePair {
    std::string node_id;
    std::string event_id;
    double reference_m3 = 0.0;
    double predicted_m3 = 0.0;
};

/// Total excess volume per node per event, for reference and predicted
/// trajectories on a shared row grid.
inline std::vector<ExcessVolumePair> event_excess_volumes(const Trajectory& ref,
                                                          const Trajectory& pred,
                                                          const std::vector<EventBounds>& events) {
    if (ref.states.rows() != pred.states.rows() || ref.layout != pred.layout)
        throw NumericalError("event_excess_volumes: trajectories do not align");
    std::vector<ExcessVolumePair> out;
    const int N = ref.layout.n_nodes;
    for (const EventBounds& ev : events) {
        int rows = ev.end - ev.begin;
        for (int i = 0; i < N; ++i) {
            ExcessVolumePair p;
            p.node_id = ref.names[ref.layout.qw_index(i)].substr(3);
            p.event_id = ev.id;
            p.reference_m3 =
                ref.states.col(ref.layout.qw_index(i)).segment(ev.begin, rows).sum() * 60.0;
            p.predicted_m3 =
                pred.states.col(pred.layout.qw_index(i)).segment(ev.begin, rows).sum() * 60.0;
            out.push_back(std::move(p));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// volume bookkeeping
// ---------------------------------------------------------------------------

struct VolumeSummary {
    double runoff_m3 = 0.0;
    double ref_outflow_m3 = 0.0, pred_outflow_m3 = 0.0;
    double ref_overflow_m3 = 0.0, pred_overflow_m3 = 0.0;
    double ref_surcharge_m3 = 0.0, pred_surcharge_m3 = 0.0;
    double outflow_bias = 0.0, overflow_bias = 0.0, surcharge_bias = 0.0;  // signed, relative

    nlohmann::json to_json() const {
        return {{"runoff_m3", runoff_m3},
                {"outflow_m3", {{"reference", ref_outflow_m3}, {"surrogate", pred_outflow_m3}}},
                {"overflow_m3", {{"reference", ref_overflow_m3}, {"surrogate", pred_overflow_m3}}},
                {"surcharge_m3",
                 {{"reference", ref_surcharge_m3}, {"surrogate", pred_surcharge_m3}}},
                {"outflow_bias", outflow_bias},
                {"overflow_bias", overflow_bias},
                {"surcharge_bias", surcharge_bias}};
    }
};

/// Totals per volume category with signed relative errors. Outflow is the
/// flow arriving at the outlet, integrated the same way for both
/// trajectories so the comparison is like for like.
inline VolumeSummary volume_summary(const Trajectory& ref, const Trajectory& pred,
                                    const RunoffSeries& runoff, const Network& net) {
    if (ref.states.rows() != pred.states.rows())
        throw NumericalError("volume_summary: trajectories do not align");
    VolumeSummary v;
    v.runoff_m3 = runoff.total_volume();
    auto outflow = [&](const Trajectory& t) {
        double s = 0.0;
        for (int j : net.upstream_links(net.outlet()))
            s += t.states.col(t.layout.q_index(j)).sum() * 60.0;
        return s;
    };
    v.ref_outflow_m3 = outflow(ref);
    v.pred_outflow_m3 = outflow(pred);
    for (int i = 0; i < net.node_count(); ++i) {
        double r = ref.states.col(ref.layout.qw_index(i)).sum() * 60.0;
        double p = pred.states.col(pred.layout.qw_index(i)).sum() * 60.0;
        if (net.classify(i) == NodeClass::overflow) {
            v.ref_overflow_m3 += r;
            v.pred_overflow_m3 += p;
        } else if (net.classify(i) == NodeClass::surcharge) {
            v.ref_surcharge_m3 += r;
            v.pred_surcharge_m3 += p;
        }
    }
    auto bias = [](double ref_v, double pred_v) {
        return ref_v != 0.0 ? (pred_v - ref_v) / ref_v : 0.0;
    };
    v.outflow_bias = bias(v.ref_outflow_m3, v.pred_outflow_m3);
    v.overflow_bias = bias(v.ref_overflow_m3, v.pred_overflow_m3);
    v.surcharge_bias = bias(v.ref_surcharge_m3, v.pred_surcharge_m3);
    return v;
}

// ---------------------------------------------------------------------------
// speedup benchmark
// ---------------------------------------------------------------------------

struct SpeedupReport {
    double reference_seconds = 0.0;
    double surrogate_seconds = 0.0;
    double ratio = 0.0;
    int minutes = 0;

    nlohmann::json to_json() const {
        return {{"reference_seconds", reference_seconds},
                {"surrogate_seconds", surrogate_seconds},
                {"ratio", ratio},
                {"minutes", minutes}};
    }
};

/// Wall time of the reference solve versus the surrogate rollout over the
/// identical forcing, serial execution for both. Each lane runs twice and
/// keeps its faster pass, which strips scheduler jitter from the ratio.
inline SpeedupReport benchmark_speedup(const Network& net, const RunoffSeries& runoff,
                                       const HifiConfig& hifi_cfg, const SurrogateModel& model) {
    using Clock = std::chrono::steady_clock;
    SpeedupReport rep;
    rep.minutes = runoff.steps();

    Eigen::VectorXd x0;
    rep.reference_seconds = std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < 2; ++pass) {
        auto t0 = Clock::now();
        Trajectory ref = hifi_simulate(net, runoff, hifi_cfg);
        rep.reference_seconds = std::min(rep.reference_seconds,
                                         std::chrono::duration<double>(Clock::now() - t0).count());
        if (pass == 0) x0 = ref.states.row(0).head(model.state_dim());
    }
    rep.surrogate_seconds = std::numeric_limits<double>::infinity();
    RolloutOptions opt;
    opt.throw_on_divergence = false;
    for (int pass = 0; pass < 2; ++pass) {
        auto t0 = Clock::now();
        Trajectory pred = rollout(model, x0, runoff, runoff.steps(), opt);
        rep.surrogate_seconds = std::min(rep.surrogate_seconds,
                                         std::chrono::duration<double>(Clock::now() - t0).count());
    }
    rep.ratio = rep.surrogate_seconds > 0 ? rep.reference_seconds / rep.surrogate_seconds : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// aggregate scoring (per state type, per event)
// ---------------------------------------------------------------------------

struct SeriesScore {
    std::string state;  // column name
    std::string event_id;
    double rmse = 0.0;
    std::optional<double> r2;
};

struct StateTypeScore {
    double rmse = 0.0;                // pooled over all series of the type
    std::optional<double> r2_pooled;  // pooled variance version
    double r2_mean = 0.0;             // mean over per-state scores (each state
                                      // scored across the concatenated events)
    int r2_defined = 0, r2_undefined = 0;
};

struct MetricReport {
    StateTypeScore levels, flows, overflow_qw, surcharge_qw;
    std::vector<SeriesScore> per_series;  // per node/link per event
    std::vector<ExcessVolumePair> excess_volumes;
    VolumeSummary volumes;
    int events_scored = 0;
    int events_diverged = 0;
    bool negative_qw_seen = false;
    double min_qw = 0.0;

    nlohmann::json summary_json() const {
        auto type_json = [](const StateTypeScore& s) {
            nlohmann::json j{{"rmse", s.rmse},
                             {"r2_mean", s.r2_mean},
                             {"r2_defined", s.r2_defined},
                             {"r2_undefined", s.r2_undefined}};
            if (s.r2_pooled) j["r2_pooled"] = *s.r2_pooled;
            return j;
        };
        return {{"levels", type_json(levels)},
                {"flows", type_json(flows)},
                {"overflow_qw", type_json(overflow_qw)},
                {"surcharge_qw", type_json(surcharge_qw)},
                {"events_scored", events_scored},
                {"events_diverged", events_diverged},
                {"negative_qw_seen", negative_qw_seen},
                {"min_qw", min_qw},
                {"volumes", volumes.to_json()}};
    }
};

namespace detail {

struct TypeAccumulator {
    double sq_sum = 0.0;
    long count = 0;
    double r2_sum = 0.0;
    int r2_defined = 0, r2_undefined = 0;
    double ss_res = 0.0, ss_tot = 0.0;
    // pooled R² needs the global mean; accumulate obs moments instead
    double obs_sum = 0.0, obs_sq_sum = 0.0;

    void add(const Eigen::VectorXd& obs, const Eigen::VectorXd& pred) {
        sq_sum += (obs - pred).squaredNorm();
        count += obs.size();
        obs_sum += obs.sum();
        obs_sq_sum += obs.squaredNorm();
        ss_res += (obs - pred).squaredNorm();
        // series whose observations never move beyond numeric dust are
        // "undefined", not scored (std below 1e-6 in physical units)
        double mean = obs.mean();
        double ss_tot = (obs.array() - mean).square().sum();
        if (ss_tot < static_cast<double>(obs.size()) * 1e-12) {
            ++r2_undefined;
            return;
        }
        r2_sum += 1.0 - (obs - pred).squaredNorm() / ss_tot;
        ++r2_defined;
    }
    StateTypeScore finish() const {
        StateTypeScore s;
        s.rmse = count > 0 ? std::sqrt(sq_sum / count) : 0.0;
        s.r2_mean = r2_defined > 0 ? r2_sum / r2_defined : 0.0;
        s.r2_defined = r2_defined;
        s.r2_undefined = r2_undefined;
        if (count > 1) {
            double mean = obs_sum / count;
            double tot = obs_sq_sum - count * mean * mean;
            if (tot > 1e-12) s.r2_pooled = 1.0 - ss_res / tot;
        }
        return s;
    }
};

}  // namespace detail

/**
 * Score a surrogate against reference labels event by event: the surrogate
 * is warm-started from the labeled state at each event begin and rolled out
 * across the event. All scores are computed in physical units. The headline
 * per-type R² scores each state across the concatenation of all events (the
 * time-averaged view); the per-series table keeps the event-level detail.
 * Constant observation series (e.g. never-activated surcharge nodes) yield
 * undefined R² and are excluded from the averages.
 */
inline MetricReport evaluate_events(const SurrogateModel& model, const Network& net,
                                    const Trajectory& ref, const RunoffSeries& runoff,
                                    const std::vector<EventBounds>& events) {
    MetricReport rep;
    const int N = net.node_count(), M = net.link_count();

    Eigen::MatrixXd pred_all = ref.states;  // reuse grid; rows outside events stay = ref
    RolloutOptions opt;
    opt.throw_on_divergence = false;

    std::vector<int> scored_rows;  // rows 1..steps of each event (0 = warm start)
    for (const EventBounds& ev : events) {
        int steps = ev.end - ev.begin - 1;
        if (steps < 2) continue;
        RunoffSeries slice;
        slice.node_ids = runoff.node_ids;
        slice.rate = runoff.rate.middleRows(ev.begin, steps);
        Eigen::VectorXd x0 = ref.states.row(ev.begin).head(model.state_dim());
        Trajectory pred = rollout(model, x0, slice, steps, opt);
        if (pred.diverged_at >= 0) ++rep.events_diverged;
        ++rep.events_scored;
        pred_all.middleRows(ev.begin, steps + 1) = pred.states;
        for (int t = 1; t <= steps; ++t) scored_rows.push_back(ev.begin + t);

        double ev_min_qw = pred.states.rightCols(N).minCoeff();
        rep.min_qw = std::min(rep.min_qw, ev_min_qw);
        if (ev_min_qw < 0.0) rep.negative_qw_seen = true;

        auto col_obs = [&](int c) {
            return Eigen::VectorXd(ref.states.col(c).segment(ev.begin + 1, steps));
        };
        auto col_pred = [&](int c) { return Eigen::VectorXd(pred.states.col(c).tail(steps)); };
        for (int c = 0; c < ref.layout.size(); ++c) {
            Eigen::VectorXd obs = col_obs(c), prd = col_pred(c);
            rep.per_series.push_back({ref.names[c], ev.id, rmse(obs, prd), r2(obs, prd)});
        }
    }

    // per-state scores over the concatenated events, pooled per state type
    detail::TypeAccumulator acc_h, acc_q, acc_qw_over, acc_qw_sur;
    Eigen::VectorXd obs(scored_rows.size()), prd(scored_rows.size());
    auto gather = [&](int c) {
        for (size_t k = 0; k < scored_rows.size(); ++k) {
            obs[k] = ref.states(scored_rows[k], c);
            prd[k] = pred_all(scored_rows[k], c);
        }
    };
    if (!scored_rows.empty()) {
        for (int i = 0; i < N; ++i) {
            gather(ref.layout.h_index(i));
            acc_h.add(obs, prd);
        }
        for (int j = 0; j < M; ++j) {
            gather(ref.layout.q_index(j));
            acc_q.add(obs, prd);
        }
        for (int i = 0; i < N; ++i) {
            if (i == net.outlet()) continue;
            gather(ref.layout.qw_index(i));
            (net.classify(i) == NodeClass::overflow ? acc_qw_over : acc_qw_sur).add(obs, prd);
        }
    }
    rep.levels = acc_h.finish();
    rep.flows = acc_q.finish();
    rep.overflow_qw = acc_qw_over.finish();
    rep.surcharge_qw = acc_qw_sur.finish();

    Trajectory pred_traj = ref;
    pred_traj.states = pred_all;
    rep.excess_volumes = event_excess_volumes(ref, pred_traj, events);
    rep.volumes = volume_summary(ref, pred_traj, runoff, net);
    return rep;
}

inline void write_per_series_csv(const MetricReport& rep, const std::string& path) {
    std::string s = "state,event_id,rmse,r2\n";
    for (const auto& row : rep.per_series) {
        s += row.state + "," + row.event_id + "," + format_double(row.rmse) + ",";
        s += row.r2 ? format_double(*row.r2) : std::string("undefined");
        s += "\n";
    }
    write_file(path, s);
}

inline void write_excess_volumes_csv(const std::vector<ExcessVolumePair>& pairs,
                                     const std::string& path) {
    std::string s = "node,event_id,reference_m3,surrogate_m3\n";
    for (const auto& p : pairs)
        s += p.node_id + "," + p.event_id + "," + format_double(p.reference_m3) + "," +
             format_double(p.predicted_m3) + "\n";
    write_file(path, s);
}

}  // namespace drainsim

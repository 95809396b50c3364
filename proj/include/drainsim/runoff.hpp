#pragma once

#include <Eigen/Dense>

#include "drainsim/network.hpp"
#include "drainsim/rain.hpp"

namespace drainsim {

/// Per-node runoff forcing aligned to a rain series, average rate per
/// 1-minute step [m³/s]. Zero for the outlet.
struct RunoffSeries {
    std::vector<std::string> node_ids;
    Eigen::MatrixXd rate;  // [T × N]

    int steps() const { return static_cast<int>(rate.rows()); }
    double total_volume() const { return rate.sum() * 60.0; }  // [m³]
};

/**
 * Lumped rainfall-runoff per catchment: the impervious share produces rain in
 * excess of a refilling initial-loss store, the pervious share produces rain
 * in excess of the Horton infiltration capacity
 *     f(t) = fmin + (f0 - fmin)·exp(-k·t_wet),
 * and the effective volume rate is routed through one linear reservoir with
 * the catchment's concentration time. The wet-time clock resets after
 * kEventGapMinutes of dry record; the initial-loss store refills linearly
 * over 24 dry hours.
 */
inline RunoffSeries simulate_runoff(const Network& net, const RainSeries& rain) {
    const int T = rain.size();
    const int N = net.node_count();
    RunoffSeries out;
    out.node_ids.reserve(N);
    for (const Node& n : net.nodes()) out.node_ids.push_back(n.id);
    out.rate = Eigen::MatrixXd::Zero(T, N);

    for (int i = 0; i < N; ++i) {
        const Catchment* c = net.catchment_at(i);
        if (!c) continue;
        const double tau = c->concentration_time * 60.0;  // [s]
        const double decay = std::exp(-60.0 / tau);
        const double refill_per_min = c->initial_loss / (24.0 * 60.0);
        double il_remaining = c->initial_loss;  // [mm]
        double wet_minutes = 0.0;
        int dry_run = kEventGapMinutes;  // start fully recovered
        double storage = 0.0;            // reservoir content [m³]

        for (int t = 0; t < T; ++t) {
            const double im = rain.intensity[t];  // [mm/min]
            const bool wet = im > kWetThreshold;
            if (wet) {
                if (dry_run >= kEventGapMinutes) wet_minutes = 0.0;
                dry_run = 0;
            } else {
                ++dry_run;
                il_remaining = std::min(c->initial_loss, il_remaining + refill_per_min);
            }

            const double absorbed = std::min(im, il_remaining);
            il_remaining -= absorbed;
            const double impervious_excess = im - absorbed;

            const double f = c->horton_fmin +
                             (c->horton_f0 - c->horton_fmin) *
                                 std::exp(-c->horton_k * wet_minutes / 60.0);  // [mm/hr]
            const double pervious_excess = std::max(im - f / 60.0, 0.0);
            if (wet) wet_minutes += 1.0;

            const double effective = c->imperviousness * impervious_excess +
                                     (1.0 - c->imperviousness) * pervious_excess;  // [mm/min]
            const double inflow = effective * 1e-3 * c->area / 60.0;  // [m³/s]

            // exact integration of dS/dt = q_in - S/tau over the minute
            const double next = storage * decay + inflow * tau * (1.0 - decay);
            const double out_volume = storage + inflow * 60.0 - next;  // [m³]
            out.rate(t, i) = out_volume / 60.0;
            storage = next;
        }
    }
    return out;
}

inline void write_runoff_csv(const RunoffSeries& runoff, const std::string& path) {
    std::string s = "minute";
    for (const auto& id : runoff.node_ids) s += "," + id;
    s += "\n";
    for (int t = 0; t < runoff.steps(); ++t) {
        s += std::to_string(t);
        for (int i = 0; i < runoff.rate.cols(); ++i) s += "," + format_double(runoff.rate(t, i));
        s += "\n";
    }
    write_file(path, s);
}

inline RunoffSeries read_runoff_csv(const std::string& path) {
    std::vector<std::string> header;
    auto rows = read_csv(path, &header);
    if (header.size() < 2) throw IoError("runoff file needs node columns: " + path);
    RunoffSeries out;
    out.node_ids.assign(header.begin() + 1, header.end());
    const int N = static_cast<int>(out.node_ids.size());
    out.rate.resize(static_cast<int>(rows.size()), N);
    for (size_t t = 0; t < rows.size(); ++t) {
        if (static_cast<int>(rows[t].size()) != N + 1) throw IoError("short row in " + path);
        for (int i = 0; i < N; ++i) out.rate(t, i) = parse_double(rows[t][i + 1], path);
    }
    return out;
}

}  // namespace drainsim

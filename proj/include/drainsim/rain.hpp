#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "drainsim/io.hpp"

namespace drainsim {

/// Default wet/dry discriminator and event gap, shared by event extraction
/// and the runoff loss bookkeeping.
inline constexpr double kWetThreshold = 0.02;  // [mm/min]
inline constexpr int kEventGapMinutes = 120;

/// Rain record at fixed 1-minute resolution. Timestamps are informational;
/// all alignment is by minute index.
struct RainSeries {
    std::string id;
    std::vector<double> intensity;  // [mm/min], >= 0

    int size() const { return static_cast<int>(intensity.size()); }
    double total_depth() const {  // [mm]
        double s = 0;
        for (double v : intensity) s += v;
        return s;
    }
};

struct RainEvent {
    std::string id;      // "<source>#<offset>"
    std::string source;  // id of the series the event was cut from
    int offset = 0;      // index of the first wet minute in the source
    std::vector<double> intensity;

    int length() const { return static_cast<int>(intensity.size()); }
    double depth() const {
        double s = 0;
        for (double v : intensity) s += v;
        return s;
    }
};

/**
 * Cut a series into rain events. An event ends once intensities stay at or
 * below `threshold` for at least `gap_minutes`. Each event keeps up to
 * `tail_pad` minutes of trailing dry record so the network can drain before
 * events are concatenated; leading dry time is dropped.
 */
inline std::vector<RainEvent> extract_events(const RainSeries& series,
                                             double threshold = kWetThreshold,
                                             int gap_minutes = kEventGapMinutes,
                                             int tail_pad = 60) {
    std::vector<RainEvent> events;
    const int n = series.size();
    int start = -1, last_wet = -1;
    auto close = [&](int end_of_data) {
        int end = std::min(last_wet + 1 + tail_pad, end_of_data);
        RainEvent e;
        e.source = series.id;
        e.offset = start;
        e.id = series.id + "#" + std::to_string(start);
        e.intensity.assign(series.intensity.begin() + start, series.intensity.begin() + end);
        events.push_back(std::move(e));
        start = last_wet = -1;
    };
    for (int i = 0; i < n; ++i) {
        if (series.intensity[i] > threshold) {
            if (start < 0) start = i;
            last_wet = i;
        } else if (start >= 0 && i - last_wet >= gap_minutes) {
            close(n);
        }
    }
    if (start >= 0) close(n);
    return events;
}

/**
 * Concatenate selected events (in the listed order) into one series with
 * `pad_minutes` of dry record between consecutive events.
 */
inline RainSeries assemble_dataset(const std::vector<RainEvent>& events,
                                   const std::vector<std::string>& selection,
                                   int pad_minutes = kEventGapMinutes,
                                   const std::string& id = "assembled") {
    std::unordered_map<std::string, const RainEvent*> by_id;
    for (const RainEvent& e : events) by_id[e.id] = &e;
    RainSeries out;
    out.id = id;
    bool first = true;
    for (const std::string& sel : selection) {
        auto it = by_id.find(sel);
        if (it == by_id.end()) throw IoError("unknown event id: " + sel);
        if (!first) out.intensity.insert(out.intensity.end(), pad_minutes, 0.0);
        first = false;
        out.intensity.insert(out.intensity.end(), it->second->intensity.begin(),
                             it->second->intensity.end());
    }
    return out;
}

/**
 * Synthetic bursty rain for users without gauge records. Events follow a
 * single-peak hyetograph i(t) = peak·(t/tp)^a·exp(a(1-t/tp)) with jittered
 * peak time and multiplicative noise. The extreme mode oversamples intense
 * storms the way a storm-focused training collection would.
 */
struct RainGenConfig {
    int events = 20;
    double peak_min = 0.05;        // [mm/min]
    double peak_max = 3.0;         // [mm/min]
    int duration_min = 10;         // [min]
    int duration_max = 360;        // [min]
    double extreme_fraction = 0.0; // share of events drawn from the storm tail
    int gap_min = 140;             // dry spell between generated events [min]
    int gap_max = 400;
    uint64_t seed = 1;
    std::string id = "generated";
};

inline RainSeries generate_rain(const RainGenConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    RainSeries out;
    out.id = cfg.id;
    auto log_uniform = [&](double lo, double hi) {
        return lo * std::exp(unit(rng) * std::log(hi / lo));
    };
    for (int e = 0; e < cfg.events; ++e) {
        bool extreme = unit(rng) < cfg.extreme_fraction;
        double peak = extreme ? log_uniform(std::max(cfg.peak_min, 0.35 * cfg.peak_max), cfg.peak_max)
                              : log_uniform(cfg.peak_min, cfg.peak_max);
        int dur_lo = extreme ? std::max(cfg.duration_min, 30) : cfg.duration_min;
        int dur_hi = extreme ? std::min(cfg.duration_max, 240) : cfg.duration_max;
        int duration = dur_lo + static_cast<int>(unit(rng) * std::max(1, dur_hi - dur_lo));
        double tp = (0.15 + 0.35 * unit(rng)) * duration;  // time to peak
        double shape = 1.0 + 3.0 * unit(rng);
        if (e > 0) {
            int gap = cfg.gap_min + static_cast<int>(unit(rng) * std::max(1, cfg.gap_max - cfg.gap_min));
            out.intensity.insert(out.intensity.end(), gap, 0.0);
        }
        for (int t = 0; t < duration; ++t) {
            double tau = (t + 0.5) / tp;
            double v = peak * std::pow(tau, shape) * std::exp(shape * (1.0 - tau));
            v *= std::exp(0.2 * (unit(rng) - 0.5));  // mild within-event jitter
            out.intensity.push_back(v < 0.005 ? 0.0 : v);
        }
    }
    // make sure extraction terminates the final event cleanly
    out.intensity.insert(out.intensity.end(), kEventGapMinutes + 10, 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

inline void write_rain_csv(const RainSeries& series, const std::string& path) {
    std::string s = "minute,intensity_mm_per_min\n";
    for (int t = 0; t < series.size(); ++t)
        s += std::to_string(t) + "," + format_double(series.intensity[t]) + "\n";
    write_file(path, s);
}

inline RainSeries read_rain_csv(const std::string& path, const std::string& id = "") {
    std::vector<std::string> header;
    auto rows = read_csv(path, &header);
    if (header.size() < 2) throw IoError("rain file needs a two-column header: " + path);
    RainSeries out;
    out.id = id.empty() ? std::filesystem::path(path).stem().string() : id;
    out.intensity.reserve(rows.size());
    for (const auto& row : rows) {
        if (row.size() < 2) throw IoError("short row in rain file " + path);
        double v = parse_double(row[1], path);
        if (v < 0) throw IoError("negative intensity in " + path);
        out.intensity.push_back(v);
    }
    if (out.intensity.empty()) throw IoError("empty series: " + path);
    return out;
}

inline void write_event_index(const std::vector<RainEvent>& events, const std::string& path) {
    std::string s = "event_id,source,offset,length\n";
    for (const RainEvent& e : events)
        s += e.id + "," + e.source + "," + std::to_string(e.offset) + "," +
             std::to_string(e.length()) + "\n";
    write_file(path, s);
}

/// Reads the (id, source, offset, length) index; intensities are re-sliced
/// from `source_series` when provided.
inline std::vector<RainEvent> read_event_index(const std::string& path,
                                               const RainSeries* source_series = nullptr) {
    auto rows = read_csv(path);
    std::vector<RainEvent> events;
    for (const auto& row : rows) {
        if (row.size() < 4) throw IoError("short row in event index " + path);
        RainEvent e;
        e.id = row[0];
        e.source = row[1];
        e.offset = static_cast<int>(parse_double(row[2], path));
        int len = static_cast<int>(parse_double(row[3], path));
        if (source_series) {
            if (e.offset + len > source_series->size())
                throw IoError("event " + e.id + " exceeds its source series");
            e.intensity.assign(source_series->intensity.begin() + e.offset,
                               source_series->intensity.begin() + e.offset + len);
        } else {
            e.intensity.assign(len, 0.0);
        }
        events.push_back(std::move(e));
    }
    return events;
}

}  // namespace drainsim

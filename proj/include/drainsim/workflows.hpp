#pragma once

#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "drainsim/eval.hpp"
#include "drainsim/hifi.hpp"
#include "drainsim/network.hpp"
#include "drainsim/rain.hpp"
#include "drainsim/runoff.hpp"
#include "drainsim/surrogate.hpp"
#include "drainsim/train.hpp"

namespace drainsim {

/// Every command drops a manifest into its output directory before doing any
/// work: input paths with content fingerprints, the seed, and the arguments.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const std::vector<std::string>& inputs, uint64_t seed,
                           const nlohmann::json& args = {}) {
    nlohmann::json m{{"command", command},
                     {"created_unix", static_cast<long>(std::time(nullptr))},
                     {"seed", seed},
                     {"out_dir", out_dir},
                     {"args", args}};
    nlohmann::json in = nlohmann::json::object();
    for (const auto& p : inputs) in[p] = file_hash(p);
    m["inputs"] = in;
    write_file(out_dir + "/manifest.json", m.dump(1));
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct Dataset {
    std::string dir;
    std::string hash;
    RainSeries rain;
    std::vector<RainEvent> events;
    RunoffSeries runoff;
    Trajectory labels;
};

inline std::string dataset_hash(const std::string& dir) {
    std::string acc;
    for (const char* f : {"rain.csv", "runoff.csv", "states.csv"})
        acc += file_hash(dir + "/" + f);
    return hex64(fnv1a64(acc));
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset d;
    d.dir = dir;
    d.rain = read_rain_csv(dir + "/rain.csv");
    d.events = read_event_index(dir + "/events.csv", &d.rain);
    d.runoff = read_runoff_csv(dir + "/runoff.csv");
    d.labels = read_trajectory_csv(dir + "/states.csv");
    d.labels.runoff = d.runoff.rate;
    if (d.labels.steps() != d.runoff.steps())
        throw IoError("dataset " + dir + ": states and runoff rows do not align");
    d.hash = dataset_hash(dir);
    return d;
}

struct GenerateOptions {
    std::string net_path;
    std::string rain_path;    // empty = synthesize from config
    std::string config_path;  // optional {"rain_generator": {...}, "hifi": {...}}
    std::string out_dir;
    uint64_t seed = 1;
};

inline HifiConfig hifi_config_from_json(const nlohmann::json& j) {
    HifiConfig cfg;
    cfg.dt = j.value("dt_seconds", cfg.dt);
    cfg.max_velocity = j.value("max_velocity", cfg.max_velocity);
    cfg.max_cell_length = j.value("max_cell_length", cfg.max_cell_length);
    cfg.slot_width_fraction = j.value("slot_width_fraction", cfg.slot_width_fraction);
    return cfg;
}

inline RainGenConfig rain_gen_from_json(const nlohmann::json& j, uint64_t seed) {
    RainGenConfig g;
    g.events = j.value("events", g.events);
    g.peak_min = j.value("peak_min", g.peak_min);
    g.peak_max = j.value("peak_max", g.peak_max);
    g.duration_min = j.value("duration_min", g.duration_min);
    g.duration_max = j.value("duration_max", g.duration_max);
    g.extreme_fraction = j.value("extreme_fraction", g.extreme_fraction);
    g.gap_min = j.value("gap_min", g.gap_min);
    g.gap_max = j.value("gap_max", g.gap_max);
    g.id = j.value("id", g.id);
    g.seed = j.value("seed", seed);
    return g;
}

/// Build one labeled dataset: rain -> events -> runoff -> reference solve ->
/// conservation audit, all written as plain files.
inline BalanceReport run_generate(const GenerateOptions& opt) {
    nlohmann::json cfg = nlohmann::json::object();
    if (!opt.config_path.empty()) cfg = nlohmann::json::parse(slurp_file(opt.config_path));

    std::vector<std::string> inputs{opt.net_path};
    if (!opt.rain_path.empty()) inputs.push_back(opt.rain_path);
    if (!opt.config_path.empty()) inputs.push_back(opt.config_path);
    std::filesystem::create_directories(opt.out_dir);
    write_manifest(opt.out_dir, "generate", inputs, opt.seed,
                   {{"net", opt.net_path}, {"rain", opt.rain_path}});

    Network net = Network::from_file(opt.net_path);
    RainSeries rain;
    if (!opt.rain_path.empty()) {
        rain = read_rain_csv(opt.rain_path);
    } else {
        if (!cfg.contains("rain_generator"))
            throw IoError("generate: no rain file and no rain_generator config");
        rain = generate_rain(rain_gen_from_json(cfg["rain_generator"], opt.seed));
    }

    HifiConfig hifi_cfg = hifi_config_from_json(cfg.value("hifi", nlohmann::json::object()));
    auto events = extract_events(rain);
    RunoffSeries runoff = simulate_runoff(net, rain);
    Trajectory traj = hifi_simulate(net, runoff, hifi_cfg);
    BalanceReport audit = mass_balance_audit(traj, runoff, net);

    write_rain_csv(rain, opt.out_dir + "/rain.csv");
    write_event_index(events, opt.out_dir + "/events.csv");
    write_runoff_csv(runoff, opt.out_dir + "/runoff.csv");
    write_trajectory_csv(traj, opt.out_dir + "/states.csv");
    write_file(opt.out_dir + "/audit.json", audit.to_json().dump(1));
    return audit;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::string net_path;
    std::string config_path;
    std::string out_dir;
    // CLI overrides; negative / empty = keep the config file value
    int window_size = -1;
    std::string spec;
    int constrained = -1;
    long long seed = -1;
    int epochs = -1;
};

struct TrainOutcome {
    SurrogateModel model;
    TrainReport report;
};

inline TrainOutcome run_train(const TrainOptions& opt) {
    nlohmann::json cfg = nlohmann::json::parse(slurp_file(opt.config_path));
    std::string train_dir = cfg.at("train_dataset").get<std::string>();
    std::string val_dir = cfg.at("val_dataset").get<std::string>();
    std::string net_path = opt.net_path.empty() ? cfg.at("network").get<std::string>()
                                                : opt.net_path;

    TrainConfig tc;
    tc.window_size = opt.window_size > 0 ? opt.window_size : cfg.value("window_size", 60);
    tc.epochs = opt.epochs > 0 ? opt.epochs : cfg.value("epochs", 2000);
    tc.patience = cfg.value("patience", 500);
    tc.lr_start = cfg.value("lr_start", 1e-3);
    tc.lr_end = cfg.value("lr_end", 1e-4);
    tc.batch = cfg.value("batch", 0);
    tc.seed = opt.seed >= 0 ? static_cast<uint64_t>(opt.seed) : cfg.value("seed", 0);
    bool constrained = opt.constrained >= 0 ? opt.constrained != 0 : cfg.value("constrained", true);

    ResidueSpec spec;
    if (!opt.spec.empty()) {
        spec = ResidueSpec::from_name(opt.spec);
    } else if (cfg.contains("spec") && cfg["spec"].is_string()) {
        spec = ResidueSpec::from_name(cfg["spec"].get<std::string>());
    } else if (cfg.contains("spec")) {
        spec = ResidueSpec::custom(cfg["spec"].at("hidden").get<std::vector<int>>());
    }

    std::filesystem::create_directories(opt.out_dir);
    write_manifest(opt.out_dir, "train", {opt.config_path, net_path}, tc.seed,
                   {{"window_size", tc.window_size},
                    {"spec", spec.name},
                    {"constrained", constrained},
                    {"train_dataset", train_dir},
                    {"val_dataset", val_dir}});

    Network net = Network::from_file(net_path);
    Dataset train_ds = load_dataset(train_dir);
    Dataset val_ds = load_dataset(val_dir);

    SurrogateModel model = make_surrogate(net, constrained, spec, tc.seed);
    model.scaler = fit_scaler(train_ds.labels, train_ds.runoff);
    model.dataset_hash = train_ds.hash;

    TrainReport report =
        train(model, train_ds.labels, train_ds.runoff, val_ds.labels, val_ds.runoff, tc);

    save_checkpoint(model, opt.out_dir + "/checkpoint.json");
    write_file(opt.out_dir + "/report.json", report.to_json().dump(1));
    if (report.aborted) throw NumericalError("training aborted: every window diverged");
    return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// simulation
// ---------------------------------------------------------------------------

struct SimulateOptions {
    std::string checkpoint_path;
    std::string net_path;
    std::string rain_path;    // either rain ...
    std::string runoff_path;  // ... or precomputed runoff
    std::string init_states_path;  // optional labeled warm start (row 0 used)
    std::string out_dir;
};

inline Trajectory run_simulate(const SimulateOptions& opt) {
    std::vector<std::string> inputs{opt.checkpoint_path, opt.net_path};
    if (!opt.rain_path.empty()) inputs.push_back(opt.rain_path);
    if (!opt.runoff_path.empty()) inputs.push_back(opt.runoff_path);
    if (!opt.init_states_path.empty()) inputs.push_back(opt.init_states_path);
    std::filesystem::create_directories(opt.out_dir);
    write_manifest(opt.out_dir, "simulate", inputs, 0);

    SurrogateModel model = load_checkpoint(opt.checkpoint_path);
    Network net = Network::from_file(opt.net_path);
    if (model.n_nodes != net.node_count() || model.n_links != net.link_count())
        throw ValidationError({"checkpoint layout does not match the network"});
    for (int i = 0; i < net.node_count(); ++i)
        if (model.node_ids[i] != net.node(i).id)
            throw ValidationError({"checkpoint node order differs at " + net.node(i).id});

    RunoffSeries runoff;
    if (!opt.runoff_path.empty()) {
        runoff = read_runoff_csv(opt.runoff_path);
    } else if (!opt.rain_path.empty()) {
        RainSeries rain = read_rain_csv(opt.rain_path);
        runoff = simulate_runoff(net, rain);
        write_runoff_csv(runoff, opt.out_dir + "/runoff.csv");
    } else {
        throw IoError("simulate: needs --rain or --runoff");
    }

    Eigen::VectorXd x0(model.state_dim());
    if (!opt.init_states_path.empty()) {
        Trajectory init = read_trajectory_csv(opt.init_states_path);
        if (init.states.cols() < model.state_dim())
            throw ValidationError({"init states file has too few columns"});
        x0 = init.states.row(0).head(model.state_dim());
    } else {
        // dry start: levels at invert, zero flows (and zero Q_w states)
        x0.setZero();
        for (int i = 0; i < net.node_count(); ++i) x0[i] = net.node(i).invert_elevation;
    }

    Trajectory pred = rollout(model, x0, runoff, runoff.steps());
    write_trajectory_csv(pred, opt.out_dir + "/states.csv");
    return pred;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvaluateOptions {
    std::string checkpoint_path;
    std::string net_path;
    std::string dataset_dir;  // test dataset from `generate`
    std::string out_dir;
    bool benchmark = true;
    nlohmann::json hifi;  // solver settings for the timing benchmark
};

struct EvaluateOutcome {
    MetricReport metrics;
    SpeedupReport speedup;
    bool provenance_overlap = false;
};

inline EvaluateOutcome run_evaluate(const EvaluateOptions& opt) {
    std::filesystem::create_directories(opt.out_dir);
    write_manifest(opt.out_dir, "evaluate", {opt.checkpoint_path, opt.net_path}, 0,
                   {{"dataset", opt.dataset_dir}});

    SurrogateModel model = load_checkpoint(opt.checkpoint_path);
    Network net = Network::from_file(opt.net_path);
    Dataset test = load_dataset(opt.dataset_dir);

    EvaluateOutcome out;
    out.provenance_overlap = !model.dataset_hash.empty() && model.dataset_hash == test.hash;

    auto events = event_bounds(test.events, static_cast<int>(test.labels.states.rows()));
    out.metrics = evaluate_events(model, net, test.labels, test.runoff, events);

    if (opt.benchmark) {
        HifiConfig hifi_cfg = hifi_config_from_json(opt.hifi.is_object() ? opt.hifi
                                                                         : nlohmann::json::object());
        out.speedup = benchmark_speedup(net, test.runoff, hifi_cfg, model);
        write_file(opt.out_dir + "/timing.json", out.speedup.to_json().dump(1));
    }

    nlohmann::json summary = out.metrics.summary_json();
    summary["provenance_overlap"] = out.provenance_overlap;
    summary["checkpoint_dataset_hash"] = model.dataset_hash;
    summary["test_dataset_hash"] = test.hash;
    write_file(opt.out_dir + "/metrics.json", summary.dump(1));
    write_per_series_csv(out.metrics, opt.out_dir + "/per_series.csv");
    write_excess_volumes_csv(out.metrics.excess_volumes, opt.out_dir + "/excess_volumes.csv");
    return out;
}

// ---------------------------------------------------------------------------
// hyperparameter grid
// ---------------------------------------------------------------------------

/// Grid over {window sizes × residue specs} × repeats, one output directory
/// per cell; repeat r runs with seed base_seed + r.
inline std::vector<TrainReport> run_grid(const std::string& net_path,
                                         const std::string& config_path,
                                         const std::string& out_dir, int repeats) {
    nlohmann::json cfg = nlohmann::json::parse(slurp_file(config_path));
    std::vector<int> windows = cfg.value("windows", std::vector<int>{60});
    std::vector<std::string> specs = cfg.value("specs", std::vector<std::string>{"S1"});
    uint64_t base_seed = cfg.value("seed", 0);
    if (repeats <= 0) repeats = cfg.value("repeats", 1);

    std::filesystem::create_directories(out_dir);
    write_manifest(out_dir, "grid", {config_path}, base_seed,
                   {{"windows", windows}, {"specs", specs}, {"repeats", repeats}});

    std::vector<TrainReport> reports;
    for (int w : windows)
        for (const std::string& s : specs)
            for (int r = 0; r < repeats; ++r) {
                TrainOptions t;
                t.net_path = net_path;
                t.config_path = config_path;
                t.out_dir = out_dir + "/w" + std::to_string(w) + "_" + s + "_r" +
                            std::to_string(r);
                t.window_size = w;
                t.spec = s;
                t.seed = static_cast<long long>(base_seed) + r;
                reports.push_back(run_train(t).report);
            }
    return reports;
}

}  // namespace drainsim

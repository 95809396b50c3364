// Command-line front end: generate labeled datasets with the reference
// solver, train surrogates, run them, and score them against the labels.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "drainsim/workflows.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

int dispatch(CLI::App& app, int argc, char** argv) {
    using namespace drainsim;

    auto* gen = app.add_subcommand("generate", "simulate a rain series into a labeled dataset");
    GenerateOptions gen_opt;
    gen->add_option("--net", gen_opt.net_path, "network document (JSON)")->required();
    gen->add_option("--rain", gen_opt.rain_path, "rain series CSV (omit to synthesize)");
    gen->add_option("--config", gen_opt.config_path, "generator/solver settings (JSON)");
    gen->add_option("--out", gen_opt.out_dir, "output directory")->required();
    gen->add_option("--seed", gen_opt.seed, "seed for the rain generator");

    auto* trn = app.add_subcommand("train", "train a surrogate on a generated dataset");
    TrainOptions trn_opt;
    trn->add_option("--net", trn_opt.net_path, "network document (defaults to config)");
    trn->add_option("--config", trn_opt.config_path, "training config (JSON)")->required();
    trn->add_option("--out", trn_opt.out_dir, "output directory")->required();
    trn->add_option("--window", trn_opt.window_size, "override window size [min]");
    trn->add_option("--spec", trn_opt.spec, "override residue spec (S1..S4)");
    trn->add_option("--seed", trn_opt.seed, "override seed");
    trn->add_option("--epochs", trn_opt.epochs, "override epoch budget");
    trn->add_flag_function(
        "--constrained,!--unconstrained",
        [&](int64_t v) { trn_opt.constrained = v > 0 ? 1 : 0; },
        "force the constrained / unconstrained variant");

    auto* sim = app.add_subcommand("simulate", "roll a trained surrogate over a rain series");
    SimulateOptions sim_opt;
    sim->add_option("--checkpoint", sim_opt.checkpoint_path, "checkpoint JSON")->required();
    sim->add_option("--net", sim_opt.net_path, "network document")->required();
    sim->add_option("--rain", sim_opt.rain_path, "rain series CSV");
    sim->add_option("--runoff", sim_opt.runoff_path, "precomputed runoff CSV");
    sim->add_option("--init", sim_opt.init_states_path, "trajectory CSV whose first row warm-starts");
    sim->add_option("--out", sim_opt.out_dir, "output directory")->required();

    auto* evl = app.add_subcommand("evaluate", "score a checkpoint against a test dataset");
    EvaluateOptions evl_opt;
    std::string evl_hifi_config;
    evl->add_option("--checkpoint", evl_opt.checkpoint_path, "checkpoint JSON")->required();
    evl->add_option("--net", evl_opt.net_path, "network document")->required();
    evl->add_option("--dataset", evl_opt.dataset_dir, "test dataset directory")->required();
    evl->add_option("--out", evl_opt.out_dir, "output directory")->required();
    evl->add_option("--config", evl_hifi_config, "solver settings for the timing benchmark");
    evl->add_flag("--no-benchmark", [&](int64_t) { evl_opt.benchmark = false; },
                  "skip the timing benchmark");

    auto* grd = app.add_subcommand("grid", "train every {window × spec} cell, repeated");
    std::string grd_net, grd_config, grd_out;
    int grd_repeats = 0;
    grd->add_option("--net", grd_net, "network document");
    grd->add_option("--config", grd_config, "grid config (JSON)")->required();
    grd->add_option("--out", grd_out, "output directory")->required();
    grd->add_option("--repeats", grd_repeats, "repetitions per cell");

    app.require_subcommand(1);
    CLI11_PARSE(app, argc, argv);

    if (*gen) {
        BalanceReport audit = run_generate(gen_opt);
        std::printf("generated %s (closure %.3g%% of runoff volume)\n", gen_opt.out_dir.c_str(),
                    100.0 * audit.closure_relative);
    } else if (*trn) {
        TrainOutcome out = run_train(trn_opt);
        std::printf("trained: best val %.6g at epoch %d (%d epochs, %.1f s)\n",
                    out.report.best_val, out.report.best_epoch, out.report.epochs_run,
                    out.report.wall_seconds);
    } else if (*sim) {
        Trajectory pred = run_simulate(sim_opt);
        std::printf("simulated %d minutes -> %s/states.csv\n", pred.steps(),
                    sim_opt.out_dir.c_str());
    } else if (*evl) {
        if (!evl_hifi_config.empty())
            evl_opt.hifi = nlohmann::json::parse(drainsim::slurp_file(evl_hifi_config))
                               .value("hifi", nlohmann::json::object());
        EvaluateOutcome out = run_evaluate(evl_opt);
        if (out.provenance_overlap)
            std::fprintf(stderr, "warning: test dataset matches the training dataset hash\n");
        std::printf("levels R2 %.3f | flows R2 %.3f | overflow R2 %.3f | surcharge R2 %.3f\n",
                    out.metrics.levels.r2_mean, out.metrics.flows.r2_mean,
                    out.metrics.overflow_qw.r2_mean, out.metrics.surcharge_qw.r2_mean);
        if (evl_opt.benchmark)
            std::printf("speedup: reference %.2f s vs surrogate %.2f s (%.1fx)\n",
                        out.speedup.reference_seconds, out.speedup.surrogate_seconds,
                        out.speedup.ratio);
    } else if (*grd) {
        auto reports = run_grid(grd_net, grd_config, grd_out, grd_repeats);
        std::printf("grid: %zu cells completed\n", reports.size());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"drainsim - neural surrogates for urban drainage hydraulics"};
    try {
        return dispatch(app, argc, argv);
    } catch (const drainsim::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const drainsim::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const drainsim::NumericalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

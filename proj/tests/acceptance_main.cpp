// Acceptance suite for the bench15 benchmark: one pass/fail line per
// criterion, exit code = number of failures. Everything is seeded; the run
// is deterministic apart from wall-clock readings.

#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "drainsim/eval.hpp"
#include "drainsim/workflows.hpp"

using namespace drainsim;

namespace {

struct Criterion {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Criterion> g_results;

void report(int id, bool pass, const std::string& detail) {
    g_results.push_back({id, pass, detail});
    std::printf("[%2d] %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof(buf), f, args);
    va_end(args);
    return buf;
}

struct Bench {
    Network net;
    HifiConfig hifi;
    Dataset train, val, test;
    std::vector<EventBounds> test_events;
};

Dataset generate_once(const std::string& net_path, const std::string& cfg_path,
                      const std::string& out_dir) {
    GenerateOptions g;
    g.net_path = net_path;
    g.config_path = cfg_path;
    g.out_dir = out_dir;
    run_generate(g);
    return load_dataset(out_dir);
}

SurrogateModel train_variant(const Bench& b, bool constrained, const ResidueSpec& spec,
                             int window, int epochs, int patience, uint64_t seed,
                             TrainReport* out_report = nullptr) {
    SurrogateModel m = make_surrogate(b.net, constrained, spec, seed);
    m.scaler = fit_scaler(b.train.labels, b.train.runoff);
    m.dataset_hash = b.train.hash;
    TrainConfig cfg;
    cfg.window_size = window;
    cfg.epochs = epochs;
    cfg.patience = patience;
    cfg.seed = seed;
    cfg.batch = 16;
    TrainReport rep = train(m, b.train.labels, b.train.runoff, b.val.labels, b.val.runoff, cfg);
    if (out_report) *out_report = rep;
    return m;
}

}  // namespace

int main(int argc, char** argv) {
    std::string data_dir = "data", out_dir = "acceptance_out";
    for (int i = 1; i + 1 < argc; i += 2) {
        std::string a = argv[i];
        if (a == "--data") data_dir = argv[i + 1];
        if (a == "--out") out_dir = argv[i + 1];
    }
    std::filesystem::create_directories(out_dir);
    std::printf("bench15 acceptance run (data=%s, out=%s)\n", data_dir.c_str(), out_dir.c_str());

    Bench b{Network::from_file(data_dir + "/bench15.json")};
    b.hifi = hifi_config_from_json(
        nlohmann::json::parse(slurp_file(data_dir + "/gen_train.json")).at("hifi"));

    std::printf("generating labeled datasets...\n");
    b.train = generate_once(data_dir + "/bench15.json", data_dir + "/gen_train.json",
                            out_dir + "/train");
    b.val = generate_once(data_dir + "/bench15.json", data_dir + "/gen_val.json",
                          out_dir + "/val");
    b.test = generate_once(data_dir + "/bench15.json", data_dir + "/gen_test.json",
                           out_dir + "/test");
    b.test_events = event_bounds(b.test.events, static_cast<int>(b.test.labels.states.rows()));
    std::printf("datasets: train %d min, val %d min, test %d min over %zu events\n\n",
                b.train.labels.steps(), b.val.labels.steps(), b.test.labels.steps(),
                b.test_events.size());

    // [6] solver conservation: per-event closure at dt = 5 s, and closure
    // must not grow when dt is halved (the tally keeps it at rounding level)
    {
        double worst = 0.0;
        int audited = 0;
        for (size_t e = 0; e < b.test.events.size() && audited < 8; ++e, ++audited) {
            const RainEvent& ev = b.test.events[e];
            RainSeries one{"one", ev.intensity};
            one.intensity.insert(one.intensity.end(), 120, 0.0);
            RunoffSeries ro = simulate_runoff(b.net, one);
            Trajectory tr = hifi_simulate(b.net, ro, b.hifi);
            worst = std::max(worst, mass_balance_audit(tr, ro, b.net).closure_relative);
        }
        const RainEvent& ev0 = b.test.events[0];
        RainSeries one{"one", ev0.intensity};
        RunoffSeries ro = simulate_runoff(b.net, one);
        HifiConfig half = b.hifi;
        half.dt = b.hifi.dt / 2.0;
        double c_full =
            mass_balance_audit(hifi_simulate(b.net, ro, b.hifi), ro, b.net).closure_relative;
        double c_half =
            mass_balance_audit(hifi_simulate(b.net, ro, half), ro, b.net).closure_relative;
        bool pass = worst <= 0.005 && c_half <= std::max(c_full, 1e-10);
        report(6, pass,
               fmt("conservation: worst per-event closure %.2e (<= 5e-3); dt %g->%g s keeps "
                   "closure at the noise floor (%.2e -> %.2e)",
                   worst, b.hifi.dt, half.dt, c_full, c_half));
    }

    // [7] schedule endpoints and the early-stopping contract
    {
        TrainConfig cfg;
        cfg.epochs = 2000;
        bool endpoints = lr_at_epoch(cfg, 0) == 1e-3 && lr_at_epoch(cfg, 2000) == 1e-4;

        SurrogateModel m = make_surrogate(b.net, true, ResidueSpec::from_name("S1"), 5);
        m.scaler = fit_scaler(b.train.labels, b.train.runoff);
        TrainConfig stall;
        stall.window_size = 10;
        stall.epochs = 60;
        stall.patience = 9;
        stall.lr_start = stall.lr_end = 1e-300;  // updates below one ulp: a stall
        TrainReport rep = train(m, b.val.labels, b.val.runoff, b.val.labels, b.val.runoff, stall);
        bool stall_ok = rep.early_stopped && rep.epochs_run == 1 + stall.patience;
        report(7, endpoints && stall_ok,
               fmt("schedule: lr(0)=%.0e lr(end)=%.0e exact; stall stopped after %d epochs "
                   "(1 + patience %d)",
                   lr_at_epoch(cfg, 0), lr_at_epoch(cfg, 2000), rep.epochs_run, stall.patience));
    }

    // [8] min-max round trip on every non-degenerate training state
    {
        Scaler s = fit_scaler(b.train.labels, b.train.runoff);
        double worst = 0.0;
        for (int c = 0; c < b.train.labels.states.cols(); ++c) {
            if (s.state_inv[c] == 0.0) continue;
            for (int t = 0; t < b.train.labels.states.rows(); ++t) {
                double x = b.train.labels.states(t, c);
                double back =
                    s.state_min[c] + (x - s.state_min[c]) * s.state_inv[c] * s.state_range[c];
                worst = std::max(worst, std::abs(back - x));
            }
        }
        report(8, worst <= 1e-9,
               fmt("scaling round trip: worst |unscale(scale(x)) - x| = %.2e (<= 1e-9) over all "
                   "non-degenerate training states",
                   worst));
    }

    // [5] gradient correctness through a 3-step rollout with the constraint
    // layer, against central finite differences
    {
        double worst = 0.0;
        for (uint64_t seed : {41ULL, 42ULL, 43ULL}) {
            SurrogateModel m = make_surrogate(b.net, true, ResidueSpec::custom({8}), seed);
            m.scaler = fit_scaler(b.train.labels, b.train.runoff);
            auto windows = make_windows(b.train.labels, b.train.runoff, 3);
            windows.resize(2);
            WindowedObjective obj(m, windows);
            Eigen::VectorXd grad;
            obj.loss_grad(m, grad);
            const double h = 1e-5;
            for (int p = 0; p < m.params.size(); ++p) {
                double orig = m.params[p];
                m.params[p] = orig + h;
                double lp = obj.loss(m);
                m.params[p] = orig - h;
                double lm = obj.loss(m);
                m.params[p] = orig;
                double fd = (lp - lm) / (2.0 * h);
                double denom = std::max({std::abs(fd), std::abs(grad[p]), 1e-7});
                worst = std::max(worst, std::abs(fd - grad[p]) / denom);
            }
        }
        report(5, worst <= 1e-4,
               fmt("gradients: worst relative error vs central differences %.2e (<= 1e-4) over 3 "
                   "seeds, every parameter",
                   worst));
    }

    // [1] headline accuracy: constrained S4 / window 60
    const ResidueSpec s4 = ResidueSpec::from_name("S4");
    TrainReport rep_c;
    std::printf("\ntraining the constrained S4/window-60 surrogate...\n");
    SurrogateModel model_c = train_variant(b, true, s4, 60, 2000, 500, 7, &rep_c);
    save_checkpoint(model_c, out_dir + "/constrained.json");
    write_file(out_dir + "/constrained_report.json", rep_c.to_json().dump(1));
    MetricReport mr_c = evaluate_events(model_c, b.net, b.test.labels, b.test.runoff,
                                        b.test_events);
    write_excess_volumes_csv(mr_c.excess_volumes, out_dir + "/excess_volumes.csv");
    {
        bool pass = mr_c.levels.r2_mean >= 0.85 && mr_c.flows.r2_mean >= 0.85 &&
                    rep_c.wall_seconds <= 1800.0 && mr_c.events_diverged == 0;
        report(1, pass,
               fmt("accuracy: mean R2 levels %.3f, flows %.3f (>= 0.85); training %.0f s "
                   "(<= 1800 s), best val %.2e at epoch %d",
                   mr_c.levels.r2_mean, mr_c.flows.r2_mean, rep_c.wall_seconds, rep_c.best_val,
                   rep_c.best_epoch));
    }

    // [2] constraint benefit: the identically trained unconstrained variant
    TrainReport rep_u;
    std::printf("\ntraining the unconstrained twin...\n");
    SurrogateModel model_u = train_variant(b, false, s4, 60, 2000, 500, 7, &rep_u);
    save_checkpoint(model_u, out_dir + "/unconstrained.json");
    MetricReport mr_u = evaluate_events(model_u, b.net, b.test.labels, b.test.runoff,
                                        b.test_events);
    {
        double r2_over_c = mr_c.overflow_qw.r2_pooled.value_or(-1e9);
        double r2_over_u = mr_u.overflow_qw.r2_pooled.value_or(-1e9);
        double r2_sur_c = mr_c.surcharge_qw.r2_pooled.value_or(-1e9);
        double r2_sur_u = mr_u.surcharge_qw.r2_pooled.value_or(-1e9);
        bool better = mr_c.overflow_qw.rmse < mr_u.overflow_qw.rmse &&
                      mr_c.surcharge_qw.rmse < mr_u.surcharge_qw.rmse &&
                      r2_over_c > r2_over_u && r2_sur_c > r2_sur_u;
        bool nonneg = mr_c.min_qw >= 0.0 && !mr_c.negative_qw_seen;
        report(2, better && nonneg,
               fmt("constraint benefit: overflow rmse %.4f vs %.4f, surcharge rmse %.4f vs %.4f; "
                   "overflow R2 %.3f vs %.3f, surcharge R2 %.3f vs %.3f; constrained min Q_w "
                   "%.1e (>= 0)",
                   mr_c.overflow_qw.rmse, mr_u.overflow_qw.rmse, mr_c.surcharge_qw.rmse,
                   mr_u.surcharge_qw.rmse, r2_over_c, r2_over_u, r2_sur_c, r2_sur_u, mr_c.min_qw));
    }

    // [10] per-node per-event excess volumes against the reference
    {
        std::vector<double> ref, pred;
        for (const auto& p : mr_c.excess_volumes)
            if (p.reference_m3 > 1e-6) {
                ref.push_back(p.reference_m3);
                pred.push_back(p.predicted_m3);
            }
        double r2v = -1e9;
        if (ref.size() >= 2) {
            Eigen::Map<Eigen::VectorXd> vr(ref.data(), ref.size());
            Eigen::Map<Eigen::VectorXd> vp(pred.data(), pred.size());
            r2v = r2(vr, vp).value_or(-1e9);
        }
        report(10, r2v >= 0.8,
               fmt("excess volumes: R2 %.3f (>= 0.8) over %zu node-event pairs with nonzero "
                   "reference spill",
                   r2v, ref.size()));
    }

    // [9] constraint identity on an emitted rollout
    {
        const EventBounds& ev = b.test_events[0];
        int steps = std::min(b.test.labels.steps(), 3000);
        RunoffSeries ro;
        ro.node_ids = b.test.runoff.node_ids;
        ro.rate = b.test.runoff.rate.topRows(steps);
        Eigen::VectorXd x0 = b.test.labels.states.row(ev.begin).head(model_c.state_dim());
        RolloutOptions opt;
        opt.throw_on_divergence = false;
        Trajectory pred = rollout(model_c, x0, ro, steps, opt);
        bool exact = true;
        const int N = b.net.node_count(), M = b.net.link_count();
        for (int t = 1; t <= steps && exact; ++t) {
            Eigen::VectorXd qw = constraint_excess(model_c, pred.states.row(t).segment(N, M),
                                                   ro.rate.row(t - 1));
            for (int i = 0; i < N; ++i)
                if (pred.states(t, pred.layout.qw_index(i)) != qw[i]) exact = false;
        }
        report(9, exact,
               fmt("constraint identity: emitted Q_w equals a recomputation from the emitted "
                   "flows and runoff, bit-exact over %d steps",
                   steps));
    }

    // [4] speedup over the full test series, single lane both sides
    {
        SpeedupReport sp = benchmark_speedup(b.net, b.test.runoff, b.hifi, model_c);
        write_file(out_dir + "/timing.json", sp.to_json().dump(1));
        report(4, sp.ratio >= 10.0,
               fmt("speedup: reference %.2f s vs surrogate %.2f s over %d minutes -> %.1fx "
                   "(>= 10x)",
                   sp.reference_seconds, sp.surrogate_seconds, sp.minutes, sp.ratio));
    }

    // [3] window-size ablation, three seeds of the same spec. The two models
    // optimize different horizons, so the comparison uses one yardstick:
    // both final models are scored on the same 60-minute validation windows.
    {
        std::printf("\nwindow ablation (3 seeds x {1, 60} minutes)...\n");
        const ResidueSpec spec = ResidueSpec::from_name("S2");
        double mean1 = 0, mean60 = 0;
        for (uint64_t seed : {21ULL, 22ULL, 23ULL}) {
            TrainReport r1, r60;
            SurrogateModel m1 = train_variant(b, true, spec, 1, 800, 800, seed, &r1);
            SurrogateModel m60 = train_variant(b, true, spec, 60, 800, 800, seed, &r60);
            WindowedObjective yard(m1, make_windows(b.val.labels, b.val.runoff, 60));
            double v1 = yard.loss(m1), v60 = yard.loss(m60);
            mean1 += v1 / 3.0;
            mean60 += v60 / 3.0;
            std::printf("  seed %llu: window-60 val loss %.3e (w1 model) vs %.3e (w60 model); "
                        "own-window best val %.3e vs %.3e\n",
                        static_cast<unsigned long long>(seed), v1, v60, r1.best_val, r60.best_val);
        }
        report(3, mean1 > mean60,
               fmt("window ablation: mean validation loss %.3e (window-1 training) > %.3e "
                   "(window-60 training) on identical 60-min validation windows (3 seeds, "
                   "spec %s)",
                   mean1, mean60, spec.name.c_str()));
    }

    // summary
    int failures = 0;
    nlohmann::json summary = nlohmann::json::array();
    std::sort(g_results.begin(), g_results.end(),
              [](const Criterion& a, const Criterion& c) { return a.id < c.id; });
    std::printf("\n==== acceptance summary ====\n");
    for (const Criterion& c : g_results) {
        if (!c.pass) ++failures;
        std::printf("[%2d] %s  %s\n", c.id, c.pass ? "PASS" : "FAIL", c.detail.c_str());
        summary.push_back({{"criterion", c.id}, {"pass", c.pass}, {"detail", c.detail}});
    }
    write_file(out_dir + "/acceptance_summary.json", summary.dump(1));
    std::printf("%d of %zu criteria passed\n", static_cast<int>(g_results.size()) - failures,
                g_results.size());
    return failures;
}

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "drainsim/surrogate.hpp"
#include "support.hpp"

using namespace drainsim;
using namespace testsupport;

namespace {

RunoffSeries small_forcing(const Network& net, int minutes, double rate = 0.02) {
    RunoffSeries r;
    for (const Node& n : net.nodes()) r.node_ids.push_back(n.id);
    r.rate = Eigen::MatrixXd::Zero(minutes, net.node_count());
    r.rate.col(0).setConstant(rate);
    return r;
}

/// Model with a fitted scaler from a short reference run.
SurrogateModel fitted_model(const Network& net, bool constrained, const ResidueSpec& spec,
                            uint64_t seed, int minutes = 90) {
    RunoffSeries runoff = small_forcing(net, minutes);
    Trajectory labels = hifi_simulate(net, runoff, {});
    SurrogateModel m = make_surrogate(net, constrained, spec, seed);
    m.scaler = fit_scaler(labels, runoff);
    return m;
}

void set_layer(MlpShape& shape, double* params, int layer, const Eigen::MatrixXd& W,
               const Eigen::VectorXd& b) {
    Eigen::Map<Eigen::MatrixXd>(params + shape.weight_offset(layer), W.rows(), W.cols()) = W;
    Eigen::Map<Eigen::VectorXd>(params + shape.bias_offset(layer), b.size()) = b;
}

}  // namespace

TEST_CASE("scaler fitting and degeneracy", "[surrogate]") {
    Network net = two_node_net();
    Trajectory labels;
    labels.layout = state_layout(net, true);
    labels.names = labels.layout.names(net);
    labels.states.resize(3, 5);
    labels.states << 2.0, 0.0, 0.0, 0.0, 0.0,  //
        3.0, 0.0, 0.5, 0.0, 0.0,               //
        4.0, 0.0, 1.0, 0.0, 0.0;
    RunoffSeries runoff = small_forcing(net, 2);
    Scaler s = fit_scaler(labels, runoff);
    REQUIRE(s.state_min[0] == 2.0);
    REQUIRE(s.state_max[0] == 4.0);
    REQUIRE(s.state_inv[1] == 0.0);  // constant column flagged degenerate
    REQUIRE(s.degenerate_states() == 3);
}

TEST_CASE("scaling maps min to zero and midpoints to a half", "[surrogate]") {
    Eigen::VectorXd mn(1), mx(1);
    mn << 2.0;
    mx << 4.0;
    Eigen::VectorXd range, inv;
    Scaler::finalize(mn, mx, range, inv);
    Eigen::VectorXd x(1);
    x << 3.0;
    REQUIRE(minmax_scale(x, mn, inv)[0] == 0.5);
    x << 2.0;
    REQUIRE(minmax_scale(x, mn, inv)[0] == 0.0);
}

TEST_CASE("unscale is the inverse of scale within 1e-9", "[surrogate]") {
    Network net = junction_net();
    SurrogateModel m = fitted_model(net, false, ResidueSpec::custom({6}), 1, 120);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::VectorXd x(m.state_dim());
        for (int i = 0; i < x.size(); ++i) {
            double lo = m.scaler.state_min[i], hi = m.scaler.state_max[i];
            x[i] = lo + unit(rng) * (hi - lo);
        }
        Eigen::VectorXd back = m.unscale_state(m.scale_state(x));
        for (int i = 0; i < x.size(); ++i) {
            if (m.scaler.state_inv[i] == 0.0) continue;  // degenerate pins to min
            REQUIRE(back[i] == Catch::Approx(x[i]).margin(1e-9));
        }
    }
}

TEST_CASE("prior forward pass", "[surrogate]") {
    Network net = two_node_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::custom({4}), 2);
    const int d = m.state_dim();

    SECTION("zero parameters give zero output") {
        m.params.setZero();
        Eigen::VectorXd xs = Eigen::VectorXd::Constant(d, 0.3);
        REQUIRE(prior_forward(m, xs).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("hand-set weights match manual arithmetic") {
        m.params.setZero();
        Eigen::MatrixXd W1 = Eigen::MatrixXd::Zero(d, d);
        W1(0, 0) = 0.5;
        W1(1, 0) = -0.25;
        Eigen::VectorXd b1 = Eigen::VectorXd::Constant(d, 0.1);
        Eigen::MatrixXd W2 = Eigen::MatrixXd::Identity(d, d) * 2.0;
        Eigen::VectorXd b2 = Eigen::VectorXd::Zero(d);
        b2[2] = -1.0;
        set_layer(m.prior_shape, m.prior_params(), 0, W1, b1);
        set_layer(m.prior_shape, m.prior_params(), 1, W2, b2);
        Eigen::VectorXd xs(d);
        xs << 0.4, 0.2, 0.7;
        Eigen::VectorXd expected = 2.0 * (W1 * xs + b1).array().tanh().matrix() + b2;
        REQUIRE((prior_forward(m, xs) - expected).cwiseAbs().maxCoeff() < 1e-15);
    }
    SECTION("output minus final bias is linear in the final weights") {
        std::mt19937_64 rng(3);
        mlp_init(m.prior_shape, m.prior_params(), rng);
        Eigen::VectorXd xs = Eigen::VectorXd::Constant(d, 0.25);
        Eigen::VectorXd y1 = prior_forward(m, xs);
        Eigen::Map<Eigen::MatrixXd> W2(m.prior_params() + m.prior_shape.weight_offset(1), d, d);
        W2 *= 2.0;
        Eigen::VectorXd y2 = prior_forward(m, xs);
        REQUIRE((y2 - 2.0 * y1).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("dimension mismatch is rejected") {
        REQUIRE_THROWS_AS(prior_forward(m, Eigen::VectorXd::Zero(d + 1)), NumericalError);
    }
}

TEST_CASE("residue forward pass and parameter counts", "[surrogate]") {
    Network net = two_node_net();  // constrained layout has 3 states, 2 nodes
    SurrogateModel m = fitted_model(net, true, ResidueSpec::from_name("S1"), 2);

    SECTION("S1 parameter count follows the construction formula") {
        int expected = (3 + 2) * 10 + 10 + (10 * 10 + 10) + (10 * 3 + 3);
        REQUIRE(m.residue_shape.param_count() == expected);
    }
    SECTION("zero parameters give zero residue") {
        m.params.setZero();
        Eigen::VectorXd xs = Eigen::VectorXd::Constant(3, 0.5);
        Eigen::VectorXd rs = Eigen::VectorXd::Constant(2, 0.5);
        REQUIRE(residue_forward(m, xs, rs).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("single-hidden-layer case matches manual arithmetic") {
        SurrogateModel tiny = fitted_model(net, true, ResidueSpec::custom({2}), 2);
        tiny.params.setZero();
        Eigen::MatrixXd W1 = Eigen::MatrixXd::Constant(2, 5, 0.1);
        Eigen::VectorXd b1 = Eigen::VectorXd::Zero(2);
        Eigen::MatrixXd W2 = Eigen::MatrixXd::Constant(3, 2, -0.5);
        Eigen::VectorXd b2 = Eigen::VectorXd::Constant(3, 0.2);
        set_layer(tiny.residue_shape, tiny.residue_params(), 0, W1, b1);
        set_layer(tiny.residue_shape, tiny.residue_params(), 1, W2, b2);
        Eigen::VectorXd xs(3), rs(2);
        xs << 0.1, 0.2, 0.3;
        rs << 0.4, 0.5;
        Eigen::VectorXd u(5);
        u << xs, rs;
        Eigen::VectorXd expected = W2 * (W1 * u + b1).array().tanh().matrix() + b2;
        REQUIRE((residue_forward(tiny, xs, rs) - expected).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("constraint layer evaluates the local mass balance", "[surrogate]") {
    Network net = junction_net();  // a,b -> c -> out
    SECTION("all zero") {
        Eigen::VectorXd qw = constraint_excess(net, Eigen::VectorXd::Zero(3),
                                               Eigen::VectorXd::Zero(4));
        REQUIRE(qw.cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("inflow exceeding outflow spills the difference") {
        Eigen::VectorXd q(3), r(4);
        q << 0.5, 0.0, 0.2;  // pa into c = 0.5, pc out of c = 0.2
        r << 0.0, 0.0, 0.1, 0.0;
        Eigen::VectorXd qw = constraint_excess(net, q, r);
        REQUIRE(qw[net.node_index("c")] == Catch::Approx(0.4));
    }
    SECTION("deficit clamps to zero") {
        Eigen::VectorXd q(3), r(4);
        q << 0.1, 0.0, 0.5;
        r << 0.0, 0.0, 0.0, 0.0;
        REQUIRE(constraint_excess(net, q, r)[net.node_index("c")] == 0.0);
    }
    SECTION("the outlet never spills") {
        Eigen::VectorXd q(3), r(4);
        q << 0.0, 0.0, 0.9;
        r << 0.0, 0.0, 0.0, 0.0;
        REQUIRE(constraint_excess(net, q, r)[net.outlet()] == 0.0);
    }
}

TEST_CASE("surrogate step with a near-identity prior keeps the state", "[surrogate]") {
    Network net = two_node_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::custom({4}), 2);
    const int d = m.state_dim();
    m.params.setZero();
    const double delta = 1e-6;  // tanh is linear to ~delta² here
    set_layer(m.prior_shape, m.prior_params(), 0, delta * Eigen::MatrixXd::Identity(d, d),
              Eigen::VectorXd::Zero(d));
    set_layer(m.prior_shape, m.prior_params(), 1, (1.0 / delta) * Eigen::MatrixXd::Identity(d, d),
              Eigen::VectorXd::Zero(d));

    Eigen::VectorXd x(d);
    x << 11.4, 10.2, 0.013;
    for (int i = 0; i < d; ++i)
        x[i] = std::clamp(x[i], m.scaler.state_min[i], m.scaler.state_max[i]);
    Eigen::VectorXd r(2);
    r << 0.015, 0.0;
    auto [next, qw] = surrogate_step(m, x, r);
    for (int i = 0; i < d; ++i) {
        if (m.scaler.state_inv[i] == 0.0) continue;
        REQUIRE(next[i] == Catch::Approx(x[i]).margin(1e-9));
    }
    Eigen::VectorXd expected_qw = constraint_excess(net, next.segment(2, 1), r);
    REQUIRE((qw - expected_qw).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constrained step never emits negative excess", "[surrogate]") {
    Network net = junction_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::from_name("S1"), 11, 150);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::VectorXd x(m.state_dim()), r(m.n_nodes);
        for (int i = 0; i < x.size(); ++i)
            x[i] = m.scaler.state_min[i] + noise(rng) * (m.scaler.state_range[i] + 0.1);
        for (int i = 0; i < r.size(); ++i) r[i] = std::abs(noise(rng)) * 0.05;
        auto [next, qw] = surrogate_step(m, x, r);
        REQUIRE(qw.minCoeff() >= 0.0);
    }
}

TEST_CASE("surrogate step matches an independent composed oracle", "[surrogate]") {
    Network net = two_node_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::custom({5}), 23);
    Eigen::VectorXd x(3), r(2);
    x << 11.8, 10.05, 0.02;
    r << 0.03, 0.0;

    // independent step-through: scale -> both networks -> add -> unscale -> Eq. 8
    auto scale = [&](double v, int i) {
        return m.scaler.state_inv[i] == 0.0
                   ? 0.0
                   : (v - m.scaler.state_min[i]) * m.scaler.state_inv[i];
    };
    Eigen::VectorXd xs(3), rs(2);
    for (int i = 0; i < 3; ++i) xs[i] = scale(x[i], i);
    for (int i = 0; i < 2; ++i)
        rs[i] = m.scaler.runoff_inv[i] == 0.0
                    ? 0.0
                    : (r[i] - m.scaler.runoff_min[i]) * m.scaler.runoff_inv[i];

    auto layer = [](const Eigen::MatrixXd& W, const Eigen::VectorXd& b, const Eigen::VectorXd& v,
                    bool squash) {
        Eigen::VectorXd z = W * v + b;
        return squash ? Eigen::VectorXd(z.array().tanh().matrix()) : z;
    };
    auto weights = [&](const MlpShape& s, const double* p, int l) {
        return Eigen::MatrixXd(
            Eigen::Map<const Eigen::MatrixXd>(p + s.weight_offset(l), s.dims[l + 1], s.dims[l]));
    };
    auto bias = [&](const MlpShape& s, const double* p, int l) {
        return Eigen::VectorXd(
            Eigen::Map<const Eigen::VectorXd>(p + s.bias_offset(l), s.dims[l + 1]));
    };
    Eigen::VectorXd hp = layer(weights(m.prior_shape, m.prior_params(), 0),
                               bias(m.prior_shape, m.prior_params(), 0), xs, true);
    Eigen::VectorXd yp = layer(weights(m.prior_shape, m.prior_params(), 1),
                               bias(m.prior_shape, m.prior_params(), 1), hp, false);
    Eigen::VectorXd u(5);
    u << xs, rs;
    Eigen::VectorXd hr = layer(weights(m.residue_shape, m.residue_params(), 0),
                               bias(m.residue_shape, m.residue_params(), 0), u, true);
    Eigen::VectorXd yr = layer(weights(m.residue_shape, m.residue_params(), 1),
                               bias(m.residue_shape, m.residue_params(), 1), hr, false);
    Eigen::VectorXd ys = yp + yr;
    Eigen::VectorXd expected(3);
    for (int i = 0; i < 3; ++i)
        expected[i] = m.scaler.state_min[i] + ys[i] * m.scaler.state_range[i];
    Eigen::VectorXd expected_qw = constraint_excess(net, expected.segment(2, 1), r);

    auto [next, qw] = surrogate_step(m, x, r);
    REQUIRE((next - expected).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((qw - expected_qw).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rollout semantics", "[surrogate]") {
    Network net = two_node_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::custom({4}), 31);
    RunoffSeries runoff = small_forcing(net, 10);
    Eigen::VectorXd x0(3);
    x0 << 11.2, 10.1, 0.01;

    SECTION("one step equals a single surrogate_step") {
        Trajectory t = rollout(m, x0, runoff, 1);
        auto [next, qw] = surrogate_step(m, x0, Eigen::VectorXd(runoff.rate.row(0)));
        REQUIRE((t.states.row(1).head(3).transpose() - next).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((t.states.row(1).tail(2).transpose() - qw).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("identity model holds the state constant") {
        m.params.setZero();
        const int d = 3;
        const double delta = 1e-6;
        set_layer(m.prior_shape, m.prior_params(), 0, delta * Eigen::MatrixXd::Identity(d, d),
                  Eigen::VectorXd::Zero(d));
        set_layer(m.prior_shape, m.prior_params(), 1,
                  (1.0 / delta) * Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d));
        Eigen::VectorXd x_in = x0;
        for (int i = 0; i < d; ++i)
            x_in[i] = std::clamp(x_in[i], m.scaler.state_min[i], m.scaler.state_max[i]);
        Trajectory t = rollout(m, x_in, runoff, 10);
        for (int i = 0; i < d; ++i) {
            if (m.scaler.state_inv[i] == 0.0) continue;
            REQUIRE(t.states(10, i) == Catch::Approx(x_in[i]).margin(1e-6));
        }
    }
    SECTION("divergence aborts with the step index") {
        m.params.setConstant(50.0);  // guaranteed blow-up
        try {
            rollout(m, x0, runoff, 10);
            FAIL("expected divergence");
        } catch (const NumericalError& e) {
            REQUIRE(std::string(e.what()).find("step") != std::string::npos);
        }
        RolloutOptions opt;
        opt.throw_on_divergence = false;
        Trajectory t = rollout(m, x0, runoff, 10, opt);
        REQUIRE(t.diverged_at >= 1);
    }
    SECTION("steps beyond the runoff length are rejected") {
        REQUIRE_THROWS_AS(rollout(m, x0, runoff, 11), NumericalError);
    }
}

TEST_CASE("checkpoints round trip and reject version mismatches", "[surrogate]") {
    Network net = junction_net();
    SurrogateModel m = fitted_model(net, true, ResidueSpec::from_name("S1"), 77, 120);
    m.dataset_hash = "cafe1234cafe1234";
    auto dir = std::filesystem::temp_directory_path() / "drainsim_ckpt";
    std::filesystem::create_directories(dir);
    auto path = (dir / "checkpoint.json").string();
    save_checkpoint(m, path);
    SurrogateModel back = load_checkpoint(path);

    REQUIRE(back.constrained == m.constrained);
    REQUIRE(back.node_ids == m.node_ids);
    REQUIRE(back.link_ids == m.link_ids);
    REQUIRE(back.spec.name == "S1");
    REQUIRE(back.dataset_hash == m.dataset_hash);
    REQUIRE((back.params - m.params).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((back.scaler.state_min - m.scaler.state_min).cwiseAbs().maxCoeff() == 0.0);

    // identical behavior after reload
    Eigen::VectorXd x(m.state_dim()), r(m.n_nodes);
    x.setConstant(10.5);
    r.setConstant(0.01);
    auto [n1, q1] = surrogate_step(m, x, r);
    auto [n2, q2] = surrogate_step(back, x, r);
    REQUIRE((n1 - n2).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((q1 - q2).cwiseAbs().maxCoeff() == 0.0);

    // save twice -> byte identical
    auto path2 = (dir / "checkpoint2.json").string();
    save_checkpoint(back, path2);
    REQUIRE(slurp_file(path) == slurp_file(path2));

    SECTION("future versions are rejected") {
        nlohmann::json doc = nlohmann::json::parse(slurp_file(path));
        doc["version"] = 999;
        write_file(path, doc.dump(1));
        REQUIRE_THROWS_WITH(load_checkpoint(path),
                            Catch::Matchers::ContainsSubstring("version mismatch"));
    }
}

TEST_CASE("constrained layouts drop the excess states", "[surrogate]") {
    Network net = junction_net();
    SurrogateModel with = make_surrogate(net, false, ResidueSpec::from_name("S1"), 1);
    SurrogateModel without = make_surrogate(net, true, ResidueSpec::from_name("S1"), 1);
    REQUIRE(with.state_dim() == 2 * 4 + 3);
    REQUIRE(without.state_dim() == 4 + 3);
    REQUIRE(with.state_dim() - without.state_dim() == net.node_count());
}

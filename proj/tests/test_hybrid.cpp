#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "eqdisc/hybrid.hpp"

using namespace eqdisc;
using Catch::Approx;

namespace {

HybridField make_lv_hybrid(const MLPSpec& net, const ParamVector& params) {
    HybridField f;
    f.system = make_system(SystemName::LotkaVolterra3);
    f.unknown = {1};
    f.net = net;
    f.params = params;
    return f;
}

Trajectory lv_truth(double t1 = 2.0) {
    SystemSpec lv = make_system(SystemName::LotkaVolterra3);
    return integrate([&](const Vec& y) { return lv.rhs(y); }, lv.initial_condition, {0.0, t1}, 0.05);
}

} // namespace

TEST_CASE("hybrid rhs composes known equations and network outputs", "[hybrid]") {
    MLPSpec net{3, {4}, 1};
    ParamVector zeros(net.param_count(), 0.0);
    HybridField f = make_lv_hybrid(net, zeros);

    Vec d = f.rhs({0.5, 1.0, 2.0});
    CHECK(d[0] == Approx(0.0).margin(1e-15));
    CHECK(d[1] == 0.0); // zero network
    CHECK(d[2] == Approx(0.0).margin(1e-15));

    // with arbitrary parameters, known rows match the true system and the
    // unknown row matches the raw network output
    ParamVector p = mlp_init_params(net, 3);
    f.params = p;
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int rep = 0; rep < 50; ++rep) {
        Vec s = {u(rng), u(rng), u(rng)};
        Vec hd = f.rhs(s);
        Vec full = f.system.rhs(s);
        Vec net_out = mlp_forward(net, p, s);
        CHECK(hd[0] == full[0]);
        CHECK(hd[2] == full[2]);
        CHECK(hd[1] == net_out[0]);
    }
}

TEST_CASE("hybrid rhs for the 5D system with two unknown rows", "[hybrid]") {
    MLPSpec net{5, {4}, 2};
    HybridField f;
    f.system = make_system(SystemName::Lorenz5);
    f.unknown = {0, 1};
    f.net = net;
    f.params.assign(net.param_count(), 0.0);

    Vec d = f.rhs(f.system.initial_condition);
    CHECK(d[0] == 0.0);
    CHECK(d[1] == 0.0);
    CHECK(d[2] == Approx(-132.8));
    CHECK(d[3] == Approx(-208.0 - 7.6 / 3.0));
    CHECK(d[4] == Approx(-6.4 - 16.0 / 3.0));
}

TEST_CASE("masked mse", "[hybrid]") {
    Trajectory truth;
    truth.dim = 2;
    truth.times = {0.0, 1.0};
    truth.states = {{1.0, 5.0}, {2.0, 6.0}};

    Trajectory pred = truth;
    ObservationMask mask{{true, false}};

    SECTION("identical trajectories give zero") { CHECK(masked_mse(pred, truth, mask) == 0.0); }

    SECTION("single observed channel, two samples") {
        pred.states[1][0] = 4.0; // truth 2, pred 4 -> (0 + 4) / 2
        CHECK(masked_mse(pred, truth, mask) == Approx(2.0));
    }

    SECTION("masked-out channels do not contribute") {
        double base = masked_mse(pred, truth, mask);
        pred.states[0][1] = 100.0;
        pred.states[1][1] = -42.0;
        CHECK(masked_mse(pred, truth, mask) == base);
    }

    SECTION("shape mismatch is rejected") {
        Trajectory bad = truth;
        bad.states.pop_back();
        bad.times.pop_back();
        CHECK_THROWS_AS(masked_mse(bad, truth, mask), invalid_input_error);
    }
}

TEST_CASE("loss is zero when the hybrid generated the truth", "[hybrid]") {
    MLPSpec net{3, {4}, 1};
    HybridField f = make_lv_hybrid(net, mlp_init_params(net, 5));

    SolverConfig solver;
    solver.fixed_step = 0.05;
    Trajectory self =
        integrate([&](const Vec& y) { return f.rhs(y); }, f.system.initial_condition, {0.0, 0.5},
                  0.05, solver);

    ObservationMask mask{{true, false, true}};
    LossGrad lg = loss_and_grad(f, self, mask, {0.0, 0.5}, solver);
    CHECK(lg.loss == 0.0);
    for (double x : lg.grad) CHECK(x == 0.0);
}

TEST_CASE("loss gradient matches central finite differences", "[hybrid]") {
    Trajectory truth = lv_truth(0.5);
    ObservationMask mask{{true, false, true}};
    SolverConfig solver;
    solver.fixed_step = 0.05;

    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
        MLPSpec net{3, {4}, 1};
        ParamVector p = mlp_init_params(net, seed);
        HybridField f = make_lv_hybrid(net, p);

        LossGrad lg = loss_and_grad(f, truth, mask, {0.0, 0.25}, solver); // 5 steps
        REQUIRE(std::isfinite(lg.loss));

        double gmax = 0.0;
        for (double x : lg.grad) gmax = std::max(gmax, std::abs(x));

        auto loss_at = [&](const ParamVector& params) {
            HybridField g = f;
            g.params = params;
            return loss_and_grad(g, truth, mask, {0.0, 0.25}, solver).loss;
        };
        for (std::size_t i = 0; i < p.size(); i += 3) {
            const double eps = 1e-6;
            ParamVector pp = p, pm = p;
            pp[i] += eps;
            pm[i] -= eps;
            double fd = (loss_at(pp) - loss_at(pm)) / (2 * eps);
            double denom = std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-4 * gmax});
            CHECK(std::abs(lg.grad[i] - fd) / denom < 1e-4);
        }
    }
}

TEST_CASE("loss gradient matches finite differences on the 5D system", "[hybrid]") {
    SystemSpec lorenz = make_system(SystemName::Lorenz5);
    Trajectory truth = integrate([&](const Vec& y) { return lorenz.rhs(y); },
                                 lorenz.initial_condition, {0.0, 0.05}, 0.01);
    ObservationMask mask{{false, false, true, true, true}};
    SolverConfig solver;
    solver.fixed_step = 0.01;

    MLPSpec net{5, {4}, 2};
    ParamVector p = mlp_init_params(net, 9);
    HybridField f;
    f.system = lorenz;
    f.unknown = {0, 1};
    f.net = net;
    f.params = p;

    LossGrad lg = loss_and_grad(f, truth, mask, {0.0, 0.05}, solver);
    double gmax = 0.0;
    for (double x : lg.grad) gmax = std::max(gmax, std::abs(x));

    auto loss_at = [&](const ParamVector& params) {
        HybridField g = f;
        g.params = params;
        return loss_and_grad(g, truth, mask, {0.0, 0.05}, solver).loss;
    };
    for (std::size_t i = 0; i < p.size(); i += 5) {
        const double eps = 1e-6;
        ParamVector pp = p, pm = p;
        pp[i] += eps;
        pm[i] -= eps;
        double fd = (loss_at(pp) - loss_at(pm)) / (2 * eps);
        double denom = std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-4 * gmax});
        CHECK(std::abs(lg.grad[i] - fd) / denom < 1e-4);
    }
}

TEST_CASE("loss ignores perturbations of unobserved truth channels", "[hybrid]") {
    Trajectory truth = lv_truth(0.5);
    ObservationMask mask{{true, false, true}};
    SolverConfig solver;
    solver.fixed_step = 0.05;

    MLPSpec net{3, {4}, 1};
    HybridField f = make_lv_hybrid(net, mlp_init_params(net, 2));
    double base = loss_and_grad(f, truth, mask, {0.05, 0.5}, solver).loss;

    Trajectory perturbed = truth;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> noise(0.0, 10.0);
    for (std::size_t i = 1; i < perturbed.size(); ++i) perturbed.states[i][1] += noise(rng);
    // (window starts at 0.05 so the solve's initial state is the window-start
    // sample; the unobserved channel there is part of the initial condition)
    perturbed.states[1][1] = truth.states[1][1];
    CHECK(loss_and_grad(f, perturbed, mask, {0.05, 0.5}, solver).loss == base);
}

TEST_CASE("empty unknown set reproduces the plain solve bitwise", "[hybrid]") {
    HybridField f;
    f.system = make_system(SystemName::LotkaVolterra3);
    f.unknown = {};

    SolverConfig solver;
    solver.fixed_step = 0.05;
    Trajectory hybrid_traj = integrate([&](const Vec& y) { return f.rhs(y); },
                                       f.system.initial_condition, {0.0, 2.0}, 0.05, solver);
    Trajectory plain_traj = integrate([&](const Vec& y) { return f.system.rhs(y); },
                                      f.system.initial_condition, {0.0, 2.0}, 0.05, solver);
    REQUIRE(hybrid_traj.size() == plain_traj.size());
    for (std::size_t i = 0; i < plain_traj.size(); ++i)
        CHECK(hybrid_traj.states[i] == plain_traj.states[i]);
}

TEST_CASE("gradient is bitwise deterministic", "[hybrid]") {
    Trajectory truth = lv_truth(1.0);
    ObservationMask mask{{true, false, true}};
    SolverConfig solver;
    solver.fixed_step = 0.05;

    MLPSpec net{3, {8}, 1};
    HybridField f = make_lv_hybrid(net, mlp_init_params(net, 77));
    LossGrad a = loss_and_grad(f, truth, mask, {0.0, 1.0}, solver);
    LossGrad b = loss_and_grad(f, truth, mask, {0.0, 1.0}, solver);
    CHECK(a.loss == b.loss);
    CHECK(a.grad == b.grad);
}

TEST_CASE("divergent forward solve reports the infinity sentinel", "[hybrid]") {
    Trajectory truth = lv_truth(2.0);
    ObservationMask mask{{true, false, true}};
    SolverConfig solver;
    solver.fixed_step = 0.05;

    MLPSpec net{3, {4}, 1};
    ParamVector p(net.param_count(), 0.0);
    p.back() = 1e4; // output bias: the surrogate derivative is huge everywhere
    HybridField f = make_lv_hybrid(net, p);

    LossGrad lg = loss_and_grad(f, truth, mask, {0.0, 2.0}, solver);
    CHECK(lg.diverged);
    CHECK(std::isinf(lg.loss));
    for (double x : lg.grad) CHECK(x == 0.0);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "eqdisc/config.hpp"
#include "eqdisc/experiment.hpp"

using namespace eqdisc;
using Catch::Approx;

namespace {

ExprPtr lv_true_unknown_expr() {
    // -y + x*y - y*z
    return make_binary(
        BinOp::Add,
        make_binary(BinOp::Sub, make_binary(BinOp::Mul, make_var(0), make_var(1)),
                    make_binary(BinOp::Mul, make_var(1), make_var(2))),
        make_binary(BinOp::Mul, make_const(-1.0), make_var(1)));
}

} // namespace

TEST_CASE("dataset generation matches the reference setups", "[experiment]") {
    SECTION("predator-prey preset: 401 samples of dimension 3, periodic") {
        ExperimentConfig cfg = make_preset("lv3-paper");
        Trajectory data = generate_dataset(cfg);
        REQUIRE(data.size() == 401);
        REQUIRE(data.dim == 3);
        bool returned = false;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (data.times[i] > 3.0 && std::abs(data.states[i][0] - 0.5) < 0.025) returned = true;
        CHECK(returned);
    }
    SECTION("convection preset: 601 samples of dimension 5") {
        ExperimentConfig cfg = make_preset("lorenz5-paper");
        Trajectory data = generate_dataset(cfg);
        CHECK(data.size() == 601);
        CHECK(data.dim == 5);
    }
    SECTION("zero-length span yields only the initial condition") {
        ExperimentConfig cfg = make_preset("lv3-paper");
        cfg.sim_t1 = cfg.sim_t0;
        Trajectory data = generate_dataset(cfg);
        REQUIRE(data.size() == 1);
        CHECK(data.states[0] == cfg.system.initial_condition);
    }
}

TEST_CASE("noise injection", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-paper");
    Trajectory clean = generate_dataset(cfg);

    SECTION("zero percent is bitwise identity") {
        Trajectory same = add_noise(clean, 0.0, 7);
        for (std::size_t i = 0; i < clean.size(); ++i) CHECK(same.states[i] == clean.states[i]);
    }

    SECTION("achieved noise std is calibrated per channel") {
        Trajectory noisy = add_noise(clean, 2.0, 7);
        for (std::size_t c = 0; c < clean.dim; ++c) {
            double mean = 0.0, var = 0.0;
            for (const auto& s : clean.states) mean += s[c];
            mean /= static_cast<double>(clean.size());
            for (const auto& s : clean.states) var += (s[c] - mean) * (s[c] - mean);
            var /= static_cast<double>(clean.size());
            double want = 0.02 * std::sqrt(var);

            double got_var = 0.0;
            for (std::size_t i = 0; i < clean.size(); ++i) {
                double d = noisy.states[i][c] - clean.states[i][c];
                got_var += d * d;
            }
            double got = std::sqrt(got_var / static_cast<double>(clean.size()));
            CHECK(got == Approx(want).epsilon(0.10));
        }
    }

    SECTION("different seeds give different realizations, same seed repeats") {
        Trajectory a = add_noise(clean, 2.0, 1);
        Trajectory b = add_noise(clean, 2.0, 2);
        Trajectory c = add_noise(clean, 2.0, 1);
        CHECK(a.states != b.states);
        CHECK(a.states == c.states);
    }
}

TEST_CASE("single-member ensemble averaging is the member itself", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    Trajectory data = generate_dataset(cfg);
    EnsembleResult res = train_ensemble(cfg, data, 2);
    REQUIRE(res.included_members.size() == 1);
    REQUIRE(res.per_member_targets.size() == 1);
    for (std::size_t i = 0; i < res.avg_targets.size(); ++i) {
        CHECK(res.avg_inputs[i] == res.per_member_inputs[0][i]);
        CHECK(res.avg_targets[i] == res.per_member_targets[0][i]);
    }
}

TEST_CASE("ensemble averaging is the exact arithmetic mean", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    cfg.ensemble_size = 3;
    Trajectory data = generate_dataset(cfg);
    EnsembleResult res = train_ensemble(cfg, data, 2);
    REQUIRE(res.included_members.size() == 3);
    for (std::size_t i = 0; i < res.avg_targets.size(); ++i) {
        double plain = (res.per_member_targets[0][i][0] + res.per_member_targets[1][i][0] +
                        res.per_member_targets[2][i][0]) /
                       3.0;
        CHECK(res.avg_targets[i][0] == Approx(plain).margin(1e-12));
    }
}

TEST_CASE("substituting the true expression reproduces the ground truth", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-paper");
    Trajectory truth = generate_dataset(cfg);
    Trajectory extrap = substitute_and_extrapolate(cfg, {lv_true_unknown_expr()}, cfg.sim_t1);
    REQUIRE(extrap.size() == truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i)
        for (std::size_t c = 0; c < truth.dim; ++c)
            CHECK(extrap.states[i][c] == Approx(truth.states[i][c]).margin(2e-3));
}

TEST_CASE("sliding rmse", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-paper");
    Trajectory truth = generate_dataset(cfg);

    SECTION("a trajectory against itself is identically zero") {
        auto series = sliding_rmse(truth, truth, 20, {0, 1, 2});
        CHECK(series.size() == truth.size() - 20 + 1);
        for (const auto& p : series)
            for (double r : p.rmse) CHECK(r == 0.0);
    }

    SECTION("a constant offset on one channel shows up as exactly that offset") {
        Trajectory shifted = truth;
        for (auto& s : shifted.states) s[1] += 0.75;
        auto series = sliding_rmse(shifted, truth, 20, {1});
        for (const auto& p : series) CHECK(p.rmse[0] == Approx(0.75).margin(1e-12));
    }

    SECTION("window bounds are validated") {
        CHECK_THROWS_AS(sliding_rmse(truth, truth, 0, {0}), invalid_input_error);
        CHECK_THROWS_AS(sliding_rmse(truth, truth, truth.size() + 1, {0}), invalid_input_error);
    }
}

TEST_CASE("recovery runs end to end on the smoke preset and is deterministic", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    cfg.schedule.adam_iters = 60;
    cfg.schedule.lbfgs_iters = 40;
    cfg.sr.n_populations = 8;
    cfg.sr.iterations = 20;
    Trajectory data = generate_dataset(cfg);

    auto run = [&] {
        EnsembleResult res = train_ensemble(cfg, data, 2);
        auto recs = recover_equations(cfg, res, 2);
        REQUIRE(recs.size() == 1);
        return recs[0].selected.canonical;
    };
    std::string first = run();
    std::string second = run();
    CHECK(first == second);
    CHECK_FALSE(first.empty());
}

TEST_CASE("degenerate all-zero targets select the zero constant", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    Trajectory data = generate_dataset(cfg);
    EnsembleResult res = train_ensemble(cfg, data, 2);
    // overwrite the targets with exact zeros
    for (auto& row : res.avg_targets) row.assign(row.size(), 0.0);
    auto recs = recover_equations(cfg, res, 2);
    CHECK(recs[0].selected.complexity == 1);
    CHECK(recs[0].selected.expr->kind == ExprNode::Kind::Const);
    CHECK(std::abs(recs[0].selected.expr->value) < 1e-9);
}

TEST_CASE("identical members give zero coefficient spread", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    cfg.ensemble_size = 2;
    cfg.sr.n_populations = 8;
    cfg.sr.iterations = 15;
    Trajectory data = generate_dataset(cfg);

    // duplicate one member's data by hand
    Trajectory window = integrate([&](const Vec& y) { return cfg.system.rhs(y); },
                                  cfg.system.initial_condition, cfg.train_window, cfg.sample_dt,
                                  cfg.train_solver());
    std::vector<Vec> targets(window.size());
    for (std::size_t i = 0; i < window.size(); ++i) {
        const Vec& s = window.states[i];
        targets[i] = {-s[1] + s[0] * s[1] - s[1] * s[2]};
    }
    EnsembleResult res;
    res.members.resize(2);
    res.included_members = {0, 1};
    res.per_member_inputs = {window.states, window.states};
    res.per_member_targets = {targets, targets};

    auto stats = coefficient_stats(cfg, res, 2);
    REQUIRE(stats.size() == 1);
    CHECK(stats[0].member_equations[0] == stats[0].member_equations[1]);
    for (const auto& [term, ms] : stats[0].stats) CHECK(ms.second == 0.0);
    // and the means carry the planted structure
    CHECK(stats[0].stats.at("y").first == Approx(-1.0).margin(1e-3));
    CHECK(stats[0].stats.at("x*y").first == Approx(1.0).margin(1e-3));
    CHECK(stats[0].stats.at("y*z").first == Approx(-1.0).margin(1e-3));
}

TEST_CASE("training range study runs with truncation handling", "[experiment]") {
    ExperimentConfig cfg = make_preset("lv3-smoke");
    cfg.schedule.adam_iters = 30;
    cfg.schedule.lbfgs_iters = 10;
    Trajectory data = generate_dataset(cfg);
    auto study = training_range_study(cfg, {1.0, 2.0}, 6.0, data, 2);
    REQUIRE(study.size() == 2);
    for (const auto& entry : study) {
        CHECK(entry.extrapolation.size() >= 1);
        if (!entry.truncated) CHECK(entry.extrapolation.times.back() == Approx(6.0));
        if (entry.extrapolation.size() >= 20) CHECK_FALSE(entry.rmse.empty());
    }
    // identical ranges reproduce identical series
    auto again = training_range_study(cfg, {1.0, 2.0}, 6.0, data, 1);
    for (std::size_t r = 0; r < study.size(); ++r) {
        REQUIRE(again[r].extrapolation.size() == study[r].extrapolation.size());
        for (std::size_t i = 0; i < study[r].extrapolation.size(); ++i)
            CHECK(again[r].extrapolation.states[i] == study[r].extrapolation.states[i]);
    }
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "eqdisc/optimize.hpp"

using namespace eqdisc;
using Catch::Approx;

namespace {

Objective quadratic_norm2() {
    return [](const std::vector<double>& p) {
        double f = 0.0;
        std::vector<double> g(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            f += p[i] * p[i];
            g[i] = 2.0 * p[i];
        }
        return std::make_pair(f, g);
    };
}

// f(x) = 1/2 x^T A x with A = D + mu I from a fixed diagonal, SPD
Objective quadratic_spd(const std::vector<double>& diag) {
    return [diag](const std::vector<double>& p) {
        double f = 0.0;
        std::vector<double> g(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            // couple neighbouring coordinates so the Hessian is not diagonal
            double coupled = p[i] + 0.3 * p[(i + 1) % p.size()];
            f += 0.5 * diag[i] * coupled * coupled;
        }
        // analytic gradient of the coupled form
        for (std::size_t i = 0; i < p.size(); ++i) {
            double coupled = p[i] + 0.3 * p[(i + 1) % p.size()];
            g[i] += diag[i] * coupled;
            std::size_t prev = (i + p.size() - 1) % p.size();
            double coupled_prev = p[prev] + 0.3 * p[i];
            g[i] += 0.3 * diag[prev] * coupled_prev;
        }
        return std::make_pair(f, g);
    };
}

Objective rosenbrock() {
    return [](const std::vector<double>& p) {
        double x = p[0], y = p[1];
        double f = 100.0 * (y - x * x) * (y - x * x) + (1.0 - x) * (1.0 - x);
        std::vector<double> g(2);
        g[0] = -400.0 * x * (y - x * x) - 2.0 * (1.0 - x);
        g[1] = 200.0 * (y - x * x);
        return std::make_pair(f, g);
    };
}

} // namespace

TEST_CASE("first adam update moves each coordinate by about lr", "[optimize]") {
    auto result = adam_run(quadratic_norm2(), std::vector<double>(8, 1.0), 0.01, 1);
    for (double p : result.params) CHECK(p == Approx(1.0 - 0.01).margin(1e-6));
}

TEST_CASE("adam with zero gradient leaves parameters unchanged", "[optimize]") {
    Objective flat = [](const std::vector<double>& p) {
        return std::make_pair(1.0, std::vector<double>(p.size(), 0.0));
    };
    std::vector<double> p0 = {2.0, -3.0, 0.5};
    auto result = adam_run(flat, p0, 0.01, 100);
    CHECK(result.params == p0);
    CHECK(result.records.size() == 100);
}

TEST_CASE("adam drives a convex quadratic far down", "[optimize]") {
    std::vector<double> p0(10);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (double& x : p0) x = u(rng);
    auto obj = quadratic_norm2();
    double f0 = obj(p0).first;
    auto result = adam_run(obj, p0, 0.01, 1000);
    CHECK(result.final_loss < 1e-6 * f0);
}

TEST_CASE("adam aborts on a non-finite start", "[optimize]") {
    Objective bad = [](const std::vector<double>& p) {
        return std::make_pair(std::numeric_limits<double>::infinity(),
                              std::vector<double>(p.size(), 0.0));
    };
    CHECK_THROWS_AS(adam_run(bad, {1.0}, 0.01, 10), numeric_error);
}

TEST_CASE("lbfgs solves a quadratic to machine precision in dim+2 iterations", "[optimize]") {
    const std::size_t dim = 6;
    std::vector<double> diag = {1.0, 3.5, 0.7, 9.0, 2.2, 5.1};
    auto obj = quadratic_spd(diag);
    std::vector<double> p0(dim, 1.0);
    auto result = lbfgs_run(obj, p0, dim + 2, 10);
    CHECK(result.final_loss < 1e-18);
}

TEST_CASE("lbfgs at a stationary point terminates immediately", "[optimize]") {
    std::vector<double> p0(4, 0.0);
    auto result = lbfgs_run(quadratic_norm2(), p0, 100, 10);
    CHECK(result.params == p0);
    CHECK(result.records.empty());
}

TEST_CASE("lbfgs solves rosenbrock", "[optimize]") {
    auto result = lbfgs_run(rosenbrock(), {-1.2, 1.0}, 1000, 10);
    CHECK(result.final_loss < 1e-10);
    CHECK(result.params[0] == Approx(1.0).margin(1e-4));
    CHECK(result.params[1] == Approx(1.0).margin(1e-4));
}

TEST_CASE("lbfgs accepted losses never increase", "[optimize]") {
    auto result = lbfgs_run(rosenbrock(), {-1.2, 1.0}, 200, 10);
    for (std::size_t i = 1; i < result.records.size(); ++i)
        CHECK(result.records[i].loss <= result.records[i - 1].loss);
}

TEST_CASE("lbfgs never returns a point worse than the start", "[optimize]") {
    // objective with an infeasible cliff: +inf outside the unit ball
    Objective cliff = [](const std::vector<double>& p) {
        double n2 = 0.0;
        for (double x : p) n2 += x * x;
        if (n2 > 25.0)
            return std::make_pair(std::numeric_limits<double>::infinity(),
                                  std::vector<double>(p.size(), 0.0));
        std::vector<double> g(p.size());
        double f = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            f += std::cos(3.0 * p[i]) + 0.1 * p[i] * p[i];
            g[i] = -3.0 * std::sin(3.0 * p[i]) + 0.2 * p[i];
        }
        return std::make_pair(f, g);
    };
    std::vector<double> p0 = {0.4, -0.8};
    double f0 = cliff(p0).first;
    auto result = lbfgs_run(cliff, p0, 50, 10);
    CHECK(result.final_loss <= f0);
}

TEST_CASE("two-stage schedule composes adam then lbfgs", "[optimize]") {
    std::vector<double> p0(10, 1.5);
    auto obj = quadratic_norm2();

    SECTION("zero lbfgs iterations is adam alone") {
        TrainSchedule s;
        s.adam_iters = 50;
        s.lbfgs_iters = 0;
        auto via_train = train(obj, p0, s);
        auto via_adam = adam_run(obj, p0, s.adam_lr, s.adam_iters);
        CHECK(via_train.params == via_adam.params);
        CHECK(via_train.records.size() == 50);
    }

    SECTION("composition improves on adam and telemetry concatenates") {
        TrainSchedule s;
        s.adam_iters = 20;
        s.lbfgs_iters = 30;
        auto result = train(obj, p0, s);
        auto adam_only = adam_run(obj, p0, s.adam_lr, s.adam_iters);
        CHECK(result.final_loss <= adam_only.final_loss);

        std::size_t adam_records = 0, lbfgs_records = 0;
        for (const auto& r : result.records) (r.stage == "adam" ? adam_records : lbfgs_records)++;
        CHECK(adam_records == 20);
        CHECK(lbfgs_records == result.records.size() - 20);
    }
}

TEST_CASE("adam is deterministic", "[optimize]") {
    std::vector<double> p0(10, 1.5);
    auto a = adam_run(quadratic_norm2(), p0, 0.01, 200);
    auto b = adam_run(quadratic_norm2(), p0, 0.01, 200);
    CHECK(a.params == b.params);
}

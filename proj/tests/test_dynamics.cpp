#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "eqdisc/dynamics.hpp"

using namespace eqdisc;
using Catch::Approx;

namespace {
ParamMap lv_unit_params() {
    return {{"a", 1.0}, {"b", 1.0}, {"c", 1.0}, {"d", 1.0}, {"e", 1.0}, {"f", 1.0}, {"g", 1.0}};
}
ParamMap lorenz_params() { return {{"sigma", 10.0}, {"rho", 35.0}, {"beta", 8.0 / 3.0}}; }
} // namespace

TEST_CASE("lv3_rhs hand evaluations", "[dynamics]") {
    auto p = lv_unit_params();

    Vec d = lv3_rhs({0.5, 1.0, 2.0}, p);
    CHECK(d[0] == Approx(0.0).margin(1e-15));
    CHECK(d[1] == Approx(-2.5));
    CHECK(d[2] == Approx(0.0).margin(1e-15));

    Vec origin = lv3_rhs({0.0, 0.0, 0.0}, p);
    CHECK(origin == Vec{0.0, 0.0, 0.0});

    Vec d2 = lv3_rhs({1.0, 0.0, 1.0}, p);
    CHECK(d2[0] == Approx(1.0));
    CHECK(d2[1] == Approx(0.0).margin(1e-15));
    CHECK(d2[2] == Approx(-1.0));
}

TEST_CASE("lv3_rhs input validation", "[dynamics]") {
    auto p = lv_unit_params();
    CHECK_THROWS_AS(lv3_rhs({1.0, 2.0}, p), invalid_input_error);
    CHECK_THROWS_AS(lv3_rhs({1.0, std::nan(""), 0.0}, p), numeric_error);
}

TEST_CASE("lorenz5_rhs hand evaluations", "[dynamics]") {
    auto p = lorenz_params();

    Vec d = lorenz5_rhs({-8.0, 8.0, 27.0, 0.4, 0.5}, p);
    CHECK(d[0] == Approx(160.0));
    CHECK(d[1] == Approx(-72.0));
    CHECK(d[2] == Approx(-132.8));
    CHECK(d[3] == Approx(-208.0 - 7.6 / 3.0)); // -210.53333...
    CHECK(d[4] == Approx(-6.4 - 16.0 / 3.0));  // -11.73333...

    CHECK(lorenz5_rhs({0, 0, 0, 0, 0}, p) == Vec{0, 0, 0, 0, 0});

    Vec d2 = lorenz5_rhs({1.0, 1.0, 0.0, 0.0, 0.0}, p);
    CHECK(d2[0] == Approx(0.0).margin(1e-15));
    CHECK(d2[1] == Approx(34.0));
    CHECK(d2[2] == Approx(1.0));
    CHECK(d2[3] == Approx(0.0).margin(1e-15));
    CHECK(d2[4] == Approx(0.0).margin(1e-15));
}

TEST_CASE("partial_rhs restriction", "[dynamics]") {
    SystemSpec lv = make_system(SystemName::LotkaVolterra3);
    auto part = partial_rhs(lv, {0.5, 1.0, 2.0}, {1});
    REQUIRE(part.size() == 3);
    CHECK(part[0].has_value());
    CHECK_FALSE(part[1].has_value());
    CHECK(part[2].has_value());
    CHECK(*part[0] == Approx(0.0).margin(1e-15));
    CHECK(*part[2] == Approx(0.0).margin(1e-15));

    SystemSpec lorenz = make_system(SystemName::Lorenz5);
    auto lp = partial_rhs(lorenz, lorenz.initial_condition, {0, 1});
    CHECK_FALSE(lp[0].has_value());
    CHECK_FALSE(lp[1].has_value());
    CHECK(*lp[2] == Approx(-132.8));
    CHECK(*lp[3] == Approx(-208.0 - 7.6 / 3.0));
    CHECK(*lp[4] == Approx(-6.4 - 16.0 / 3.0));

    CHECK_THROWS_AS(partial_rhs(lv, {0.5, 1.0, 2.0}, {0, 1, 2}), invalid_config_error);
}

TEST_CASE("partial_rhs equals restriction of full rhs on random states", "[dynamics]") {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    SystemSpec lorenz = make_system(SystemName::Lorenz5);
    for (int rep = 0; rep < 200; ++rep) {
        Vec s(5);
        for (double& x : s) x = u(rng);
        Vec full = lorenz.rhs(s);
        auto part = partial_rhs(lorenz, s, {0, 1});
        for (std::size_t i = 2; i < 5; ++i) CHECK(*part[i] == full[i]);
    }
}

TEST_CASE("rhs functions are deterministic", "[dynamics]") {
    Vec s = {0.3, -1.2, 2.7};
    auto p = lv_unit_params();
    Vec first = lv3_rhs(s, p);
    for (int i = 0; i < 10; ++i) CHECK(lv3_rhs(s, p) == first);
}

TEST_CASE("system registry provides paper defaults", "[dynamics]") {
    SystemSpec lv = make_system(SystemName::LotkaVolterra3);
    CHECK(lv.dim == 3);
    CHECK(lv.params.at("a") == 1.0);
    CHECK(lv.initial_condition == Vec{0.5, 1.0, 2.0});
    CHECK_NOTHROW(lv.validate());

    SystemSpec lorenz = make_system(SystemName::Lorenz5);
    CHECK(lorenz.dim == 5);
    CHECK(lorenz.params.at("beta") == 8.0 / 3.0);
    CHECK(lorenz.initial_condition == Vec{-8.0, 8.0, 27.0, 0.4, 0.5});

    SystemSpec bad = lv;
    bad.params.erase("g");
    CHECK_THROWS_AS(bad.validate(), invalid_config_error);
    bad = lv;
    bad.params["extra"] = 2.0;
    CHECK_THROWS_AS(bad.validate(), invalid_config_error);
}

TEST_CASE("vjp matches finite differences of the rhs", "[dynamics]") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (auto name : {SystemName::LotkaVolterra3, SystemName::Lorenz5}) {
        SystemSpec spec = make_system(name);
        for (int rep = 0; rep < 20; ++rep) {
            Vec s(spec.dim), w(spec.dim);
            for (double& x : s) x = u(rng);
            for (double& x : w) x = u(rng);
            Vec analytic = spec.vjp(s, w);
            for (std::size_t i = 0; i < spec.dim; ++i) {
                const double eps = 1e-6;
                Vec sp = s, sm = s;
                sp[i] += eps;
                sm[i] -= eps;
                Vec fp = spec.rhs(sp), fm = spec.rhs(sm);
                double fd = 0.0;
                for (std::size_t r = 0; r < spec.dim; ++r)
                    fd += w[r] * (fp[r] - fm[r]) / (2.0 * eps);
                CHECK(analytic[i] == Approx(fd).margin(1e-6));
            }
        }
    }
}

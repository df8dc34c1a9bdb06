#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "eqdisc/config.hpp"
#include "eqdisc/io.hpp"

using namespace eqdisc;

TEST_CASE("config round-trips through json", "[config]") {
    for (const char* name : {"lv3-paper", "lorenz5-paper", "lv3-smoke"}) {
        ExperimentConfig cfg = make_preset(name);
        nlohmann::json j = config_to_json(cfg);
        ExperimentConfig back = config_from_json(j);
        CHECK(config_canonical_dump(back) == config_canonical_dump(cfg));
    }
}

TEST_CASE("beta parameter survives serialization at full precision", "[config]") {
    ExperimentConfig cfg = make_preset("lorenz5-paper");
    REQUIRE(cfg.system.params.at("beta") == 8.0 / 3.0);
    nlohmann::json j = nlohmann::json::parse(config_to_json(cfg).dump());
    ExperimentConfig back = config_from_json(j);
    CHECK(back.system.params.at("beta") == 8.0 / 3.0);
}

TEST_CASE("missing fields are reported by name", "[config]") {
    nlohmann::json j = config_to_json(make_preset("lv3-paper"));
    j.erase("ensemble_size");
    try {
        config_from_json(j);
        FAIL("expected config_error");
    } catch (const config_error& e) {
        CHECK(e.field == "ensemble_size");
    }

    nlohmann::json j2 = config_to_json(make_preset("lv3-paper"));
    j2["optimizer"].erase("adam_lr");
    try {
        config_from_json(j2);
        FAIL("expected config_error");
    } catch (const config_error& e) {
        CHECK(e.field == "optimizer.adam_lr");
    }
}

TEST_CASE("config hash is stable under key reordering", "[config]") {
    ExperimentConfig cfg = make_preset("lv3-paper");
    std::string dump = config_to_json(cfg).dump();

    // rebuild the json with keys inserted in reverse order
    nlohmann::json orig = nlohmann::json::parse(dump);
    nlohmann::json shuffled;
    std::vector<std::string> keys;
    for (auto it = orig.begin(); it != orig.end(); ++it) keys.push_back(it.key());
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) shuffled[*it] = orig.at(*it);

    ExperimentConfig a = config_from_json(orig);
    ExperimentConfig b = config_from_json(shuffled);
    CHECK(config_hash(a) == config_hash(b));
}

TEST_CASE("validation rejects inconsistent setups", "[config]") {
    ExperimentConfig cfg = make_preset("lv3-paper");

    SECTION("window outside the simulated span") {
        cfg.train_window = {0.0, 25.0};
        CHECK_THROWS_AS(cfg.validate(), invalid_config_error);
    }
    SECTION("unknown equations must be the unobserved states") {
        cfg.unknown = {0};
        CHECK_THROWS_AS(cfg.validate(), invalid_config_error);
    }
    SECTION("network shape must match") {
        cfg.net.output_dim = 2;
        CHECK_THROWS_AS(cfg.validate(), invalid_config_error);
    }
    SECTION("negative noise is rejected") {
        cfg.noise_percent = -1.0;
        CHECK_THROWS_AS(cfg.validate(), invalid_config_error);
    }
}

TEST_CASE("sr budget switch", "[config]") {
    ExperimentConfig cfg = make_preset("lv3-paper");
    apply_sr_budget(cfg, "paper");
    CHECK(cfg.sr.n_populations == 1000);
    CHECK(cfg.sr.iterations == 200);
    apply_sr_budget(cfg, "desk");
    CHECK(cfg.sr.n_populations == 50);
    CHECK(cfg.sr.iterations == 40);
    CHECK_THROWS_AS(apply_sr_budget(cfg, "huge"), invalid_config_error);
}

TEST_CASE("atomic writes leave no temp files and replace content", "[config]") {
    auto dir = std::filesystem::temp_directory_path() / "eqdisc_io_test";
    std::filesystem::create_directories(dir);
    auto path = dir / "out.txt";
    atomic_write_file(path, "first");
    CHECK(read_file(path) == "first");
    atomic_write_file(path, "second");
    CHECK(read_file(path) == "second");
    bool tmp_left = false;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().string().find(".tmp") != std::string::npos) tmp_left = true;
    CHECK_FALSE(tmp_left);
    std::filesystem::remove_all(dir);
}

TEST_CASE("manifest serializes its inventory", "[config]") {
    RunManifest m;
    m.config_hash = "abc";
    m.tool_version = "0.1.0";
    m.master_seed = 42;
    m.started_at = iso_timestamp();
    m.finished_at = iso_timestamp();
    m.stage_seconds = {{"simulate", 0.5}, {"train", 10.0}};
    m.outputs = {"dataset.csv"};
    nlohmann::json j = m.to_json();
    CHECK(j.at("config_hash") == "abc");
    CHECK(j.at("stage_seconds").at("train") == 10.0);
    CHECK(j.at("outputs").size() == 1);
}

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "eqdisc/experiment.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

inline constexpr const char* kConfigFormat = "eqdisc-config-v1";

/// Schema violation carrying the offending field path.
struct config_error : invalid_config_error {
    std::string field;
    config_error(const std::string& field_path, const std::string& what)
        : invalid_config_error("config field '" + field_path + "': " + what), field(field_path) {}
};

namespace detail {
inline const nlohmann::json& require_field(const nlohmann::json& j, const std::string& key,
                                           const std::string& path) {
    if (!j.contains(key)) throw config_error(path.empty() ? key : path + "." + key, "missing");
    return j.at(key);
}

template <class T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& path) {
    try {
        return require_field(j, key, path).get<T>();
    } catch (const config_error&) {
        throw;
    } catch (const std::exception& e) {
        throw config_error(path.empty() ? key : path + "." + key, e.what());
    }
}
} // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& config) {
    nlohmann::json j;
    j["format"] = kConfigFormat;
    j["system"]["name"] = to_string(config.system.name);
    j["system"]["params"] = config.system.params;
    j["system"]["initial_condition"] = config.system.initial_condition;
    j["simulation"]["t0"] = config.sim_t0;
    j["simulation"]["t1"] = config.sim_t1;
    j["simulation"]["sample_dt"] = config.sample_dt;
    j["train_window"]["t0"] = config.train_window.first;
    j["train_window"]["t1"] = config.train_window.second;
    j["observed"] = config.mask.observed;
    j["unknown_indices"] = config.unknown;
    j["network"]["input_dim"] = config.net.input_dim;
    j["network"]["hidden"] = config.net.hidden;
    j["network"]["output_dim"] = config.net.output_dim;
    j["network"]["activation"] = "gelu_tanh";
    j["noise_percent"] = config.noise_percent;
    j["ensemble_size"] = config.ensemble_size;
    j["optimizer"]["adam_lr"] = config.schedule.adam_lr;
    j["optimizer"]["adam_iters"] = config.schedule.adam_iters;
    j["optimizer"]["lbfgs_iters"] = config.schedule.lbfgs_iters;
    j["optimizer"]["lbfgs_memory"] = config.schedule.lbfgs_memory;
    j["optimizer"]["lbfgs_restarts"] = config.schedule.lbfgs_restarts;
    j["sr"]["population_size"] = config.sr.population_size;
    j["sr"]["n_populations"] = config.sr.n_populations;
    j["sr"]["iterations"] = config.sr.iterations;
    j["sr"]["max_complexity"] = config.sr.max_complexity;
    j["sr"]["tournament_size"] = config.sr.tournament_size;
    j["sr"]["p_mutation"] = config.sr.p_mutation;
    j["sr"]["p_crossover"] = config.sr.p_crossover;
    j["sr"]["parsimony"] = config.sr.parsimony;
    j["master_seed"] = config.master_seed;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::get_field;
    using detail::require_field;

    if (get_field<std::string>(j, "format", "") != kConfigFormat)
        throw config_error("format", "expected " + std::string(kConfigFormat));

    ExperimentConfig config;
    const auto& sys = require_field(j, "system", "");
    config.system.name = system_name_from_string(get_field<std::string>(sys, "name", "system"));
    config.system.params = get_field<ParamMap>(sys, "params", "system");
    config.system.initial_condition = get_field<Vec>(sys, "initial_condition", "system");
    config.system.dim = system_registry().at(config.system.name).dim;

    const auto& sim = require_field(j, "simulation", "");
    config.sim_t0 = get_field<double>(sim, "t0", "simulation");
    config.sim_t1 = get_field<double>(sim, "t1", "simulation");
    config.sample_dt = get_field<double>(sim, "sample_dt", "simulation");

    const auto& window = require_field(j, "train_window", "");
    config.train_window = {get_field<double>(window, "t0", "train_window"),
                           get_field<double>(window, "t1", "train_window")};

    config.mask.observed = get_field<std::vector<bool>>(j, "observed", "");
    config.unknown = get_field<std::vector<std::size_t>>(j, "unknown_indices", "");

    const auto& net = require_field(j, "network", "");
    config.net.input_dim = get_field<std::size_t>(net, "input_dim", "network");
    config.net.hidden = get_field<std::vector<std::size_t>>(net, "hidden", "network");
    config.net.output_dim = get_field<std::size_t>(net, "output_dim", "network");

    config.noise_percent = get_field<double>(j, "noise_percent", "");
    config.ensemble_size = get_field<std::size_t>(j, "ensemble_size", "");

    const auto& opt = require_field(j, "optimizer", "");
    config.schedule.adam_lr = get_field<double>(opt, "adam_lr", "optimizer");
    config.schedule.adam_iters = get_field<std::size_t>(opt, "adam_iters", "optimizer");
    config.schedule.lbfgs_iters = get_field<std::size_t>(opt, "lbfgs_iters", "optimizer");
    config.schedule.lbfgs_memory = get_field<std::size_t>(opt, "lbfgs_memory", "optimizer");
    config.schedule.lbfgs_restarts = get_field<std::size_t>(opt, "lbfgs_restarts", "optimizer");

    const auto& sr = require_field(j, "sr", "");
    config.sr.population_size = get_field<std::size_t>(sr, "population_size", "sr");
    config.sr.n_populations = get_field<std::size_t>(sr, "n_populations", "sr");
    config.sr.iterations = get_field<std::size_t>(sr, "iterations", "sr");
    config.sr.max_complexity = get_field<std::size_t>(sr, "max_complexity", "sr");
    config.sr.tournament_size = get_field<std::size_t>(sr, "tournament_size", "sr");
    config.sr.p_mutation = get_field<double>(sr, "p_mutation", "sr");
    config.sr.p_crossover = get_field<double>(sr, "p_crossover", "sr");
    config.sr.parsimony = get_field<double>(sr, "parsimony", "sr");

    config.master_seed = get_field<std::uint64_t>(j, "master_seed", "");

    config.validate();
    return config;
}

/// Canonical serialization: nlohmann objects are key-sorted, so dumping is
/// already order-independent with respect to the input field order.
inline std::string config_canonical_dump(const ExperimentConfig& config) {
    return config_to_json(config).dump(2);
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string config_hash(const ExperimentConfig& config) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_canonical_dump(config))));
    return buf;
}

/// The two reproduction presets plus a fast smoke setup for pipeline tests.
inline ExperimentConfig make_preset(const std::string& name) {
    ExperimentConfig config;
    config.noise_percent = 0.0;
    config.schedule = TrainSchedule{};
    config.sr = SRConfig{};
    config.master_seed = 1;
    if (name == "lv3-paper" || name == "lv3-smoke") {
        config.system = make_system(SystemName::LotkaVolterra3);
        config.sim_t0 = 0.0;
        config.sim_t1 = 20.0;
        config.sample_dt = 0.05;
        config.train_window = {0.0, 2.0};
        config.mask.observed = {true, false, true};
        config.unknown = {1};
        config.net = MLPSpec{3, {40, 40}, 1};
        config.ensemble_size = 10;
    } else if (name == "lorenz5-paper" || name == "lorenz5-smoke") {
        config.system = make_system(SystemName::Lorenz5);
        config.sim_t0 = 0.0;
        config.sim_t1 = 6.0;
        config.sample_dt = 0.01;
        config.train_window = {0.0, 0.25};
        config.mask.observed = {false, false, true, true, true};
        config.unknown = {0, 1};
        config.net = MLPSpec{5, {40, 40}, 2};
        config.ensemble_size = 10;
        // the short chaotic window needs a much deeper quasi-Newton stage to
        // pin the unobserved dynamics; see the training notes in the README
        config.schedule.lbfgs_iters = 2500;
        config.schedule.lbfgs_memory = 30;
        config.schedule.lbfgs_restarts = 4;
    } else {
        throw invalid_config_error("unknown preset: " + name);
    }

    if (name.ends_with("-smoke")) {
        config.ensemble_size = 1;
        config.net.hidden = {8};
        config.schedule.adam_iters = 10;
        config.schedule.lbfgs_iters = 5;
        config.sr.n_populations = 4;
        config.sr.iterations = 10;
    }
    config.validate();
    return config;
}

/// Full-budget regression settings reported for the reference runs.
inline void apply_sr_budget(ExperimentConfig& config, const std::string& budget) {
    if (budget == "desk") {
        config.sr.n_populations = 50;
        config.sr.iterations = 40;
    } else if (budget == "paper") {
        config.sr.n_populations = 1000;
        config.sr.iterations = 200;
    } else {
        throw invalid_config_error("unknown sr budget: " + budget);
    }
}

} // namespace eqdisc

// Command-line front end: simulate -> train -> discover -> report, each stage
// restartable from the run directory it writes into.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "eqdisc/checkpoint.hpp"
#include "eqdisc/config.hpp"
#include "eqdisc/experiment.hpp"
#include "eqdisc/io.hpp"
#include "eqdisc/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eqdisc;

namespace {

// exit codes, stable and documented in the README
constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitSolver = 3;
constexpr int kExitDivergentMembers = 4;
constexpr int kExitSrFailure = 5;
constexpr int kExitIncompleteRun = 6;

struct CommonOptions {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> noise;
    std::size_t jobs = 0;
    std::string sr_budget;
    std::string mode = "averaged";
    std::string format = "text";
};

fs::path resolve_out_dir(const CommonOptions& opts) {
    if (!opts.out_dir.empty()) return opts.out_dir;
    if (const char* env = std::getenv("EQD_OUT")) return fs::path(env) / "run";
    return fs::path("runs") / "run";
}

ExperimentConfig load_config(const CommonOptions& opts) {
    json j;
    try {
        j = json::parse(read_file(opts.config_path));
    } catch (const json::exception& e) {
        throw config_error("(file)", std::string("not valid json: ") + e.what());
    }
    ExperimentConfig config = config_from_json(j);
    if (opts.seed) config.master_seed = *opts.seed;
    if (opts.noise) config.noise_percent = *opts.noise;
    if (!opts.sr_budget.empty()) apply_sr_budget(config, opts.sr_budget);
    config.validate();
    return config;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void update_manifest(const fs::path& dir, const ExperimentConfig& config, const std::string& stage,
                     double seconds, const std::vector<std::string>& new_outputs) {
    json j;
    fs::path path = dir / "manifest.json";
    if (fs::exists(path)) j = json::parse(read_file(path));
    j["format"] = "eqdisc-manifest-v1";
    j["config_hash"] = config_hash(config);
    j["tool_version"] = kVersion;
    j["master_seed"] = config.master_seed;
    if (!j.contains("started_at")) j["started_at"] = iso_timestamp();
    j["finished_at"] = iso_timestamp();
    j["stage_seconds"][stage] = seconds;
    std::set<std::string> outputs;
    if (j.contains("outputs"))
        for (const auto& o : j["outputs"]) outputs.insert(o.get<std::string>());
    outputs.insert(new_outputs.begin(), new_outputs.end());
    j["outputs"] = outputs;
    atomic_write_file(path, j.dump(2) + "\n");
}

std::string member_name(std::size_t m) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "member_%02zu.json", m);
    return buf;
}

std::string telemetry_name(std::size_t m) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "member_%02zu_telemetry.csv", m);
    return buf;
}

std::string telemetry_to_csv(const std::vector<OptRecord>& records) {
    std::ostringstream out;
    out << "iteration,stage,loss,grad_norm\n";
    for (const auto& r : records)
        out << r.iteration << "," << r.stage << "," << format_full(r.loss) << ","
            << format_full(r.grad_norm) << "\n";
    return out.str();
}

Trajectory load_or_simulate_dataset(const ExperimentConfig& config, const fs::path& dir) {
    fs::path path = dir / "dataset.csv";
    if (fs::exists(path)) return trajectory_from_csv_file(path.string());
    Trajectory data = generate_dataset(config);
    atomic_write_file(path, trajectory_to_csv(data));
    return data;
}

Trajectory training_data(const ExperimentConfig& config, const fs::path& dir,
                         const Trajectory& clean) {
    if (config.noise_percent == 0.0) return clean;
    fs::path path = dir / "dataset_noisy.csv";
    if (fs::exists(path)) return trajectory_from_csv_file(path.string());
    Trajectory noisy = add_noise(clean, config.noise_percent,
                                 derive_seed(config.master_seed, seed_stream::noise));
    atomic_write_file(path, trajectory_to_csv(noisy));
    return noisy;
}

void write_config_snapshot(const ExperimentConfig& config, const fs::path& dir) {
    atomic_write_file(dir / "config.json", config_canonical_dump(config) + "\n");
}

// ---------------------------------------------------------------------------

int cmd_simulate(const CommonOptions& opts) {
    auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig config = load_config(opts);
    fs::path dir = resolve_out_dir(opts);
    fs::create_directories(dir);

    write_config_snapshot(config, dir);
    Trajectory data = generate_dataset(config);
    atomic_write_file(dir / "dataset.csv", trajectory_to_csv(data));
    std::vector<std::string> outputs = {"config.json", "dataset.csv"};
    if (config.noise_percent > 0.0) {
        Trajectory noisy = add_noise(data, config.noise_percent,
                                     derive_seed(config.master_seed, seed_stream::noise));
        atomic_write_file(dir / "dataset_noisy.csv", trajectory_to_csv(noisy));
        outputs.push_back("dataset_noisy.csv");
    }
    update_manifest(dir, config, "simulate", seconds_since(t0), outputs);
    std::cout << "wrote " << (dir / "dataset.csv").string() << " (" << data.size() << " samples x "
              << data.dim << " states)\n";
    return kExitOk;
}

int cmd_train(const CommonOptions& opts, bool resume) {
    auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig config = load_config(opts);
    fs::path dir = resolve_out_dir(opts);
    fs::create_directories(dir / "members");

    if (resume) {
        bool complete = true;
        for (std::size_t m = 0; m < config.ensemble_size; ++m)
            if (!fs::exists(dir / "members" / member_name(m))) complete = false;
        if (complete) {
            std::cout << "training already complete; nothing to do\n";
            return kExitOk;
        }
    }

    write_config_snapshot(config, dir);
    Trajectory clean = load_or_simulate_dataset(config, dir);
    Trajectory data = training_data(config, dir, clean);

    EnsembleResult result = train_ensemble(config, data, opts.jobs);

    std::vector<std::string> outputs = {"config.json", "dataset.csv"};
    for (std::size_t m = 0; m < result.members.size(); ++m) {
        const auto& member = result.members[m];
        save_checkpoint((dir / "members" / member_name(m)).string(), config.net, member.params);
        atomic_write_file(dir / "members" / telemetry_name(m), telemetry_to_csv(member.telemetry));
        outputs.push_back("members/" + member_name(m));
        outputs.push_back("members/" + telemetry_name(m));
    }

    if (!result.included_members.empty()) {
        Trajectory avg_in;
        avg_in.dim = config.system.dim;
        for (std::size_t i = 0; i < result.avg_inputs.size(); ++i) {
            avg_in.times.push_back(config.train_window.first +
                                   static_cast<double>(i) * config.sample_dt);
            avg_in.states.push_back(result.avg_inputs[i]);
        }
        atomic_write_file(dir / "sr_inputs.csv", trajectory_to_csv(avg_in));

        std::ostringstream targets;
        targets << "t";
        for (std::size_t k = 0; k < config.unknown.size(); ++k)
            targets << ",target" << config.unknown[k];
        targets << "\n";
        for (std::size_t i = 0; i < result.avg_targets.size(); ++i) {
            targets << format_full(avg_in.times[i]);
            for (double v : result.avg_targets[i]) targets << "," << format_full(v);
            targets << "\n";
        }
        atomic_write_file(dir / "sr_targets.csv", targets.str());
        outputs.push_back("sr_inputs.csv");
        outputs.push_back("sr_targets.csv");
    }

    update_manifest(dir, config, "train", seconds_since(t0), outputs);

    std::size_t n_div = result.members.size() - result.included_members.size();
    std::cout << result.included_members.size() << "/" << result.members.size()
              << " members converged";
    if (n_div > 0) std::cout << " (" << n_div << " divergent, excluded)";
    std::cout << "\n";
    if (result.too_many_divergent) {
        std::cerr << "error: more than 20% of ensemble members diverged\n";
        return kExitDivergentMembers;
    }
    return kExitOk;
}

struct LoadedEnsemble {
    EnsembleResult result;
    Trajectory clean;
    Trajectory data;
};

LoadedEnsemble load_ensemble(const ExperimentConfig& config, const fs::path& dir,
                             std::size_t jobs) {
    LoadedEnsemble out;
    out.clean = trajectory_from_csv_file((dir / "dataset.csv").string());
    out.data = config.noise_percent > 0.0
                   ? trajectory_from_csv_file((dir / "dataset_noisy.csv").string())
                   : out.clean;

    auto& result = out.result;
    result.members.resize(config.ensemble_size);
    const auto i0 = static_cast<std::size_t>(
        std::llround((config.train_window.first - out.data.times.front()) / config.sample_dt));
    for (std::size_t m = 0; m < config.ensemble_size; ++m) {
        auto [spec, params] = load_checkpoint((dir / "members" / member_name(m)).string());
        if (!(spec == config.net))
            throw invalid_input_error("checkpoint " + member_name(m) +
                                      " does not match the configured network");
        result.members[m].params = std::move(params);
        result.members[m].included = true;
        result.included_members.push_back(m);
    }
    (void)jobs;
    for (std::size_t m : result.included_members) {
        HybridField field = make_hybrid(config, result.members[m].params);
        Trajectory traj = integrate([&](const Vec& y) { return field.rhs(y); },
                                    out.data.states.at(i0),
                                    {config.train_window.first, config.train_window.second},
                                    config.sample_dt, config.train_solver());
        std::vector<Vec> inputs = traj.states;
        std::vector<Vec> outputs(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i)
            outputs[i] = mlp_forward(config.net, field.params, inputs[i]);
        result.per_member_inputs.push_back(std::move(inputs));
        result.per_member_targets.push_back(std::move(outputs));
    }
    const std::size_t n_samples = result.per_member_inputs.front().size();
    const std::size_t n_members = result.per_member_inputs.size();
    result.avg_inputs.assign(n_samples, Vec(config.system.dim, 0.0));
    result.avg_targets.assign(n_samples, Vec(config.unknown.size(), 0.0));
    for (std::size_t i = 0; i < n_samples; ++i) {
        for (std::size_t c = 0; c < config.system.dim; ++c) {
            KahanSum acc;
            for (std::size_t m = 0; m < n_members; ++m) acc.add(result.per_member_inputs[m][i][c]);
            result.avg_inputs[i][c] = acc.value() / static_cast<double>(n_members);
        }
        for (std::size_t k = 0; k < config.unknown.size(); ++k) {
            KahanSum acc;
            for (std::size_t m = 0; m < n_members; ++m) acc.add(result.per_member_targets[m][i][k]);
            result.avg_targets[i][k] = acc.value() / static_cast<double>(n_members);
        }
    }
    return out;
}

json frontier_to_json(const std::vector<ParetoEntry>& frontier) {
    json arr = json::array();
    for (const auto& e : frontier) {
        json entry;
        entry["complexity"] = e.complexity;
        entry["mse"] = e.mse;
        entry["score"] = e.score;
        entry["infix"] = e.infix;
        entry["canonical"] = e.canonical;
        arr.push_back(entry);
    }
    return arr;
}

int cmd_discover(const CommonOptions& opts) {
    auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig config = load_config(opts);
    fs::path dir = resolve_out_dir(opts);

    for (const char* needed : {"dataset.csv", "config.json"})
        if (!fs::exists(dir / needed))
            throw invalid_input_error(std::string("missing run artifact: ") + needed +
                                      " (run simulate/train first)");

    LoadedEnsemble loaded = load_ensemble(config, dir, opts.jobs);
    const auto names = default_var_names(config.system.dim);
    std::vector<std::string> outputs;

    std::vector<RecoveredEquation> recs;
    try {
        recs = recover_equations(config, loaded.result, opts.jobs);
    } catch (const std::exception& e) {
        std::cerr << "error: symbolic regression failed: " << e.what() << "\n";
        return kExitSrFailure;
    }

    json equations = json::array();
    std::vector<ExprPtr> learned;
    for (std::size_t k = 0; k < recs.size(); ++k) {
        const auto& rec = recs[k];
        char fname[40];
        std::snprintf(fname, sizeof(fname), "frontier_eq%zu.json", rec.unknown_index);
        atomic_write_file(dir / fname, frontier_to_json(rec.frontier).dump(2) + "\n");
        outputs.push_back(fname);

        json eq;
        eq["unknown_index"] = rec.unknown_index;
        eq["canonical"] = rec.selected.canonical;
        eq["infix"] = rec.selected.infix;
        eq["complexity"] = rec.selected.complexity;
        eq["mse"] = rec.selected.mse;
        eq["score"] = rec.selected.score;
        LinearCoeffs lc = extract_linear_coeffs(rec.selected.expr,
                                                degree2_basis(config.system.dim), names);
        eq["coefficients"] = lc.coeffs;
        eq["coefficients_exact"] = lc.representable;
        CanonicalExpr true_eq =
            canonicalize(true_equation_expr(config.system, rec.unknown_index), names);
        eq["true_equation"] = true_eq.infix;
        equations.push_back(eq);
        learned.push_back(rec.selected.expr);
    }
    atomic_write_file(dir / "equations.json", equations.dump(2) + "\n");
    outputs.push_back("equations.json");

    // substitute and extrapolate over the full simulated horizon
    auto field = [&](const Vec& state) {
        Vec d = config.system.rhs(state);
        for (std::size_t k = 0; k < config.unknown.size(); ++k) {
            EvalResult r = eval_expr(learned[k], {state});
            if (r.poisoned) throw numeric_error("learned expression not evaluable");
            d[config.unknown[k]] = r.values[0];
        }
        return d;
    };
    auto [extrap, truncated] =
        integrate_or_truncate(field, config.system.initial_condition,
                              {config.sim_t0, config.sim_t1}, config.sample_dt,
                              config.data_solver());
    atomic_write_file(dir / "extrapolation.csv", trajectory_to_csv(extrap));
    outputs.push_back("extrapolation.csv");

    std::vector<std::size_t> unobserved;
    for (std::size_t c = 0; c < config.system.dim; ++c)
        if (!config.mask.observed[c]) unobserved.push_back(c);

    if (extrap.size() >= 20) {
        Trajectory truth_cut = loaded.clean;
        truth_cut.times.resize(extrap.size());
        truth_cut.states.resize(extrap.size());
        auto series = sliding_rmse(extrap, truth_cut, 20, unobserved);
        std::ostringstream csv;
        csv << "t_center";
        for (std::size_t c : unobserved) csv << ",rmse_x" << c;
        for (std::size_t c : unobserved) csv << ",cumulative_x" << c;
        csv << "\n";
        Vec cumulative(unobserved.size(), 0.0);
        for (const auto& p : series) {
            csv << format_full(p.t_center);
            for (double r : p.rmse) csv << "," << format_full(r);
            for (std::size_t c = 0; c < unobserved.size(); ++c) {
                cumulative[c] += p.rmse[c];
                csv << "," << format_full(cumulative[c]);
            }
            csv << "\n";
        }
        atomic_write_file(dir / "sliding_rmse.csv", csv.str());
        outputs.push_back("sliding_rmse.csv");
    }

    if (opts.mode == "per-member") {
        auto stats = coefficient_stats(config, loaded.result, opts.jobs);
        json stats_json = json::array();
        for (const auto& s : stats) {
            json entry;
            entry["unknown_index"] = s.unknown_index;
            for (const auto& [term, ms] : s.stats) {
                entry["terms"][term]["mean"] = ms.first;
                entry["terms"][term]["std"] = ms.second;
            }
            entry["member_equations"] = s.member_equations;
            stats_json.push_back(entry);
        }
        atomic_write_file(dir / "coefficient_stats.json", stats_json.dump(2) + "\n");
        outputs.push_back("coefficient_stats.json");
    }

    update_manifest(dir, config, "discover", seconds_since(t0), outputs);
    for (const auto& eq : equations)
        std::cout << "d/dt " << names.at(eq.at("unknown_index").get<std::size_t>())
                  << " = " << eq.at("canonical").get<std::string>() << "\n";
    if (truncated) std::cout << "note: extrapolation truncated before the full horizon\n";
    return kExitOk;
}

int cmd_report(const CommonOptions& opts) {
    fs::path dir = resolve_out_dir(opts);
    std::vector<std::string> missing;
    for (const char* needed : {"config.json", "dataset.csv", "equations.json", "manifest.json"})
        if (!fs::exists(dir / needed)) missing.push_back(needed);
    if (!missing.empty()) {
        std::cerr << "error: incomplete run directory " << dir.string() << "; missing:";
        for (const auto& m : missing) std::cerr << " " << m;
        std::cerr << "\n";
        return kExitIncompleteRun;
    }

    ExperimentConfig config = config_from_json(json::parse(read_file(dir / "config.json")));
    json manifest = json::parse(read_file(dir / "manifest.json"));
    json equations = json::parse(read_file(dir / "equations.json"));
    Trajectory clean = trajectory_from_csv_file((dir / "dataset.csv").string());

    // per-channel attractor ranges for the divergence-time rule
    std::vector<std::size_t> unobserved;
    for (std::size_t c = 0; c < config.system.dim; ++c)
        if (!config.mask.observed[c]) unobserved.push_back(c);
    Vec ranges;
    for (std::size_t c : unobserved) {
        double lo = clean.states[0][c], hi = lo;
        for (const auto& s : clean.states) {
            lo = std::min(lo, s[c]);
            hi = std::max(hi, s[c]);
        }
        ranges.push_back(hi - lo);
    }

    std::optional<double> divergence_time;
    double max_rmse = 0.0, mean_rmse = 0.0;
    std::size_t n_rmse = 0;
    if (fs::exists(dir / "sliding_rmse.csv")) {
        std::istringstream in(read_file(dir / "sliding_rmse.csv"));
        std::string line;
        std::getline(in, line); // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream row(line);
            std::string cell;
            std::getline(row, cell, ',');
            double t_center = std::stod(cell);
            for (std::size_t c = 0; c < unobserved.size(); ++c) {
                std::getline(row, cell, ',');
                double rmse = std::stod(cell);
                max_rmse = std::max(max_rmse, rmse);
                mean_rmse += rmse;
                ++n_rmse;
                if (!divergence_time && rmse > 0.10 * ranges[c]) divergence_time = t_center;
            }
        }
        if (n_rmse > 0) mean_rmse /= static_cast<double>(n_rmse);
    }

    json report;
    report["format"] = "eqdisc-report-v1";
    report["run_dir"] = dir.string();
    report["config_hash"] = manifest.at("config_hash");
    report["system"] = to_string(config.system.name);
    report["noise_percent"] = config.noise_percent;
    report["ensemble_size"] = config.ensemble_size;
    report["master_seed"] = config.master_seed;
    report["equations"] = equations;
    if (divergence_time)
        report["divergence_time"] = *divergence_time;
    else
        report["divergence_time"] = nullptr;
    report["sliding_rmse"] = {{"mean", mean_rmse}, {"max", max_rmse}};
    if (fs::exists(dir / "coefficient_stats.json"))
        report["coefficient_stats"] = json::parse(read_file(dir / "coefficient_stats.json"));

    if (opts.format == "json") {
        std::cout << report.dump(2) << "\n";
        return kExitOk;
    }

    const auto names = default_var_names(config.system.dim);
    std::cout << "run " << dir.string() << " (config " << report["config_hash"].get<std::string>()
              << ", seed " << config.master_seed << ")\n";
    std::cout << "system: " << to_string(config.system.name) << ", noise "
              << config.noise_percent << "%, ensemble " << config.ensemble_size << "\n\n";
    std::cout << "recovered equations:\n";
    for (const auto& eq : equations) {
        std::size_t idx = eq.at("unknown_index").get<std::size_t>();
        std::cout << "  d" << names.at(idx) << "/dt (learned) = "
                  << eq.at("canonical").get<std::string>() << "\n";
        std::cout << "  d" << names.at(idx) << "/dt (true)    = "
                  << eq.at("true_equation").get<std::string>() << "\n";
    }
    std::cout << "\nextrapolation (unobserved channels): mean window rmse "
              << mean_rmse << ", max " << max_rmse << "\n";
    if (divergence_time)
        std::cout << "divergence time (10% of channel range): " << *divergence_time << "\n";
    else if (n_rmse > 0)
        std::cout << "no divergence within the simulated horizon\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid dynamics training and closed-form equation recovery"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CommonOptions opts;
    bool resume = false;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        auto* c = cmd->add_option("--config", opts.config_path, "experiment config file (json)");
        if (needs_config) c->required();
        cmd->add_option("--out", opts.out_dir, "run directory (default $EQD_OUT/run or runs/run)");
        cmd->add_option("--seed", opts.seed, "override the master seed");
        cmd->add_option("--noise", opts.noise, "override the noise percentage");
        cmd->add_option("--jobs", opts.jobs, "worker threads (default: hardware)");
        cmd->add_option("--sr-budget", opts.sr_budget, "regression budget: desk or paper")
            ->check(CLI::IsMember({"desk", "paper"}));
        cmd->add_option("--mode", opts.mode, "discovery mode: averaged or per-member")
            ->check(CLI::IsMember({"averaged", "per-member"}));
        cmd->add_option("--format", opts.format, "report format: text or json")
            ->check(CLI::IsMember({"text", "json"}));
    };

    auto* simulate = app.add_subcommand("simulate", "generate the synthetic dataset");
    add_common(simulate, true);
    auto* train = app.add_subcommand("train", "train the hybrid ensemble");
    add_common(train, true);
    train->add_flag("--resume", resume, "no-op if training artifacts are already complete");
    auto* discover = app.add_subcommand("discover", "recover closed-form equations");
    add_common(discover, true);
    auto* report = app.add_subcommand("report", "summarize a completed run");
    add_common(report, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed()) return cmd_simulate(opts);
        if (train->parsed()) return cmd_train(opts, resume);
        if (discover->parsed()) return cmd_discover(opts);
        if (report->parsed()) return cmd_report(opts);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const invalid_config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const divergence_error& e) {
        std::cerr << "solver error: " << e.what() << " (t=" << e.last_time << ")\n";
        return kExitSolver;
    } catch (const invalid_input_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "eqdisc/dynamics.hpp"
#include "eqdisc/hybrid.hpp"
#include "eqdisc/mlp.hpp"
#include "eqdisc/optimize.hpp"
#include "eqdisc/parallel.hpp"
#include "eqdisc/solver.hpp"
#include "eqdisc/symreg.hpp"
#include "eqdisc/trajectory.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

namespace seed_stream {
inline constexpr std::uint64_t member_init = 1;
inline constexpr std::uint64_t noise = 2;
inline constexpr std::uint64_t sr_channel = 3;
inline constexpr std::uint64_t range_study = 4;
} // namespace seed_stream

/// Full declarative description of one experiment run.
struct ExperimentConfig {
    SystemSpec system;
    double sim_t0 = 0.0;
    double sim_t1 = 20.0;
    double sample_dt = 0.05;
    std::pair<double, double> train_window{0.0, 2.0};
    ObservationMask mask;
    std::vector<std::size_t> unknown; // strictly ascending
    MLPSpec net;
    double noise_percent = 0.0;
    std::size_t ensemble_size = 10;
    TrainSchedule schedule;
    SRConfig sr;
    std::uint64_t master_seed = 0;

    void validate() const {
        system.validate();
        if (!(sample_dt > 0.0)) throw invalid_config_error("sample_dt must be positive");
        if (sim_t1 < sim_t0) throw invalid_config_error("simulation span is reversed");
        if (train_window.first < sim_t0 - 1e-12 || train_window.second > sim_t1 + 1e-12 ||
            train_window.second <= train_window.first)
            throw invalid_config_error("train_window must lie inside the simulation span");
        mask.validate(system.dim);
        if (unknown.empty()) throw invalid_config_error("at least one unknown equation is required");
        for (std::size_t i = 0; i < unknown.size(); ++i) {
            if (unknown[i] >= system.dim)
                throw invalid_config_error("unknown index out of range");
            if (i > 0 && unknown[i] <= unknown[i - 1])
                throw invalid_config_error("unknown indices must be strictly ascending");
        }
        // unknown equations correspond exactly to the unobserved states
        for (std::size_t c = 0; c < system.dim; ++c) {
            bool is_unknown = std::find(unknown.begin(), unknown.end(), c) != unknown.end();
            if (is_unknown == mask.observed[c])
                throw invalid_config_error(
                    "unknown equations and unobserved states must coincide (state " +
                    std::to_string(c) + ")");
        }
        net.validate();
        if (net.input_dim != system.dim)
            throw invalid_config_error("network input dimension must equal the system dimension");
        if (net.output_dim != unknown.size())
            throw invalid_config_error("network output dimension must equal the unknown count");
        if (noise_percent < 0.0) throw invalid_config_error("noise_percent must be non-negative");
        if (ensemble_size == 0) throw invalid_config_error("ensemble_size must be positive");
        sr.validate();
    }

    SolverConfig data_solver() const {
        SolverConfig cfg; // adaptive, paper tolerances
        return cfg;
    }

    SolverConfig train_solver() const {
        SolverConfig cfg;
        cfg.fixed_step = sample_dt;
        return cfg;
    }
};

/// Ground-truth trajectory from the configured initial condition, solved
/// adaptively at the configured sampling rate. Only the simulation fields are
/// validated, so degenerate spans can still be sampled.
inline Trajectory generate_dataset(const ExperimentConfig& config) {
    config.system.validate();
    if (!(config.sample_dt > 0.0)) throw invalid_config_error("sample_dt must be positive");
    if (config.sim_t1 < config.sim_t0) throw invalid_config_error("simulation span is reversed");
    return integrate([&](const Vec& y) { return config.system.rhs(y); },
                     config.system.initial_condition, {config.sim_t0, config.sim_t1},
                     config.sample_dt, config.data_solver());
}

/// Additive i.i.d. Gaussian noise per channel, scaled to the given percentage
/// of that channel's standard deviation over the full trajectory.
inline Trajectory add_noise(const Trajectory& traj, double percent, std::uint64_t seed) {
    if (percent < 0.0) throw invalid_input_error("noise percent must be non-negative");
    if (percent == 0.0) return traj;

    Trajectory out = traj;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (std::size_t c = 0; c < traj.dim; ++c) {
        double mean = 0.0;
        for (const auto& s : traj.states) mean += s[c];
        mean /= static_cast<double>(traj.size());
        double var = 0.0;
        for (const auto& s : traj.states) var += (s[c] - mean) * (s[c] - mean);
        var /= static_cast<double>(traj.size());
        double sigma = (percent / 100.0) * std::sqrt(var);
        for (std::size_t i = 0; i < out.size(); ++i) out.states[i][c] += sigma * unit(rng);
    }
    return out;
}

struct MemberResult {
    ParamVector params;
    std::vector<OptRecord> telemetry;
    double final_loss = 0.0;
    bool included = false;
};

struct EnsembleResult {
    std::vector<MemberResult> members;
    std::vector<Vec> avg_inputs;                      // samples x dim
    std::vector<Vec> avg_targets;                     // samples x |unknown|
    std::vector<std::vector<Vec>> per_member_inputs;  // included members only
    std::vector<std::vector<Vec>> per_member_targets; // aligned with per_member_inputs
    std::vector<std::size_t> included_members;        // indices into members
    bool too_many_divergent = false;
};

inline HybridField make_hybrid(const ExperimentConfig& config, ParamVector params) {
    HybridField field;
    field.system = config.system;
    field.unknown = config.unknown;
    field.net = config.net;
    field.params = std::move(params);
    return field;
}

/**
 * Train the ensemble on the (possibly noisy) dataset: independent random
 * initializations, identical data. After training, every included member is
 * simulated over the training window; the per-sample network inputs (the
 * member's own states) and outputs are recorded and averaged across members.
 */
inline EnsembleResult train_ensemble(const ExperimentConfig& config, const Trajectory& data,
                                     std::size_t jobs = 0) {
    config.validate();
    const SolverConfig solver = config.train_solver();

    EnsembleResult result;
    result.members.resize(config.ensemble_size);
    parallel_for(config.ensemble_size, jobs, [&](std::size_t m) {
        ParamVector params0 =
            mlp_init_params(config.net, derive_seed(config.master_seed, seed_stream::member_init, m));
        Objective objective = [&](const ParamVector& p) {
            HybridField field = make_hybrid(config, p);
            LossGrad lg = loss_and_grad(field, data, config.mask, config.train_window, solver);
            return std::make_pair(lg.loss, lg.grad);
        };
        OptResult opt = train(objective, std::move(params0), config.schedule);
        result.members[m] = {std::move(opt.params), std::move(opt.records), opt.final_loss,
                             std::isfinite(opt.final_loss)};
    });

    for (std::size_t m = 0; m < result.members.size(); ++m)
        if (result.members[m].included) result.included_members.push_back(m);
    result.too_many_divergent =
        result.included_members.size() * 5 < result.members.size() * 4; // more than 20% dropped
    if (result.included_members.empty()) return result;

    // simulate each included member over the window and collect the network's
    // inputs and outputs at the sample times
    const auto i0 = static_cast<std::size_t>(
        std::llround((config.train_window.first - data.times.front()) / config.sample_dt));

    for (std::size_t m : result.included_members) {
        HybridField field = make_hybrid(config, result.members[m].params);
        Trajectory traj = integrate([&](const Vec& y) { return field.rhs(y); }, data.states.at(i0),
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
            for (std::size_t m = 0; m < n_members; ++m)
                acc.add(result.per_member_inputs[m][i][c]);
            result.avg_inputs[i][c] = acc.value() / static_cast<double>(n_members);
        }
        for (std::size_t k = 0; k < config.unknown.size(); ++k) {
            KahanSum acc;
            for (std::size_t m = 0; m < n_members; ++m)
                acc.add(result.per_member_targets[m][i][k]);
            result.avg_targets[i][k] = acc.value() / static_cast<double>(n_members);
        }
    }
    return result;
}

struct RecoveredEquation {
    std::size_t unknown_index = 0;
    ParetoEntry selected;
    std::vector<ParetoEntry> frontier;
};

/// One symbolic-regression search per unknown equation against the
/// ensemble-averaged inputs/targets.
inline std::vector<RecoveredEquation> recover_equations(const ExperimentConfig& config,
                                                        const EnsembleResult& result,
                                                        std::size_t jobs = 0) {
    if (result.included_members.empty())
        throw invalid_input_error("recover_equations: no included ensemble members");
    std::vector<RecoveredEquation> out(config.unknown.size());
    for (std::size_t k = 0; k < config.unknown.size(); ++k) {
        Vec targets(result.avg_targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = result.avg_targets[i][k];
        SRConfig sr = config.sr;
        sr.seed = derive_seed(config.master_seed, seed_stream::sr_channel, k);
        RecoveredEquation rec;
        rec.unknown_index = config.unknown[k];
        rec.frontier = sr_search(result.avg_inputs, targets, sr, jobs);
        if (rec.frontier.empty())
            throw numeric_error("symbolic regression produced an empty frontier");
        rec.selected = select_by_score(rec.frontier);
        out[k] = std::move(rec);
    }
    return out;
}

/// Fully symbolic system: known equations plus one learned expression per
/// unknown index, integrated adaptively from the true initial condition.
inline Trajectory substitute_and_extrapolate(const ExperimentConfig& config,
                                             const std::vector<ExprPtr>& learned, double horizon) {
    if (learned.size() != config.unknown.size())
        throw invalid_input_error("one learned expression per unknown equation is required");
    auto field = [&](const Vec& state) {
        Vec d = config.system.rhs(state);
        for (std::size_t k = 0; k < config.unknown.size(); ++k) {
            EvalResult r = eval_expr(learned[k], {state});
            if (r.poisoned) throw numeric_error("learned expression not evaluable at state");
            d[config.unknown[k]] = r.values[0];
        }
        return d;
    };
    return integrate(field, config.system.initial_condition, {config.sim_t0, horizon},
                     config.sample_dt, config.data_solver());
}

struct SlidingRmsePoint {
    double t_center = 0.0;
    Vec rmse; // one entry per requested channel
};

/// RMSE over every window of `window` consecutive samples (stride one),
/// restricted to the given channels.
inline std::vector<SlidingRmsePoint> sliding_rmse(const Trajectory& pred, const Trajectory& truth,
                                                  std::size_t window,
                                                  const std::vector<std::size_t>& channels) {
    const std::size_t n = std::min(pred.size(), truth.size());
    if (pred.dim != truth.dim) throw invalid_input_error("sliding_rmse: dimension mismatch");
    for (std::size_t i = 0; i < n; ++i)
        if (std::abs(pred.times[i] - truth.times[i]) >
            1e-9 * std::max(1.0, std::abs(truth.times[i])))
            throw invalid_input_error("sliding_rmse: trajectories are not aligned");
    if (window == 0 || window > n) throw invalid_input_error("sliding_rmse: bad window length");

    std::vector<SlidingRmsePoint> out;
    out.reserve(n - window + 1);
    for (std::size_t start = 0; start + window <= n; ++start) {
        SlidingRmsePoint point;
        point.t_center = truth.times[start + window / 2];
        point.rmse.reserve(channels.size());
        for (std::size_t c : channels) {
            double acc = 0.0;
            for (std::size_t i = start; i < start + window; ++i) {
                double d = pred.states[i][c] - truth.states[i][c];
                acc += d * d;
            }
            point.rmse.push_back(std::sqrt(acc / static_cast<double>(window)));
        }
        out.push_back(std::move(point));
    }
    return out;
}

/// Integrate but survive blow-ups: on divergence the trajectory is re-run up
/// to the last completed sample, and the truncation is reported.
template <class F>
std::pair<Trajectory, bool> integrate_or_truncate(F&& field, const Vec& y0,
                                                  std::pair<double, double> span, double dt,
                                                  const SolverConfig& config) {
    try {
        return {integrate(field, y0, span, dt, config), false};
    } catch (const divergence_error& e) {
        double reached = e.last_time;
        auto samples = static_cast<std::size_t>(std::floor((reached - span.first) / dt));
        if (samples == 0) {
            Trajectory single;
            single.dim = y0.size();
            single.times = {span.first};
            single.states = {y0};
            return {single, true};
        }
        double t_end = span.first + static_cast<double>(samples) * dt;
        return {integrate(field, y0, {span.first, t_end}, dt, config), true};
    }
}

struct RangeStudyEntry {
    double range_end = 0.0;
    Trajectory extrapolation;
    bool truncated = false;
    std::vector<SlidingRmsePoint> rmse; // unobserved channels
    double trained_loss = 0.0;
};

/**
 * Train a single hybrid per training range, extrapolate it over the full
 * simulation span, and report the unobserved-channel sliding RMSE. Divergent
 * extrapolations are truncated and flagged rather than fatal.
 */
inline std::vector<RangeStudyEntry> training_range_study(const ExperimentConfig& base_config,
                                                         const std::vector<double>& ranges,
                                                         double horizon, const Trajectory& data,
                                                         std::size_t jobs = 0,
                                                         std::size_t rmse_window = 20) {
    std::vector<std::size_t> unobserved;
    for (std::size_t c = 0; c < base_config.system.dim; ++c)
        if (!base_config.mask.observed[c]) unobserved.push_back(c);

    std::vector<RangeStudyEntry> out(ranges.size());
    parallel_for(ranges.size(), jobs, [&](std::size_t r) {
        ExperimentConfig config = base_config;
        config.train_window = {base_config.sim_t0, ranges[r]};
        config.validate();

        ParamVector params0 = mlp_init_params(
            config.net, derive_seed(config.master_seed, seed_stream::range_study, r));
        const SolverConfig solver = config.train_solver();
        Objective objective = [&](const ParamVector& p) {
            HybridField field = make_hybrid(config, p);
            LossGrad lg = loss_and_grad(field, data, config.mask, config.train_window, solver);
            return std::make_pair(lg.loss, lg.grad);
        };
        OptResult opt = train(objective, std::move(params0), config.schedule);

        HybridField field = make_hybrid(config, opt.params);
        auto [traj, truncated] = integrate_or_truncate(
            [&](const Vec& y) { return field.rhs(y); }, config.system.initial_condition,
            {config.sim_t0, horizon}, config.sample_dt, config.data_solver());

        RangeStudyEntry entry;
        entry.range_end = ranges[r];
        entry.truncated = truncated;
        entry.trained_loss = opt.final_loss;
        if (traj.size() >= rmse_window) {
            Trajectory truth_cut = data;
            truth_cut.times.resize(traj.size());
            truth_cut.states.resize(traj.size());
            entry.rmse = sliding_rmse(traj, truth_cut, rmse_window, unobserved);
        }
        entry.extrapolation = std::move(traj);
        out[r] = std::move(entry);
    });
    return out;
}

/// The governing equation of one state as an expression tree with the
/// configured parameter values substituted.
inline ExprPtr true_equation_expr(const SystemSpec& spec, std::size_t index) {
    auto var = [](int i) { return make_var(i); };
    auto c = [](double v) { return make_const(v); };
    auto mul = [](ExprPtr a, ExprPtr b) { return make_binary(BinOp::Mul, a, b); };
    auto add = [](ExprPtr a, ExprPtr b) { return make_binary(BinOp::Add, a, b); };
    auto sub = [](ExprPtr a, ExprPtr b) { return make_binary(BinOp::Sub, a, b); };

    if (spec.name == SystemName::LotkaVolterra3) {
        const auto& p = spec.params;
        switch (index) {
            case 0: return sub(mul(c(p.at("a")), var(0)), mul(c(p.at("b")), mul(var(0), var(1))));
            case 1:
                return sub(add(mul(c(-p.at("c")), var(1)), mul(c(p.at("d")), mul(var(0), var(1)))),
                           mul(c(p.at("e")), mul(var(1), var(2))));
            case 2: return add(mul(c(-p.at("f")), var(2)), mul(c(p.at("g")), mul(var(1), var(2))));
        }
    } else if (spec.name == SystemName::Lorenz5) {
        const auto& p = spec.params;
        const double sigma = p.at("sigma"), rho = p.at("rho"), beta = p.at("beta");
        switch (index) {
            case 0: return mul(c(sigma), sub(var(1), var(0)));
            case 1: return sub(mul(var(0), sub(c(rho), var(2))), var(1));
            case 2:
                return sub(sub(mul(var(0), var(1)), mul(c(beta), var(2))),
                           mul(var(0), var(3)));
            case 3:
                return sub(sub(mul(var(0), var(2)), mul(c(2.0), mul(var(0), var(4)))),
                           mul(c(1.0 + 2.0 * beta), var(3)));
            case 4:
                return sub(mul(c(2.0), mul(var(0), var(3))), mul(c(4.0 * beta), var(4)));
        }
    }
    throw invalid_input_error("true_equation_expr: no such equation");
}

struct CoefficientStats {
    std::size_t unknown_index = 0;
    std::map<std::string, std::pair<double, double>> stats; // term -> (mean, std)
    std::vector<std::string> member_equations;               // canonical, per included member
};

/**
 * Per-member symbolic regression: each included member's own simulated inputs
 * and network outputs are regressed separately, coefficients are extracted
 * over the degree-2 monomial basis, and per-term means and standard
 * deviations are aggregated across members (absent terms count as zero).
 */
inline std::vector<CoefficientStats> coefficient_stats(const ExperimentConfig& config,
                                                       const EnsembleResult& result,
                                                       std::size_t jobs = 0) {
    if (result.included_members.size() < 2)
        throw invalid_input_error("coefficient_stats requires at least two included members");
    const std::size_t n_members = result.per_member_inputs.size();
    const auto names = default_var_names(config.system.dim);
    const auto basis = degree2_basis(config.system.dim);

    std::vector<CoefficientStats> out(config.unknown.size());
    for (std::size_t k = 0; k < config.unknown.size(); ++k) {
        std::vector<LinearCoeffs> extracted(n_members);
        std::vector<std::string> equations(n_members);
        parallel_for(n_members, jobs, [&](std::size_t m) {
            Vec targets(result.per_member_targets[m].size());
            for (std::size_t i = 0; i < targets.size(); ++i)
                targets[i] = result.per_member_targets[m][i][k];
            SRConfig sr = config.sr;
            sr.seed = derive_seed(config.master_seed, seed_stream::sr_channel, 1000 + k);
            auto frontier = sr_search(result.per_member_inputs[m], targets, sr, 1);
            if (frontier.empty()) throw numeric_error("per-member regression produced no frontier");
            ParetoEntry chosen = select_by_score(frontier);
            extracted[m] = extract_linear_coeffs(chosen.expr, basis, names);
            equations[m] = chosen.canonical;
        });

        CoefficientStats stats;
        stats.unknown_index = config.unknown[k];
        stats.member_equations = std::move(equations);
        for (const auto& mono : basis) {
            std::string name = monomial_name(mono, names);
            double mean = 0.0;
            for (const auto& lc : extracted) mean += lc.coeffs.at(name);
            mean /= static_cast<double>(n_members);
            double var = 0.0;
            for (const auto& lc : extracted) {
                double d = lc.coeffs.at(name) - mean;
                var += d * d;
            }
            double sd = n_members > 1 ? std::sqrt(var / static_cast<double>(n_members - 1)) : 0.0;
            stats.stats[name] = {mean, sd};
        }
        out[k] = std::move(stats);
    }
    return out;
}

} // namespace eqdisc

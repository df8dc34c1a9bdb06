#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "eqdisc/dynamics.hpp"
#include "eqdisc/mlp.hpp"
#include "eqdisc/solver.hpp"
#include "eqdisc/trajectory.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

/**
 * ODE right-hand side composed of the system's known equations and a network
 * surrogate for the unknown ones. The k-th network output feeds the k-th
 * smallest unknown index; the network always sees the full state.
 */
struct HybridField {
    SystemSpec system;
    std::vector<std::size_t> unknown; // strictly ascending
    MLPSpec net;
    ParamVector params;

    void validate() const {
        system.validate();
        for (std::size_t i = 0; i < unknown.size(); ++i) {
            if (unknown[i] >= system.dim)
                throw invalid_config_error("hybrid: unknown index out of range");
            if (i > 0 && unknown[i] <= unknown[i - 1])
                throw invalid_config_error("hybrid: unknown indices must be strictly ascending");
        }
        if (unknown.size() >= system.dim && !unknown.empty())
            throw invalid_config_error("hybrid: at least one equation must remain known");
        if (!unknown.empty()) {
            net.validate();
            if (net.input_dim != system.dim)
                throw invalid_config_error("hybrid: network input dimension must equal system dimension");
            if (net.output_dim != unknown.size())
                throw invalid_config_error("hybrid: network output dimension must match unknown count");
            if (params.size() != net.param_count())
                throw invalid_config_error("hybrid: parameter vector length mismatch");
        }
    }

    Vec rhs(const Vec& state) const {
        Vec out = system.rhs(state);
        if (unknown.empty()) return out;
        Vec net_out = mlp_forward(net, params, state);
        for (std::size_t k = 0; k < unknown.size(); ++k) out[unknown[k]] = net_out[k];
        return out;
    }

    /// Vector-Jacobian product of the hybrid rhs. Returns the state cotangent
    /// and accumulates the parameter cotangent into param_grad.
    Vec vjp(const Vec& state, const Vec& cot, ParamVector& param_grad) const {
        Vec known_cot = cot;
        for (std::size_t idx : unknown) known_cot[idx] = 0.0;
        Vec state_cot = system.vjp(state, known_cot);
        if (!unknown.empty()) {
            Vec upstream(unknown.size());
            for (std::size_t k = 0; k < unknown.size(); ++k) upstream[k] = cot[unknown[k]];
            MLPGradients g = mlp_backward(net, params, state, upstream);
            for (std::size_t i = 0; i < state_cot.size(); ++i) state_cot[i] += g.input_grad[i];
            for (std::size_t i = 0; i < param_grad.size(); ++i) param_grad[i] += g.param_grad[i];
        }
        return state_cot;
    }
};

inline Vec hybrid_rhs(const HybridField& field, const Vec& state) { return field.rhs(state); }

/// Mean squared error over observed channels only:
/// L = (1/D) sum over samples and observed channels of (truth - pred)^2,
/// D = #observed channels * #samples.
inline double masked_mse(const Trajectory& pred, const Trajectory& truth,
                         const ObservationMask& mask) {
    if (pred.dim != truth.dim || pred.size() != truth.size())
        throw invalid_input_error("masked_mse: trajectory shape mismatch");
    mask.validate(pred.dim);
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (std::abs(pred.times[i] - truth.times[i]) > 1e-9 * std::max(1.0, std::abs(truth.times[i])))
            throw invalid_input_error("masked_mse: trajectory times differ");
    KahanSum acc;
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (std::size_t c = 0; c < pred.dim; ++c)
            if (mask.observed[c]) {
                double r = pred.states[i][c] - truth.states[i][c];
                acc.add(r * r);
            }
    double denom = static_cast<double>(mask.observed_count() * pred.size());
    return acc.value() / denom;
}

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
    bool diverged = false;
};

namespace detail {

/// Stored stages of one fixed-size Tsit5 step, for reverse-mode replay.
struct StepTape {
    std::array<Vec, 6> u; // stage input states, u[0] == step start
    std::array<Vec, 6> k; // stage derivatives
};

/// Forward fixed-step Tsit5 step that records its stages. Returns the
/// 5th-order end state (no error estimate; fixed-step mode needs none).
inline Vec fixed_step_record(const HybridField& field, const Vec& y, double h, StepTape& tape) {
    const std::size_t n = y.size();
    tape.u[0] = y;
    tape.k[0] = field.rhs(y);
    for (int stage = 2; stage <= 6; ++stage) {
        Vec u(n);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < stage - 1; ++j) acc += tsit5::a[stage][j] * tape.k[j][i];
            u[i] = y[i] + h * acc;
        }
        if (!all_finite(u)) throw numeric_error("hybrid solve: non-finite stage");
        tape.k[stage - 1] = field.rhs(u);
        tape.u[stage - 1] = std::move(u);
    }
    Vec y_next(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 6; ++j) acc += tsit5::b[j] * tape.k[j][i];
        y_next[i] = y[i] + h * acc;
    }
    if (!all_finite(y_next)) throw numeric_error("hybrid solve: non-finite state");
    return y_next;
}

/// Reverse sweep through one recorded step: maps the cotangent of the step's
/// end state to the cotangent of its start state, accumulating parameter
/// gradients from every stage.
inline Vec fixed_step_backward(const HybridField& field, const StepTape& tape, double h,
                               const Vec& adj_next, ParamVector& param_grad) {
    const std::size_t n = adj_next.size();
    std::array<Vec, 6> kbar;
    for (int j = 0; j < 6; ++j) {
        kbar[j].assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) kbar[j][i] = h * tsit5::b[j] * adj_next[i];
    }
    Vec ybar = adj_next;
    for (int stage = 6; stage >= 1; --stage) {
        const int si = stage - 1;
        Vec ubar = field.vjp(tape.u[si], kbar[si], param_grad);
        for (std::size_t i = 0; i < n; ++i) ybar[i] += ubar[i];
        for (int j = 0; j < si; ++j)
            for (std::size_t i = 0; i < n; ++i) kbar[j][i] += h * tsit5::a[stage][j] * ubar[i];
    }
    return ybar;
}

} // namespace detail

/**
 * Loss of the hybrid forward solve against the ground-truth window together
 * with its exact gradient with respect to the network parameters, computed by
 * reverse-mode differentiation through every stored solver stage.
 *
 * The solve starts from the trajectory's state at the window start (all
 * channels, observed or not) and runs in fixed-step mode. A divergent solve
 * reports loss = +inf with a zero gradient instead of throwing, so an
 * optimizer's line search can reject the step.
 */
inline LossGrad loss_and_grad(const HybridField& field, const Trajectory& truth,
                              const ObservationMask& mask, std::pair<double, double> train_window,
                              const SolverConfig& solver) {
    field.validate();
    mask.validate(truth.dim);
    if (!solver.fixed_step)
        throw invalid_config_error("loss_and_grad requires fixed-step solver mode");

    const auto [t0, t1] = train_window;
    auto find_index = [&](double t) {
        for (std::size_t i = 0; i < truth.size(); ++i)
            if (std::abs(truth.times[i] - t) <= 1e-9 * std::max(1.0, std::abs(t))) return i;
        throw invalid_input_error("loss_and_grad: window endpoint not on trajectory grid");
    };
    const std::size_t i0 = find_index(t0);
    const std::size_t i1 = find_index(t1);
    if (i1 <= i0) throw invalid_input_error("loss_and_grad: empty training window");

    const double sample_dt = (truth.times[i1] - truth.times[i0]) / static_cast<double>(i1 - i0);
    solver.validate(sample_dt);
    const double h = *solver.fixed_step;
    const auto per_sample = static_cast<std::size_t>(std::llround(sample_dt / h));

    const std::size_t n_samples = i1 - i0 + 1;
    const std::size_t n_steps = (n_samples - 1) * per_sample;

    LossGrad result;
    result.grad.assign(field.params.size(), 0.0);

    std::vector<detail::StepTape> tapes(n_steps);
    std::vector<Vec> pred(n_samples);
    pred[0] = truth.states[i0];
    Vec y = pred[0];
    try {
        std::size_t step = 0;
        for (std::size_t s = 1; s < n_samples; ++s) {
            for (std::size_t sub = 0; sub < per_sample; ++sub, ++step)
                y = detail::fixed_step_record(field, y, h, tapes[step]);
            pred[s] = y;
        }
    } catch (const numeric_error&) {
        result.loss = std::numeric_limits<double>::infinity();
        result.diverged = true;
        return result;
    }

    const double denom = static_cast<double>(mask.observed_count() * n_samples);
    KahanSum acc;
    for (std::size_t s = 0; s < n_samples; ++s)
        for (std::size_t c = 0; c < truth.dim; ++c)
            if (mask.observed[c]) {
                double r = pred[s][c] - truth.states[i0 + s][c];
                acc.add(r * r);
            }
    result.loss = acc.value() / denom;

    // Reverse sweep: walk samples from the end, seeding each sample's local
    // loss cotangent as it is reached.
    auto sample_cotangent = [&](std::size_t s) {
        Vec cot(truth.dim, 0.0);
        for (std::size_t c = 0; c < truth.dim; ++c)
            if (mask.observed[c])
                cot[c] = 2.0 * (pred[s][c] - truth.states[i0 + s][c]) / denom;
        return cot;
    };

    Vec adj = sample_cotangent(n_samples - 1);
    std::size_t step = n_steps;
    for (std::size_t s = n_samples - 1; s >= 1; --s) {
        for (std::size_t sub = 0; sub < per_sample; ++sub)
            adj = detail::fixed_step_backward(field, tapes[--step], h, adj, result.grad);
        if (s >= 2) {
            Vec local = sample_cotangent(s - 1);
            for (std::size_t i = 0; i < adj.size(); ++i) adj[i] += local[i];
        }
    }
    return result;
}

} // namespace eqdisc

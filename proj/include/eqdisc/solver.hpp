#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <utility>

#include "eqdisc/trajectory.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

/// Right-hand side of an autonomous ODE: state -> derivative.
using Field = std::function<Vec(const Vec&)>;

struct SolverConfig {
    double rel_tol = 1e-6;
    double abs_tol = 1e-6;
    double initial_step = 1e-3;
    std::size_t max_steps = 10'000'000;
    /// When set, adaptivity is disabled and every step uses exactly this size.
    /// Must divide the sampling interval evenly.
    std::optional<double> fixed_step;

    void validate(double sample_dt) const {
        if (!(rel_tol > 0.0) || !(abs_tol > 0.0))
            throw invalid_config_error("solver tolerances must be positive");
        if (!(initial_step > 0.0)) throw invalid_config_error("initial_step must be positive");
        if (fixed_step) {
            if (!(*fixed_step > 0.0)) throw invalid_config_error("fixed_step must be positive");
            double ratio = sample_dt / *fixed_step;
            if (std::abs(ratio - std::round(ratio)) > 1e-9 * std::max(1.0, ratio))
                throw invalid_config_error("fixed_step must divide sample_dt evenly");
        }
    }
};

/// Tsitouras 5(4) explicit Runge-Kutta coefficients. The last A row is the
/// 5th-order weight vector (first-same-as-last layout); btilde is the
/// difference between the embedded 5th- and 4th-order solutions.
namespace tsit5 {
inline constexpr std::array<double, 7> c = {0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0};
inline constexpr double a21 = 0.161;
inline constexpr double a31 = -0.008480655492356989, a32 = 0.335480655492357;
inline constexpr double a41 = 2.8971530571054935, a42 = -6.359448489975075,
                        a43 = 4.3622954328695815;
inline constexpr double a51 = 5.325864828439257, a52 = -11.748883564062828,
                        a53 = 7.4955393428898365, a54 = -0.09249506636175525;
inline constexpr double a61 = 5.86145544294642, a62 = -12.92096931784711,
                        a63 = 8.159367898576159, a64 = -0.071584973281401,
                        a65 = -0.028269050394068383;
inline constexpr double a71 = 0.09646076681806523, a72 = 0.01, a73 = 0.4798896504144996,
                        a74 = 1.379008574103742, a75 = -3.290069515436081,
                        a76 = 2.324710524099774;
inline constexpr std::array<double, 7> btilde = {
    -0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995, -0.1447110071732629,
    0.5823571654525552,      -0.45808210592918697,   0.015151515151515152};

/// a[i][j] access for the propagation stages (rows 2..6, 1-based stage index).
inline constexpr std::array<std::array<double, 6>, 7> a = {{
    {},
    {},
    {a21, 0, 0, 0, 0, 0},
    {a31, a32, 0, 0, 0, 0},
    {a41, a42, a43, 0, 0, 0},
    {a51, a52, a53, a54, 0, 0},
    {a61, a62, a63, a64, a65, 0},
}};
inline constexpr std::array<double, 6> b = {a71, a72, a73, a74, a75, a76};
} // namespace tsit5

namespace detail {
template <class F>
inline Vec eval_field(F&& field, const Vec& y) {
    Vec dy = field(y);
    if (dy.size() != y.size())
        throw invalid_input_error("field dimension does not match state dimension");
    return dy;
}
} // namespace detail

/// One Tsitouras 5(4) step of size h from y. Returns the 5th-order solution
/// and the embedded error estimate (difference between 5th- and 4th-order
/// solutions). Throws numeric_error if any stage goes non-finite.
template <class F>
std::pair<Vec, Vec> tsit5_step(F&& field, double /*t*/, const Vec& y, double h) {
    if (!(h > 0.0)) throw invalid_input_error("tsit5_step: step size must be positive");
    const std::size_t n = y.size();
    std::array<Vec, 7> k;
    Vec u = y;

    k[0] = detail::eval_field(field, y);
    for (int stage = 2; stage <= 6; ++stage) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < stage - 1; ++j) acc += tsit5::a[stage][j] * k[j][i];
            u[i] = y[i] + h * acc;
        }
        if (!all_finite(u)) throw numeric_error("tsit5_step: non-finite intermediate stage");
        k[stage - 1] = detail::eval_field(field, u);
    }

    Vec y_next(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 6; ++j) acc += tsit5::b[j] * k[j][i];
        y_next[i] = y[i] + h * acc;
    }
    if (!all_finite(y_next)) throw numeric_error("tsit5_step: non-finite result");
    k[6] = detail::eval_field(field, y_next);

    Vec err(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 7; ++j) acc += tsit5::btilde[j] * k[j][i];
        err[i] = h * acc;
    }
    return {std::move(y_next), std::move(err)};
}

/// Weighted RMS error norm with mixed tolerance scale atol + rtol*max(|y|,|y_next|).
inline double error_norm(const Vec& err, const Vec& y, const Vec& y_next,
                         const SolverConfig& config) {
    double acc = 0.0;
    for (std::size_t i = 0; i < err.size(); ++i) {
        double scale =
            config.abs_tol + config.rel_tol * std::max(std::abs(y[i]), std::abs(y_next[i]));
        double r = err[i] / scale;
        acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(err.size()));
}

/// Standard accept/shrink rule for the 5(4) pair: accept iff the weighted RMS
/// norm is at most 1; the next step is h * clamp(0.9 * norm^(-1/5), 0.2, 5).
inline std::pair<bool, double> adapt_step(const Vec& err, const Vec& y, const Vec& y_next, double h,
                                          const SolverConfig& config) {
    double norm = error_norm(err, y, y_next, config);
    double factor = 5.0;
    if (norm > 0.0) factor = std::clamp(0.9 * std::pow(norm, -0.2), 0.2, 5.0);
    return {norm <= 1.0, h * factor};
}

/**
 * Integrate an autonomous field from y0 over [t0, t1], sampling at
 * t0 + k*sample_dt (endpoints inclusive within half a step). The integrator
 * steps exactly onto each sample time; in adaptive mode steps are clipped to
 * the next sample boundary, in fixed-step mode sample_dt is subdivided by the
 * configured step.
 */
template <class F>
Trajectory integrate(F&& field, const Vec& y0, std::pair<double, double> t_span, double sample_dt,
                     const SolverConfig& config = {}) {
    const auto [t0, t1] = t_span;
    if (!(sample_dt > 0.0)) throw invalid_input_error("integrate: sample_dt must be positive");
    if (t1 < t0) throw invalid_input_error("integrate: t1 must not precede t0");
    require_finite(y0, "integrate");
    config.validate(sample_dt);

    const std::size_t n_samples =
        static_cast<std::size_t>(std::floor((t1 - t0) / sample_dt + 0.5)) + 1;

    Trajectory traj;
    traj.dim = y0.size();
    traj.times.reserve(n_samples);
    traj.states.reserve(n_samples);
    traj.times.push_back(t0);
    traj.states.push_back(y0);

    Vec y = y0;
    std::size_t steps_taken = 0;

    if (config.fixed_step) {
        const auto per_sample =
            static_cast<std::size_t>(std::llround(sample_dt / *config.fixed_step));
        const double h = *config.fixed_step;
        for (std::size_t k = 1; k < n_samples; ++k) {
            for (std::size_t s = 0; s < per_sample; ++s) {
                if (++steps_taken > config.max_steps)
                    throw divergence_error("integrate: step budget exceeded", traj.times.back());
                try {
                    y = tsit5_step(field, 0.0, y, h).first;
                } catch (const numeric_error&) {
                    throw divergence_error("integrate: solution blew up", traj.times.back());
                }
            }
            traj.times.push_back(t0 + static_cast<double>(k) * sample_dt);
            traj.states.push_back(y);
        }
        return traj;
    }

    double h = std::min(config.initial_step, sample_dt);
    double t = t0;
    for (std::size_t k = 1; k < n_samples; ++k) {
        const double t_target = t0 + static_cast<double>(k) * sample_dt;
        while (t < t_target - 1e-12 * std::max(1.0, std::abs(t_target))) {
            bool clipped = false;
            double h_try = h;
            if (t + h_try >= t_target) {
                h_try = t_target - t;
                clipped = true;
            }
            if (!(h_try > std::abs(t) * 1e-15 + 1e-300))
                throw divergence_error("integrate: step size underflow", t);
            if (++steps_taken > config.max_steps)
                throw divergence_error("integrate: step budget exceeded", t);

            Vec y_next, err;
            try {
                std::tie(y_next, err) = tsit5_step(field, t, y, h_try);
            } catch (const numeric_error&) {
                throw divergence_error("integrate: solution blew up", t);
            }
            auto [accept, h_new] = adapt_step(err, y, y_next, h_try, config);
            if (accept) {
                t = clipped ? t_target : t + h_try;
                y = std::move(y_next);
                // A clip shortens only the current step; it must not drag the
                // natural step size down for the next interval.
                h = clipped ? std::max(h, h_new) : h_new;
            } else {
                h = h_new;
            }
        }
        t = t_target;
        traj.times.push_back(t_target);
        traj.states.push_back(y);
    }
    return traj;
}

} // namespace eqdisc

#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "eqdisc/types.hpp"

namespace eqdisc {

/// Objective: parameters -> (loss, gradient). A +inf loss marks an infeasible
/// point; the gradient is ignored there.
using Objective = std::function<std::pair<double, std::vector<double>>(const std::vector<double>&)>;

struct OptRecord {
    std::size_t iteration = 0;
    std::string stage; // "adam" or "lbfgs"
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct OptResult {
    std::vector<double> params;
    std::vector<OptRecord> records;
    double final_loss = 0.0;
};

namespace detail {
inline double l2_norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}
} // namespace detail

/// Full-batch Adam with beta1=0.9, beta2=0.999, eps=1e-8. An infeasible
/// objective value mid-run skips that iteration's update; an infeasible start
/// aborts.
inline OptResult adam_run(const Objective& objective, std::vector<double> params, double lr = 0.01,
                          std::size_t iters = 1000) {
    if (!(lr > 0.0)) throw invalid_config_error("adam: learning rate must be positive");
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    OptResult result;
    result.records.reserve(iters);
    std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);

    double loss = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
        auto [l, grad] = objective(params);
        loss = l;
        if (!std::isfinite(l)) {
            if (it == 0) throw numeric_error("adam: objective is non-finite at the starting point");
            result.records.push_back({it, "adam", l, 0.0});
            continue;
        }
        result.records.push_back({it, "adam", l, detail::l2_norm(grad)});
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(it + 1));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(it + 1));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
    result.final_loss = loss;
    result.params = std::move(params);
    return result;
}

namespace detail {

struct LinePoint {
    double alpha;
    double phi;  // objective along the ray
    double dphi; // directional derivative along the ray
};

/// Strong-Wolfe line search (sufficient decrease c1, curvature c2) with
/// interpolation. After a Wolfe-acceptable point is found, up to two secant
/// refinements are applied while they strictly improve; on one-dimensional
/// parabolas the first secant lands on the exact minimizer, which is what
/// gives the quasi-Newton loop its finite termination on quadratics.
class WolfeSearch {
  public:
    WolfeSearch(const Objective& objective, const std::vector<double>& x0,
                const std::vector<double>& dir, double f0, const std::vector<double>& g0)
        : objective_(objective), x0_(x0), dir_(dir) {
        phi0_ = f0;
        dphi0_ = 0.0;
        for (std::size_t i = 0; i < dir.size(); ++i) dphi0_ += g0[i] * dir[i];
    }

    double dphi0() const { return dphi0_; }

    /// Returns true on success; fills the accepted point and its full-space data.
    bool search(double alpha_init, double& alpha_out, double& f_out, std::vector<double>& x_out,
                std::vector<double>& g_out) {
        constexpr double c1 = 1e-4, c2 = 0.9;
        constexpr int max_evals = 40;
        if (dphi0_ >= 0.0) return false; // not a descent direction

        LinePoint prev{0.0, phi0_, dphi0_};
        double alpha = alpha_init;
        int evals = 0;

        LinePoint accepted{-1.0, 0.0, 0.0};
        while (evals < max_evals) {
            LinePoint p = eval(alpha);
            ++evals;
            if (!std::isfinite(p.phi) || p.phi > phi0_ + c1 * alpha * dphi0_ ||
                (evals > 1 && p.phi >= prev.phi)) {
                if (!zoom(prev, p, c1, c2, evals, max_evals, accepted)) return false;
                break;
            }
            if (std::abs(p.dphi) <= -c2 * dphi0_) {
                accepted = p;
                remember_accepted();
                break;
            }
            if (p.dphi >= 0.0) {
                if (!zoom(p, prev, c1, c2, evals, max_evals, accepted)) return false;
                break;
            }
            prev = p;
            alpha *= 2.0;
        }
        if (accepted.alpha < 0.0) return false;

        // Secant refinement toward the one-dimensional stationary point; exact
        // on parabolas, which gives the quasi-Newton loop finite termination
        // on quadratics.
        for (int r = 0; r < 2 && evals < max_evals; ++r) {
            double denom = accepted.dphi - dphi0_;
            if (std::abs(accepted.dphi) < 1e-18 || std::abs(denom) < 1e-300) break;
            double alpha_star = -dphi0_ * accepted.alpha / denom;
            if (!(alpha_star > 0.0) || !std::isfinite(alpha_star)) break;
            if (std::abs(alpha_star - accepted.alpha) <= 1e-12 * accepted.alpha) break;
            LinePoint q = eval(alpha_star);
            ++evals;
            bool wolfe = std::isfinite(q.phi) && q.phi <= phi0_ + c1 * alpha_star * dphi0_ &&
                         std::abs(q.dphi) <= -c2 * dphi0_;
            if (wolfe && q.phi < accepted.phi) {
                accepted = q;
                remember_accepted();
            } else {
                break;
            }
        }

        alpha_out = accepted.alpha;
        f_out = acc_f_;
        x_out = std::move(acc_x_);
        g_out = std::move(acc_g_);
        return true;
    }

  private:
    LinePoint eval(double alpha) {
        std::vector<double> x(x0_.size());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = x0_[i] + alpha * dir_[i];
        auto [f, g] = objective_(x);
        double dphi = 0.0;
        if (std::isfinite(f))
            for (std::size_t i = 0; i < x.size(); ++i) dphi += g[i] * dir_[i];
        else
            dphi = std::numeric_limits<double>::quiet_NaN();
        last_x_ = std::move(x);
        last_g_ = std::move(g);
        last_f_ = f;
        return {alpha, f, dphi};
    }

    /// Snapshot the most recent evaluation as the accepted point.
    void remember_accepted() {
        acc_x_ = last_x_;
        acc_g_ = last_g_;
        acc_f_ = last_f_;
    }

    /// Nocedal-Wright zoom on a bracketing interval; bisection with Armijo /
    /// curvature checks. lo must satisfy Armijo.
    bool zoom(LinePoint lo, LinePoint hi, double c1, double c2, int& evals, int max_evals,
              LinePoint& accepted) {
        for (; evals < max_evals; ++evals) {
            double alpha = 0.5 * (lo.alpha + hi.alpha);
            if (!(alpha > 0.0) || std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, lo.alpha))
                return false;
            LinePoint p = eval(alpha);
            if (!std::isfinite(p.phi) || p.phi > phi0_ + c1 * alpha * dphi0_ || p.phi >= lo.phi) {
                hi = p;
                continue;
            }
            if (std::abs(p.dphi) <= -c2 * dphi0_) {
                accepted = p;
                remember_accepted();
                return true;
            }
            if (p.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
            lo = p;
        }
        return false;
    }

    const Objective& objective_;
    const std::vector<double>& x0_;
    const std::vector<double>& dir_;
    double phi0_ = 0.0;
    double dphi0_ = 0.0;

    std::vector<double> last_x_;
    std::vector<double> last_g_;
    double last_f_ = 0.0;

    std::vector<double> acc_x_;
    std::vector<double> acc_g_;
    double acc_f_ = 0.0;
};

} // namespace detail

/**
 * Limited-memory BFGS with strong-Wolfe line search. Stops early when the
 * gradient norm drops below 1e-10 or the line search cannot make progress
 * (recorded, not an error). The returned parameters never have a higher loss
 * than the starting point.
 */
inline OptResult lbfgs_run(const Objective& objective, std::vector<double> params,
                           std::size_t iters = 1000, std::size_t memory = 10) {
    if (memory < 1) throw invalid_config_error("lbfgs: memory must be at least 1");

    OptResult result;
    auto [f, g] = objective(params);
    if (!std::isfinite(f)) throw numeric_error("lbfgs: objective is non-finite at the starting point");

    std::deque<std::vector<double>> s_hist, y_hist;
    std::deque<double> rho_hist;

    std::vector<double> best_x = params;
    double best_f = f;

    for (std::size_t it = 0; it < iters; ++it) {
        double gnorm = detail::l2_norm(g);
        if (gnorm < 1e-10) break;

        // two-loop recursion
        std::vector<double> q = g;
        std::vector<double> alpha_coef(s_hist.size());
        for (std::size_t i = s_hist.size(); i-- > 0;) {
            double a = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) a += s_hist[i][j] * q[j];
            a *= rho_hist[i];
            alpha_coef[i] = a;
            for (std::size_t j = 0; j < q.size(); ++j) q[j] -= a * y_hist[i][j];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            double sy = 0.0, yy = 0.0;
            const auto& s = s_hist.back();
            const auto& y = y_hist.back();
            for (std::size_t j = 0; j < q.size(); ++j) {
                sy += s[j] * y[j];
                yy += y[j] * y[j];
            }
            if (yy > 0.0) gamma = sy / yy;
        }
        for (double& x : q) x *= gamma;
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            double b = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) b += y_hist[i][j] * q[j];
            b *= rho_hist[i];
            for (std::size_t j = 0; j < q.size(); ++j) q[j] += (alpha_coef[i] - b) * s_hist[i][j];
        }
        std::vector<double> dir(q.size());
        for (std::size_t j = 0; j < q.size(); ++j) dir[j] = -q[j];

        detail::WolfeSearch search(objective, params, dir, f, g);
        double alpha = 0.0, f_new = 0.0;
        std::vector<double> x_new, g_new;
        if (!search.search(1.0, alpha, f_new, x_new, g_new)) break; // clean early stop

        std::vector<double> s(params.size()), y(params.size());
        for (std::size_t j = 0; j < params.size(); ++j) {
            s[j] = x_new[j] - params[j];
            y[j] = g_new[j] - g[j];
        }
        double sy = 0.0;
        for (std::size_t j = 0; j < params.size(); ++j) sy += s[j] * y[j];
        if (sy > 1e-300) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }

        params = std::move(x_new);
        f = f_new;
        g = std::move(g_new);
        result.records.push_back({it, "lbfgs", f, detail::l2_norm(g)});
        if (f < best_f) {
            best_f = f;
            best_x = params;
        }
    }

    result.params = std::move(best_x);
    result.final_loss = best_f;
    return result;
}

struct TrainSchedule {
    double adam_lr = 0.01;
    std::size_t adam_iters = 1000;
    std::size_t lbfgs_iters = 1000;
    std::size_t lbfgs_memory = 10;
    /// Number of L-BFGS runs composed back to back. A fresh run drops stale
    /// curvature pairs, which digs noticeably deeper on stiff landscapes.
    std::size_t lbfgs_restarts = 1;
};

/// Two-stage training: Adam warm-up, then L-BFGS refinement (optionally
/// restarted). The returned loss never exceeds the best stage result.
inline OptResult train(const Objective& objective, std::vector<double> params0,
                       const TrainSchedule& schedule) {
    OptResult adam;
    if (schedule.adam_iters > 0) {
        adam = adam_run(objective, std::move(params0), schedule.adam_lr, schedule.adam_iters);
    } else {
        adam.params = std::move(params0);
        auto [f, g] = objective(adam.params);
        (void)g;
        adam.final_loss = f;
    }
    if (schedule.lbfgs_iters == 0 || schedule.lbfgs_restarts == 0) return adam;

    OptResult out;
    out.records = std::move(adam.records);
    out.params = std::move(adam.params);
    out.final_loss = adam.final_loss;
    for (std::size_t round = 0; round < schedule.lbfgs_restarts; ++round) {
        OptResult refined =
            lbfgs_run(objective, out.params, schedule.lbfgs_iters, schedule.lbfgs_memory);
        out.records.insert(out.records.end(), refined.records.begin(), refined.records.end());
        bool improved = refined.final_loss < out.final_loss;
        if (improved) {
            out.params = std::move(refined.params);
            out.final_loss = refined.final_loss;
        }
        if (!improved || refined.records.empty()) break;
    }
    return out;
}

} // namespace eqdisc

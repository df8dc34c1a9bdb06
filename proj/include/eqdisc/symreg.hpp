#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "eqdisc/expr.hpp"
#include "eqdisc/optimize.hpp"
#include "eqdisc/parallel.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

struct SRConfig {
    std::size_t population_size = 33;
    std::size_t n_populations = 50; // desk-scale default; 1000 for a full-budget run
    std::size_t iterations = 40;    // generations per island; 200 for a full-budget run
    std::size_t max_complexity = 20;
    std::size_t tournament_size = 5;
    double p_mutation = 0.4;
    double p_crossover = 0.5;
    double parsimony = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (population_size == 0 || n_populations == 0 || iterations == 0 || max_complexity == 0)
            throw invalid_config_error("sr: counts must be positive");
        if (tournament_size == 0 || tournament_size > population_size)
            throw invalid_config_error("sr: tournament size must be in [1, population_size]");
        if (p_mutation < 0.0 || p_crossover < 0.0 || p_mutation + p_crossover > 1.0)
            throw invalid_config_error("sr: mutation+crossover probabilities must lie in [0,1]");
        if (parsimony < 0.0) throw invalid_config_error("sr: parsimony must be non-negative");
    }
};

struct ParetoEntry {
    ExprPtr expr;
    std::size_t complexity = 0;
    double mse = 0.0;
    double score = 0.0;
    std::string infix;
    std::string canonical;
};

namespace gp {

using Rng = std::mt19937_64;

inline ExprPtr random_leaf(Rng& rng, std::size_t n_vars) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < 0.7) {
        std::uniform_int_distribution<int> vi(0, static_cast<int>(n_vars) - 1);
        return make_var(vi(rng));
    }
    std::normal_distribution<double> c(0.0, 2.0);
    return make_const(c(rng));
}

inline BinOp random_binop(Rng& rng) {
    std::uniform_int_distribution<int> op(0, 3);
    return static_cast<BinOp>(op(rng));
}

inline ExprPtr random_tree(Rng& rng, std::size_t n_vars, int budget) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (budget < 3) {
        if (budget >= 2 && u(rng) < 0.1)
            return make_unary(UnOp::Exp, random_leaf(rng, n_vars));
        return random_leaf(rng, n_vars);
    }
    double r = u(rng);
    if (r < 0.35) return random_leaf(rng, n_vars);
    if (r < 0.45) return make_unary(UnOp::Exp, random_tree(rng, n_vars, budget - 1));
    std::uniform_int_distribution<int> split(1, budget - 2);
    int left_budget = split(rng);
    return make_binary(random_binop(rng), random_tree(rng, n_vars, left_budget),
                       random_tree(rng, n_vars, budget - 1 - left_budget));
}

/// Subtree at preorder index idx (0 = root).
inline ExprPtr nth_subtree(const ExprPtr& e, int idx) {
    if (idx == 0) return e;
    if (e->kind == ExprNode::Kind::Unary) return nth_subtree(e->left, idx - 1);
    int left_size = e->left->size;
    if (idx <= left_size) return nth_subtree(e->left, idx - 1);
    return nth_subtree(e->right, idx - 1 - left_size);
}

/// New tree with the subtree at preorder index idx replaced; shares everything else.
inline ExprPtr replace_subtree(const ExprPtr& e, int idx, const ExprPtr& repl) {
    if (idx == 0) return repl;
    if (e->kind == ExprNode::Kind::Unary)
        return make_unary(e->un_op, replace_subtree(e->left, idx - 1, repl));
    int left_size = e->left->size;
    if (idx <= left_size)
        return make_binary(e->bin_op, replace_subtree(e->left, idx - 1, repl), e->right);
    return make_binary(e->bin_op, e->left, replace_subtree(e->right, idx - 1 - left_size, repl));
}

inline void internal_indices(const ExprPtr& e, int base, std::vector<int>& out) {
    if (e->kind == ExprNode::Kind::Unary) {
        out.push_back(base);
        internal_indices(e->left, base + 1, out);
    } else if (e->kind == ExprNode::Kind::Binary) {
        out.push_back(base);
        internal_indices(e->left, base + 1, out);
        internal_indices(e->right, base + 1 + e->left->size, out);
    }
}

/// One of four variants: point mutation, node insertion, subtree deletion
/// (hoist a child), or replacement of a subtree by a fresh leaf. Offspring
/// exceeding the complexity cap fall back to the parent.
inline ExprPtr mutate(const ExprPtr& e, Rng& rng, std::size_t n_vars, std::size_t max_complexity) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> node_pick(0, e->size - 1);
    std::uniform_int_distribution<int> variant(0, 3);
    switch (variant(rng)) {
        case 0: { // point mutation
            int idx = node_pick(rng);
            ExprPtr target = nth_subtree(e, idx);
            ExprPtr repl;
            switch (target->kind) {
                case ExprNode::Kind::Var: {
                    std::uniform_int_distribution<int> vi(0, static_cast<int>(n_vars) - 1);
                    repl = make_var(vi(rng));
                    break;
                }
                case ExprNode::Kind::Const: {
                    std::normal_distribution<double> jitter(0.0, 1.0);
                    double scale = 0.5 + 0.5 * std::abs(target->value);
                    repl = make_const(target->value + scale * jitter(rng));
                    break;
                }
                case ExprNode::Kind::Binary:
                    repl = make_binary(random_binop(rng), target->left, target->right);
                    break;
                case ExprNode::Kind::Unary:
                    // only one unary operator exists; drop it instead
                    repl = target->left;
                    break;
            }
            return replace_subtree(e, idx, repl);
        }
        case 1: { // insert a node above a random subtree
            int idx = node_pick(rng);
            ExprPtr target = nth_subtree(e, idx);
            ExprPtr ins;
            if (u(rng) < 0.1) {
                ins = make_unary(UnOp::Exp, target);
            } else {
                // graft either a fresh leaf or a small random subtree
                ExprPtr graft = u(rng) < 0.5 ? random_leaf(rng, n_vars)
                                             : random_tree(rng, n_vars, 3);
                ins = u(rng) < 0.5 ? make_binary(random_binop(rng), target, graft)
                                   : make_binary(random_binop(rng), graft, target);
            }
            ExprPtr out = replace_subtree(e, idx, ins);
            return static_cast<std::size_t>(out->size) <= max_complexity ? out : e;
        }
        case 2: { // delete a subtree by hoisting one of its children
            std::vector<int> internals;
            internal_indices(e, 0, internals);
            if (internals.empty()) return random_leaf(rng, n_vars);
            std::uniform_int_distribution<std::size_t> pick(0, internals.size() - 1);
            int idx = internals[pick(rng)];
            ExprPtr target = nth_subtree(e, idx);
            ExprPtr child = target->kind == ExprNode::Kind::Unary
                                ? target->left
                                : (u(rng) < 0.5 ? target->left : target->right);
            return replace_subtree(e, idx, child);
        }
        default: { // replace subtree with a random leaf
            int idx = node_pick(rng);
            return replace_subtree(e, idx, random_leaf(rng, n_vars));
        }
    }
}

/// Subtree crossover; oversized offspring retries a few times, then falls
/// back to the first parent.
inline ExprPtr crossover(const ExprPtr& a, const ExprPtr& b, Rng& rng,
                         std::size_t max_complexity) {
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::uniform_int_distribution<int> pa(0, a->size - 1), pb(0, b->size - 1);
        ExprPtr donor = nth_subtree(b, pb(rng));
        ExprPtr child = replace_subtree(a, pa(rng), donor);
        if (static_cast<std::size_t>(child->size) <= max_complexity) return child;
    }
    return a;
}

struct Scored {
    ExprPtr expr;
    double mse = std::numeric_limits<double>::infinity();
    double fitness = std::numeric_limits<double>::infinity();
};

/// Solve the symmetric system A x = b (m <= 8) by Gaussian elimination with
/// partial pivoting. Returns false on a near-singular matrix.
inline bool solve_dense(std::vector<std::vector<double>> a, std::vector<double> b,
                        std::vector<double>& x) {
    const std::size_t m = b.size();
    for (std::size_t col = 0; col < m; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < m; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < 1e-12) return false;
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = col + 1; r < m; ++r) {
            double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < m; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    x.assign(m, 0.0);
    for (std::size_t r = m; r-- > 0;) {
        double acc = b[r];
        for (std::size_t c = r + 1; c < m; ++c) acc -= a[r][c] * x[c];
        x[r] = acc / a[r][r];
    }
    return true;
}

inline bool has_constants(const ExprPtr& e) {
    switch (e->kind) {
        case ExprNode::Kind::Const: return true;
        case ExprNode::Kind::Var: return false;
        case ExprNode::Kind::Unary: return has_constants(e->left);
        case ExprNode::Kind::Binary: return has_constants(e->left) || has_constants(e->right);
    }
    return false;
}

inline Scored score_expr(const ExprPtr& e, const std::vector<Vec>& inputs, const Vec& targets,
                         double parsimony) {
    Scored s;
    s.expr = e;
    s.mse = expr_mse(e, inputs, targets);
    s.fitness = s.mse + parsimony * static_cast<double>(e->size);
    return s;
}

/// Closed-form least-squares fit of a*expr + b onto the targets. A structure
/// that is affinely related to the target becomes competitive immediately,
/// without waiting for constant mutations to stumble onto the right scale.
inline std::optional<Scored> affine_rescue(const ExprPtr& e, const std::vector<Vec>& inputs,
                                           const Vec& targets, double parsimony,
                                           std::size_t max_complexity) {
    EvalResult ev = eval_expr(e, inputs);
    if (ev.poisoned) return std::nullopt;
    const double n = static_cast<double>(targets.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        sx += ev.values[i];
        sy += targets[i];
        sxx += ev.values[i] * ev.values[i];
        sxy += ev.values[i] * targets[i];
    }
    const double denom = n * sxx - sx * sx;
    if (!(std::abs(denom) > 1e-12 * std::max(1.0, n * sxx))) return std::nullopt;
    const double a = (n * sxy - sx * sy) / denom;
    const double b = (sy - a * sx) / n;
    if (!std::isfinite(a) || !std::isfinite(b)) return std::nullopt;

    const double target_scale = std::max(1e-12, std::abs(sy / n)) + 1.0;
    ExprPtr scaled = e;
    if (std::abs(a - 1.0) > 1e-12) scaled = make_binary(BinOp::Mul, make_const(a), scaled);
    if (std::abs(b) > 1e-10 * target_scale) scaled = make_binary(BinOp::Add, scaled, make_const(b));
    if (static_cast<std::size_t>(scaled->size) > max_complexity) return std::nullopt;
    return score_expr(scaled, inputs, targets, parsimony);
}

/// Closed-form least-squares fit of a*u + b*v + c onto the targets, composing
/// two candidate structures linearly. Solves the 3x3 normal equations.
inline std::optional<Scored> pair_rescue(const ExprPtr& u, const ExprPtr& v,
                                         const std::vector<Vec>& inputs, const Vec& targets,
                                         double parsimony, std::size_t max_complexity) {
    if (static_cast<std::size_t>(u->size + v->size) + 7 > max_complexity) return std::nullopt;
    EvalResult eu = eval_expr(u, inputs);
    EvalResult ev = eval_expr(v, inputs);
    if (eu.poisoned || ev.poisoned) return std::nullopt;

    const double n = static_cast<double>(targets.size());
    double suu = 0, svv = 0, suv = 0, su = 0, sv = 0, sut = 0, svt = 0, st = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double a = eu.values[i], b = ev.values[i], t = targets[i];
        suu += a * a;
        svv += b * b;
        suv += a * b;
        su += a;
        sv += b;
        sut += a * t;
        svt += b * t;
        st += t;
    }
    // normal equations for [a b c]: [[suu suv su],[suv svv sv],[su sv n]]
    auto det3 = [](double m00, double m01, double m02, double m10, double m11, double m12,
                   double m20, double m21, double m22) {
        return m00 * (m11 * m22 - m12 * m21) - m01 * (m10 * m22 - m12 * m20) +
               m02 * (m10 * m21 - m11 * m20);
    };
    double det = det3(suu, suv, su, suv, svv, sv, su, sv, n);
    double scale = std::max({std::abs(suu), std::abs(svv), n, 1.0});
    if (!(std::abs(det) > 1e-10 * scale * scale * scale)) return std::nullopt;
    double a = det3(sut, suv, su, svt, svv, sv, st, sv, n) / det;
    double b = det3(suu, sut, su, suv, svt, sv, su, st, n) / det;
    double c = det3(suu, suv, sut, suv, svv, svt, su, sv, st) / det;
    if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(c)) return std::nullopt;

    auto weighted = [](double coeff, const ExprPtr& e) {
        return coeff == 1.0 ? e : make_binary(BinOp::Mul, make_const(coeff), e);
    };
    ExprPtr combo = make_binary(BinOp::Add, weighted(a, u), weighted(b, v));
    const double target_scale = std::max(1e-12, std::abs(st / n)) + 1.0;
    if (std::abs(c) > 1e-10 * target_scale) combo = make_binary(BinOp::Add, combo, make_const(c));
    if (static_cast<std::size_t>(combo->size) > max_complexity) return std::nullopt;
    return score_expr(combo, inputs, targets, parsimony);
}

/**
 * Best-subset linear assembly over a feature dictionary: fit every
 * combination of up to three dictionary features (plus intercept) in closed
 * form and return the best assembled expression by regularized fitness. This
 * is the step that composes multi-term equations whose individual pieces
 * never win tournaments on their own. The dictionary is pre-trimmed to the
 * strongest candidates so the combinatorial sweep stays small.
 */
inline std::vector<Scored> assemble_linear(const std::vector<ExprPtr>& dictionary,
                                           const std::vector<Vec>& inputs, const Vec& targets,
                                           double parsimony, std::size_t max_complexity,
                                           std::size_t n_core = 0) {
    const std::size_t n = targets.size();
    double t_mean = 0.0;
    for (double t : targets) t_mean += t;
    t_mean /= static_cast<double>(n);

    struct Feature {
        ExprPtr expr;
        Vec values;
        double corr;
        bool core;
    };
    std::vector<Feature> feats;
    for (std::size_t di = 0; di < dictionary.size(); ++di) {
        const auto& f = dictionary[di];
        EvalResult ev = eval_expr(f, inputs);
        if (ev.poisoned) continue;
        double mean = 0.0;
        for (double x : ev.values) mean += x;
        mean /= static_cast<double>(n);
        double var = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            var += (ev.values[i] - mean) * (ev.values[i] - mean);
            dot += (ev.values[i] - mean) * (targets[i] - t_mean);
        }
        if (var < 1e-14) continue;
        feats.push_back({f, std::move(ev.values), std::abs(dot) / std::sqrt(var), di < n_core});
    }
    if (feats.empty()) return {};
    // the core features (raw monomials) always stay in the sweep; the rest
    // compete by correlation for the remaining slots
    std::stable_sort(feats.begin(), feats.end(), [](const Feature& a, const Feature& b) {
        if (a.core != b.core) return a.core;
        return a.corr > b.corr;
    });
    if (feats.size() > 32) feats.resize(32);

    const double t_scale = std::max(1.0, std::abs(t_mean));
    std::optional<Scored> best_fitness, best_mse;

    auto try_subset = [&](const std::vector<std::size_t>& subset) {
        const std::size_t k = subset.size();
        std::vector<std::vector<double>> normal(k + 1, std::vector<double>(k + 1, 0.0));
        std::vector<double> rhs(k + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> row(k + 1, 1.0);
            for (std::size_t c = 0; c < k; ++c) row[c] = feats[subset[c]].values[i];
            for (std::size_t r = 0; r < k + 1; ++r) {
                for (std::size_t c = 0; c < k + 1; ++c) normal[r][c] += row[r] * row[c];
                rhs[r] += row[r] * targets[i];
            }
        }
        std::vector<double> coef;
        if (!solve_dense(normal, rhs, coef)) return;

        std::size_t assembled_size = 3; // pessimistic slack for the intercept
        for (std::size_t c = 0; c < k; ++c)
            assembled_size += static_cast<std::size_t>(feats[subset[c]].expr->size) + 3;
        if (assembled_size > max_complexity + 6) return; // cheap pre-filter

        ExprPtr acc;
        for (std::size_t c = 0; c < k; ++c) {
            if (std::abs(coef[c]) < 1e-12 * t_scale) continue;
            ExprPtr piece = (coef[c] == 1.0)
                                ? feats[subset[c]].expr
                                : make_binary(BinOp::Mul, make_const(coef[c]), feats[subset[c]].expr);
            acc = acc ? make_binary(BinOp::Add, acc, piece) : piece;
        }
        if (!acc)
            acc = make_const(coef[k]);
        else if (std::abs(coef[k]) > 1e-10 * t_scale)
            acc = make_binary(BinOp::Add, acc, make_const(coef[k]));

        if (static_cast<std::size_t>(acc->size) > max_complexity) return;
        Scored s = score_expr(acc, inputs, targets, parsimony);
        if (!best_fitness || s.fitness < best_fitness->fitness) best_fitness = s;
        if (!best_mse || s.mse < best_mse->mse) best_mse = s;
    };

    const std::size_t m = feats.size();
    for (std::size_t a = 0; a < m; ++a) try_subset({a});
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = a + 1; b < m; ++b) try_subset({a, b});
    const std::size_t triple_cap = m;
    for (std::size_t a = 0; a < triple_cap; ++a)
        for (std::size_t b = a + 1; b < triple_cap; ++b)
            for (std::size_t c = b + 1; c < triple_cap; ++c) try_subset({a, b, c});

    std::vector<Scored> out;
    if (best_fitness) out.push_back(*best_fitness);
    if (best_mse && (!best_fitness || best_mse->expr != best_fitness->expr)) out.push_back(*best_mse);
    return out;
}

inline std::size_t tournament(const std::vector<Scored>& scored, std::size_t k, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, scored.size() - 1);
    std::size_t best = pick(rng);
    for (std::size_t i = 1; i < k; ++i) {
        std::size_t cand = pick(rng);
        if (scored[cand].fitness < scored[best].fitness) best = cand;
    }
    return best;
}

/// One generation over a scored population, in place. Slots untouched by
/// crossover or mutation keep their original occupant, and the best parent is
/// re-inserted over the worst offspring if no offspring matches it.
inline void generation_step(std::vector<Scored>& scored, const std::vector<Vec>& inputs,
                            const Vec& targets, const SRConfig& config, Rng& rng,
                            std::size_t n_vars) {
    std::uniform_real_distribution<double> u(0.0, 1.0);

    std::size_t best_parent = 0;
    for (std::size_t i = 1; i < scored.size(); ++i)
        if (scored[i].fitness < scored[best_parent].fitness) best_parent = i;
    Scored elite = scored[best_parent];

    std::vector<Scored> next(scored.size());
    for (std::size_t i = 0; i < scored.size(); ++i) {
        double r = u(rng);
        if (r < config.p_crossover) {
            const ExprPtr& a = scored[tournament(scored, config.tournament_size, rng)].expr;
            const ExprPtr& b = scored[tournament(scored, config.tournament_size, rng)].expr;
            next[i] = score_expr(crossover(a, b, rng, config.max_complexity), inputs, targets,
                                 config.parsimony);
        } else if (r < config.p_crossover + config.p_mutation) {
            const ExprPtr& a = scored[tournament(scored, config.tournament_size, rng)].expr;
            next[i] = score_expr(mutate(a, rng, n_vars, config.max_complexity), inputs, targets,
                                 config.parsimony);
        } else {
            next[i] = scored[i];
        }
    }

    std::size_t best_child = 0, worst_child = 0;
    for (std::size_t i = 1; i < next.size(); ++i) {
        if (next[i].fitness < next[best_child].fitness) best_child = i;
        if (next[i].fitness > next[worst_child].fitness) worst_child = i;
    }
    if (next[best_child].fitness > elite.fitness) next[worst_child] = elite;

    scored = std::move(next);
}

} // namespace gp

/// One generation of tournament selection, crossover, and mutation with
/// elitism of one. Population size is preserved.
inline std::vector<ExprPtr> evolve_population(const std::vector<ExprPtr>& pop,
                                              const std::vector<Vec>& inputs, const Vec& targets,
                                              const SRConfig& config, std::mt19937_64& rng) {
    config.validate();
    if (pop.size() != config.population_size)
        throw invalid_input_error("evolve_population: population size mismatch");
    if (inputs.empty() || inputs.size() != targets.size())
        throw invalid_input_error("evolve_population: inputs/targets shape mismatch");
    const std::size_t n_vars = inputs[0].size();

    std::vector<gp::Scored> scored(pop.size());
    for (std::size_t i = 0; i < pop.size(); ++i)
        scored[i] = gp::score_expr(pop[i], inputs, targets, config.parsimony);
    gp::generation_step(scored, inputs, targets, config, rng, n_vars);

    std::vector<ExprPtr> out(scored.size());
    for (std::size_t i = 0; i < scored.size(); ++i) out[i] = scored[i].expr;
    return out;
}

/**
 * Refine every constant in the expression by L-BFGS on the data misfit, with
 * central-finite-difference gradients over the constants. The returned tree
 * never fits worse than the input; an expression without constants is
 * returned unchanged.
 */
inline ExprPtr fit_constants(const ExprPtr& expr, const std::vector<Vec>& inputs,
                             const Vec& targets, std::size_t lbfgs_iters = 60) {
    std::vector<int> const_idx;
    std::function<void(const ExprPtr&, int)> walk = [&](const ExprPtr& e, int base) {
        if (e->kind == ExprNode::Kind::Const) {
            const_idx.push_back(base);
        } else if (e->kind == ExprNode::Kind::Unary) {
            walk(e->left, base + 1);
        } else if (e->kind == ExprNode::Kind::Binary) {
            walk(e->left, base + 1);
            walk(e->right, base + 1 + e->left->size);
        }
    };
    walk(expr, 0);
    if (const_idx.empty()) return expr;

    std::vector<double> c0(const_idx.size());
    for (std::size_t i = 0; i < const_idx.size(); ++i)
        c0[i] = gp::nth_subtree(expr, const_idx[i])->value;

    auto rebuild = [&](const std::vector<double>& c) {
        ExprPtr e = expr;
        for (std::size_t i = 0; i < const_idx.size(); ++i)
            e = gp::replace_subtree(e, const_idx[i], make_const(c[i]));
        return e;
    };
    auto mse_at = [&](const std::vector<double>& c) { return expr_mse(rebuild(c), inputs, targets); };

    const double mse0 = mse_at(c0);
    if (!std::isfinite(mse0)) return expr;

    Objective objective = [&](const std::vector<double>& c) {
        double f = mse_at(c);
        std::vector<double> grad(c.size(), 0.0);
        if (std::isfinite(f)) {
            for (std::size_t i = 0; i < c.size(); ++i) {
                double eps = 1e-6 * std::max(1.0, std::abs(c[i]));
                std::vector<double> cp = c, cm = c;
                cp[i] += eps;
                cm[i] -= eps;
                double fp = mse_at(cp), fm = mse_at(cm);
                grad[i] = (std::isfinite(fp) && std::isfinite(fm)) ? (fp - fm) / (2.0 * eps) : 0.0;
            }
        }
        return std::make_pair(f, grad);
    };

    try {
        OptResult res = lbfgs_run(objective, c0, lbfgs_iters, 10);
        if (res.final_loss <= mse0) return rebuild(res.params);
    } catch (const numeric_error&) {
        // fall through to the original tree
    }
    return expr;
}

/// Attach scores along a complexity-sorted frontier: the log-mse drop per
/// unit of added complexity, zero for the first entry.
inline void attach_scores(std::vector<ParetoEntry>& frontier) {
    for (std::size_t i = 0; i < frontier.size(); ++i) {
        if (i == 0) {
            frontier[i].score = 0.0;
            continue;
        }
        double prev = std::log(std::max(frontier[i - 1].mse, 1e-300));
        double cur = std::log(std::max(frontier[i].mse, 1e-300));
        double dc = static_cast<double>(frontier[i].complexity - frontier[i - 1].complexity);
        frontier[i].score = (prev - cur) / dc;
    }
}

/// Feature dictionary for the linear assembler: every variable, every
/// pairwise product, plus the small structures the search has kept so far
/// (deduplicated on their rendered form).
inline std::vector<ExprPtr> detail_sr_dictionary(const std::vector<ExprPtr>& pool,
                                                 std::size_t n_vars, std::size_t* n_core = nullptr) {
    std::vector<ExprPtr> dict;
    for (std::size_t i = 0; i < n_vars; ++i) dict.push_back(make_var(static_cast<int>(i)));
    for (std::size_t i = 0; i < n_vars; ++i)
        for (std::size_t j = i; j < n_vars; ++j)
            dict.push_back(make_binary(BinOp::Mul, make_var(static_cast<int>(i)),
                                       make_var(static_cast<int>(j))));
    if (n_core) *n_core = dict.size();
    std::set<std::string> seen;
    const auto names = default_var_names(n_vars);
    for (const auto& d : dict) seen.insert(to_infix(d, names));
    for (const auto& e : pool) {
        if (e->size > 7 || e->kind == ExprNode::Kind::Const) continue;
        if (seen.insert(to_infix(e, names)).second) dict.push_back(e);
        if (dict.size() > 256) break;
    }
    return dict;
}

/// Highest-score entry; ties resolve to the simpler expression.
inline ParetoEntry select_by_score(std::vector<ParetoEntry> frontier) {
    if (frontier.empty()) throw invalid_input_error("select_by_score: empty frontier");
    attach_scores(frontier);
    std::size_t best = 0;
    for (std::size_t i = 1; i < frontier.size(); ++i)
        if (frontier[i].score > frontier[best].score) best = i;
    return frontier[best];
}

/**
 * Island-model genetic-programming search. Islands evolve independently on
 * per-island seed streams; every 10 generations the global best is migrated
 * into each island over its worst member. Hall-of-fame entries per complexity
 * are constant-refined and canonicalized at the end, then reduced to the
 * Pareto frontier over (complexity, mse) with scores attached.
 *
 * Deterministic for a fixed config.seed regardless of how many worker
 * threads run the islands.
 */
inline std::vector<ParetoEntry> sr_search(const std::vector<Vec>& inputs, const Vec& targets,
                                          const SRConfig& config, std::size_t jobs = 0) {
    config.validate();
    if (inputs.empty()) throw invalid_input_error("sr_search: empty inputs");
    if (inputs.size() != targets.size())
        throw invalid_input_error("sr_search: inputs/targets length mismatch");
    const std::size_t n_vars = inputs[0].size();
    for (const auto& row : inputs)
        if (row.size() != n_vars) throw invalid_input_error("sr_search: ragged input matrix");

    struct Island {
        std::vector<gp::Scored> scored;
        gp::Rng rng;
        std::map<int, std::pair<double, ExprPtr>> hof; // complexity -> (mse, expr)
        const ExprNode* last_fitted = nullptr;
    };

    std::vector<Island> islands(config.n_populations);
    for (std::size_t isl = 0; isl < islands.size(); ++isl) {
        auto& island = islands[isl];
        island.rng.seed(derive_seed(config.seed, /*stream=*/0x5e, isl));
        island.scored.resize(config.population_size);
        const int init_budget = static_cast<int>(std::min<std::size_t>(config.max_complexity, 7));
        for (auto& slot : island.scored)
            slot = gp::score_expr(gp::random_tree(island.rng, n_vars, init_budget), inputs, targets,
                                  config.parsimony);
    }

    auto offer_to_hof = [&](Island& island, const gp::Scored& s) {
        if (!std::isfinite(s.mse)) return;
        int c = s.expr->size;
        if (static_cast<std::size_t>(c) > config.max_complexity) return;
        auto it = island.hof.find(c);
        if (it == island.hof.end() || s.mse < it->second.first) island.hof[c] = {s.mse, s.expr};
    };
    auto update_hof = [&](Island& island) {
        for (const auto& s : island.scored) {
            offer_to_hof(island, s);
            if (std::isfinite(s.mse) && s.mse > 0.0) {
                auto rescued = gp::affine_rescue(s.expr, inputs, targets, config.parsimony,
                                                 config.max_complexity);
                if (rescued && rescued->mse < 0.5 * s.mse) offer_to_hof(island, *rescued);
            }
        }
    };
    for (auto& island : islands) update_hof(island);

    constexpr std::size_t migration_interval = 10;
    std::size_t done = 0;
    while (done < config.iterations) {
        std::size_t chunk = std::min(migration_interval, config.iterations - done);
        parallel_for(islands.size(), jobs, [&](std::size_t isl) {
            Island& island = islands[isl];
            for (std::size_t g = 0; g < chunk; ++g) {
                gp::generation_step(island.scored, inputs, targets, config, island.rng, n_vars);

                // constant-refine the island best whenever it changes
                std::size_t best = 0;
                for (std::size_t i = 1; i < island.scored.size(); ++i)
                    if (island.scored[i].fitness < island.scored[best].fitness) best = i;
                const ExprNode* raw = island.scored[best].expr.get();
                if (raw != island.last_fitted && std::isfinite(island.scored[best].mse)) {
                    ExprPtr refined = fit_constants(island.scored[best].expr, inputs, targets, 40);
                    if (refined.get() != raw) {
                        auto s = gp::score_expr(refined, inputs, targets, config.parsimony);
                        if (s.fitness <= island.scored[best].fitness) island.scored[best] = s;
                    }
                    island.last_fitted = island.scored[best].expr.get();
                }

                // ... and occasionally a tournament-selected member, so that a
                // promising structure with badly scaled constants is rescued
                // before selection discards it
                std::uniform_real_distribution<double> u(0.0, 1.0);
                if (u(island.rng) < 0.5) {
                    std::size_t idx =
                        gp::tournament(island.scored, config.tournament_size, island.rng);
                    const gp::Scored& cand = island.scored[idx];
                    if (std::isfinite(cand.mse) && cand.expr.get() != island.last_fitted &&
                        gp::has_constants(cand.expr)) {
                        ExprPtr refined = fit_constants(cand.expr, inputs, targets, 30);
                        if (refined.get() != cand.expr.get()) {
                            auto s = gp::score_expr(refined, inputs, targets, config.parsimony);
                            if (s.fitness <= cand.fitness) island.scored[idx] = s;
                        }
                    }
                }

                // inject one affinely rescaled structure over the island's worst
                if (u(island.rng) < 0.5) {
                    std::size_t idx =
                        gp::tournament(island.scored, config.tournament_size, island.rng);
                    const gp::Scored& cand = island.scored[idx];
                    if (std::isfinite(cand.mse) && cand.mse > 0.0) {
                        auto rescued = gp::affine_rescue(cand.expr, inputs, targets,
                                                         config.parsimony, config.max_complexity);
                        if (rescued && rescued->fitness < cand.fitness) {
                            std::size_t worst = 0;
                            for (std::size_t i = 1; i < island.scored.size(); ++i)
                                if (island.scored[i].fitness > island.scored[worst].fitness)
                                    worst = i;
                            island.scored[worst] = *rescued;
                        }
                    }
                }

                auto replace_worst_if_better = [&](const gp::Scored& incoming) {
                    std::size_t worst = 0;
                    for (std::size_t i = 1; i < island.scored.size(); ++i)
                        if (island.scored[i].fitness > island.scored[worst].fitness) worst = i;
                    if (incoming.fitness < island.scored[worst].fitness)
                        island.scored[worst] = incoming;
                };

                // linear composition of two structures: the closed-form step
                // that assembles multi-term equations out of partial pieces
                if (u(island.rng) < 0.5) {
                    std::size_t ia =
                        gp::tournament(island.scored, config.tournament_size, island.rng);
                    std::uniform_int_distribution<std::size_t> any(0, island.scored.size() - 1);
                    std::size_t ib = any(island.rng);
                    if (ia != ib) {
                        auto combo =
                            gp::pair_rescue(island.scored[ia].expr, island.scored[ib].expr, inputs,
                                            targets, config.parsimony, config.max_complexity);
                        if (combo) replace_worst_if_better(*combo);
                    }
                }

                // feature probing: offer the island best a random small partner
                std::size_t cur_best = 0;
                for (std::size_t i = 1; i < island.scored.size(); ++i)
                    if (island.scored[i].fitness < island.scored[cur_best].fitness) cur_best = i;
                if (std::isfinite(island.scored[cur_best].mse)) {
                    for (int probe = 0; probe < 4; ++probe) {
                        ExprPtr feature =
                            gp::random_tree(island.rng, n_vars, probe % 2 == 0 ? 3 : 5);
                        auto combo =
                            gp::pair_rescue(island.scored[cur_best].expr, feature, inputs, targets,
                                            config.parsimony, config.max_complexity);
                        if (combo) replace_worst_if_better(*combo);
                    }
                }

                // keep some fresh blood flowing so islands do not all collapse
                // into the same basin
                if (u(island.rng) < 0.2) {
                    std::size_t worst = 0;
                    for (std::size_t i = 1; i < island.scored.size(); ++i)
                        if (island.scored[i].fitness > island.scored[worst].fitness) worst = i;
                    island.scored[worst] = gp::score_expr(
                        gp::random_tree(island.rng, n_vars, 7), inputs, targets, config.parsimony);
                }
                update_hof(island);
            }
        });
        done += chunk;

        if (done < config.iterations) {
            std::size_t src = 0;
            std::size_t src_best = 0;
            double best_fit = std::numeric_limits<double>::infinity();
            for (std::size_t isl = 0; isl < islands.size(); ++isl)
                for (std::size_t i = 0; i < islands[isl].scored.size(); ++i)
                    if (islands[isl].scored[i].fitness < best_fit) {
                        best_fit = islands[isl].scored[i].fitness;
                        src = isl;
                        src_best = i;
                    }
            const gp::Scored global_best = islands[src].scored[src_best];

            // pool the halls of fame so structural variety circulates too
            std::vector<ExprPtr> pool;
            for (const auto& island : islands)
                for (const auto& kv : island.hof) pool.push_back(kv.second.second);
            gp::Rng migration_rng(derive_seed(config.seed, /*stream=*/0x31, done));

            // assemble a linear model over the pooled structures and the raw
            // monomial features, then share it like any other migrant
            std::size_t n_core = 0;
            auto dict = detail_sr_dictionary(pool, n_vars, &n_core);
            auto assembled = gp::assemble_linear(dict, inputs, targets, config.parsimony,
                                                 config.max_complexity, n_core);

            for (auto& island : islands) {
                auto replace_worst = [&](const gp::Scored& incoming) {
                    std::size_t worst = 0;
                    for (std::size_t i = 1; i < island.scored.size(); ++i)
                        if (island.scored[i].fitness > island.scored[worst].fitness) worst = i;
                    island.scored[worst] = incoming;
                };
                replace_worst(global_best);
                for (const auto& a : assembled) replace_worst(a);
                if (!pool.empty() && island.scored.size() > 1) {
                    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                    replace_worst(gp::score_expr(pool[pick(migration_rng)], inputs, targets,
                                                 config.parsimony));
                }
                update_hof(island);
            }
        }
    }

    // final linear assembly pass over everything the islands kept
    {
        std::vector<ExprPtr> pool;
        for (const auto& island : islands)
            for (const auto& kv : island.hof) pool.push_back(kv.second.second);
        std::size_t n_core = 0;
        auto dict = detail_sr_dictionary(pool, n_vars, &n_core);
        auto assembled = gp::assemble_linear(dict, inputs, targets, config.parsimony,
                                             config.max_complexity, n_core);
        if (!islands.empty()) {
            Island& first = islands.front();
            for (const auto& a : assembled) {
                int c = a.expr->size;
                if (static_cast<std::size_t>(c) > config.max_complexity) continue;
                auto it = first.hof.find(c);
                if (it == first.hof.end() || a.mse < it->second.first)
                    first.hof[c] = {a.mse, a.expr};
            }
        }
    }

    // Merge per-island halls of fame, refine, canonicalize, and sweep out the
    // Pareto frontier.
    std::map<int, std::pair<double, ExprPtr>> merged;
    for (const auto& island : islands)
        for (const auto& kv : island.hof) {
            auto it = merged.find(kv.first);
            if (it == merged.end() || kv.second.first < it->second.first)
                merged[kv.first] = kv.second;
        }

    const auto names = default_var_names(n_vars);
    std::map<int, ParetoEntry> refined;
    for (const auto& kv : merged) {
        ExprPtr tuned = fit_constants(kv.second.second, inputs, targets, 80);
        // an algebraically equivalent sum-of-monomials form may be smaller;
        // allow rounding-level mse differences relative to the target scale
        if (auto simpler = polynomial_simplify(tuned, n_vars)) {
            double target_ms = 0.0;
            for (double t : targets) target_ms += t * t;
            target_ms /= static_cast<double>(targets.size());
            double simp_mse = expr_mse(*simpler, inputs, targets);
            if (simp_mse <= expr_mse(tuned, inputs, targets) * 1.05 + 1e-12 * (1.0 + target_ms))
                tuned = *simpler;
        }
        CanonicalExpr canon = canonicalize(tuned, names);
        double mse = expr_mse(canon.expr, inputs, targets);
        ExprPtr final_expr = canon.expr;
        if (!std::isfinite(mse)) { // canonical rewrite can hit a fold guard; keep the raw tree
            final_expr = tuned;
            mse = expr_mse(tuned, inputs, targets);
            if (!std::isfinite(mse)) continue;
            canon = canonicalize(kv.second.second, names);
        }
        int c = final_expr->size;
        auto it = refined.find(c);
        if (it == refined.end() || mse < it->second.mse) {
            ParetoEntry entry;
            entry.expr = final_expr;
            entry.complexity = static_cast<std::size_t>(c);
            entry.mse = mse;
            entry.infix = to_infix(final_expr, names);
            entry.canonical = canon.infix;
            refined[c] = std::move(entry);
        }
    }

    std::vector<ParetoEntry> frontier;
    double best_mse = std::numeric_limits<double>::infinity();
    // keep only entries that buy a meaningful accuracy improvement; an entry
    // that shaves off a percent or two would distort the score of whatever
    // comes after it without telling the reader anything
    for (auto& kv : refined) {
        if (kv.second.mse < best_mse * 0.95) {
            best_mse = kv.second.mse;
            frontier.push_back(std::move(kv.second));
        }
    }
    attach_scores(frontier);
    return frontier;
}

} // namespace eqdisc

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eqdisc/types.hpp"

namespace eqdisc {

enum class BinOp { Add, Sub, Mul, Div };
enum class UnOp { Exp };

struct ExprNode;
/// Expression trees are immutable; variation operators build new trees that
/// share unchanged subtrees.
using ExprPtr = std::shared_ptr<const ExprNode>;

struct ExprNode {
    enum class Kind { Var, Const, Unary, Binary };
    Kind kind;
    int var_index = 0;
    double value = 0.0;
    UnOp un_op = UnOp::Exp;
    BinOp bin_op = BinOp::Add;
    ExprPtr left;  // unary child lives here
    ExprPtr right;
    int size = 1; // node count, cached at construction
};

inline ExprPtr make_var(int index) {
    auto n = std::make_shared<ExprNode>();
    n->kind = ExprNode::Kind::Var;
    n->var_index = index;
    return n;
}

inline ExprPtr make_const(double value) {
    auto n = std::make_shared<ExprNode>();
    n->kind = ExprNode::Kind::Const;
    n->value = value;
    return n;
}

inline ExprPtr make_unary(UnOp op, ExprPtr child) {
    auto n = std::make_shared<ExprNode>();
    n->kind = ExprNode::Kind::Unary;
    n->un_op = op;
    n->left = std::move(child);
    n->size = 1 + n->left->size;
    return n;
}

inline ExprPtr make_binary(BinOp op, ExprPtr left, ExprPtr right) {
    auto n = std::make_shared<ExprNode>();
    n->kind = ExprNode::Kind::Binary;
    n->bin_op = op;
    n->left = std::move(left);
    n->right = std::move(right);
    n->size = 1 + n->left->size + n->right->size;
    return n;
}

inline int complexity(const ExprPtr& e) { return e->size; }

/// Guard thresholds: near-zero divisors and exp overflow poison the whole
/// evaluation instead of being patched over, so degenerate expressions are
/// rejected by fitness rather than rewarded.
inline constexpr double kDivGuard = 1e-12;
inline constexpr double kExpGuard = 700.0;

struct EvalResult {
    Vec values;
    bool poisoned = false;
};

namespace detail {
inline bool eval_node(const ExprNode& n, const Vec& row, double& out) {
    switch (n.kind) {
        case ExprNode::Kind::Var:
            out = row[static_cast<std::size_t>(n.var_index)];
            return true;
        case ExprNode::Kind::Const:
            out = n.value;
            return true;
        case ExprNode::Kind::Unary: {
            double c;
            if (!eval_node(*n.left, row, c)) return false;
            if (c > kExpGuard) return false;
            out = std::exp(c);
            return true;
        }
        case ExprNode::Kind::Binary: {
            double l, r;
            if (!eval_node(*n.left, row, l) || !eval_node(*n.right, row, r)) return false;
            switch (n.bin_op) {
                case BinOp::Add: out = l + r; break;
                case BinOp::Sub: out = l - r; break;
                case BinOp::Mul: out = l * r; break;
                case BinOp::Div:
                    if (std::abs(r) < kDivGuard) return false;
                    out = l / r;
                    break;
            }
            return std::isfinite(out);
        }
    }
    return false;
}
} // namespace detail

/// Pointwise evaluation over a sample matrix (rows are samples). A guarded
/// division or exp overflow anywhere poisons the result.
inline EvalResult eval_expr(const ExprPtr& expr, const std::vector<Vec>& inputs) {
    EvalResult res;
    res.values.resize(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        double v;
        if (!detail::eval_node(*expr, inputs[i], v) || !std::isfinite(v)) {
            res.poisoned = true;
            res.values.assign(inputs.size(), std::numeric_limits<double>::quiet_NaN());
            return res;
        }
        res.values[i] = v;
    }
    return res;
}

/// Mean squared error of an expression against targets; +inf when poisoned.
inline double expr_mse(const ExprPtr& expr, const std::vector<Vec>& inputs, const Vec& targets) {
    EvalResult r = eval_expr(expr, inputs);
    if (r.poisoned) return std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double d = r.values[i] - targets[i];
        acc += d * d;
    }
    return acc / static_cast<double>(targets.size());
}

inline std::vector<std::string> default_var_names(std::size_t n) {
    if (n == 3) return {"x", "y", "z"};
    if (n == 5) return {"x", "y", "z", "v", "w"};
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("x" + std::to_string(i));
    return names;
}

inline std::string format_const(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

/// Plain infix rendering with minimal parentheses; constants at 9 significant
/// digits.
inline std::string to_infix(const ExprPtr& expr, const std::vector<std::string>& names) {
    auto prec = [](const ExprNode& n) {
        if (n.kind != ExprNode::Kind::Binary) return 3;
        switch (n.bin_op) {
            case BinOp::Add:
            case BinOp::Sub: return 1;
            default: return 2;
        }
    };
    std::function<std::string(const ExprNode&, int, bool)> go = [&](const ExprNode& n,
                                                                    int parent_prec,
                                                                    bool right_side) {
        switch (n.kind) {
            case ExprNode::Kind::Var: return names.at(static_cast<std::size_t>(n.var_index));
            case ExprNode::Kind::Const: {
                std::string s = format_const(n.value);
                if (n.value < 0.0 && parent_prec > 0) return "(" + s + ")";
                return s;
            }
            case ExprNode::Kind::Unary: return "exp(" + go(*n.left, 0, false) + ")";
            case ExprNode::Kind::Binary: {
                // render a leading (-1)* factor as a plain sign
                if (n.bin_op == BinOp::Mul && n.left->kind == ExprNode::Kind::Const &&
                    n.left->value == -1.0) {
                    std::string s = "-" + go(*n.right, 2, true);
                    return parent_prec > 1 ? "(" + s + ")" : s;
                }
                int p = prec(n);
                const char* op = n.bin_op == BinOp::Add   ? " + "
                                 : n.bin_op == BinOp::Sub ? " - "
                                 : n.bin_op == BinOp::Mul ? "*"
                                                          : "/";
                std::string s = go(*n.left, p, false) + op + go(*n.right, p + 1, true);
                bool need_paren = p < parent_prec ||
                                  (p == parent_prec && right_side &&
                                   (n.bin_op == BinOp::Sub || n.bin_op == BinOp::Div));
                return need_paren ? "(" + s + ")" : s;
            }
        }
        return std::string("?");
    };
    return go(*expr, 0, false);
}

// ---------------------------------------------------------------------------
// Canonical form
// ---------------------------------------------------------------------------

namespace detail {

struct CanonTerm {
    double coeff = 1.0;
    std::vector<ExprPtr> factors; // canonical, sorted
    std::string key;              // sort / merge key over factors
    int degree = 0;               // number of variable leaves among factors
};

inline std::string factor_key(const ExprPtr& e);

inline std::string term_key(const std::vector<ExprPtr>& factors) {
    std::string k;
    for (const auto& f : factors) k += factor_key(f) + "|";
    return k;
}

inline int count_var_leaves(const ExprPtr& e) {
    switch (e->kind) {
        case ExprNode::Kind::Var: return 1;
        case ExprNode::Kind::Const: return 0;
        case ExprNode::Kind::Unary: return count_var_leaves(e->left);
        case ExprNode::Kind::Binary:
            return count_var_leaves(e->left) + count_var_leaves(e->right);
    }
    return 0;
}

} // namespace detail

inline ExprPtr canonicalize_tree(const ExprPtr& expr);

namespace detail {

inline std::string factor_key(const ExprPtr& e) {
    // Structural key that orders variables first by index, then composite
    // factors by their rendered form.
    switch (e->kind) {
        case ExprNode::Kind::Var: {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "v%04d", e->var_index);
            return buf;
        }
        case ExprNode::Kind::Const: return "c" + format_const(e->value);
        default: {
            std::vector<std::string> names;
            for (int i = 0; i < 64; ++i) names.push_back("#" + std::to_string(i));
            return "z" + to_infix(e, names);
        }
    }
}

/// Flatten an expression into a signed sum of product terms. Products and
/// sums are flattened through nesting; division and exp stay opaque factors.
inline void collect_terms(const ExprPtr& e, double sign, std::vector<CanonTerm>& out);

inline CanonTerm make_term(const ExprPtr& canon, double sign) {
    CanonTerm t;
    t.coeff = sign;
    // peel a flattened product: constants into the coefficient
    std::function<void(const ExprPtr&)> peel = [&](const ExprPtr& f) {
        if (f->kind == ExprNode::Kind::Binary && f->bin_op == BinOp::Mul) {
            peel(f->left);
            peel(f->right);
        } else if (f->kind == ExprNode::Kind::Const) {
            t.coeff *= f->value;
        } else {
            t.factors.push_back(f);
        }
    };
    peel(canon);
    std::sort(t.factors.begin(), t.factors.end(),
              [](const ExprPtr& a, const ExprPtr& b) { return factor_key(a) < factor_key(b); });
    t.key = term_key(t.factors);
    t.degree = 0;
    for (const auto& f : t.factors) t.degree += count_var_leaves(f);
    return t;
}

inline void collect_terms(const ExprPtr& e, double sign, std::vector<CanonTerm>& out) {
    if (e->kind == ExprNode::Kind::Binary && e->bin_op == BinOp::Add) {
        collect_terms(e->left, sign, out);
        collect_terms(e->right, sign, out);
        return;
    }
    if (e->kind == ExprNode::Kind::Binary && e->bin_op == BinOp::Sub) {
        collect_terms(e->left, sign, out);
        collect_terms(e->right, -sign, out);
        return;
    }
    out.push_back(make_term(canonicalize_tree(e), sign));
}

inline ExprPtr rebuild_product(double coeff, const std::vector<ExprPtr>& factors) {
    if (factors.empty()) return make_const(coeff);
    ExprPtr prod = factors[0];
    for (std::size_t i = 1; i < factors.size(); ++i) prod = make_binary(BinOp::Mul, prod, factors[i]);
    if (coeff == 1.0) return prod;
    return make_binary(BinOp::Mul, make_const(coeff), prod);
}

} // namespace detail

/// Canonical tree: +/- and * chains flattened, commutative operands sorted,
/// constant subtrees folded, like terms combined. Division and exp are kept
/// as opaque factors (no distribution of products over sums).
inline ExprPtr canonicalize_tree(const ExprPtr& expr) {
    using namespace detail;
    switch (expr->kind) {
        case ExprNode::Kind::Var:
        case ExprNode::Kind::Const: return expr;
        case ExprNode::Kind::Unary: {
            ExprPtr child = canonicalize_tree(expr->left);
            if (child->kind == ExprNode::Kind::Const && child->value <= kExpGuard)
                return make_const(std::exp(child->value));
            return make_unary(expr->un_op, child);
        }
        case ExprNode::Kind::Binary: break;
    }

    if (expr->bin_op == BinOp::Div) {
        ExprPtr l = canonicalize_tree(expr->left);
        ExprPtr r = canonicalize_tree(expr->right);
        if (r->kind == ExprNode::Kind::Const && std::abs(r->value) >= kDivGuard) {
            if (l->kind == ExprNode::Kind::Const) return make_const(l->value / r->value);
            if (r->value == 1.0) return l;
            // fold the constant divisor into a coefficient
            return canonicalize_tree(make_binary(BinOp::Mul, make_const(1.0 / r->value), l));
        }
        return make_binary(BinOp::Div, l, r);
    }

    if (expr->bin_op == BinOp::Mul) {
        detail::CanonTerm t = detail::make_term(
            make_binary(BinOp::Mul, canonicalize_tree(expr->left), canonicalize_tree(expr->right)),
            1.0);
        if (t.coeff == 0.0) return make_const(0.0);
        return detail::rebuild_product(t.coeff, t.factors);
    }

    // Add / Sub: flatten, merge like terms, sort by (degree, key).
    std::vector<CanonTerm> terms;
    collect_terms(expr->left, 1.0, terms);
    collect_terms(expr->right, expr->bin_op == BinOp::Sub ? -1.0 : 1.0, terms);

    std::map<std::string, CanonTerm> merged;
    double const_part = 0.0;
    for (auto& t : terms) {
        if (t.factors.empty()) {
            const_part += t.coeff;
            continue;
        }
        auto it = merged.find(t.key);
        if (it == merged.end())
            merged.emplace(t.key, t);
        else
            it->second.coeff += t.coeff;
    }
    std::vector<CanonTerm> ordered;
    for (auto& kv : merged)
        if (kv.second.coeff != 0.0) ordered.push_back(kv.second);
    std::sort(ordered.begin(), ordered.end(), [](const CanonTerm& a, const CanonTerm& b) {
        if (a.degree != b.degree) return a.degree < b.degree;
        return a.key < b.key;
    });

    if (ordered.empty()) return make_const(const_part);

    ExprPtr acc;
    for (const auto& t : ordered) {
        if (!acc) {
            acc = detail::rebuild_product(t.coeff, t.factors);
        } else {
            ExprPtr piece = detail::rebuild_product(
                std::abs(t.coeff) == 1.0 ? 1.0 : std::abs(t.coeff), t.factors);
            acc = make_binary(t.coeff < 0.0 ? BinOp::Sub : BinOp::Add, acc, piece);
        }
    }
    if (const_part != 0.0) {
        if (const_part < 0.0)
            acc = make_binary(BinOp::Sub, acc, make_const(-const_part));
        else
            acc = make_binary(BinOp::Add, acc, make_const(const_part));
    }
    return acc;
}

struct CanonicalExpr {
    ExprPtr expr;
    std::string infix;
};

/// Canonical infix string: terms ordered by (degree, factor key), unit
/// coefficients elided, constants at 9 significant digits.
inline std::string canonical_infix(const ExprPtr& canon, const std::vector<std::string>& names) {
    using namespace detail;
    std::vector<CanonTerm> terms;
    double const_part = 0.0;
    std::function<void(const ExprPtr&, double)> walk = [&](const ExprPtr& e, double sign) {
        if (e->kind == ExprNode::Kind::Binary && e->bin_op == BinOp::Add) {
            walk(e->left, sign);
            walk(e->right, sign);
            return;
        }
        if (e->kind == ExprNode::Kind::Binary && e->bin_op == BinOp::Sub) {
            walk(e->left, sign);
            walk(e->right, -sign);
            return;
        }
        CanonTerm t = make_term(e, sign);
        if (t.factors.empty())
            const_part += t.coeff;
        else
            terms.push_back(std::move(t));
    };
    walk(canon, 1.0);
    std::sort(terms.begin(), terms.end(), [](const CanonTerm& a, const CanonTerm& b) {
        if (a.degree != b.degree) return a.degree < b.degree;
        return a.key < b.key;
    });

    std::string out;
    auto term_str = [&](const CanonTerm& t) {
        std::string s;
        double mag = std::abs(t.coeff);
        if (mag != 1.0 || t.factors.empty()) s += format_const(mag);
        for (const auto& f : t.factors) {
            if (!s.empty()) s += "*";
            bool paren = f->kind == ExprNode::Kind::Binary;
            s += paren ? "(" + to_infix(f, names) + ")" : to_infix(f, names);
        }
        return s;
    };
    bool first = true;
    for (const auto& t : terms) {
        if (first) {
            out += (t.coeff < 0.0 ? "-" : "") + term_str(t);
            first = false;
        } else {
            out += (t.coeff < 0.0 ? " - " : " + ") + term_str(t);
        }
    }
    if (const_part != 0.0 || first) {
        if (first)
            out += format_const(const_part);
        else
            out += (const_part < 0.0 ? " - " : " + ") + format_const(std::abs(const_part));
    }
    return out;
}

inline CanonicalExpr canonicalize(const ExprPtr& expr, const std::vector<std::string>& names) {
    CanonicalExpr c;
    c.expr = canonicalize_tree(expr);
    c.infix = canonical_infix(c.expr, names);
    return c;
}

// ---------------------------------------------------------------------------
// Polynomial expansion and coefficient extraction
// ---------------------------------------------------------------------------

/// Exponent vector over the state variables.
using Monomial = std::vector<int>;

inline std::string monomial_name(const Monomial& m, const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i] == 0) continue;
        if (!s.empty()) s += "*";
        s += names[i];
        if (m[i] > 1) s += "^" + std::to_string(m[i]);
    }
    return s.empty() ? "1" : s;
}

/// All monomials of total degree <= 2, constant first, then by degree.
inline std::vector<Monomial> degree2_basis(std::size_t n_vars) {
    std::vector<Monomial> basis;
    basis.emplace_back(n_vars, 0);
    for (std::size_t i = 0; i < n_vars; ++i) {
        Monomial m(n_vars, 0);
        m[i] = 1;
        basis.push_back(m);
    }
    for (std::size_t i = 0; i < n_vars; ++i)
        for (std::size_t j = i; j < n_vars; ++j) {
            Monomial m(n_vars, 0);
            m[i] += 1;
            m[j] += 1;
            basis.push_back(m);
        }
    return basis;
}

namespace detail {

using Poly = std::map<Monomial, double>;

inline std::optional<Poly> expand_poly(const ExprPtr& e, std::size_t n_vars,
                                       std::size_t term_budget) {
    switch (e->kind) {
        case ExprNode::Kind::Var: {
            Monomial m(n_vars, 0);
            m[static_cast<std::size_t>(e->var_index)] = 1;
            return Poly{{m, 1.0}};
        }
        case ExprNode::Kind::Const: return Poly{{Monomial(n_vars, 0), e->value}};
        case ExprNode::Kind::Unary: {
            auto child = expand_poly(e->left, n_vars, term_budget);
            if (!child) return std::nullopt;
            if (child->size() == 1 && child->begin()->first == Monomial(n_vars, 0)) {
                double a = child->begin()->second;
                if (a > kExpGuard) return std::nullopt;
                return Poly{{Monomial(n_vars, 0), std::exp(a)}};
            }
            if (child->empty()) return Poly{{Monomial(n_vars, 0), 1.0}};
            return std::nullopt; // exp of a non-constant is not polynomial
        }
        case ExprNode::Kind::Binary: break;
    }
    auto l = expand_poly(e->left, n_vars, term_budget);
    auto r = expand_poly(e->right, n_vars, term_budget);
    if (!l || !r) return std::nullopt;
    Poly out;
    switch (e->bin_op) {
        case BinOp::Add:
        case BinOp::Sub: {
            out = *l;
            double s = e->bin_op == BinOp::Sub ? -1.0 : 1.0;
            for (const auto& kv : *r) out[kv.first] += s * kv.second;
            break;
        }
        case BinOp::Mul: {
            for (const auto& a : *l)
                for (const auto& b : *r) {
                    Monomial m(n_vars);
                    for (std::size_t i = 0; i < n_vars; ++i) m[i] = a.first[i] + b.first[i];
                    out[m] += a.second * b.second;
                    if (out.size() > term_budget) return std::nullopt;
                }
            break;
        }
        case BinOp::Div: {
            if (r->size() != 1 || r->begin()->first != Monomial(n_vars, 0)) return std::nullopt;
            double d = r->begin()->second;
            if (std::abs(d) < kDivGuard) return std::nullopt;
            out = *l;
            for (auto& kv : out) kv.second /= d;
            break;
        }
    }
    for (auto it = out.begin(); it != out.end();)
        it = (it->second == 0.0) ? out.erase(it) : std::next(it);
    return out;
}

} // namespace detail

/// Rebuild a polynomial expansion as a sum-of-monomials tree when that is
/// possible and strictly smaller than the original; otherwise nullopt.
inline std::optional<ExprPtr> polynomial_simplify(const ExprPtr& expr, std::size_t n_vars) {
    auto poly = detail::expand_poly(expr, n_vars, 256);
    if (!poly) return std::nullopt;
    if (poly->empty()) return make_const(0.0);

    ExprPtr acc;
    double const_part = 0.0;
    for (const auto& [mono, coeff] : *poly) {
        bool is_const = true;
        for (int e : mono)
            if (e != 0) is_const = false;
        if (is_const) {
            const_part += coeff;
            continue;
        }
        ExprPtr prod;
        for (std::size_t v = 0; v < n_vars; ++v)
            for (int rep = 0; rep < mono[v]; ++rep)
                prod = prod ? make_binary(BinOp::Mul, prod, make_var(static_cast<int>(v)))
                            : make_var(static_cast<int>(v));
        double mag = std::abs(coeff);
        ExprPtr piece = (mag == 1.0) ? prod : make_binary(BinOp::Mul, make_const(mag), prod);
        if (!acc)
            acc = (coeff < 0.0) ? make_binary(BinOp::Mul, make_const(-1.0), piece) : piece;
        else
            acc = make_binary(coeff < 0.0 ? BinOp::Sub : BinOp::Add, acc, piece);
    }
    if (!acc) return make_const(const_part);
    if (const_part != 0.0)
        acc = make_binary(const_part < 0.0 ? BinOp::Sub : BinOp::Add, acc,
                          make_const(std::abs(const_part)));
    if (acc->size >= expr->size) return std::nullopt;
    return acc;
}

struct LinearCoeffs {
    std::map<std::string, double> coeffs; // keyed by monomial name, zero-filled over the basis
    bool representable = true;            // false: expansion failed or residual outside the basis
};

/// Expand the expression into a polynomial and read off the coefficient of
/// every basis monomial. Terms outside the basis (or a non-expandable
/// structure) flag the result as not fully representable.
inline LinearCoeffs extract_linear_coeffs(const ExprPtr& expr, const std::vector<Monomial>& basis,
                                          const std::vector<std::string>& names) {
    LinearCoeffs out;
    const std::size_t n_vars = names.size();
    for (const auto& m : basis) out.coeffs[monomial_name(m, names)] = 0.0;
    auto poly = detail::expand_poly(expr, n_vars, 4096);
    if (!poly) {
        out.representable = false;
        return out;
    }
    for (const auto& kv : *poly) {
        auto name = monomial_name(kv.first, names);
        auto it = out.coeffs.find(name);
        bool in_basis = std::find(basis.begin(), basis.end(), kv.first) != basis.end();
        if (in_basis && it != out.coeffs.end())
            it->second = kv.second;
        else
            out.representable = false;
    }
    return out;
}

} // namespace eqdisc

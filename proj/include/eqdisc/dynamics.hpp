#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "eqdisc/types.hpp"

namespace eqdisc {

enum class SystemName { LotkaVolterra3, Lorenz5 };

inline std::string to_string(SystemName n) {
    switch (n) {
        case SystemName::LotkaVolterra3: return "LotkaVolterra3";
        case SystemName::Lorenz5: return "Lorenz5";
    }
    return "?";
}

inline SystemName system_name_from_string(const std::string& s) {
    if (s == "LotkaVolterra3") return SystemName::LotkaVolterra3;
    if (s == "Lorenz5") return SystemName::Lorenz5;
    throw invalid_config_error("unknown system name: " + s);
}

using ParamMap = std::map<std::string, double>;

/// Three-species predator/prey chain:
///   dx/dt = a x - b x y
///   dy/dt = -c y + d x y - e y z
///   dz/dt = -f z + g y z
inline Vec lv3_rhs(const Vec& state, const ParamMap& params) {
    require_dim(state, 3, "lv3_rhs");
    require_finite(state, "lv3_rhs");
    const double x = state[0], y = state[1], z = state[2];
    const double a = params.at("a"), b = params.at("b"), c = params.at("c"), d = params.at("d"),
                 e = params.at("e"), f = params.at("f"), g = params.at("g");
    return {a * x - b * x * y, -c * y + d * x * y - e * y * z, -f * z + g * y * z};
}

/// Vector-Jacobian product w^T * d(lv3_rhs)/d(state).
inline Vec lv3_vjp(const Vec& state, const ParamMap& params, const Vec& w) {
    require_dim(state, 3, "lv3_vjp");
    require_dim(w, 3, "lv3_vjp");
    const double x = state[0], y = state[1], z = state[2];
    const double a = params.at("a"), b = params.at("b"), c = params.at("c"), d = params.at("d"),
                 e = params.at("e"), f = params.at("f"), g = params.at("g");
    Vec out(3, 0.0);
    out[0] = w[0] * (a - b * y) + w[1] * (d * y);
    out[1] = w[0] * (-b * x) + w[1] * (-c + d * x - e * z) + w[2] * (g * z);
    out[2] = w[1] * (-e * y) + w[2] * (-f + g * y);
    return out;
}

/// Five-mode convection model:
///   dx/dt = sigma (y - x)
///   dy/dt = x (rho - z) - y
///   dz/dt = x y - beta z - x v
///   dv/dt = x z - 2 x w - (1 + 2 beta) v
///   dw/dt = 2 x v - 4 beta w
inline Vec lorenz5_rhs(const Vec& state, const ParamMap& params) {
    require_dim(state, 5, "lorenz5_rhs");
    require_finite(state, "lorenz5_rhs");
    const double x = state[0], y = state[1], z = state[2], v = state[3], w = state[4];
    const double sigma = params.at("sigma"), rho = params.at("rho"), beta = params.at("beta");
    return {sigma * (y - x),
            x * (rho - z) - y,
            x * y - beta * z - x * v,
            x * z - 2.0 * x * w - (1.0 + 2.0 * beta) * v,
            2.0 * x * v - 4.0 * beta * w};
}

inline Vec lorenz5_vjp(const Vec& state, const ParamMap& params, const Vec& cot) {
    require_dim(state, 5, "lorenz5_vjp");
    require_dim(cot, 5, "lorenz5_vjp");
    const double x = state[0], y = state[1], z = state[2], v = state[3], w = state[4];
    const double sigma = params.at("sigma"), rho = params.at("rho"), beta = params.at("beta");
    Vec out(5, 0.0);
    out[0] = cot[0] * (-sigma) + cot[1] * (rho - z) + cot[2] * (y - v) + cot[3] * (z - 2.0 * w) +
             cot[4] * (2.0 * v);
    out[1] = cot[0] * sigma + cot[1] * (-1.0) + cot[2] * x;
    out[2] = cot[1] * (-x) + cot[2] * (-beta) + cot[3] * x;
    out[3] = cot[2] * (-x) + cot[3] * (-(1.0 + 2.0 * beta)) + cot[4] * (2.0 * x);
    out[4] = cot[3] * (-2.0 * x) + cot[4] * (-4.0 * beta);
    return out;
}

/// Which state channels are measured. Unobserved channels never enter a loss.
struct ObservationMask {
    std::vector<bool> observed;

    std::size_t dim() const { return observed.size(); }
    std::size_t observed_count() const {
        return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), true));
    }
    void validate(std::size_t system_dim) const {
        if (observed.size() != system_dim)
            throw invalid_config_error("observation mask length does not match system dimension");
        if (observed_count() == 0)
            throw invalid_config_error("observation mask must observe at least one state");
    }
};

struct SystemSpec {
    SystemName name = SystemName::LotkaVolterra3;
    ParamMap params;
    Vec initial_condition;
    std::size_t dim = 3;

    void validate() const;
    Vec rhs(const Vec& state) const;
    Vec vjp(const Vec& state, const Vec& cotangent) const;
};

/// Compiled-in system definitions, keyed by name. New systems plug in here
/// without touching the solver.
struct SystemDef {
    std::size_t dim;
    std::vector<std::string> param_names;
    ParamMap default_params;
    Vec default_initial_condition;
    Vec (*rhs)(const Vec&, const ParamMap&);
    Vec (*vjp)(const Vec&, const ParamMap&, const Vec&);
};

inline const std::map<SystemName, SystemDef>& system_registry() {
    static const std::map<SystemName, SystemDef> reg = {
        {SystemName::LotkaVolterra3,
         {3,
          {"a", "b", "c", "d", "e", "f", "g"},
          {{"a", 1.0}, {"b", 1.0}, {"c", 1.0}, {"d", 1.0}, {"e", 1.0}, {"f", 1.0}, {"g", 1.0}},
          {0.5, 1.0, 2.0},
          &lv3_rhs,
          &lv3_vjp}},
        {SystemName::Lorenz5,
         {5,
          {"sigma", "rho", "beta"},
          {{"sigma", 10.0}, {"rho", 35.0}, {"beta", 8.0 / 3.0}},
          {-8.0, 8.0, 27.0, 0.4, 0.5},
          &lorenz5_rhs,
          &lorenz5_vjp}},
    };
    return reg;
}

inline SystemSpec make_system(SystemName name) {
    const SystemDef& def = system_registry().at(name);
    SystemSpec spec;
    spec.name = name;
    spec.params = def.default_params;
    spec.initial_condition = def.default_initial_condition;
    spec.dim = def.dim;
    return spec;
}

inline void SystemSpec::validate() const {
    const SystemDef& def = system_registry().at(name);
    if (dim != def.dim) throw invalid_config_error("system dimension mismatch for " + to_string(name));
    if (initial_condition.size() != dim)
        throw invalid_config_error("initial condition dimension does not match system");
    std::set<std::string> want(def.param_names.begin(), def.param_names.end());
    std::set<std::string> have;
    for (const auto& kv : params) have.insert(kv.first);
    if (want != have)
        throw invalid_config_error("parameter set for " + to_string(name) +
                                   " must be exactly {" + [&] {
                                       std::string s;
                                       for (const auto& n : def.param_names) s += n + ",";
                                       if (!s.empty()) s.pop_back();
                                       return s;
                                   }() + "}");
}

inline Vec SystemSpec::rhs(const Vec& state) const {
    return system_registry().at(name).rhs(state, params);
}

inline Vec SystemSpec::vjp(const Vec& state, const Vec& cotangent) const {
    return system_registry().at(name).vjp(state, params, cotangent);
}

/// Derivatives of the known equations only: entries at unknown indices are absent.
inline std::vector<std::optional<double>> partial_rhs(const SystemSpec& spec, const Vec& state,
                                                      const std::set<std::size_t>& unknown_indices) {
    if (unknown_indices.size() >= spec.dim)
        throw invalid_config_error("partial_rhs: at least one equation must remain known");
    for (std::size_t idx : unknown_indices)
        if (idx >= spec.dim) throw invalid_config_error("partial_rhs: unknown index out of range");
    Vec full = spec.rhs(state);
    std::vector<std::optional<double>> out(spec.dim);
    for (std::size_t i = 0; i < spec.dim; ++i)
        if (!unknown_indices.count(i)) out[i] = full[i];
    return out;
}

} // namespace eqdisc

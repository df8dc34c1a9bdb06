#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqdisc {

/// Dense state vector; dimension is the length.
using Vec = std::vector<double>;

struct invalid_input_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct invalid_config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values encountered in a numeric kernel.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Integration could not continue (step underflow, step budget, blow-up).
/// Carries the last time the solver reached.
struct divergence_error : std::runtime_error {
    double last_time;
    divergence_error(const std::string& what, double t)
        : std::runtime_error(what), last_time(t) {}
};

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void require_finite(const Vec& v, const char* where) {
    if (!all_finite(v)) throw numeric_error(std::string(where) + ": non-finite state");
}

inline void require_dim(const Vec& v, std::size_t dim, const char* where) {
    if (v.size() != dim)
        throw invalid_input_error(std::string(where) + ": expected dimension " +
                                  std::to_string(dim) + ", got " + std::to_string(v.size()));
}

/// splitmix64 step; used to derive independent seed streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic sub-stream seed: mixes a master seed with a stream tag and index.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
    std::uint64_t s = splitmix64(master ^ (0xa076'1d64'78bd'642fULL * (stream + 1)));
    return splitmix64(s ^ (0xe703'7ed1'a0b4'28dbULL * (index + 1)));
}

/// Compensated (Kahan) accumulator for order-robust means.
struct KahanSum {
    double sum = 0.0;
    double carry = 0.0;
    void add(double x) {
        double y = x - carry;
        double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    double value() const { return sum; }
};

} // namespace eqdisc

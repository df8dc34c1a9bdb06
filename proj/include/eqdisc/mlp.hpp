#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "eqdisc/types.hpp"

namespace eqdisc {

/// Fully connected network shape. Hidden layers use the tanh-form gelu;
/// the output layer is affine.
struct MLPSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;

    bool operator==(const MLPSpec&) const = default;

    /// Widths of every affine layer boundary: input, hidden..., output.
    std::vector<std::size_t> layer_widths() const {
        std::vector<std::size_t> w;
        w.push_back(input_dim);
        w.insert(w.end(), hidden.begin(), hidden.end());
        w.push_back(output_dim);
        return w;
    }

    /// Flat parameter count: per layer, weights (row-major fan_out x fan_in)
    /// followed by biases.
    std::size_t param_count() const {
        auto w = layer_widths();
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
        return n;
    }

    void validate() const {
        if (input_dim == 0 || output_dim == 0)
            throw invalid_config_error("network input and output dimensions must be positive");
        for (std::size_t h : hidden)
            if (h == 0) throw invalid_config_error("hidden layer width must be positive");
    }
};

/// Flat vector of weights and biases, layer-major.
using ParamVector = std::vector<double>;

/// Tanh-approximation gaussian error linear unit:
/// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
inline double gelu(double x) {
    constexpr double s = 0.7978845608028654; // sqrt(2/pi)
    constexpr double c = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(s * (x + c * x * x * x)));
}

inline double gelu_derivative(double x) {
    constexpr double s = 0.7978845608028654;
    constexpr double c = 0.044715;
    const double u = s * (x + c * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * c * x * x);
}

namespace detail {

struct LayerView {
    std::size_t w_offset; // row-major fan_out x fan_in
    std::size_t b_offset;
    std::size_t fan_in;
    std::size_t fan_out;
};

inline std::vector<LayerView> layer_views(const MLPSpec& spec) {
    auto widths = spec.layer_widths();
    std::vector<LayerView> views;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        LayerView v{off, off + widths[l] * widths[l + 1], widths[l], widths[l + 1]};
        views.push_back(v);
        off = v.b_offset + v.fan_out;
    }
    return views;
}

} // namespace detail

/// Activations of every layer boundary from one forward pass. pre[l] holds the
/// affine outputs of layer l; post[l] the activated values fed to layer l+1.
struct ForwardTrace {
    std::vector<Vec> pre;
    std::vector<Vec> post;
};

inline Vec mlp_forward_traced(const MLPSpec& spec, const ParamVector& params, const Vec& input,
                              ForwardTrace* trace) {
    if (input.size() != spec.input_dim)
        throw invalid_input_error("mlp forward: input dimension mismatch");
    if (params.size() != spec.param_count())
        throw invalid_input_error("mlp forward: parameter vector length mismatch");
    auto views = detail::layer_views(spec);
    Vec cur = input;
    for (std::size_t l = 0; l < views.size(); ++l) {
        const auto& v = views[l];
        Vec next(v.fan_out);
        for (std::size_t r = 0; r < v.fan_out; ++r) {
            double acc = params[v.b_offset + r];
            const double* wrow = params.data() + v.w_offset + r * v.fan_in;
            for (std::size_t c = 0; c < v.fan_in; ++c) acc += wrow[c] * cur[c];
            next[r] = acc;
        }
        if (trace) trace->pre.push_back(next);
        const bool last = (l + 1 == views.size());
        if (!last)
            for (double& x : next) x = gelu(x);
        if (trace) trace->post.push_back(next);
        cur = std::move(next);
    }
    return cur;
}

inline Vec mlp_forward(const MLPSpec& spec, const ParamVector& params, const Vec& input) {
    return mlp_forward_traced(spec, params, input, nullptr);
}

struct MLPGradients {
    Vec input_grad;
    ParamVector param_grad;
};

/// Reverse-mode gradients of upstream_grad . forward(input) with respect to
/// the input and every parameter. Exact (no finite differences).
inline MLPGradients mlp_backward(const MLPSpec& spec, const ParamVector& params, const Vec& input,
                                 const Vec& upstream_grad) {
    if (upstream_grad.size() != spec.output_dim)
        throw invalid_input_error("mlp backward: upstream gradient dimension mismatch");
    ForwardTrace trace;
    mlp_forward_traced(spec, params, input, &trace);
    auto views = detail::layer_views(spec);

    MLPGradients out;
    out.param_grad.assign(params.size(), 0.0);

    Vec delta = upstream_grad; // gradient w.r.t. the affine output of the current layer
    for (std::size_t li = views.size(); li-- > 0;) {
        const auto& v = views[li];
        if (li + 1 < views.size()) {
            // convert gradient w.r.t. activated output into gradient w.r.t. pre-activation
            for (std::size_t r = 0; r < v.fan_out; ++r)
                delta[r] *= gelu_derivative(trace.pre[li][r]);
        }
        const Vec& layer_in = (li == 0) ? input : trace.post[li - 1];
        for (std::size_t r = 0; r < v.fan_out; ++r) {
            out.param_grad[v.b_offset + r] += delta[r];
            double* wgrad = out.param_grad.data() + v.w_offset + r * v.fan_in;
            for (std::size_t c = 0; c < v.fan_in; ++c) wgrad[c] += delta[r] * layer_in[c];
        }
        Vec prev(v.fan_in, 0.0);
        for (std::size_t r = 0; r < v.fan_out; ++r) {
            const double* wrow = params.data() + v.w_offset + r * v.fan_in;
            for (std::size_t c = 0; c < v.fan_in; ++c) prev[c] += wrow[c] * delta[r];
        }
        delta = std::move(prev);
    }
    out.input_grad = std::move(delta);
    return out;
}

/// Structured view of one affine layer.
struct LayerParams {
    std::vector<Vec> weights; // fan_out rows of fan_in
    Vec biases;
};

inline std::vector<LayerParams> mlp_unflatten(const MLPSpec& spec, const ParamVector& params) {
    if (params.size() != spec.param_count())
        throw invalid_input_error("mlp_unflatten: parameter vector length mismatch");
    std::vector<LayerParams> layers;
    for (const auto& v : detail::layer_views(spec)) {
        LayerParams lp;
        lp.weights.resize(v.fan_out);
        for (std::size_t r = 0; r < v.fan_out; ++r)
            lp.weights[r].assign(params.begin() + static_cast<std::ptrdiff_t>(v.w_offset + r * v.fan_in),
                                 params.begin() + static_cast<std::ptrdiff_t>(v.w_offset + (r + 1) * v.fan_in));
        lp.biases.assign(params.begin() + static_cast<std::ptrdiff_t>(v.b_offset),
                         params.begin() + static_cast<std::ptrdiff_t>(v.b_offset + v.fan_out));
        layers.push_back(std::move(lp));
    }
    return layers;
}

inline ParamVector mlp_flatten(const MLPSpec& spec, const std::vector<LayerParams>& layers) {
    ParamVector params;
    params.reserve(spec.param_count());
    for (const auto& lp : layers) {
        for (const auto& row : lp.weights) params.insert(params.end(), row.begin(), row.end());
        params.insert(params.end(), lp.biases.begin(), lp.biases.end());
    }
    if (params.size() != spec.param_count())
        throw invalid_input_error("mlp_flatten: layer shapes do not match spec");
    return params;
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
inline ParamVector mlp_init_params(const MLPSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    ParamVector params(spec.param_count(), 0.0);
    for (const auto& v : detail::layer_views(spec)) {
        const double limit =
            std::sqrt(6.0 / static_cast<double>(v.fan_in + v.fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (std::size_t i = 0; i < v.fan_in * v.fan_out; ++i)
            params[v.w_offset + i] = dist(rng);
        // biases stay zero
    }
    return params;
}

} // namespace eqdisc

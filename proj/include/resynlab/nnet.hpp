#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "resynlab/autodiff.hpp"
#include "resynlab/rng.hpp"
#include "resynlab/serialize.hpp"

namespace resynlab {

// Conditioned MLP: per hidden layer affine -> nonlinearity -> layer norm
// -> scale/shift from an affine map of the conditioning vector, then a
// final affine output layer.
struct NetSpec {
    int input_dim = 0;
    std::vector<int> hidden_dims;
    int output_dim = 0;
    int cond_dim = 0; // 0 disables adaptive modulation
    Activation activation = Activation::gelu;

    void validate() const {
        if (input_dim <= 0 || output_dim <= 0)
            throw std::invalid_argument("net spec: input/output dims must be positive");
        if (hidden_dims.empty())
            throw std::invalid_argument("net spec: at least one hidden layer required");
        for (int h : hidden_dims)
            if (h <= 0) throw std::invalid_argument("net spec: hidden dims must be positive");
        if (cond_dim < 0) throw std::invalid_argument("net spec: cond dim must be non-negative");
    }
};

constexpr double kLayerNormEps = 1e-5;

struct MlpLayout {
    struct Layer {
        ParamRef w, b;
        ParamRef scale_w, scale_b, shift_w, shift_b; // present when cond_dim > 0
    };
    std::vector<Layer> layers;
    ParamRef out_w, out_b;
    bool has_out = true;
};

// Appends MLP parameters to `ps` under `prefix` and initializes them:
// uniform fan-in for affine maps, identity modulation for the
// conditioning projections (scale weights 0, scale bias 1, shift 0).
// with_out = false builds a trunk only (callers attach their own heads).
inline MlpLayout init_mlp(ParameterSet& ps, const NetSpec& spec, const std::string& prefix, Rng& rng,
                          bool with_out = true) {
    spec.validate();
    MlpLayout layout;
    layout.has_out = with_out;

    const auto fan_in_init = [&](const ParamRef& ref, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        double* p = ps.at(ref);
        for (std::size_t i = 0; i < ref.count(); ++i) p[i] = rng.uniform(-bound, bound);
    };

    int in = spec.input_dim;
    for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
        const int h = spec.hidden_dims[l];
        MlpLayout::Layer layer;
        const std::string base = prefix + ".l" + std::to_string(l);
        layer.w = ps.add(base + ".W", static_cast<std::size_t>(h), static_cast<std::size_t>(in));
        layer.b = ps.add(base + ".b", 1, static_cast<std::size_t>(h));
        fan_in_init(layer.w, static_cast<std::size_t>(in));
        if (spec.cond_dim > 0) {
            layer.scale_w = ps.add(base + ".scale.W", static_cast<std::size_t>(h), static_cast<std::size_t>(spec.cond_dim));
            layer.scale_b = ps.add(base + ".scale.b", 1, static_cast<std::size_t>(h));
            layer.shift_w = ps.add(base + ".shift.W", static_cast<std::size_t>(h), static_cast<std::size_t>(spec.cond_dim));
            layer.shift_b = ps.add(base + ".shift.b", 1, static_cast<std::size_t>(h));
            double* sb = ps.at(layer.scale_b);
            for (std::size_t i = 0; i < layer.scale_b.count(); ++i) sb[i] = 1.0;
        }
        layout.layers.push_back(layer);
        in = h;
    }
    if (with_out) {
        layout.out_w = ps.add(prefix + ".out.W", static_cast<std::size_t>(spec.output_dim), static_cast<std::size_t>(in));
        layout.out_b = ps.add(prefix + ".out.b", 1, static_cast<std::size_t>(spec.output_dim));
        fan_in_init(layout.out_w, static_cast<std::size_t>(in));
    }
    return layout;
}

// Rebinds a layout to an existing ParameterSet (e.g. after loading a
// checkpoint) by parameter names.
inline MlpLayout find_mlp(const ParameterSet& ps, const NetSpec& spec, const std::string& prefix,
                          bool with_out = true) {
    MlpLayout layout;
    layout.has_out = with_out;
    for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
        const std::string base = prefix + ".l" + std::to_string(l);
        MlpLayout::Layer layer;
        layer.w = ps.find(base + ".W");
        layer.b = ps.find(base + ".b");
        if (spec.cond_dim > 0) {
            layer.scale_w = ps.find(base + ".scale.W");
            layer.scale_b = ps.find(base + ".scale.b");
            layer.shift_w = ps.find(base + ".shift.W");
            layer.shift_b = ps.find(base + ".shift.b");
        }
        layout.layers.push_back(layer);
    }
    if (with_out) {
        layout.out_w = ps.find(prefix + ".out.W");
        layout.out_b = ps.find(prefix + ".out.b");
    }
    return layout;
}

// Builds the forward graph up to the last hidden representation.
// cond_node < 0 means unconditioned (plain layer norm).
inline int mlp_trunk(Graph& g, const ParameterSet& ps, const NetSpec& spec,
                     const MlpLayout& layout, int input_node, int cond_node) {
    int x = input_node;
    for (const auto& layer : layout.layers) {
        x = g.add_row(g.matmul_nt_node(x, g.param(ps, layer.w)), g.param(ps, layer.b));
        x = g.activation(x, spec.activation);
        x = g.layer_norm(x, kLayerNormEps);
        if (spec.cond_dim > 0 && cond_node >= 0) {
            const int scale = g.add_row(g.matmul_nt_node(cond_node, g.param(ps, layer.scale_w)),
                                        g.param(ps, layer.scale_b));
            const int shift = g.add_row(g.matmul_nt_node(cond_node, g.param(ps, layer.shift_w)),
                                        g.param(ps, layer.shift_b));
            x = g.add(g.mul(x, scale), shift);
        }
    }
    return x;
}

inline int mlp_forward_node(Graph& g, const ParameterSet& ps, const NetSpec& spec,
                            const MlpLayout& layout, int input_node, int cond_node) {
    if (!layout.has_out) throw std::logic_error("mlp_forward_node: layout has no output layer");
    const int h = mlp_trunk(g, ps, spec, layout, input_node, cond_node);
    return g.add_row(g.matmul_nt_node(h, g.param(ps, layout.out_w)), g.param(ps, layout.out_b));
}

// Batched inference without a backward pass.
inline Mat mlp_eval(const ParameterSet& ps, const NetSpec& spec, const MlpLayout& layout,
                    const Mat& inputs, const Mat& conds) {
    Graph g;
    const int x = g.constant(inputs);
    int cond = -1;
    if (spec.cond_dim > 0) {
        if (conds.rows != inputs.rows || conds.cols != static_cast<std::size_t>(spec.cond_dim))
            throw std::invalid_argument("mlp_eval: conditioning shape mismatch");
        cond = g.constant(conds);
    }
    return g.val(mlp_forward_node(g, ps, spec, layout, x, cond));
}

// Single-vector forward, the plain functional form of the network.
inline std::vector<double> forward(const ParameterSet& ps, const NetSpec& spec,
                                   const MlpLayout& layout,
                                   const std::vector<double>& input,
                                   const std::vector<double>& cond) {
    if (input.size() != static_cast<std::size_t>(spec.input_dim))
        throw std::invalid_argument("forward: input dimension mismatch");
    for (double v : input)
        if (!std::isfinite(v)) throw std::invalid_argument("forward: non-finite input");
    if (spec.cond_dim > 0 && cond.size() != static_cast<std::size_t>(spec.cond_dim))
        throw std::invalid_argument("forward: conditioning dimension mismatch");
    Mat in(1, input.size());
    std::copy(input.begin(), input.end(), in.data.begin());
    Mat cd(1, cond.size());
    std::copy(cond.begin(), cond.end(), cd.data.begin());
    const Mat out = mlp_eval(ps, spec, layout, in, cd);
    return out.data;
}

// Sinusoidal embedding of a scalar t in [0,1]: sin/cos at geometrically
// spaced frequencies. Output dim must be even; entries lie in [-1, 1].
inline std::vector<double> time_embedding(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("time_embedding: dim must be positive and even");
    const int half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(dim));
    const double f_min = 1.0, f_max = 1000.0;
    for (int j = 0; j < half; ++j) {
        const double frac = (half > 1) ? static_cast<double>(j) / (half - 1) : 0.0;
        const double w = 2.0 * M_PI * f_min * std::pow(f_max / f_min, frac);
        out[static_cast<std::size_t>(j)] = std::sin(w * t);
        out[static_cast<std::size_t>(half + j)] = std::cos(w * t);
    }
    return out;
}

// Adam with decoupled weight decay; parameters are scaled by
// (1 - lr * weight_decay) before the bias-corrected moment update.
struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamState {
    std::vector<double> m, v;
    std::int64_t step = 0;

    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        step = 0;
    }
};

inline void adam_step(ParameterSet& ps, const std::vector<double>& grads,
                      AdamState& state, const AdamHyper& hyper) {
    if (grads.size() != ps.size())
        throw std::invalid_argument("adam_step: gradient size mismatch");
    if (state.m.size() != ps.size()) state.init(ps.size());
    for (double g : grads)
        if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient, step rejected");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - hyper.lr * hyper.weight_decay;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        double& p = ps.values[i];
        p *= decay;
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        p -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
}

// Linear warmup to `peak` over warmup_steps, then linear decay to zero at
// total_steps; zero beyond.
inline double lr_at(std::int64_t step, double peak, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (warmup_steps <= 0 || warmup_steps >= total_steps)
        throw std::invalid_argument("lr_at: need 0 < warmup_steps < total_steps");
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step > total_steps) return 0.0;
    if (step <= warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    return peak * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup_steps);
}

// Parameter block IO (shared by model checkpoints): layout map, f32
// values, f32 Adam moments.
inline void write_params(std::ostream& os, const ParameterSet& ps, const AdamState& state) {
    put_u32(os, static_cast<std::uint32_t>(ps.layout.size()));
    for (const auto& ref : ps.layout) {
        put_string(os, ref.name);
        put_u64(os, ref.offset);
        put_u32(os, static_cast<std::uint32_t>(ref.rows));
        put_u32(os, static_cast<std::uint32_t>(ref.cols));
    }
    put_u64(os, ps.size());
    for (double v : ps.values) put_f32(os, static_cast<float>(v));
    put_u32(os, state.m.size() == ps.size() ? 1u : 0u);
    if (state.m.size() == ps.size()) {
        put_u64(os, static_cast<std::uint64_t>(state.step));
        for (double v : state.m) put_f32(os, static_cast<float>(v));
        for (double v : state.v) put_f32(os, static_cast<float>(v));
    }
}

inline void read_params(std::istream& is, ParameterSet& ps, AdamState& state) {
    ps = ParameterSet{};
    const std::uint32_t n_refs = get_u32(is);
    for (std::uint32_t i = 0; i < n_refs; ++i) {
        ParamRef ref;
        ref.name = get_string(is);
        ref.offset = get_u64(is);
        ref.rows = get_u32(is);
        ref.cols = get_u32(is);
        ps.layout.push_back(ref);
    }
    const std::uint64_t n = get_u64(is);
    ps.values.resize(n);
    for (double& v : ps.values) v = static_cast<double>(get_f32(is));
    state = AdamState{};
    if (get_u32(is) == 1u) {
        state.step = static_cast<std::int64_t>(get_u64(is));
        state.m.resize(n);
        state.v.resize(n);
        for (double& v : state.m) v = static_cast<double>(get_f32(is));
        for (double& v : state.v) v = static_cast<double>(get_f32(is));
    }
}

} // namespace resynlab

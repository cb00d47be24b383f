#pragma once

// Parameterized networks: dense perceptrons for the feature map, classifier
// and critic, and a gated recurrent summarizer for the temporal variant.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/rng.hpp"
#include "gradshift/tape.hpp"

namespace gradshift {

enum class Activation { Identity, Relu, Tanh };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
    }
    return "?";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

// weight is [in, out]; rows of the batch are multiplied on the left.
struct DenseLayer {
    Array weight;
    Array bias;
    Activation act = Activation::Identity;

    std::size_t in_dim() const { return weight.shape()[0]; }
    std::size_t out_dim() const { return weight.shape()[1]; }
};

struct MlpParams {
    std::vector<DenseLayer> layers;

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("mlp: no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.shape()[0] != l.out_dim())
                throw ShapeError("mlp layer " + std::to_string(i) + ": weight " + shape_str(l.weight.shape()) +
                                 " and bias " + shape_str(l.bias.shape()) + " do not match");
            if (i + 1 < layers.size() && l.out_dim() != layers[i + 1].in_dim())
                throw ShapeError("mlp layers " + std::to_string(i) + " and " + std::to_string(i + 1) +
                                 " do not chain");
            require_finite(l.weight, "mlp weight");
            require_finite(l.bias, "mlp bias");
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    friend bool operator==(const MlpParams& a, const MlpParams& b) {
        if (a.layers.size() != b.layers.size()) return false;
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            const auto& x = a.layers[i];
            const auto& y = b.layers[i];
            if (!(x.weight == y.weight) || !(x.bias == y.bias) || x.act != y.act) return false;
        }
        return true;
    }
};

inline Array glorot_uniform(std::uint64_t seed, std::size_t fan_in, std::size_t fan_out) {
    const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return rng_fill(seed, {fan_in, fan_out}, Uniform{-lim, lim});
}

// sizes = {in, hidden..., out}; one activation per layer.
inline MlpParams init_mlp(std::uint64_t seed, const std::vector<std::size_t>& sizes,
                          const std::vector<Activation>& activations) {
    if (sizes.size() < 2) throw std::invalid_argument("init_mlp: need at least one layer (two sizes)");
    if (activations.size() != sizes.size() - 1)
        throw std::invalid_argument("init_mlp: " + std::to_string(sizes.size() - 1) + " layers but " +
                                    std::to_string(activations.size()) + " activations");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        if (sizes[i] == 0 || sizes[i + 1] == 0) throw std::invalid_argument("init_mlp: layer sizes must be positive");
        p.layers.push_back({glorot_uniform(derive_seed(seed, {i}), sizes[i], sizes[i + 1]),
                            Array::zeros({sizes[i + 1]}), activations[i]});
    }
    return p;
}

// Parameters of one network bound onto a tape (as parameters or constants).
struct BoundMlp {
    std::vector<diff::Var> weights;
    std::vector<diff::Var> biases;
    std::vector<Activation> acts;
};

inline std::vector<std::string> parameter_names(const MlpParams& p, const std::string& prefix) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        names.push_back(prefix + ".W" + std::to_string(i));
        names.push_back(prefix + ".b" + std::to_string(i));
    }
    return names;
}

inline BoundMlp bind_parameters(diff::Tape& tape, const MlpParams& p, const std::string& prefix) {
    BoundMlp b;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        b.weights.push_back(tape.parameter(prefix + ".W" + std::to_string(i), p.layers[i].weight));
        b.biases.push_back(tape.parameter(prefix + ".b" + std::to_string(i), p.layers[i].bias));
        b.acts.push_back(p.layers[i].act);
    }
    return b;
}

inline BoundMlp bind_constants(diff::Tape& tape, const MlpParams& p) {
    BoundMlp b;
    for (const auto& l : p.layers) {
        b.weights.push_back(tape.constant(l.weight));
        b.biases.push_back(tape.constant(l.bias));
        b.acts.push_back(l.act);
    }
    return b;
}

inline diff::Var apply_activation(diff::Var x, Activation a) {
    switch (a) {
        case Activation::Relu: return diff::relu(x);
        case Activation::Tanh: return diff::tanh(x);
        case Activation::Identity: break;
    }
    return x;
}

inline diff::Var mlp_forward(const BoundMlp& net, diff::Var x) {
    const auto& xs = x.shape();
    const std::size_t in = net.weights.front().shape()[0];
    if (xs.size() != 2 || xs[1] != in)
        throw ShapeError("mlp forward: batch shape " + shape_str(xs) + " does not match input dimension " +
                         std::to_string(in));
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
        auto z = diff::matmul(x, net.weights[i]);
        z = diff::add(z, diff::broadcast(net.biases[i], z.shape()));
        x = apply_activation(z, net.acts[i]);
    }
    return x;
}

// Rows of the result are g(x_i).
inline diff::Var feature_forward(const BoundMlp& g, diff::Var x) { return mlp_forward(g, x); }

// Logits, one row per sample.
inline diff::Var classifier_forward(const BoundMlp& h, diff::Var features) { return mlp_forward(h, features); }

// One critic value per row, as an [n, 1] column.
inline diff::Var critic_forward(const BoundMlp& c, diff::Var features) {
    if (c.weights.back().shape()[1] != 1)
        throw ShapeError("critic: final layer must have size 1, got " + std::to_string(c.weights.back().shape()[1]));
    return mlp_forward(c, features);
}

// Plain evaluation without keeping a tape around.
inline Array forward(const MlpParams& p, const Array& x) {
    diff::Tape tape;
    auto net = bind_constants(tape, p);
    return mlp_forward(net, tape.constant(x)).value();
}

// --- gated recurrent summarizer -------------------------------------------

struct GruLayer {
    Array w_update, b_update;  // [hidden + in, hidden], [hidden]
    Array w_reset, b_reset;
    Array w_cand, b_cand;
};

struct RecurrentParams {
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
    std::vector<GruLayer> layers;
    Array w_readout;  // [hidden, input_size]
    Array b_readout;  // [input_size]

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("recurrent: layer count must be >= 1");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::size_t in = (l == 0 ? input_size : hidden_size) + hidden_size;
            const auto& g = layers[l];
            for (const Array* w : {&g.w_update, &g.w_reset, &g.w_cand})
                if (w->shape() != Shape{in, hidden_size})
                    throw ShapeError("recurrent layer " + std::to_string(l) + ": gate weight " + shape_str(w->shape()) +
                                     " expected " + shape_str({in, hidden_size}));
            for (const Array* b : {&g.b_update, &g.b_reset, &g.b_cand})
                if (b->shape() != Shape{hidden_size}) throw ShapeError("recurrent: gate bias shape mismatch");
        }
        if (w_readout.shape() != Shape{hidden_size, input_size} || b_readout.shape() != Shape{input_size})
            throw ShapeError("recurrent: readout shape mismatch");
    }

    std::size_t parameter_count() const {
        std::size_t n = w_readout.size() + b_readout.size();
        for (const auto& g : layers)
            n += g.w_update.size() + g.b_update.size() + g.w_reset.size() + g.b_reset.size() + g.w_cand.size() +
                 g.b_cand.size();
        return n;
    }
};

struct SummaryState {
    std::vector<Array> hidden;  // one [hidden] vector per layer
    std::size_t count = 0;

    friend bool operator==(const SummaryState&, const SummaryState&) = default;
};

inline RecurrentParams init_recurrent(std::uint64_t seed, std::size_t input_size, std::size_t hidden_size,
                                      std::size_t layer_count) {
    if (layer_count == 0) throw std::invalid_argument("init_recurrent: layer count must be >= 1");
    RecurrentParams r;
    r.input_size = input_size;
    r.hidden_size = hidden_size;
    for (std::size_t l = 0; l < layer_count; ++l) {
        const std::size_t in = (l == 0 ? input_size : hidden_size) + hidden_size;
        GruLayer g;
        g.w_update = glorot_uniform(derive_seed(seed, {l, 0}), in, hidden_size);
        g.w_reset = glorot_uniform(derive_seed(seed, {l, 1}), in, hidden_size);
        g.w_cand = glorot_uniform(derive_seed(seed, {l, 2}), in, hidden_size);
        g.b_update = g.b_reset = g.b_cand = Array::zeros({hidden_size});
        r.layers.push_back(std::move(g));
    }
    r.w_readout = glorot_uniform(derive_seed(seed, {layer_count, 3}), hidden_size, input_size);
    r.b_readout = Array::zeros({input_size});
    return r;
}

inline SummaryState initial_summary(const RecurrentParams& r) {
    return {std::vector<Array>(r.layers.size(), Array::zeros({r.hidden_size})), 0};
}

// Flat list of every summarizer array, in a fixed order shared by
// binding, optimizers and checkpoints.
inline std::vector<Array*> recurrent_arrays(RecurrentParams& r) {
    std::vector<Array*> v;
    for (auto& g : r.layers)
        for (Array* a : {&g.w_update, &g.b_update, &g.w_reset, &g.b_reset, &g.w_cand, &g.b_cand}) v.push_back(a);
    v.push_back(&r.w_readout);
    v.push_back(&r.b_readout);
    return v;
}

inline std::vector<std::string> parameter_names(const RecurrentParams& r, const std::string& prefix) {
    static const char* gate[] = {"Wz", "bz", "Wr", "br", "Wh", "bh"};
    std::vector<std::string> names;
    for (std::size_t l = 0; l < r.layers.size(); ++l)
        for (const char* g : gate) names.push_back(prefix + "." + g + std::to_string(l));
    names.push_back(prefix + ".Wout");
    names.push_back(prefix + ".bout");
    return names;
}

struct BoundRecurrent {
    std::vector<diff::Var> arrays;  // same order as recurrent_arrays()
    std::size_t layer_count = 0;
};

inline BoundRecurrent bind_parameters(diff::Tape& tape, RecurrentParams& r, const std::string& prefix) {
    BoundRecurrent b;
    auto names = parameter_names(r, prefix);
    auto arrays = recurrent_arrays(r);
    for (std::size_t i = 0; i < arrays.size(); ++i) b.arrays.push_back(tape.parameter(names[i], *arrays[i]));
    b.layer_count = r.layers.size();
    return b;
}

inline BoundRecurrent bind_constants(diff::Tape& tape, RecurrentParams& r) {
    BoundRecurrent b;
    for (Array* a : recurrent_arrays(r)) b.arrays.push_back(tape.constant(*a));
    b.layer_count = r.layers.size();
    return b;
}

struct SummaryStep {
    std::vector<diff::Var> hidden;  // [1, hidden] rows
    diff::Var readout;              // [1, input_size]
};

// One gated-recurrent update on the tape. `hidden` holds the per-layer
// state rows, `x` the [1, input_size] summary of the current domain.
inline SummaryStep summarize_step(const BoundRecurrent& r, const std::vector<diff::Var>& hidden, diff::Var x) {
    using namespace diff;
    if (hidden.size() != r.layer_count) throw ShapeError("summarize_step: state has wrong layer count");
    const std::size_t in0 = r.arrays[0].shape()[0] - r.arrays[1].shape()[0];
    if (x.shape() != Shape{1, in0})
        throw ShapeError("summarize_step: input " + shape_str(x.shape()) + " expected " + shape_str({1, in0}));
    SummaryStep out;
    Var input = x;
    for (std::size_t l = 0; l < r.layer_count; ++l) {
        const Var* g = &r.arrays[6 * l];
        Var s = hidden[l];
        if (s.shape() != Shape{1, g[1].shape()[0]}) throw ShapeError("summarize_step: hidden state shape mismatch");
        auto gate = [](Var in, Var w, Var b) {
            Var z = matmul(in, w);
            return add(z, broadcast(b, z.shape()));
        };
        Var sx = concat(s, input, 1);
        Var z = sigmoid(gate(sx, g[0], g[1]));
        Var rr = sigmoid(gate(sx, g[2], g[3]));
        Var cand = tanh(gate(concat(mul(rr, s), input, 1), g[4], g[5]));
        Var next = add(s, mul(z, sub(cand, s)));
        out.hidden.push_back(next);
        input = next;
    }
    const Var& w = r.arrays[6 * r.layer_count];
    const Var& b = r.arrays[6 * r.layer_count + 1];
    Var ro = matmul(input, w);
    out.readout = add(ro, broadcast(b, ro.shape()));
    return out;
}

inline std::vector<diff::Var> state_on_tape(diff::Tape& tape, const SummaryState& s) {
    std::vector<diff::Var> v;
    for (const auto& h : s.hidden) v.push_back(tape.constant(h.reshaped({1, h.size()})));
    return v;
}

// Numeric step: returns the advanced state and the emitted readout vector.
inline std::pair<SummaryState, Array> summarize_step(const RecurrentParams& r, const SummaryState& state,
                                                     const Array& summary) {
    r.validate();
    if (summary.size() != r.input_size || summary.rank() > 1)
        throw ShapeError("summarize_step: summary " + shape_str(summary.shape()) + " expected [" +
                         std::to_string(r.input_size) + "]");
    diff::Tape tape;
    auto rc = r;
    auto bound = bind_constants(tape, rc);
    auto step = summarize_step(bound, state_on_tape(tape, state), tape.constant(summary.reshaped({1, r.input_size})));
    SummaryState next;
    for (auto& h : step.hidden) next.hidden.push_back(h.value().reshaped({r.hidden_size}));
    next.count = state.count + 1;
    return {std::move(next), step.readout.value().reshaped({r.input_size})};
}

}  // namespace gradshift

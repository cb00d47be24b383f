#pragma once

// Reverse-mode differentiation over an append-only tape.
//
// Each local derivative rule is written once, generic over an "algebra": the
// numeric algebra evaluates it on stored values (Tape::backward), the
// recording algebra appends it to the tape as ordinary nodes
// (Tape::input_gradient). Because the recorded adjoints are ordinary nodes, a
// later backward() differentiates through them, which is what the gradient
// penalty needs. Recording is limited to one nesting level.

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gradshift/array.hpp"

namespace gradshift::diff {

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Affine,
    ClampMax,
    Sum,
    Mean,
    Broadcast,
    ReduceTo,
    Concat,
    Slice,
    Pad,
    LogSoftmax,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Square: return "square";
        case Op::Sqrt: return "sqrt";
        case Op::Affine: return "affine";
        case Op::ClampMax: return "clamp_max";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Broadcast: return "broadcast";
        case Op::ReduceTo: return "reduce_to";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Pad: return "pad";
        case Op::LogSoftmax: return "log_softmax";
    }
    return "?";
}

inline int arity(Op op) {
    switch (op) {
        case Op::Leaf: return 0;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::MatMul:
        case Op::Concat: return 2;
        default: return 1;
    }
}

enum class LeafKind : std::uint8_t { None, Input, Parameter, Constant };

using NodeId = std::uint32_t;

// Op attributes; each op reads only the fields it needs.
struct Attr {
    int axis = -1;
    std::size_t begin = 0;
    std::size_t end = 0;
    double a = 1.0;
    double b = 0.0;
    Shape shape{};
};

struct Node {
    Op op = Op::Leaf;
    LeafKind leaf = LeafKind::None;
    NodeId in[2] = {0, 0};
    std::uint8_t level = 0;
    Attr attr;
    Array value;
    std::string name;
};

using GradientMap = std::map<std::string, Array>;

class Tape;

struct Var {
    Tape* tape = nullptr;
    NodeId id = 0;

    const Array& value() const;
    const Shape& shape() const { return value().shape(); }
};

inline Array evaluate(Op op, const Attr& at, const Array& x, const Array& y) {
    namespace k = kernels;
    switch (op) {
        case Op::Add: return k::add(x, y);
        case Op::Sub: return k::sub(x, y);
        case Op::Mul: return k::mul(x, y);
        case Op::Div: return k::div(x, y);
        case Op::MatMul: return k::matmul(x, y);
        case Op::Transpose: return k::transpose(x);
        case Op::Relu: return k::relu(x);
        case Op::Tanh: return k::tanh(x);
        case Op::Sigmoid: return k::sigmoid(x);
        case Op::Exp: return k::exp(x);
        case Op::Log: return k::log(x);
        case Op::Square: return k::square(x);
        case Op::Sqrt: return k::sqrt(x);
        case Op::Affine: return k::affine(x, at.a, at.b);
        case Op::ClampMax: return k::clamp_max(x, at.a);
        case Op::Sum: return k::sum(x, at.axis);
        case Op::Mean: return k::mean(x, at.axis);
        case Op::Broadcast: return k::broadcast(x, at.shape);
        case Op::ReduceTo: return k::reduce_to(x, at.shape);
        case Op::Concat: return k::concat(x, y, at.axis);
        case Op::Slice: return k::slice(x, at.axis, at.begin, at.end);
        case Op::Pad: return k::pad(x, at.axis, at.begin, at.end);
        case Op::LogSoftmax: return k::log_softmax(x);
        case Op::Leaf: break;
    }
    throw std::logic_error("evaluate: leaf has no forward rule");
}

namespace detail {

inline Array mask(const Array& x, bool (*pred)(double, double), double c) {
    std::vector<double> m(x.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = pred(x[i], c) ? 1.0 : 0.0;
    return Array(x.shape(), std::move(m));
}

// Local derivative rules. `g` is the adjoint of the node's output, `x0`/`x1`
// its inputs and `out` its value, all in the algebra's representation.
template <class Alg, class V = typename Alg::V>
V vjp(Alg& alg, Op op, const Attr& at, int which, const V& g, const V& x0, const V& x1, const V& out) {
    switch (op) {
        case Op::Add: return g;
        case Op::Sub: return which == 0 ? g : alg.affine(g, -1.0, 0.0);
        case Op::Mul: return alg.mul(g, which == 0 ? x1 : x0);
        case Op::Div:
            return which == 0 ? alg.div(g, x1) : alg.affine(alg.div(alg.mul(g, out), x1), -1.0, 0.0);
        case Op::MatMul: return which == 0 ? alg.matmul(g, alg.transpose(x1)) : alg.matmul(alg.transpose(x0), g);
        case Op::Transpose: return alg.transpose(g);
        case Op::Relu:
            return alg.mul(g, alg.constant(mask(alg.value(x0), [](double v, double) { return v > 0.0; }, 0.0)));
        case Op::Tanh: return alg.mul(g, alg.affine(alg.square(out), -1.0, 1.0));
        case Op::Sigmoid: return alg.mul(g, alg.mul(out, alg.affine(out, -1.0, 1.0)));
        case Op::Exp: return alg.mul(g, out);
        case Op::Log: return alg.div(g, x0);
        case Op::Square: return alg.mul(g, alg.affine(x0, 2.0, 0.0));
        case Op::Sqrt: return alg.div(g, alg.affine(out, 2.0, 0.0));
        case Op::Affine: return alg.affine(g, at.a, 0.0);
        case Op::ClampMax:
            return alg.mul(g, alg.constant(mask(alg.value(x0), [](double v, double c) { return v < c; }, at.a)));
        case Op::Sum: return alg.broadcast(g, alg.value(x0).shape());
        case Op::Mean: {
            const auto count = kernels::reduced_count(alg.value(x0).shape(), at.axis);
            return alg.affine(alg.broadcast(g, alg.value(x0).shape()), 1.0 / static_cast<double>(count), 0.0);
        }
        case Op::Broadcast: return alg.reduce_to(g, alg.value(x0).shape());
        case Op::ReduceTo: return alg.broadcast(g, alg.value(x0).shape());
        case Op::Concat: {
            const auto ax = static_cast<std::size_t>(at.axis);
            const std::size_t len0 = alg.value(x0).shape()[ax];
            const std::size_t len1 = alg.value(x1).shape()[ax];
            return which == 0 ? alg.slice(g, at.axis, 0, len0) : alg.slice(g, at.axis, len0, len0 + len1);
        }
        case Op::Slice:
            return alg.pad(g, at.axis, at.begin, alg.value(x0).shape()[static_cast<std::size_t>(at.axis)]);
        case Op::Pad: {
            const std::size_t len = alg.value(x0).shape()[static_cast<std::size_t>(at.axis)];
            return alg.slice(g, at.axis, at.begin, at.begin + len);
        }
        case Op::LogSoftmax: {
            const auto& s = alg.value(g).shape();
            return alg.sub(g, alg.mul(alg.exp(out), alg.broadcast(alg.sum(g, 1), s)));
        }
        case Op::Leaf: break;
    }
    throw std::logic_error("vjp: leaf has no derivative rule");
}

struct NumericAlg {
    using V = Array;
    static const Array& value(const Array& a) { return a; }
    static Array constant(Array a) { return a; }
    static Array add(const Array& a, const Array& b) { return kernels::add(a, b); }
    static Array sub(const Array& a, const Array& b) { return kernels::sub(a, b); }
    static Array mul(const Array& a, const Array& b) { return kernels::mul(a, b); }
    static Array div(const Array& a, const Array& b) { return kernels::div(a, b); }
    static Array matmul(const Array& a, const Array& b) { return kernels::matmul(a, b); }
    static Array transpose(const Array& a) { return kernels::transpose(a); }
    static Array affine(const Array& a, double s, double c) { return kernels::affine(a, s, c); }
    static Array square(const Array& a) { return kernels::square(a); }
    static Array exp(const Array& a) { return kernels::exp(a); }
    static Array sum(const Array& a, int axis) { return kernels::sum(a, axis); }
    static Array broadcast(const Array& a, const Shape& s) { return kernels::broadcast(a, s); }
    static Array reduce_to(const Array& a, const Shape& s) { return kernels::reduce_to(a, s); }
    static Array slice(const Array& a, int axis, std::size_t b, std::size_t e) { return kernels::slice(a, axis, b, e); }
    static Array pad(const Array& a, int axis, std::size_t b, std::size_t full) { return kernels::pad(a, axis, b, full); }
};

struct RecordAlg;

}  // namespace detail

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Data leaf; values must be finite.
    Var input(Array value, std::string name = {}) { return leaf(LeafKind::Input, std::move(value), std::move(name)); }

    // Differentiable parameter, addressable by name in backward().
    Var parameter(std::string name, Array value) {
        if (params_.count(name)) throw std::invalid_argument("parameter '" + name + "' already on tape");
        Var v = leaf(LeafKind::Parameter, std::move(value), name);
        params_.emplace(std::move(name), v.id);
        return v;
    }

    // Leaf that is never differentiated.
    Var constant(Array value) { return leaf(LeafKind::Constant, std::move(value), {}); }

    // Records `op` applied to `inputs`; the value is computed immediately.
    Var apply(Op op, std::span<const Var> inputs, Attr attr = {}) {
        if (op == Op::Leaf) throw std::invalid_argument("apply: use input/parameter/constant for leaves");
        const int n = arity(op);
        if (static_cast<int>(inputs.size()) != n)
            throw std::invalid_argument(std::string("op '") + op_name(op) + "' expects " + std::to_string(n) +
                                        " inputs, got " + std::to_string(inputs.size()));
        Node node;
        node.op = op;
        node.attr = std::move(attr);
        node.level = level_;
        for (int i = 0; i < n; ++i) {
            if (inputs[i].tape != this || inputs[i].id >= nodes_.size())
                throw std::invalid_argument(std::string("op '") + op_name(op) + "': input is not on this tape");
            node.in[i] = inputs[i].id;
            node.level = std::max(node.level, nodes_[inputs[i].id].level);
        }
        const Array& x = nodes_[node.in[0]].value;
        const Array& y = nodes_[node.in[n == 2 ? 1 : 0]].value;
        node.value = evaluate(op, node.attr, x, y);
        nodes_.push_back(std::move(node));
        return {this, static_cast<NodeId>(nodes_.size() - 1)};
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_.at(id); }
    const Array& value(Var v) const { return nodes_.at(v.id).value; }

    std::optional<Var> find_parameter(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) return std::nullopt;
        return Var{this, it->second};
    }

    // Exact gradients of the scalar `output` with respect to the named
    // parameters. Does not modify the tape.
    GradientMap backward(Var output, std::span<const std::string> wrt) const {
        std::vector<NodeId> ids;
        ids.reserve(wrt.size());
        for (const auto& name : wrt) {
            auto it = params_.find(name);
            if (it == params_.end()) throw std::invalid_argument("backward: parameter '" + name + "' not on tape");
            ids.push_back(it->second);
        }
        auto grads = backward_ids(output, ids);
        GradientMap out;
        for (std::size_t i = 0; i < wrt.size(); ++i) out.emplace(wrt[i], std::move(grads[i]));
        return out;
    }

    GradientMap backward(Var output, std::initializer_list<std::string> wrt) const {
        std::vector<std::string> names(wrt);
        return backward(output, std::span<const std::string>(names));
    }

    // Gradients with respect to arbitrary leaves or intermediate nodes.
    std::vector<Array> backward(Var output, std::span<const Var> wrt) const {
        std::vector<NodeId> ids;
        for (auto v : wrt) {
            if (v.tape != this) throw std::invalid_argument("backward: variable is not on this tape");
            ids.push_back(v.id);
        }
        return backward_ids(output, ids);
    }

    // Gradient of the scalar `output` with respect to the input leaf `x`,
    // recorded on the tape as differentiable nodes.
    Var input_gradient(Var output, Var x);

    // Recomputes every non-leaf value from the leaves.
    std::vector<Array> replay() const {
        std::vector<Array> vals;
        vals.reserve(nodes_.size());
        for (const auto& n : nodes_) {
            if (n.op == Op::Leaf) {
                vals.push_back(n.value);
            } else {
                const Array& x = vals[n.in[0]];
                const Array& y = vals[n.in[arity(n.op) == 2 ? 1 : 0]];
                vals.push_back(evaluate(n.op, n.attr, x, y));
            }
        }
        return vals;
    }

private:
    friend struct detail::RecordAlg;

    Var leaf(LeafKind kind, Array value, std::string name) {
        if (kind != LeafKind::Constant) require_finite(value, name.empty() ? "tape leaf" : "tape leaf '" + name + "'");
        Node node;
        node.leaf = kind;
        node.value = std::move(value);
        node.name = std::move(name);
        node.level = level_;
        nodes_.push_back(std::move(node));
        return {this, static_cast<NodeId>(nodes_.size() - 1)};
    }

    void check_scalar(Var output, const char* who) const {
        if (output.tape != this || output.id >= nodes_.size())
            throw std::invalid_argument(std::string(who) + ": output is not on this tape");
        const auto& s = nodes_[output.id].value.shape();
        if (!s.empty()) throw std::invalid_argument(std::string(who) + ": output must be scalar, got shape " + shape_str(s));
    }

    std::vector<Array> backward_ids(Var output, const std::vector<NodeId>& wrt) const {
        check_scalar(output, "backward");
        const NodeId top = output.id;
        std::vector<char> relevant(top + 1, 0);
        for (auto id : wrt)
            if (id <= top) relevant[id] = 1;
        for (NodeId i = 0; i <= top; ++i) {
            const auto& n = nodes_[i];
            for (int j = 0; j < arity(n.op); ++j)
                if (relevant[n.in[j]]) relevant[i] = 1;
        }
        std::vector<std::optional<Array>> adj(top + 1);
        adj[top] = Array::scalar(1.0);
        detail::NumericAlg alg;
        for (NodeId i = top + 1; i-- > 0;) {
            if (!adj[i] || !relevant[i]) continue;
            const auto& n = nodes_[i];
            const int a = arity(n.op);
            for (int j = 0; j < a; ++j) {
                const NodeId src = n.in[j];
                if (!relevant[src]) continue;
                const Array& x0 = nodes_[n.in[0]].value;
                const Array& x1 = nodes_[n.in[a == 2 ? 1 : 0]].value;
                Array contrib = detail::vjp(alg, n.op, n.attr, j, *adj[i], x0, x1, n.value);
                if (adj[src])
                    adj[src] = kernels::add(*adj[src], contrib);
                else
                    adj[src] = std::move(contrib);
            }
        }
        std::vector<Array> out;
        out.reserve(wrt.size());
        for (auto id : wrt) {
            if (id <= top && adj[id])
                out.push_back(*adj[id]);
            else
                out.push_back(Array::zeros(nodes_[id].value.shape()));
        }
        return out;
    }

    std::deque<Node> nodes_;
    std::unordered_map<std::string, NodeId> params_;
    std::uint8_t level_ = 0;
};

inline const Array& Var::value() const { return tape->value(*this); }

namespace detail {

struct RecordAlg {
    using V = Var;
    Tape& t;

    const Array& value(const Var& v) const { return t.value(v); }
    Var constant(Array a) { return t.constant(std::move(a)); }
    Var bin(Op op, const Var& a, const Var& b, Attr at = {}) {
        Var in[2] = {a, b};
        return t.apply(op, in, std::move(at));
    }
    Var un(Op op, const Var& a, Attr at = {}) {
        Var in[1] = {a};
        return t.apply(op, in, std::move(at));
    }
    Var add(const Var& a, const Var& b) { return bin(Op::Add, a, b); }
    Var sub(const Var& a, const Var& b) { return bin(Op::Sub, a, b); }
    Var mul(const Var& a, const Var& b) { return bin(Op::Mul, a, b); }
    Var div(const Var& a, const Var& b) { return bin(Op::Div, a, b); }
    Var matmul(const Var& a, const Var& b) { return bin(Op::MatMul, a, b); }
    Var transpose(const Var& a) { return un(Op::Transpose, a); }
    Var affine(const Var& a, double s, double c) { return un(Op::Affine, a, Attr{.a = s, .b = c}); }
    Var square(const Var& a) { return un(Op::Square, a); }
    Var exp(const Var& a) { return un(Op::Exp, a); }
    Var sum(const Var& a, int axis) { return un(Op::Sum, a, Attr{.axis = axis}); }
    Var broadcast(const Var& a, const Shape& s) { return un(Op::Broadcast, a, Attr{.shape = s}); }
    Var reduce_to(const Var& a, const Shape& s) { return un(Op::ReduceTo, a, Attr{.shape = s}); }
    Var slice(const Var& a, int axis, std::size_t b, std::size_t e) {
        return un(Op::Slice, a, Attr{.axis = axis, .begin = b, .end = e});
    }
    Var pad(const Var& a, int axis, std::size_t b, std::size_t full) {
        return un(Op::Pad, a, Attr{.axis = axis, .begin = b, .end = full});
    }
};

}  // namespace detail

inline Var Tape::input_gradient(Var output, Var x) {
    check_scalar(output, "input_gradient");
    if (x.tape != this || x.id >= nodes_.size() || nodes_[x.id].leaf != LeafKind::Input)
        throw std::invalid_argument("input_gradient: target must be an input leaf on this tape");
    if (nodes_[output.id].level > 0 || level_ > 0) throw std::logic_error("second-order nesting limit is one");

    const NodeId top = output.id;
    std::vector<char> dep(top + 1, 0);
    if (x.id <= top) dep[x.id] = 1;
    for (NodeId i = x.id + 1; i <= top; ++i) {
        const auto& n = nodes_[i];
        for (int j = 0; j < arity(n.op); ++j)
            if (dep[n.in[j]]) dep[i] = 1;
    }

    level_ = 1;
    struct Restore {
        std::uint8_t& l;
        ~Restore() { l = 0; }
    } restore{level_};

    detail::RecordAlg alg{*this};
    std::vector<std::optional<Var>> adj(top + 1);
    adj[top] = constant(Array::scalar(1.0));
    for (NodeId i = top + 1; i-- > x.id + 1;) {
        if (!adj[i] || !dep[i]) continue;
        // Copy what we need: recording appends to nodes_.
        const Op op = nodes_[i].op;
        const Attr attr = nodes_[i].attr;
        const int a = arity(op);
        const NodeId in0 = nodes_[i].in[0];
        const NodeId in1 = nodes_[i].in[a == 2 ? 1 : 0];
        for (int j = 0; j < a; ++j) {
            const NodeId src = j == 0 ? in0 : in1;
            if (!dep[src]) continue;
            Var contrib = detail::vjp(alg, op, attr, j, *adj[i], Var{this, in0}, Var{this, in1}, Var{this, i});
            adj[src] = adj[src] ? alg.add(*adj[src], contrib) : contrib;
        }
    }
    if (adj[x.id]) return *adj[x.id];
    return constant(Array::zeros(nodes_[x.id].value.shape()));
}

// Free-function front end. All operands must live on the same tape.

namespace detail {
inline Var un(Op op, Var a, Attr at = {}) {
    Var in[1] = {a};
    return a.tape->apply(op, in, std::move(at));
}
inline Var bin(Op op, Var a, Var b, Attr at = {}) {
    Var in[2] = {a, b};
    return a.tape->apply(op, in, std::move(at));
}
}  // namespace detail

inline Var add(Var a, Var b) { return detail::bin(Op::Add, a, b); }
inline Var sub(Var a, Var b) { return detail::bin(Op::Sub, a, b); }
inline Var mul(Var a, Var b) { return detail::bin(Op::Mul, a, b); }
inline Var div(Var a, Var b) { return detail::bin(Op::Div, a, b); }
inline Var matmul(Var a, Var b) { return detail::bin(Op::MatMul, a, b); }
inline Var concat(Var a, Var b, int axis) { return detail::bin(Op::Concat, a, b, Attr{.axis = axis}); }
inline Var transpose(Var a) { return detail::un(Op::Transpose, a); }
inline Var relu(Var a) { return detail::un(Op::Relu, a); }
inline Var tanh(Var a) { return detail::un(Op::Tanh, a); }
inline Var sigmoid(Var a) { return detail::un(Op::Sigmoid, a); }
inline Var exp(Var a) { return detail::un(Op::Exp, a); }
inline Var log(Var a) { return detail::un(Op::Log, a); }
inline Var square(Var a) { return detail::un(Op::Square, a); }
inline Var sqrt(Var a) { return detail::un(Op::Sqrt, a); }
inline Var affine(Var a, double scale, double shift) { return detail::un(Op::Affine, a, Attr{.a = scale, .b = shift}); }
inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
inline Var clamp_max(Var a, double hi) { return detail::un(Op::ClampMax, a, Attr{.a = hi}); }
inline Var sum(Var a, int axis = -1) { return detail::un(Op::Sum, a, Attr{.axis = axis}); }
inline Var mean(Var a, int axis = -1) { return detail::un(Op::Mean, a, Attr{.axis = axis}); }
inline Var broadcast(Var a, Shape to) { return detail::un(Op::Broadcast, a, Attr{.shape = std::move(to)}); }
inline Var reduce_to(Var a, Shape to) { return detail::un(Op::ReduceTo, a, Attr{.shape = std::move(to)}); }
inline Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
    return detail::un(Op::Slice, a, Attr{.axis = axis, .begin = begin, .end = end});
}
inline Var pad(Var a, int axis, std::size_t begin, std::size_t full) {
    return detail::un(Op::Pad, a, Attr{.axis = axis, .begin = begin, .end = full});
}
inline Var log_softmax(Var a) { return detail::un(Op::LogSoftmax, a); }

}  // namespace gradshift::diff

#pragma once

// First-order optimizers over named parameter arrays. State is keyed by the
// same names the tape uses, so one optimizer can serve several networks.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/models.hpp"
#include "gradshift/tape.hpp"

namespace gradshift {

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

// A parameter array together with its tape name.
using NamedParams = std::vector<std::pair<std::string, Array*>>;

inline void append_params(NamedParams& out, MlpParams& p, const std::string& prefix) {
    auto names = parameter_names(p, prefix);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        out.emplace_back(names[2 * i], &p.layers[i].weight);
        out.emplace_back(names[2 * i + 1], &p.layers[i].bias);
    }
}

inline void append_params(NamedParams& out, RecurrentParams& r, const std::string& prefix) {
    auto names = parameter_names(r, prefix);
    auto arrays = recurrent_arrays(r);
    for (std::size_t i = 0; i < arrays.size(); ++i) out.emplace_back(names[i], arrays[i]);
}

inline std::vector<std::string> names_of(const NamedParams& p) {
    std::vector<std::string> n;
    n.reserve(p.size());
    for (const auto& [name, _] : p) n.push_back(name);
    return n;
}

class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : kind_(kind), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) throw std::invalid_argument("optimizer: learning rate must be > 0");
    }

    // Descent step: p -= lr * update(grad).
    void step(const NamedParams& params, const diff::GradientMap& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (const auto& [name, arr] : params) {
            auto it = grads.find(name);
            if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for '" + name + "'");
            const Array& g = it->second;
            if (g.shape() != arr->shape()) throw ShapeError("optimizer: gradient shape mismatch for '" + name + "'");
            auto p = arr->data();
            auto gd = g.data();
            if (kind_ == OptimizerKind::Sgd) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * gd[i];
                continue;
            }
            auto& [m, v] = moments_[name];
            if (m.empty()) {
                m.assign(p.size(), 0.0);
                v.assign(p.size(), 0.0);
            }
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1_ * m[i] + (1.0 - b1_) * gd[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * gd[i] * gd[i];
                p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    OptimizerKind kind_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace gradshift

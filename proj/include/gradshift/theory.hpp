#pragma once

// Executable pieces of the generalization analysis:
//   * the excess-risk bound for the last domain and its horizon sweep,
//   * a Monte-Carlo check that a rho-Lipschitz loss moves by at most
//     rho * W1 between two distributions,
//   * a pooled estimate of the discrepancy between the last domain and the
//     earlier ones,
//   * exact sequential Rademacher complexity on tiny finite classes.
// All logarithms are natural.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshift/domains.hpp"
#include "gradshift/io.hpp"
#include "gradshift/models.hpp"
#include "gradshift/objectives.hpp"
#include "gradshift/rng.hpp"

namespace gradshift {

// --- bound ------------------------------------------------------------------

struct BoundInputs {
    double T = 10;
    double n = 100;
    double M = 1.0;
    double rho = 1.0;
    double Delta = 0.0;
    double delta = 0.1;
    double vc = 10;
    // Sequential Rademacher proxy. When absent, rseq_c / sqrt(n (T - 1)).
    std::optional<double> rseq;
    double rseq_c = 1.0;
    double c_online = 1.0;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("bound: ") + name + " must be positive");
        };
        if (!(T >= 2.0) || !std::isfinite(T)) throw std::invalid_argument("bound: T must be >= 2");
        positive(n, "n");
        positive(M, "M");
        positive(rho, "rho");
        positive(vc, "vc");
        positive(rseq_c, "rseq_c");
        positive(c_online, "c_online");
        if (!(Delta >= 0.0) || !std::isfinite(Delta)) throw std::invalid_argument("bound: Delta must be >= 0");
        if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("bound: delta must lie in (0, 1)");
        if (rseq && (!(*rseq >= 0.0) || !std::isfinite(*rseq))) throw std::invalid_argument("bound: rseq must be >= 0");
    }

    double resolved_rseq() const { return rseq ? *rseq : rseq_c / std::sqrt(n * (T - 1.0)); }
};

struct BoundReport {
    double e1_horizon = 0, e1_confidence = 0;   // 3/T, (3M/T) sqrt(8 ln(1/delta))
    double e2_vc = 0, e2_online = 0;            // VC deviation, online regret
    double e3_complexity = 0, e3_drift = 0;     // 18 M sqrt(4 pi ln T) rseq, 3 T rho Delta
    double rseq = 0;
    double e1 = 0, e2 = 0, e3 = 0, total = 0;
};

inline BoundReport evaluate_bound(const BoundInputs& in) {
    in.validate();
    const double T = in.T;
    BoundReport r;
    r.rseq = in.resolved_rseq();
    r.e1_horizon = 3.0 / T;
    r.e1_confidence = (3.0 * in.M / T) * std::sqrt(8.0 * std::log(1.0 / in.delta));
    r.e2_vc = (1.0 / T) * std::sqrt((in.vc + std::log(2.0 / in.delta)) / (2.0 * in.n));
    r.e2_online = in.c_online / std::sqrt(in.n * T);
    r.e3_complexity = 18.0 * in.M * std::sqrt(4.0 * std::numbers::pi * std::log(T)) * r.rseq;
    r.e3_drift = 3.0 * T * in.rho * in.Delta;
    r.e1 = r.e1_horizon + r.e1_confidence;
    r.e2 = r.e2_vc + r.e2_online;
    r.e3 = r.e3_complexity + r.e3_drift;
    r.total = r.e1 + r.e2 + r.e3;
    return r;
}

struct SweepRow {
    std::size_t T;
    BoundReport report;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::size_t argmin_T = 0;
};

// Evaluates every integer horizon in [T_lo, T_hi]. A fixed rseq in the
// template is kept; otherwise the rule is re-resolved at each T.
inline SweepResult sweep_horizon(const BoundInputs& tmpl, std::size_t T_lo, std::size_t T_hi) {
    if (T_lo > T_hi) throw std::invalid_argument("sweep: empty horizon range");
    if (T_lo < 2 || T_hi > 1000000) throw std::invalid_argument("sweep: horizon range must lie within [2, 1000000]");
    SweepResult out;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t T = T_lo; T <= T_hi; ++T) {
        BoundInputs in = tmpl;
        in.T = static_cast<double>(T);
        auto r = evaluate_bound(in);
        if (r.total < best) {
            best = r.total;
            out.argmin_T = T;
        }
        out.rows.push_back({T, r});
    }
    return out;
}

// --- Lemma-style Lipschitz transfer check ---------------------------------------

using ScalarSampler = std::function<std::vector<double>(Rng&, std::size_t)>;

struct Lemma1Options {
    std::size_t trials = 1000;
    std::size_t n = 2000;
    std::uint64_t seed = 0;
    // Seed for the second distribution's draws. Defaults to a stream
    // independent of `seed`; passing `seed` itself reuses the same draws.
    std::optional<std::uint64_t> nu_seed;
    double rho = 1.0;
};

struct Lemma1Report {
    std::size_t trials = 0;
    std::size_t violations = 0;
    double violation_rate = 0.0;
    double max_gap = 0.0;
    double bound = 0.0;        // rho * true_w1
    double mean_stderr = 0.0;  // average of the per-trial standard errors
};

// Per trial: draw n points from each side, compare mean losses. A trial
// violates when |gap| > rho * true_w1 + 3 * stderr, with stderr the
// standard error of the difference of two independent means.
inline Lemma1Report check_lemma1(const ScalarSampler& mu, const ScalarSampler& nu, double true_w1,
                                 const std::function<double(double)>& loss, const Lemma1Options& opt) {
    if (opt.trials == 0 || opt.n < 2) throw std::invalid_argument("lemma1: need trials >= 1 and n >= 2");
    if (!(true_w1 >= 0.0) || !(opt.rho > 0.0)) throw std::invalid_argument("lemma1: need true_w1 >= 0 and rho > 0");
    const std::uint64_t nu_seed = opt.nu_seed.value_or(derive_seed(opt.seed, {0x6e75}));
    Lemma1Report rep;
    rep.trials = opt.trials;
    rep.bound = opt.rho * true_w1;
    auto stats = [&](const std::vector<double>& xs) {
        if (xs.size() != opt.n) throw std::invalid_argument("lemma1: sampler returned the wrong number of points");
        double s = 0.0;
        std::vector<double> l(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) s += (l[i] = loss(xs[i]));
        const double m = s / static_cast<double>(l.size());
        double v = 0.0;
        for (double x : l) v += (x - m) * (x - m);
        return std::pair{m, v / static_cast<double>(l.size() - 1)};
    };
    double se_sum = 0.0;
    for (std::size_t i = 0; i < opt.trials; ++i) {
        Rng rm(derive_seed(opt.seed, {i})), rn(derive_seed(nu_seed, {i}));
        auto [mm, vm] = stats(mu(rm, opt.n));
        auto [mn, vn] = stats(nu(rn, opt.n));
        const double gap = std::abs(mm - mn);
        const double se = std::sqrt(vm / static_cast<double>(opt.n) + vn / static_cast<double>(opt.n));
        se_sum += se;
        rep.max_gap = std::max(rep.max_gap, gap);
        if (gap > rep.bound + 3.0 * se) ++rep.violations;
    }
    rep.violation_rate = static_cast<double>(rep.violations) / static_cast<double>(opt.trials);
    rep.mean_stderr = se_sum / static_cast<double>(opt.trials);
    return rep;
}

// --- discrepancy ---------------------------------------------------------------

enum class Provenance { RandomInit, TrainingSnapshot };

inline const char* provenance_name(Provenance p) {
    return p == Provenance::RandomInit ? "random_init" : "training_snapshot";
}

struct Hypothesis {
    MlpParams g, h;
    Provenance provenance = Provenance::RandomInit;
};

struct HypothesisPool {
    std::vector<Hypothesis> items;

    void validate(std::size_t d, std::size_t k) const {
        if (items.empty()) throw std::invalid_argument("hypothesis pool is empty");
        for (std::size_t i = 0; i < items.size(); ++i) {
            const auto& hyp = items[i];
            hyp.g.validate();
            hyp.h.validate();
            if (hyp.g.layers.front().weight.shape()[0] != d)
                throw ShapeError("hypothesis " + std::to_string(i) + ": feature map expects " +
                                 std::to_string(hyp.g.layers.front().weight.shape()[0]) + " inputs, data has " +
                                 std::to_string(d));
            if (hyp.h.layers.front().weight.shape()[0] != hyp.g.layers.back().weight.shape()[1])
                throw ShapeError("hypothesis " + std::to_string(i) + ": classifier does not fit the feature map");
            if (hyp.h.layers.back().weight.shape()[1] != k)
                throw ShapeError("hypothesis " + std::to_string(i) + ": classifier has the wrong number of classes");
        }
    }
};

// Largest singular value by power iteration on W^T W.
inline double spectral_norm(const Array& w, std::size_t max_iters = 1000, double tol = 1e-13) {
    const std::size_t r = w.shape()[0], c = w.shape()[1];
    std::vector<double> v(c, 1.0 / std::sqrt(static_cast<double>(c))), u(r);
    double sigma = 0.0;
    for (std::size_t it = 0; it < max_iters; ++it) {
        for (std::size_t i = 0; i < r; ++i) {
            u[i] = 0.0;
            for (std::size_t j = 0; j < c; ++j) u[i] += w(i, j) * v[j];
        }
        double nv = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            v[j] = 0.0;
            for (std::size_t i = 0; i < r; ++i) v[j] += w(i, j) * u[i];
            nv += v[j] * v[j];
        }
        nv = std::sqrt(nv);
        if (nv == 0.0) return 0.0;
        for (double& x : v) x /= nv;
        const double next = std::sqrt(nv);
        if (std::abs(next - sigma) <= tol * next) return next;
        sigma = next;
    }
    return sigma;
}

// Lipschitz constant (Euclidean) of h o g: every activation used is
// 1-Lipschitz, so the product of layer spectral norms bounds it.
inline double lipschitz_bound(const Hypothesis& hyp) {
    double L = 1.0;
    for (const auto* net : {&hyp.g, &hyp.h})
        for (const auto& l : net->layers) L *= spectral_norm(l.weight);
    return L;
}

// Scales weights evenly across layers so that lipschitz_bound <= target.
inline void limit_lipschitz(Hypothesis& hyp, double target) {
    const double L = lipschitz_bound(hyp);
    if (L <= target) return;
    const double layers = static_cast<double>(hyp.g.layers.size() + hyp.h.layers.size());
    const double f = std::pow(target / L, 1.0 / layers);
    for (auto* net : {&hyp.g, &hyp.h})
        for (auto& l : net->layers)
            for (double& x : l.weight.data()) x *= f;
}

// Both shipped losses change by at most sqrt(2) times the Euclidean change
// of the logits (the gradient of cross-entropy is p - e_y; the hinge
// margin is a difference of two logits). Networks scaled to this bound
// make loss o h o g rho-Lipschitz in the input.
inline double network_lipschitz_target(const LossSpec& loss) { return loss.rho / std::sqrt(2.0); }

inline double mean_loss(const Hypothesis& hyp, const DomainBatch& b, const LossSpec& loss) {
    const auto v = loss_values(loss, forward(hyp.h, forward(hyp.g, b.features)), b.labels);
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

struct DiscrepancyReport {
    double estimate = 0.0;
    std::size_t argmax = 0;
    std::vector<double> per_hypothesis;
};

// max over the pool of [mean loss on the last domain] minus [average of
// the per-domain mean losses on the earlier domains].
inline DiscrepancyReport estimate_discrepancy(const DomainSequence& seq, const HypothesisPool& pool, const LossSpec& loss) {
    seq.validate();
    if (seq.T() < 2) throw std::invalid_argument("discrepancy: need at least two domains");
    pool.validate(seq.d(), seq.k());
    DiscrepancyReport rep;
    rep.estimate = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.items.size(); ++i) {
        const auto& hyp = pool.items[i];
        // Averaging the per-domain differences keeps identical domains at exactly 0.
        const double last = mean_loss(hyp, seq.domains.back(), loss);
        double d = 0.0;
        for (std::size_t t = 0; t + 1 < seq.T(); ++t) d += last - mean_loss(hyp, seq.domains[t], loss);
        d /= static_cast<double>(seq.T() - 1);
        rep.per_hypothesis.push_back(d);
        if (d > rep.estimate) {
            rep.estimate = d;
            rep.argmax = i;
        }
    }
    return rep;
}

struct PoolSpec {
    std::size_t random = 64;
    std::size_t snapshots = 8;
    ModelSizes sizes{};
    TrainConfig train{};  // used for the snapshot run
    bool limit_lipschitz = true;
};

// Random initializations plus per-epoch snapshots of a model trained by
// ERM on the first domain. With limit_lipschitz, every member is scaled so
// that its loss is rho-Lipschitz in the input.
inline HypothesisPool make_hypothesis_pool(const DomainSequence& seq, const PoolSpec& spec, const LossSpec& loss,
                                           std::uint64_t seed) {
    seq.validate();
    ModelSizes s = spec.sizes;
    s.input_dim = seq.d();
    s.classes = seq.k();
    s.summarizer = false;
    HypothesisPool pool;
    for (std::size_t i = 0; i < spec.random; ++i) {
        auto m = init_model(s, derive_seed(seed, {0x52, i}));
        pool.items.push_back({m.g, m.h, Provenance::RandomInit});
    }
    if (spec.snapshots > 0) {
        TrainConfig cfg = spec.train;
        cfg.seed = derive_seed(seed, {0x53});
        cfg.loss = loss;
        auto m = init_model(s, cfg.seed);
        for (std::size_t e = 0; e < spec.snapshots; ++e) {
            PairOptions o;
            o.step = e;
            o.epochs = 1;
            adapt_pair(m, seq.domains.front(), nullptr, cfg, o);
            pool.items.push_back({m.g, m.h, Provenance::TrainingSnapshot});
        }
    }
    if (spec.limit_lipschitz)
        for (auto& hyp : pool.items) limit_lipschitz(hyp, network_lipschitz_target(loss));
    return pool;
}

// --- sequential Rademacher complexity ----------------------------------------------

// Outcomes are 0..z_count-1; F[f][z] is the value of function f at z.
struct FiniteInstance {
    std::size_t z_count = 0;
    std::vector<std::vector<double>> F;
    std::size_t T = 1;
};

inline constexpr double kTreeLimit = 1e7;

inline double tree_count(const FiniteInstance& inst) {
    return std::pow(static_cast<double>(inst.z_count), std::pow(2.0, static_cast<double>(inst.T)) - 1.0);
}

// sup over Z-valued trees of depth T of E_eps sup_f (1/T) sum_t eps_t
// f(z_t(eps)), where z_t depends on eps_1..eps_{t-1}. The node used at
// level t (0-based) is 2^t - 1 + (the first t signs read as bits).
inline double seq_rademacher_exact(const FiniteInstance& inst) {
    if (inst.T < 1 || inst.T > 4) throw std::invalid_argument("seqrad: depth T must be in [1, 4]");
    if (inst.z_count == 0 || inst.F.empty()) throw std::invalid_argument("seqrad: need a non-empty Z and F");
    for (const auto& f : inst.F)
        if (f.size() != inst.z_count) throw std::invalid_argument("seqrad: every function needs one value per outcome");
    const double trees = tree_count(inst);
    if (trees > kTreeLimit)
        throw std::invalid_argument("seqrad: " + format_double(trees, 17) + " trees exceed the enumeration limit of 1e7");
    const std::size_t T = inst.T, nodes = (std::size_t{1} << T) - 1, paths = std::size_t{1} << T;
    std::vector<std::size_t> label(nodes, 0);
    double best = -std::numeric_limits<double>::infinity();
    while (true) {
        double avg = 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
            double sup = -std::numeric_limits<double>::infinity();
            for (const auto& f : inst.F) {
                double s = 0.0;
                std::size_t prefix = 0;
                for (std::size_t t = 0; t < T; ++t) {
                    const bool plus = (p >> t) & 1U;
                    const double v = f[label[(std::size_t{1} << t) - 1 + prefix]];
                    s += plus ? v : -v;
                    prefix |= static_cast<std::size_t>(plus) << t;
                }
                sup = std::max(sup, s);
            }
            avg += sup;
        }
        best = std::max(best, avg / static_cast<double>(paths) / static_cast<double>(T));
        std::size_t i = 0;
        while (i < nodes && ++label[i] == inst.z_count) label[i++] = 0;
        if (i == nodes) break;
    }
    return best;
}

}  // namespace gradshift

#pragma once

// Losses, the critic-based alignment term and its gradient penalty, and the
// adaptation schedules built from them.
//
// Three networks take part: a feature map g, a classifier h, and a critic
// whose mean-value gap between two feature batches estimates W1 in dual
// form. Training alternates k_critic critic ascent steps with one descent
// step on (g, h), optionally together with a gated recurrent summarizer
// whose readout stands in for features of past domains.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/domains.hpp"
#include "gradshift/models.hpp"
#include "gradshift/optim.hpp"
#include "gradshift/rng.hpp"
#include "gradshift/tape.hpp"
#include "gradshift/transport.hpp"

namespace gradshift {

// --- losses -----------------------------------------------------------------

enum class LossKind { CrossEntropyBounded, Hinge };

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "cross_entropy_bounded") return LossKind::CrossEntropyBounded;
    if (s == "hinge") return LossKind::Hinge;
    throw std::invalid_argument("unknown loss '" + s + "' (expected cross_entropy_bounded or hinge)");
}

inline const char* loss_kind_name(LossKind k) {
    return k == LossKind::Hinge ? "hinge" : "cross_entropy_bounded";
}

// `rho` is the Lipschitz constant recorded for theory checks. By convention
// both losses report 1 with respect to their score argument.
struct LossSpec {
    LossKind kind = LossKind::CrossEntropyBounded;
    double M = 5.0;
    double rho = 1.0;

    void validate() const {
        if (!(M > 0.0) || !std::isfinite(M)) throw std::invalid_argument("loss: bound M must be positive");
        if (!(rho > 0.0) || !std::isfinite(rho)) throw std::invalid_argument("loss: rho must be positive");
    }
};

struct LossEval {
    diff::Var mean;                   // differentiable scalar
    std::vector<double> per_sample;  // clamped values, one per row
};

namespace detail {

inline void check_labels(const Shape& logits, const std::vector<std::size_t>& labels) {
    if (logits.size() != 2) throw ShapeError("loss: logits must be [n, k], got " + shape_str(logits));
    if (logits[0] != labels.size())
        throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(logits[0]) + " rows");
    if (labels.empty()) throw std::invalid_argument("loss: empty batch");
    for (auto y : labels)
        if (y >= logits[1])
            throw std::invalid_argument("loss: label " + std::to_string(y) + " out of range for k=" +
                                        std::to_string(logits[1]));
}

inline Array one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
    Array m = Array::zeros({labels.size(), k});
    for (std::size_t i = 0; i < labels.size(); ++i) m(i, labels[i]) = 1.0;
    return m;
}

}  // namespace detail

// Bounded cross-entropy: min(-log softmax_y, M). Hinge: the multiclass
// margin loss max(0, 1 + max_{j != y} s_j - s_y), clipped at M. Both are
// averaged over rows.
inline LossEval loss_eval(const LossSpec& spec, diff::Var logits, const std::vector<std::size_t>& labels) {
    using namespace diff;
    spec.validate();
    gradshift::detail::check_labels(logits.shape(), labels);
    if (!logits.value().all_finite()) throw std::domain_error("loss: non-finite logits");
    Tape& tape = *logits.tape;
    const std::size_t n = labels.size(), k = logits.shape()[1];
    Var per;
    if (spec.kind == LossKind::CrossEntropyBounded) {
        Var picked = sum(mul(log_softmax(logits), tape.constant(gradshift::detail::one_hot(labels, k))), 1);
        per = clamp_max(scale(picked, -1.0), spec.M);
    } else {
        if (k < 2) throw std::invalid_argument("hinge loss needs at least two classes");
        const Array& s = logits.value();
        Array coef = Array::zeros({n, k});
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = labels[i] == 0 ? 1 : 0;
            for (std::size_t j = 0; j < k; ++j)
                if (j != labels[i] && s(i, j) > s(i, best)) best = j;
            coef(i, best) = 1.0;
            coef(i, labels[i]) = -1.0;
        }
        per = clamp_max(relu(affine(sum(mul(logits, tape.constant(std::move(coef))), 1), 1.0, 1.0)), spec.M);
    }
    const auto& pv = per.value().values();
    return {mean(per), std::vector<double>(pv.begin(), pv.end())};
}

inline std::vector<double> loss_values(const LossSpec& spec, const Array& logits, const std::vector<std::size_t>& labels) {
    diff::Tape tape;
    return loss_eval(spec, tape.constant(logits), labels).per_sample;
}

// --- alignment ----------------------------------------------------------------

// Mean critic value on `a` minus mean critic value on `b`.
inline diff::Var alignment_gap(const BoundMlp& critic, diff::Var a, diff::Var b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        throw ShapeError("alignment_gap: feature batches " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ in dimension");
    if (a.shape()[0] == 0 || b.shape()[0] == 0) throw std::invalid_argument("alignment_gap: empty batch");
    return diff::sub(diff::mean(critic_forward(critic, a)), diff::mean(critic_forward(critic, b)));
}

// Mean of (|grad_x critic(x)| - 1)^2 over interpolates x = u a + (1-u) b,
// with one u ~ U(0,1) per row.
inline diff::Var gradient_penalty(diff::Tape& tape, const BoundMlp& critic, const Array& a, const Array& b,
                                  std::uint64_t seed) {
    using namespace diff;
    if (a.shape() != b.shape() || a.rank() != 2)
        throw ShapeError("gradient_penalty: batches " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " must have equal shape (resample the smaller one)");
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (n == 0) throw std::invalid_argument("gradient_penalty: empty batch");
    Rng rng(seed);
    Array xhat = Array::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        for (std::size_t j = 0; j < m; ++j) xhat(i, j) = u * a(i, j) + (1.0 - u) * b(i, j);
    }
    Var x = tape.input(std::move(xhat), "interpolates");
    // Rows do not interact, so the gradient of the summed critic values
    // holds each row's own input gradient.
    Var grad = tape.input_gradient(sum(critic_forward(critic, x)), x);
    Var norms = sqrt(affine(sum(square(grad), 1), 1.0, 1e-12));
    return mean(square(affine(norms, 1.0, -1.0)));
}

// --- configuration and model ------------------------------------------------

struct TrainConfig {
    double lambda = 0.1;
    double gp_factor = 5.0;
    std::size_t k_critic = 5;
    double lr_model = 1e-3;
    double lr_critic = 5e-4;
    std::size_t batch_size = 64;
    std::size_t epochs_per_domain = 60;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    bool labeled_target = true;
    bool record_wall_clock = false;
    LossSpec loss{};

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("train: lambda must be >= 0");
        if (!(gp_factor >= 0.0) || !std::isfinite(gp_factor)) throw std::invalid_argument("train: gp_factor must be >= 0");
        if (k_critic < 1) throw std::invalid_argument("train: k_critic must be >= 1");
        if (!(lr_model > 0.0)) throw std::invalid_argument("train: lr_model must be > 0");
        if (!(lr_critic > 0.0)) throw std::invalid_argument("train: lr_critic must be > 0");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (epochs_per_domain < 1) throw std::invalid_argument("train: epochs_per_domain must be >= 1");
        loss.validate();
    }
};

struct ModelSizes {
    std::size_t input_dim = 2;
    std::size_t classes = 2;
    std::size_t feature_dim = 8;
    std::size_t hidden = 32;
    std::size_t critic_hidden = 32;
    bool summarizer = false;
    std::size_t summarizer_hidden = 32;
    std::size_t summarizer_layers = 1;
};

struct AdaptationModel {
    MlpParams g, h, critic;
    std::optional<RecurrentParams> summarizer;
    SummaryState summary;

    void validate() const {
        g.validate();
        h.validate();
        critic.validate();
        const std::size_t m = g.layers.back().weight.shape()[1];
        if (h.layers.front().weight.shape()[0] != m || critic.layers.front().weight.shape()[0] != m)
            throw ShapeError("model: classifier and critic inputs must equal the feature dimension " + std::to_string(m));
        if (critic.layers.back().weight.shape()[1] != 1) throw ShapeError("model: critic must output one value");
        if (summarizer) {
            summarizer->validate();
            if (summarizer->input_size != m) throw ShapeError("model: summarizer readout must equal the feature dimension");
        }
    }

    std::size_t feature_dim() const { return g.layers.back().weight.shape()[1]; }
};

namespace tags {
inline constexpr std::uint64_t init = 0x494e4954, batches = 0x42415443, penalty = 0x50454e41;
}

// One tanh hidden layer and a linear output. The output layer starts at
// zero, so the critic starts as the zero function: the penalty's gradient
// vanishes there and the first ascent steps follow the gap alone. A random
// output layer can instead start on the wrong side of the zero-slope valley
// the penalty creates and settle at a local maximum with the sign flipped.
inline MlpParams init_critic(std::uint64_t seed, std::size_t feature_dim, std::size_t hidden) {
    MlpParams c = init_mlp(seed, {feature_dim, hidden, 1}, {Activation::Tanh, Activation::Identity});
    c.layers.back().weight = Array::zeros(c.layers.back().weight.shape());
    return c;
}

inline AdaptationModel init_model(const ModelSizes& s, std::uint64_t seed) {
    AdaptationModel m;
    m.g = init_mlp(derive_seed(seed, {tags::init, 0}), {s.input_dim, s.hidden, s.feature_dim},
                   {Activation::Tanh, Activation::Tanh});
    m.h = init_mlp(derive_seed(seed, {tags::init, 1}), {s.feature_dim, s.classes}, {Activation::Identity});
    m.critic = init_critic(derive_seed(seed, {tags::init, 2}), s.feature_dim, s.critic_hidden);
    if (s.summarizer) {
        m.summarizer = init_recurrent(derive_seed(seed, {tags::init, 3}), s.feature_dim, s.summarizer_hidden,
                                      s.summarizer_layers);
        m.summary = initial_summary(*m.summarizer);
    }
    m.validate();
    return m;
}

inline Array features_of(const AdaptationModel& m, const Array& x) { return forward(m.g, x); }

inline std::vector<std::size_t> predict(const AdaptationModel& m, const Array& x) {
    const Array logits = forward(m.h, forward(m.g, x));
    std::vector<std::size_t> out(logits.shape()[0]);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.shape()[1]; ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

inline double accuracy(const AdaptationModel& m, const DomainBatch& b) {
    const auto pred = predict(m, b.features);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == b.labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// --- training -----------------------------------------------------------------

struct EpochMetrics {
    std::size_t t = 0;
    std::size_t epoch = 0;
    double class_loss = 0.0;
    double alignment = 0.0;
    double gp = 0.0;
    double target_acc = 0.0;
    double wall_ms = 0.0;

    friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Batch plan for one epoch: ceil(max(ns, nt) / B) batches of exactly B rows
// from each side, walking a fresh permutation of each side cyclically.
struct EpochPlan {
    std::vector<std::vector<std::size_t>> source, target;
};

inline EpochPlan plan_epoch(std::size_t ns, std::size_t nt, std::size_t batch, std::uint64_t seed, std::size_t step,
                            std::size_t epoch) {
    if (ns == 0) throw std::invalid_argument("plan_epoch: empty source");
    const std::size_t longest = std::max(ns, nt);
    const std::size_t count = (longest + batch - 1) / batch;
    auto walk = [&](std::size_t n, std::uint64_t side) {
        std::vector<std::vector<std::size_t>> out;
        if (n == 0) return out;
        const auto perm = Rng(derive_seed(seed, {tags::batches, step, epoch, side})).permutation(n);
        for (std::size_t b = 0; b < count; ++b) {
            std::vector<std::size_t> idx(batch);
            for (std::size_t i = 0; i < batch; ++i) idx[i] = perm[(b * batch + i) % n];
            out.push_back(std::move(idx));
        }
        return out;
    };
    return {walk(ns, 0), walk(nt, 1)};
}

struct PairOptions {
    std::size_t step = 0;      // position in the schedule; keys every random stream
    std::size_t t = 0;         // domain index reported in the metrics
    std::size_t epochs = 1;
    bool labeled_target = true;
    bool temporal = false;
    const DomainBatch* eval = nullptr;  // accuracy reported per epoch; target batch when absent
};

struct AdaptResult {
    EpochMetrics last;
    std::vector<EpochMetrics> epochs;
};

namespace detail {

inline Array mean_row(const Array& x) { return kernels::mean(x, 0); }

// Alignment source rows: the first half from the current source features,
// the rest copies of the summarizer readout.
inline Array mixed_source(const Array& fs, const Array& readout) {
    const std::size_t n = fs.shape()[0], m = fs.shape()[1], half = n / 2;
    Array out = fs;
    for (std::size_t i = half; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out(i, j) = readout[j];
    return out;
}

inline void guard(double v, const char* what, const PairOptions& o, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(v))
        throw DivergenceError(std::string("non-finite ") + what + " at step " + std::to_string(o.step) + " (t=" +
                              std::to_string(o.t) + ", epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch) + ")");
}

}  // namespace detail

// Trains on (source, target). With target == nullptr this is plain ERM on
// the source and no critic is involved.
inline AdaptResult adapt_pair(AdaptationModel& model, const DomainBatch& source, const DomainBatch* target,
                              const TrainConfig& cfg, const PairOptions& opt) {
    using namespace diff;
    cfg.validate();
    model.validate();
    if (source.d() != model.g.layers.front().weight.shape()[0])
        throw ShapeError("adapt_pair: source dimension does not match the feature map");
    if (target && target->d() != source.d()) throw ShapeError("adapt_pair: source and target dimensions differ");
    if (opt.temporal && !model.summarizer) throw std::invalid_argument("adapt_pair: temporal mode needs a summarizer");
    const bool adversarial = target != nullptr;
    const bool align = adversarial && cfg.lambda > 0.0;
    const bool target_loss = adversarial && opt.labeled_target;

    Optimizer model_opt(cfg.optimizer, cfg.lr_model), critic_opt(cfg.optimizer, cfg.lr_critic);
    NamedParams model_params, critic_params;
    append_params(model_params, model.g, "g");
    append_params(model_params, model.h, "h");
    if (opt.temporal && align) append_params(model_params, *model.summarizer, "s");
    append_params(critic_params, model.critic, "c");
    const auto model_names = names_of(model_params), critic_names = names_of(critic_params);

    const std::size_t B = cfg.batch_size;
    AdaptResult result;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const auto clock0 = std::chrono::steady_clock::now();
        const auto plan = plan_epoch(source.n(), adversarial ? target->n() : 0, B, cfg.seed, opt.step, epoch);
        double loss_sum = 0.0, gap_sum = 0.0, gp_sum = 0.0;
        for (std::size_t b = 0; b < plan.source.size(); ++b) try {
            const DomainBatch sb = source.select(plan.source[b]);
            std::optional<DomainBatch> tb;
            if (adversarial) tb = target->select(plan.target[b]);

            if (adversarial) {
                const Array fs = features_of(model, sb.features);
                const Array ft = features_of(model, tb->features);
                const Array fa = opt.temporal
                                     ? gradshift::detail::mixed_source(fs, summarize_step(*model.summarizer, model.summary,
                                                                               gradshift::detail::mean_row(fs).reshaped({fs.shape()[1]}))
                                                                    .second)
                                     : fs;
                for (std::size_t k = 0; k < cfg.k_critic; ++k) {
                    Tape tape;
                    auto c = bind_parameters(tape, model.critic, "c");
                    Var gap = alignment_gap(c, tape.constant(fa), tape.constant(ft));
                    Var gp = gradient_penalty(tape, c, fa, ft, derive_seed(cfg.seed, {tags::penalty, opt.step, epoch, b, k}));
                    // The critic ascends gap - gp_factor * gp.
                    Var obj = sub(scale(gp, cfg.gp_factor), gap);
                    gradshift::detail::guard(obj.value().item(), "critic objective", opt, epoch, b);
                    critic_opt.step(critic_params, tape.backward(obj, std::span<const std::string>(critic_names)));
                    if (k + 1 == cfg.k_critic) {
                        gap_sum += gap.value().item();
                        gp_sum += gp.value().item();
                    }
                }
            }

            Tape tape;
            auto g = bind_parameters(tape, model.g, "g");
            auto h = bind_parameters(tape, model.h, "h");
            Var fs = feature_forward(g, tape.constant(sb.features));
            Var loss = loss_eval(cfg.loss, classifier_forward(h, fs), sb.labels).mean;
            std::optional<Var> ft;
            if (adversarial && (target_loss || align)) ft = feature_forward(g, tape.constant(tb->features));
            if (target_loss) loss = add(loss, loss_eval(cfg.loss, classifier_forward(h, *ft), tb->labels).mean);
            loss_sum += loss.value().item();
            gradshift::detail::guard(loss.value().item(), "classification loss", opt, epoch, b);
            if (align) {
                auto c = bind_constants(tape, model.critic);
                Var fa = fs;
                if (opt.temporal) {
                    auto s = bind_parameters(tape, *model.summarizer, "s");
                    auto step = summarize_step(s, state_on_tape(tape, model.summary), mean(fs, 0));
                    const std::size_t half = B / 2, m = model.feature_dim();
                    Var hist = broadcast(step.readout, {B - half, m});
                    fa = half == 0 ? hist : concat(slice(fs, 0, 0, half), hist, 0);
                }
                loss = add(loss, scale(alignment_gap(c, fa, *ft), cfg.lambda));
                gradshift::detail::guard(loss.value().item(), "model objective", opt, epoch, b);
            }
            model_opt.step(model_params, tape.backward(loss, std::span<const std::string>(model_names)));
        } catch (const std::domain_error& e) {
            // Non-finite logits or parameters after an update.
            throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(opt.step) + " (t=" +
                                  std::to_string(opt.t) + ", epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(b) + ")");
        }
        const double nb = static_cast<double>(plan.source.size());
        EpochMetrics em;
        em.t = opt.t;
        em.epoch = epoch;
        em.class_loss = loss_sum / nb;
        em.alignment = adversarial ? gap_sum / nb : 0.0;
        em.gp = adversarial ? gp_sum / nb : 0.0;
        const DomainBatch* eval = opt.eval ? opt.eval : (target ? target : &source);
        em.target_acc = accuracy(model, *eval);
        if (cfg.record_wall_clock)
            em.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock0).count();
        result.epochs.push_back(em);
    }
    result.last = result.epochs.back();
    return result;
}

// Critic-only ascent on fixed feature samples (full batch each step).
// Returns the final gap on the full samples.
inline double fit_critic(MlpParams& critic, const Array& a, const Array& b, const TrainConfig& cfg, std::size_t steps) {
    using namespace diff;
    Optimizer opt(cfg.optimizer, cfg.lr_critic);
    NamedParams params;
    append_params(params, critic, "c");
    const auto names = names_of(params);
    auto [ra, rb] = resample_to_equal(a, b, cfg.seed);
    for (std::size_t k = 0; k < steps; ++k) {
        Tape tape;
        auto c = bind_parameters(tape, critic, "c");
        Var gap = alignment_gap(c, tape.constant(a), tape.constant(b));
        Var gp = gradient_penalty(tape, c, ra, rb, derive_seed(cfg.seed, {tags::penalty, k}));
        Var obj = sub(scale(gp, cfg.gp_factor), gap);
        if (!std::isfinite(obj.value().item())) throw DivergenceError("non-finite critic objective at step " + std::to_string(k));
        opt.step(params, tape.backward(obj, std::span<const std::string>(names)));
    }
    diff::Tape tape;
    auto c = bind_constants(tape, critic);
    return alignment_gap(c, tape.constant(a), tape.constant(b)).value().item();
}

// --- schedules --------------------------------------------------------------

enum class ScheduleKind { NoAdaptation, Direct, Gradual, GradualTemporal };

inline ScheduleKind parse_schedule(const std::string& s) {
    if (s == "no_adaptation") return ScheduleKind::NoAdaptation;
    if (s == "direct") return ScheduleKind::Direct;
    if (s == "gradual") return ScheduleKind::Gradual;
    if (s == "gradual_temporal") return ScheduleKind::GradualTemporal;
    throw std::invalid_argument("unknown schedule '" + s + "'");
}

inline const char* schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::NoAdaptation: return "no_adaptation";
        case ScheduleKind::Direct: return "direct";
        case ScheduleKind::Gradual: return "gradual";
        case ScheduleKind::GradualTemporal: return "gradual_temporal";
    }
    return "?";
}

inline std::size_t schedule_steps(ScheduleKind k, std::size_t T) {
    return k == ScheduleKind::Gradual || k == ScheduleKind::GradualTemporal ? T - 1 : 1;
}

// Everything needed to continue a schedule from a step boundary.
struct ScheduleState {
    AdaptationModel model;
    std::size_t next_step = 0;
    std::vector<EpochMetrics> trace;   // one entry per finished step
    std::vector<EpochMetrics> epochs;  // every epoch so far
};

struct ScheduleResult {
    AdaptationModel model;
    std::vector<EpochMetrics> trace;
    std::vector<EpochMetrics> epochs;
    double accuracy = 0.0;  // on the held-out split of the last domain
};

struct ScheduleHooks {
    // Called after every finished step except the last.
    std::function<void(const ScheduleState&)> on_boundary;
    // Stop (returning the partial state's model) once this many steps ran.
    std::optional<std::size_t> stop_after;
};

inline ModelSizes sizes_for(const DomainSequence& seq, ModelSizes s, ScheduleKind kind) {
    s.input_dim = seq.d();
    s.classes = seq.k();
    s.summarizer = kind == ScheduleKind::GradualTemporal;
    return s;
}

// `train` and `eval` are the two sides of a holdout split of the same
// sequence. Evaluation is always on eval's last domain.
inline ScheduleResult train_schedule(ScheduleKind kind, const DomainSequence& train, const DomainSequence& eval,
                                     const TrainConfig& cfg, const ModelSizes& sizes,
                                     std::optional<ScheduleState> resume = std::nullopt, const ScheduleHooks& hooks = {}) {
    train.validate();
    cfg.validate();
    const std::size_t T = train.T();
    if (T < 2) throw std::invalid_argument("train_schedule: need T >= 2 domains");
    if (eval.T() != T) throw std::invalid_argument("train_schedule: train and eval sequences differ in T");
    const DomainBatch& held_out = eval.domains.back();
    const std::size_t steps = schedule_steps(kind, T);

    ScheduleState st;
    if (resume) {
        st = std::move(*resume);
        if (st.next_step > steps) throw std::invalid_argument("train_schedule: resume position beyond schedule");
    } else {
        st.model = init_model(sizes_for(train, sizes, kind), cfg.seed);
    }

    for (; st.next_step < steps; ++st.next_step) {
        if (hooks.stop_after && st.next_step >= *hooks.stop_after) break;
        const std::size_t s = st.next_step;
        PairOptions o;
        o.step = s;
        o.eval = &held_out;
        o.labeled_target = cfg.labeled_target;
        AdaptResult r;
        switch (kind) {
            case ScheduleKind::NoAdaptation:
                o.t = 0;
                o.epochs = cfg.epochs_per_domain * (T - 1);
                r = adapt_pair(st.model, train.domains[0], nullptr, cfg, o);
                break;
            case ScheduleKind::Direct: {
                std::vector<DomainBatch> parts(train.domains.begin(), train.domains.end() - 1);
                o.t = T - 1;
                o.epochs = cfg.epochs_per_domain;
                r = adapt_pair(st.model, pool_domains(parts, 0), &train.domains.back(), cfg, o);
                break;
            }
            case ScheduleKind::Gradual:
            case ScheduleKind::GradualTemporal:
                o.t = s + 1;
                o.epochs = cfg.epochs_per_domain;
                o.temporal = kind == ScheduleKind::GradualTemporal;
                r = adapt_pair(st.model, train.domains[s], &train.domains[s + 1], cfg, o);
                if (o.temporal) {
                    const Array f = features_of(st.model, train.domains[s].features);
                    st.model.summary = summarize_step(*st.model.summarizer, st.model.summary,
                                                      gradshift::detail::mean_row(f).reshaped({f.shape()[1]}))
                                           .first;
                }
                break;
        }
        st.trace.push_back(r.last);
        st.epochs.insert(st.epochs.end(), r.epochs.begin(), r.epochs.end());
        if (hooks.on_boundary && s + 1 < steps) {
            ScheduleState snapshot = st;
            snapshot.next_step = s + 1;
            hooks.on_boundary(snapshot);
        }
    }
    ScheduleResult out;
    out.accuracy = accuracy(st.model, held_out);
    out.model = std::move(st.model);
    out.trace = std::move(st.trace);
    out.epochs = std::move(st.epochs);
    return out;
}

}  // namespace gradshift

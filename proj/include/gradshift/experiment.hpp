#pragma once

// Experiment driver: every (seed, schedule) pair of a config becomes one
// run. Runs share nothing mutable and may execute on several threads; their
// rows are merged in run order, so the outputs do not depend on scheduling.
//
// Per run, the seed drives data generation, the holdout split and training.
// Output directory contents:
//   metrics.csv               one row per training epoch of every run
//   report.json               per-schedule accuracy summary and per-run results
//   checkpoints/<run>.ckpt    latest state, rewritten at each step boundary
//                             and after the final step

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradshift/checkpoint.hpp"
#include "gradshift/config.hpp"
#include "gradshift/io.hpp"

namespace gradshift {

struct RunSpec {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    ScheduleKind schedule = ScheduleKind::Gradual;

    std::string id() const { return "seed" + std::to_string(seed) + "_" + schedule_name(schedule); }
};

inline std::vector<RunSpec> enumerate_runs(const ExperimentConfig& c) {
    std::vector<RunSpec> out;
    for (auto s : c.seeds)
        for (auto k : c.schedules) out.push_back({out.size(), s, k});
    return out;
}

struct RunOutcome {
    RunSpec spec;
    bool completed = false;
    double accuracy = 0.0;
    std::vector<EpochMetrics> epochs;
};

struct ExperimentOptions {
    std::size_t threads = 1;
    bool resume = false;                    // continue from existing checkpoints
    std::optional<std::size_t> stop_after;  // end every run after this many steps
};

class RunFailure : public std::runtime_error {
public:
    enum class Cause { Diverged, InvalidInput, Other };

    RunFailure(std::string run, Cause cause, const std::string& what)
        : std::runtime_error(run + ": " + what), run_(std::move(run)), cause_(cause) {}
    const std::string& run() const { return run_; }
    Cause cause() const { return cause_; }
    // Process exit status used by the command-line driver.
    int exit_code() const { return cause_ == Cause::Diverged ? 3 : cause_ == Cause::InvalidInput ? 2 : 1; }

private:
    std::string run_;
    Cause cause_;
};

inline std::size_t thread_budget() {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("GRADSHIFT_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) throw std::invalid_argument("GRADSHIFT_THREADS must be a positive integer");
        n = static_cast<std::size_t>(v);
    }
    return n;
}

// Binds checkpoints to both the config text and the run.
inline Digest run_digest(std::string_view config_text, const RunSpec& r) {
    std::string s(config_text);
    s += '\0';
    s += r.id();
    return sha256(s);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, const RunSpec& r) {
    return out_dir / "checkpoints" / (r.id() + ".ckpt");
}

inline std::pair<DomainSequence, DomainSequence> run_data(const ExperimentConfig& c, std::uint64_t seed) {
    GeneratorSpec g = c.generator;
    g.seed = seed;
    return split_holdout(make_sequence(g), c.holdout, seed);
}

inline RunOutcome execute_run(const ExperimentConfig& c, std::string_view config_text, const RunSpec& r,
                              const std::filesystem::path& out_dir, const ExperimentOptions& opt) {
    try {
        auto [train, eval] = run_data(c, r.seed);
        TrainConfig cfg = c.train;
        cfg.seed = r.seed;
        const std::size_t steps = schedule_steps(r.schedule, train.T());
        const Digest digest = run_digest(config_text, r);
        const auto path = checkpoint_path(out_dir, r);

        std::optional<ScheduleState> resume;
        if (opt.resume && std::filesystem::exists(path))
            resume = unpack_state(load_checkpoint(path, digest), r.schedule, steps,
                                  init_model(sizes_for(train, c.sizes, r.schedule), cfg.seed));

        ScheduleHooks hooks;
        hooks.stop_after = opt.stop_after;
        hooks.on_boundary = [&](const ScheduleState& st) { save_checkpoint(path, pack_state(st, r.schedule, steps, digest)); };
        auto res = train_schedule(r.schedule, train, eval, cfg, c.sizes, std::move(resume), hooks);

        RunOutcome out;
        out.spec = r;
        out.completed = res.trace.size() == steps;
        out.accuracy = res.accuracy;
        out.epochs = std::move(res.epochs);
        if (out.completed) {
            ScheduleState final_state{res.model, steps, res.trace, out.epochs};
            save_checkpoint(path, pack_state(final_state, r.schedule, steps, digest));
        }
        return out;
    } catch (const DivergenceError& e) {
        throw RunFailure(r.id(), RunFailure::Cause::Diverged, e.what());
    } catch (const std::invalid_argument& e) {
        throw RunFailure(r.id(), RunFailure::Cause::InvalidInput, e.what());
    } catch (const DatasetFormatError& e) {
        throw RunFailure(r.id(), RunFailure::Cause::InvalidInput, e.what());
    } catch (const CheckpointError& e) {
        throw RunFailure(r.id(), RunFailure::Cause::InvalidInput, e.what());
    } catch (const std::exception& e) {
        throw RunFailure(r.id(), RunFailure::Cause::Other, e.what());
    }
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

inline constexpr std::string_view kMetricsHeader = "run_id,seed,schedule,t,epoch,class_loss,alignment,gp,target_acc,wall_ms";

inline std::string render_metrics(const std::vector<RunOutcome>& runs) {
    std::ostringstream os;
    os << kMetricsHeader << '\n';
    for (const auto& r : runs)
        for (const auto& m : r.epochs)
            os << csv_field(r.spec.id()) << ',' << r.spec.seed << ',' << csv_field(schedule_name(r.spec.schedule)) << ','
               << m.t << ',' << m.epoch << ',' << format_double(m.class_loss, 9) << ',' << format_double(m.alignment, 9)
               << ',' << format_double(m.gp, 9) << ',' << format_double(m.target_acc, 9) << ','
               << format_double(m.wall_ms, 9) << '\n';
    return os.str();
}

struct ScheduleSummary {
    std::vector<double> accuracies;
    double mean = 0, std = 0, median = 0;
};

inline ScheduleSummary summarize(std::vector<double> acc) {
    ScheduleSummary s;
    s.accuracies = acc;
    const double n = static_cast<double>(acc.size());
    for (double a : acc) s.mean += a / n;
    if (acc.size() > 1) {
        double v = 0;
        for (double a : acc) v += (a - s.mean) * (a - s.mean);
        s.std = std::sqrt(v / (n - 1));
    }
    std::sort(acc.begin(), acc.end());
    const std::size_t k = acc.size();
    s.median = k % 2 ? acc[k / 2] : 0.5 * (acc[k / 2 - 1] + acc[k / 2]);
    return s;
}

inline nlohmann::json render_report(const ExperimentConfig& c, const std::vector<RunOutcome>& runs, const Digest& config_digest) {
    nlohmann::json j;
    j["experiment"] = c.name;
    j["config_sha256"] = hex(config_digest);
    j["T"] = c.generator.T;
    j["seeds"] = c.seeds;
    nlohmann::json per = nlohmann::json::object();
    for (auto k : c.schedules) {
        std::vector<double> acc;
        for (const auto& r : runs)
            if (r.spec.schedule == k) acc.push_back(r.accuracy);
        const auto s = summarize(acc);
        per[schedule_name(k)] = {{"runs", acc.size()},
                                 {"target_acc", acc},
                                 {"target_acc_mean", s.mean},
                                 {"target_acc_std", s.std},
                                 {"target_acc_median", s.median}};
    }
    j["schedules"] = per;
    nlohmann::json rr = nlohmann::json::array();
    for (const auto& r : runs)
        rr.push_back({{"run_id", r.spec.id()},
                      {"seed", r.spec.seed},
                      {"schedule", schedule_name(r.spec.schedule)},
                      {"target_acc", r.accuracy},
                      {"epochs", r.epochs.size()}});
    j["runs"] = rr;
    return j;
}

struct ExperimentResult {
    std::vector<RunOutcome> runs;
    bool completed = false;  // false when stop_after interrupted the runs
    std::filesystem::path metrics_path, report_path;
};

// Executes all runs. metrics.csv and report.json are written only when every
// run finished; an interrupted experiment leaves just its checkpoints.
inline ExperimentResult run_experiment(const ExperimentConfig& c, std::string_view config_text,
                                       const std::filesystem::path& out_dir, const ExperimentOptions& opt) {
    c.validate();
    const auto specs = enumerate_runs(c);
    std::vector<std::optional<RunOutcome>> slots(specs.size());
    std::vector<std::exception_ptr> errors(specs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next++) < specs.size();) {
            try {
                slots[i] = execute_run(c, config_text, specs[i], out_dir, opt);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(opt.threads, 1, specs.size());
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentResult res;
    res.completed = true;
    for (auto& s : slots) {
        res.completed = res.completed && s->completed;
        res.runs.push_back(std::move(*s));
    }
    if (!res.completed) return res;
    res.metrics_path = out_dir / "metrics.csv";
    res.report_path = out_dir / "report.json";
    atomic_write(res.metrics_path, render_metrics(res.runs));
    atomic_write(res.report_path, render_report(c, res.runs, sha256(config_text)).dump(2) + "\n");
    return res;
}

}  // namespace gradshift

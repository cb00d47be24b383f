// gradshift command-line driver.
//
// Every subcommand prints one JSON document to stdout. Failures print a
// single line {"error": ...} and exit with 2 (invalid input), 3 (training
// diverged) or 1 (anything else).

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "gradshift/checkpoint.hpp"
#include "gradshift/config.hpp"
#include "gradshift/domains.hpp"
#include "gradshift/experiment.hpp"
#include "gradshift/theory.hpp"
#include "gradshift/transport.hpp"

using nlohmann::json;
using namespace gradshift;

namespace {

struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

int emit_error(const std::string& msg, int code, json extra = json::object()) {
    extra["error"] = msg;
    std::cout << extra.dump() << std::endl;
    return code;
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

// One point per line, comma separated. A first line that does not start
// with a number is taken as a header.
Array read_points(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    std::vector<double> values;
    std::size_t cols = 0, rows = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        bool ok = true;
        while (std::getline(ss, cell, ',')) {
            const auto b = cell.find_first_not_of(" \t"), e = cell.find_last_not_of(" \t");
            double v = 0;
            const char* first = b == std::string::npos ? cell.data() : cell.data() + b;
            const char* last = b == std::string::npos ? cell.data() : cell.data() + e + 1;
            auto [p, ec] = std::from_chars(first, last, v);
            if (first == last || ec != std::errc() || p != last || !std::isfinite(v)) {
                ok = false;
                break;
            }
            row.push_back(v);
        }
        if (!ok) {
            if (rows == 0 && line_no == 1) continue;
            throw InvalidInput(path + ": line " + std::to_string(line_no) + ": expected comma-separated numbers");
        }
        if (cols == 0) cols = row.size();
        if (row.size() != cols)
            throw InvalidInput(path + ": line " + std::to_string(line_no) + ": expected " + std::to_string(cols) +
                               " columns, found " + std::to_string(row.size()));
        values.insert(values.end(), row.begin(), row.end());
        ++rows;
    }
    if (rows == 0) throw InvalidInput(path + ": no points");
    return Array({rows, cols}, std::move(values));
}

std::string loaded_config_text(const std::string& path) {
    try {
        return read_file(path);
    } catch (const std::exception& e) {
        throw InvalidInput(e.what());
    }
}

json bound_json(const BoundInputs& in, const BoundReport& r) {
    json inputs = {{"T", in.T},         {"n", in.n},     {"M", in.M},           {"rho", in.rho},
                   {"Delta", in.Delta}, {"delta", in.delta}, {"vc", in.vc},     {"rseq_c", in.rseq_c},
                   {"c_online", in.c_online}};
    if (in.rseq) inputs["rseq"] = *in.rseq;
    return {{"inputs", inputs},
            {"e1", r.e1},
            {"e2", r.e2},
            {"e3", r.e3},
            {"total", r.total},
            {"rseq", r.rseq},
            {"components",
             {{"horizon", r.e1_horizon},
              {"confidence", r.e1_confidence},
              {"vc_deviation", r.e2_vc},
              {"online_regret", r.e2_online},
              {"sequential_complexity", r.e3_complexity},
              {"drift", r.e3_drift}}}};
}

void add_bound_flags(CLI::App* cmd, BoundInputs& in, std::optional<double>& rseq) {
    cmd->add_option("--T", in.T, "horizon (number of domains)");
    cmd->add_option("--n", in.n, "samples per domain");
    cmd->add_option("--M", in.M, "loss bound");
    cmd->add_option("--rho", in.rho, "loss Lipschitz constant");
    cmd->add_option("--Delta", in.Delta, "per-step drift");
    cmd->add_option("--delta", in.delta, "confidence level in (0,1)");
    cmd->add_option("--vc", in.vc, "VC-dimension proxy");
    cmd->add_option("--rseq", rseq, "fixed sequential Rademacher proxy (default: rseq_c / sqrt(n (T-1)))");
    cmd->add_option("--rseq-c", in.rseq_c, "constant of the default rseq rule");
    cmd->add_option("--c-online", in.c_online, "online-regret constant");
}

// Loads bound inputs from a flat key = value file. Flags given on the
// command line take precedence over the file.
void apply_bound_file(const std::string& path, CLI::App* cmd, BoundInputs& in, std::optional<double>& rseq,
                      std::size_t* T_lo = nullptr, std::size_t* T_hi = nullptr) {
    const auto doc = parse_toml(read_file(path));
    for (const auto& [key, value] : doc) {
        auto number = [&] {
            if (auto* d = std::get_if<double>(&value.v)) return *d;
            if (auto* i = std::get_if<std::int64_t>(&value.v)) return static_cast<double>(*i);
            throw InvalidInput(path + ": " + key + " must be a number");
        };
        auto set = [&](const char* flag, auto& dst) {
            if (cmd->count(flag) == 0) dst = static_cast<std::decay_t<decltype(dst)>>(number());
        };
        if (key == "T" && !T_lo) set("--T", in.T);
        else if (key == "n") set("--n", in.n);
        else if (key == "M") set("--M", in.M);
        else if (key == "rho") set("--rho", in.rho);
        else if (key == "Delta") set("--Delta", in.Delta);
        else if (key == "delta") set("--delta", in.delta);
        else if (key == "vc") set("--vc", in.vc);
        else if (key == "rseq_c") set("--rseq-c", in.rseq_c);
        else if (key == "c_online") set("--c-online", in.c_online);
        else if (key == "rseq") {
            if (cmd->count("--rseq") == 0) rseq = number();
        } else if (key == "T_min" && T_lo) set("--T-min", *T_lo);
        else if (key == "T_max" && T_hi) set("--T-max", *T_hi);
        else throw InvalidInput(path + ": unknown key '" + key + "'");
    }
}

// Parses "a,b,c;d,e,f" into value tables.
std::vector<std::vector<double>> parse_tables(const std::string& s) {
    std::vector<std::vector<double>> out;
    std::stringstream rows(s);
    std::string row;
    while (std::getline(rows, row, ';')) {
        std::vector<double> f;
        std::stringstream cells(row);
        std::string c;
        while (std::getline(cells, c, ',')) {
            try {
                std::size_t used = 0;
                f.push_back(std::stod(c, &used));
                if (c.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(c);
            } catch (const std::exception&) {
                throw InvalidInput("--F: '" + c + "' is not a number");
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradshift: gradual domain adaptation experiments and diagnostics"};
    app.require_subcommand(1);

    // run
    std::string run_config, run_out;
    bool run_resume = false;
    std::size_t run_threads = 0, run_stop = 0;
    auto* run = app.add_subcommand("run", "train every (seed, schedule) pair of a config");
    run->add_option("config", run_config, "experiment config (TOML subset)")->required();
    run->add_option("--out", run_out, "output directory (overrides experiment.output_dir)");
    run->add_flag("--resume", run_resume, "continue runs from their checkpoints");
    run->add_option("--threads", run_threads, "parallel runs (default: GRADSHIFT_THREADS or all cores)");
    run->add_option("--stop-after-steps", run_stop, "end each run after this many schedule steps, keeping checkpoints");

    // gen
    std::string gen_config, gen_out;
    std::uint64_t gen_seed = 1;
    auto* gen = app.add_subcommand("gen", "write the dataset a config would generate for one seed");
    gen->add_option("config", gen_config, "experiment config")->required();
    gen->add_option("--seed", gen_seed, "run seed");
    gen->add_option("--out", gen_out, "CSV path (a .meta.json sidecar is written next to it)")->required();

    // w1
    std::string w1_a, w1_b, w1_method = "exact";
    double w1_eps = 0.05;
    std::size_t w1_iters = 100000;
    auto* w1 = app.add_subcommand("w1", "Wasserstein-1 distance between two point sets");
    w1->add_option("a", w1_a, "CSV of points")->required();
    w1->add_option("b", w1_b, "CSV of points")->required();
    w1->add_option("--method", w1_method, "exact | sorted | sinkhorn")->check(CLI::IsMember({"exact", "sorted", "sinkhorn"}));
    w1->add_option("--epsilon", w1_eps, "Sinkhorn regularization, absolute cost units");
    w1->add_option("--max-iters", w1_iters, "Sinkhorn iteration cap");

    // bound / sweep
    BoundInputs bound_in;
    std::optional<double> bound_rseq;
    auto* bound = app.add_subcommand("bound", "evaluate the excess-risk bound terms");
    add_bound_flags(bound, bound_in, bound_rseq);
    std::string bound_file, sweep_file;
    bound->add_option("--inputs", bound_file, "key = value file with any of the flags above");
    BoundInputs sweep_in;
    std::optional<double> sweep_rseq;
    std::size_t sweep_lo = 2, sweep_hi = 200;
    auto* sweep = app.add_subcommand("sweep", "evaluate the bound over a horizon range");
    add_bound_flags(sweep, sweep_in, sweep_rseq);
    sweep->add_option("--T-min", sweep_lo, "first horizon");
    sweep->add_option("--T-max", sweep_hi, "last horizon");
    sweep->add_option("--inputs", sweep_file, "key = value file with any of the flags above (T_min, T_max included)");

    // disc
    std::string disc_data, disc_config, disc_loss = "cross_entropy_bounded";
    std::uint64_t disc_seed = 1, disc_pool_seed = 0;
    std::size_t disc_random = 64, disc_snapshots = 8;
    double disc_M = 5.0, disc_rho = 1.0;
    bool disc_no_limit = false;
    auto* disc = app.add_subcommand("disc", "pooled discrepancy estimate of a domain sequence");
    auto* disc_src = disc->add_option("--data", disc_data, "dataset CSV");
    disc->add_option("--config", disc_config, "generate the data from this config instead")->excludes(disc_src);
    disc->add_option("--seed", disc_seed, "run seed used with --config");
    disc->add_option("--random", disc_random, "random-init hypotheses");
    disc->add_option("--snapshots", disc_snapshots, "training-snapshot hypotheses");
    disc->add_option("--pool-seed", disc_pool_seed, "seed of the hypothesis pool");
    disc->add_option("--loss", disc_loss, "cross_entropy_bounded | hinge");
    disc->add_option("--M", disc_M, "loss bound");
    disc->add_option("--rho", disc_rho, "loss Lipschitz constant");
    disc->add_flag("--no-lipschitz-limit", disc_no_limit, "keep the pool's networks unscaled");

    // seqrad
    std::size_t sr_z = 2, sr_T = 1;
    std::string sr_F;
    auto* seqrad = app.add_subcommand("seqrad", "exact sequential Rademacher complexity of a finite class");
    seqrad->add_option("--z", sr_z, "number of outcomes");
    seqrad->add_option("--T", sr_T, "tree depth (1..4)");
    seqrad->add_option("--F", sr_F, "function tables: values over outcomes separated by ',', functions by ';'")
        ->required();

    // lemma1
    Lemma1Options l1;
    double l1_shift = 0.3, l1_clamp = 5.0;
    auto* lemma1 = app.add_subcommand("lemma1", "Monte-Carlo check of the Lipschitz transfer bound (Gaussian translation)");
    lemma1->add_option("--shift", l1_shift, "mean of the second Gaussian (the first is N(0,1))");
    lemma1->add_option("--rho", l1.rho, "loss is rho * clamp(x, -M, M)");
    lemma1->add_option("--M", l1_clamp, "clamp bound");
    lemma1->add_option("--trials", l1.trials, "independent trials");
    lemma1->add_option("--n", l1.n, "samples per side per trial");
    lemma1->add_option("--seed", l1.seed, "seed");
    lemma1->add_option("--nu-seed", l1.nu_seed, "seed of the second side (default: independent stream)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return emit_error(e.what(), 2);
    }

    try {
        if (*run) {
            const std::string text = loaded_config_text(run_config);
            const auto cfg = parse_experiment_config(text);
            ExperimentOptions opt;
            opt.threads = run_threads ? run_threads : thread_budget();
            opt.resume = run_resume;
            if (run_stop) opt.stop_after = run_stop;
            const std::filesystem::path out = run_out.empty() ? cfg.output_dir : std::filesystem::path(run_out);
            const auto res = run_experiment(cfg, text, out, opt);
            json j = {{"completed", res.completed}, {"output_dir", out.string()}, {"runs", res.runs.size()}};
            if (res.completed) {
                j["metrics"] = res.metrics_path.string();
                j["report"] = res.report_path.string();
                json acc = json::object();
                for (auto k : cfg.schedules) {
                    std::vector<double> v;
                    for (const auto& r : res.runs)
                        if (r.spec.schedule == k) v.push_back(r.accuracy);
                    const auto s = summarize(v);
                    acc[schedule_name(k)] = {{"mean", s.mean}, {"std", s.std}, {"median", s.median}};
                }
                j["target_acc"] = acc;
            }
            print(j);
        } else if (*gen) {
            const auto cfg = parse_experiment_config(loaded_config_text(gen_config));
            GeneratorSpec g = cfg.generator;
            g.seed = gen_seed;
            const auto seq = make_sequence(g);
            save_sequence(seq, gen_out);
            print({{"path", gen_out}, {"T", seq.T()}, {"d", seq.d()}, {"k", seq.k()}, {"seed", gen_seed}});
        } else if (*w1) {
            const Array a = read_points(w1_a), b = read_points(w1_b);
            TransportResult r;
            if (w1_method == "exact") {
                r = w1_exact(a, b);
            } else if (w1_method == "sorted") {
                if (a.shape()[1] != 1 || b.shape()[1] != 1) throw InvalidInput("--method sorted needs one-dimensional points");
                r = w1_sorted_1d(a.values(), b.values());
            } else {
                r = sinkhorn(a, b, {w1_eps, w1_iters, 1e-9});
            }
            json j = {{"distance", r.distance},
                      {"method", method_name(r.method)},
                      {"iterations", r.iterations},
                      {"converged", r.converged},
                      {"n", a.shape()[0]},
                      {"d", a.shape()[1]}};
            if (r.method == TransportMethod::Sinkhorn) {
                j["epsilon"] = w1_eps;
                j["marginal_error"] = r.marginal_error;
            }
            print(j);
        } else if (*bound) {
            if (!bound_file.empty()) apply_bound_file(bound_file, bound, bound_in, bound_rseq);
            bound_in.rseq = bound_rseq;
            print(bound_json(bound_in, evaluate_bound(bound_in)));
        } else if (*sweep) {
            if (!sweep_file.empty()) apply_bound_file(sweep_file, sweep, sweep_in, sweep_rseq, &sweep_lo, &sweep_hi);
            sweep_in.rseq = sweep_rseq;
            const auto s = sweep_horizon(sweep_in, sweep_lo, sweep_hi);
            json rows = json::array();
            for (const auto& r : s.rows)
                rows.push_back({{"T", r.T}, {"e1", r.report.e1}, {"e2", r.report.e2}, {"e3", r.report.e3},
                                {"drift", r.report.e3_drift}, {"total", r.report.total}});
            json inputs = bound_json(sweep_in, BoundReport{})["inputs"];
            inputs.erase("T");
            inputs["T_min"] = sweep_lo;
            inputs["T_max"] = sweep_hi;
            print({{"inputs", inputs}, {"rows", rows}, {"argmin_T", s.argmin_T}});
        } else if (*disc) {
            DomainSequence seq;
            json source;
            if (!disc_config.empty()) {
                const auto cfg = parse_experiment_config(loaded_config_text(disc_config));
                GeneratorSpec g = cfg.generator;
                g.seed = disc_seed;
                seq = make_sequence(g);
                source = {{"config", disc_config}, {"seed", disc_seed}};
            } else if (!disc_data.empty()) {
                seq = load_sequence(disc_data);
                source = {{"data", disc_data}};
            } else {
                throw InvalidInput("disc needs --data or --config");
            }
            LossSpec loss{parse_loss_kind(disc_loss), disc_M, disc_rho};
            loss.validate();
            PoolSpec ps;
            ps.random = disc_random;
            ps.snapshots = disc_snapshots;
            ps.limit_lipschitz = !disc_no_limit;
            const auto pool = make_hypothesis_pool(seq, ps, loss, disc_pool_seed);
            const auto rep = estimate_discrepancy(seq, pool, loss);
            json prov = json::array();
            for (const auto& h : pool.items) prov.push_back(provenance_name(h.provenance));
            print({{"inputs",
                    {{"source", source},
                     {"T", seq.T()},
                     {"loss", loss_kind_name(loss.kind)},
                     {"M", loss.M},
                     {"rho", loss.rho},
                     {"random", disc_random},
                     {"snapshots", disc_snapshots},
                     {"pool_seed", disc_pool_seed},
                     {"lipschitz_limit", !disc_no_limit}}},
                   {"estimate", rep.estimate},
                   {"argmax", rep.argmax},
                   {"argmax_provenance", provenance_name(pool.items[rep.argmax].provenance)},
                   {"per_hypothesis", rep.per_hypothesis},
                   {"provenance", prov}});
        } else if (*seqrad) {
            FiniteInstance inst{sr_z, parse_tables(sr_F), sr_T};
            const double v = seq_rademacher_exact(inst);
            print({{"inputs", {{"z", sr_z}, {"T", sr_T}, {"F", inst.F}}}, {"trees", tree_count(inst)}, {"value", v}});
        } else if (*lemma1) {
            const double rho = l1.rho, M = l1_clamp;
            if (!(M > 0)) throw InvalidInput("--M must be > 0");
            auto sampler = [](double mean) {
                return [mean](Rng& r, std::size_t n) {
                    std::vector<double> v(n);
                    for (auto& x : v) x = mean + r.normal();
                    return v;
                };
            };
            const auto rep = check_lemma1(sampler(0.0), sampler(l1_shift), std::abs(l1_shift),
                                          [rho, M](double x) { return rho * std::clamp(x, -M, M); }, l1);
            json inputs = {{"shift", l1_shift}, {"rho", rho},   {"M", M},
                           {"trials", l1.trials}, {"n", l1.n}, {"seed", l1.seed}};
            if (l1.nu_seed) inputs["nu_seed"] = *l1.nu_seed;
            print({{"inputs", inputs},
                   {"true_w1", std::abs(l1_shift)},
                   {"bound", rep.bound},
                   {"violations", rep.violations},
                   {"violation_rate", rep.violation_rate},
                   {"max_gap", rep.max_gap},
                   {"mean_stderr", rep.mean_stderr}});
        }
    } catch (const RunFailure& e) {
        return emit_error(e.what(), e.exit_code(), {{"run", e.run()}});
    } catch (const DivergenceError& e) {
        return emit_error(e.what(), 3);
    } catch (const DatasetFormatError& e) {
        return emit_error(e.what(), 2);
    } catch (const CheckpointError& e) {
        return emit_error(e.what(), 2);
    } catch (const std::invalid_argument& e) {
        return emit_error(e.what(), 2);
    } catch (const std::exception& e) {
        return emit_error(e.what(), 1);
    }
    return 0;
}

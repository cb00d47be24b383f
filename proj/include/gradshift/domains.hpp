#pragma once

// Sequences of gradually drifting labeled domains. Every generator draws the
// labels of a domain from a fixed marginal before placing any features, so
// the label distribution is identical across domains by construction.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/io.hpp"
#include "gradshift/rng.hpp"
#include "json.hpp"

namespace gradshift {

struct DomainBatch {
    std::size_t t = 0;
    Array features;                  // [n, d]
    std::vector<std::size_t> labels;  // n ids in [0, k)
    std::size_t k = 0;

    std::size_t n() const { return labels.size(); }
    std::size_t d() const { return features.shape().at(1); }

    void validate() const {
        if (features.rank() != 2 || features.shape()[0] != labels.size())
            throw std::invalid_argument("domain " + std::to_string(t) + ": features " + shape_str(features.shape()) +
                                        " do not match " + std::to_string(labels.size()) + " labels");
        if (labels.empty()) throw std::invalid_argument("domain " + std::to_string(t) + " is empty");
        for (auto y : labels)
            if (y >= k)
                throw std::invalid_argument("domain " + std::to_string(t) + ": label " + std::to_string(y) +
                                            " out of range for k=" + std::to_string(k));
        require_finite(features, "domain " + std::to_string(t) + " features");
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(k, 0);
        for (auto y : labels) ++c[y];
        return c;
    }

    // Rows whose label is y.
    Array class_rows(std::size_t y) const {
        std::vector<double> v;
        std::size_t rows = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == y) {
                auto row = features.data().subspan(i * d(), d());
                v.insert(v.end(), row.begin(), row.end());
                ++rows;
            }
        return Array({rows, d()}, std::move(v));
    }

    DomainBatch select(const std::vector<std::size_t>& idx) const {
        DomainBatch b{t, Array::zeros({idx.size(), d()}), {}, k};
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::copy_n(features.data().begin() + idx[r] * d(), d(), b.features.data().begin() + r * d());
            b.labels.push_back(labels[idx[r]]);
        }
        return b;
    }

    friend bool operator==(const DomainBatch&, const DomainBatch&) = default;
};

struct SequenceMeta {
    std::string generator;
    nlohmann::json params = nlohmann::json::object();
    std::optional<double> delta_true;

    friend bool operator==(const SequenceMeta&, const SequenceMeta&) = default;
};

struct DomainSequence {
    std::vector<DomainBatch> domains;
    SequenceMeta meta;

    std::size_t T() const { return domains.size(); }
    std::size_t d() const { return domains.front().d(); }
    std::size_t k() const { return domains.front().k; }

    void validate() const {
        if (domains.empty()) throw std::invalid_argument("sequence has no domains");
        for (std::size_t t = 0; t < domains.size(); ++t) {
            const auto& b = domains[t];
            b.validate();
            if (b.t != t) throw std::invalid_argument("domain indices are not consecutive at position " + std::to_string(t));
            if (b.d() != d() || b.k != k())
                throw std::invalid_argument("domain " + std::to_string(t) + " disagrees on d or k");
        }
    }

    friend bool operator==(const DomainSequence&, const DomainSequence&) = default;
};

// Concatenates batches into one labeled batch (used to pool source domains).
inline DomainBatch pool_domains(const std::vector<DomainBatch>& parts, std::size_t t) {
    if (parts.empty()) throw std::invalid_argument("pool_domains: nothing to pool");
    DomainBatch out{t, {}, {}, parts.front().k};
    std::vector<double> v;
    for (const auto& p : parts) {
        v.insert(v.end(), p.features.values().begin(), p.features.values().end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    out.features = Array({out.labels.size(), parts.front().d()}, std::move(v));
    return out;
}

// --- generators -------------------------------------------------------------

enum class GeneratorKind { RotatingMoons, RotatingGaussians, ShiftingGaussians, File };

struct GeneratorSpec {
    GeneratorKind kind = GeneratorKind::RotatingMoons;
    std::size_t T = 6;
    std::size_t n = 500;
    std::uint64_t seed = 0;
    double total_degrees = 120.0;
    double noise_sigma = 0.1;
    double shift_per_step = 0.3;
    double sigma = 0.5;
    std::vector<std::vector<double>> class_means{{-1.0}, {1.0}};
    std::vector<std::vector<double>> directions{};  // cycle of shift directions; empty = +x0
    std::string path;                                // kind == File
};

namespace detail {
inline void check_T(std::size_t T, const char* who) {
    if (T < 2) throw std::invalid_argument(std::string(who) + ": T must be >= 2, got " + std::to_string(T));
}
inline void rotate_rows(Array& x, double degrees) {
    const double a = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    for (std::size_t i = 0; i < x.shape()[0]; ++i) {
        const double u = x(i, 0), v = x(i, 1);
        x(i, 0) = c * u - s * v;
        x(i, 1) = s * u + c * v;
    }
}
}  // namespace detail

inline double rotation_angle(std::size_t t, std::size_t T, double total_degrees) {
    return total_degrees * static_cast<double>(t) / static_cast<double>(T - 1);
}

// Two interleaving half circles (unit radius; class 1 offset by (1, -0.5)),
// centered at the origin, rotated about it by an angle growing linearly
// from 0 at t=0 to total_degrees at t=T-1.
inline DomainSequence make_rotating_moons(std::size_t T, std::size_t n, double total_degrees, double noise_sigma,
                                          std::uint64_t seed) {
    detail::check_T(T, "make_rotating_moons");
    if (n == 0) throw std::invalid_argument("make_rotating_moons: n must be >= 1");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("make_rotating_moons: noise_sigma must be >= 0");
    DomainSequence seq;
    seq.meta.generator = "rotating_moons";
    seq.meta.params = {{"T", T}, {"n", n}, {"total_degrees", total_degrees}, {"noise_sigma", noise_sigma}, {"seed", seed}};
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng(derive_seed(seed, {t}));
        DomainBatch b{t, Array::zeros({n, 2}), std::vector<std::size_t>(n), 2};
        for (auto& y : b.labels) y = rng.uniform() < 0.5 ? 0 : 1;
        for (std::size_t i = 0; i < n; ++i) {
            const double th = std::numbers::pi * rng.uniform();
            double u = std::cos(th), v = std::sin(th);
            if (b.labels[i] == 1) {
                u = 1.0 - u;
                v = 0.5 - v;
            }
            b.features(i, 0) = u - 0.5 + noise_sigma * rng.normal();
            b.features(i, 1) = v - 0.25 + noise_sigma * rng.normal();
        }
        detail::rotate_rows(b.features, rotation_angle(t, T, total_degrees));
        seq.domains.push_back(std::move(b));
    }
    return seq;
}

// Isotropic Gaussian classes whose means rotate about the origin.
inline DomainSequence make_rotating_gaussians(std::size_t T, std::size_t n, double total_degrees,
                                              const std::vector<std::vector<double>>& class_means, double sigma,
                                              std::uint64_t seed) {
    detail::check_T(T, "make_rotating_gaussians");
    if (!(sigma >= 0.0)) throw std::invalid_argument("make_rotating_gaussians: sigma must be >= 0");
    if (class_means.empty()) throw std::invalid_argument("make_rotating_gaussians: no classes");
    for (const auto& m : class_means)
        if (m.size() != 2) throw std::invalid_argument("make_rotating_gaussians: class means must be 2-D");
    const std::size_t k = class_means.size();
    DomainSequence seq;
    seq.meta.generator = "rotating_gaussians";
    seq.meta.params = {{"T", T}, {"n", n}, {"total_degrees", total_degrees}, {"class_means", class_means},
                       {"sigma", sigma}, {"seed", seed}};
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng(derive_seed(seed, {t}));
        DomainBatch b{t, Array::zeros({n, 2}), std::vector<std::size_t>(n), k};
        for (auto& y : b.labels) y = rng.below(k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < 2; ++j) b.features(i, j) = class_means[b.labels[i]][j] + sigma * rng.normal();
        detail::rotate_rows(b.features, rotation_angle(t, T, total_degrees));
        seq.domains.push_back(std::move(b));
    }
    return seq;
}

// Class y at time t is N(class_means[y] + offset_t, sigma^2 I), where each step
// moves offset by shift_per_step along the next direction in the cycle. The
// per-step class-conditional W_p drift is exactly shift_per_step for every p.
inline DomainSequence make_shifting_gaussians(std::size_t T, std::size_t n, double shift_per_step,
                                              const std::vector<std::vector<double>>& class_means, double sigma,
                                              std::uint64_t seed,
                                              std::vector<std::vector<double>> directions = {}) {
    detail::check_T(T, "make_shifting_gaussians");
    if (!(sigma >= 0.0)) throw std::invalid_argument("make_shifting_gaussians: sigma must be >= 0");
    if (!(shift_per_step >= 0.0)) throw std::invalid_argument("make_shifting_gaussians: shift_per_step must be >= 0");
    if (class_means.empty()) throw std::invalid_argument("make_shifting_gaussians: no classes");
    const std::size_t d = class_means.front().size(), k = class_means.size();
    if (d == 0) throw std::invalid_argument("make_shifting_gaussians: zero-dimensional means");
    for (const auto& m : class_means)
        if (m.size() != d) throw std::invalid_argument("make_shifting_gaussians: class means differ in dimension");
    if (directions.empty()) {
        directions.assign(1, std::vector<double>(d, 0.0));
        directions[0][0] = 1.0;
    }
    for (auto& dir : directions) {
        if (dir.size() != d) throw std::invalid_argument("make_shifting_gaussians: direction has wrong dimension");
        double norm = 0.0;
        for (double v : dir) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) throw std::invalid_argument("make_shifting_gaussians: zero direction");
        for (double& v : dir) v /= norm;
    }
    DomainSequence seq;
    seq.meta.generator = "shifting_gaussians";
    seq.meta.params = {{"T", T},         {"n", n},         {"shift_per_step", shift_per_step}, {"class_means", class_means},
                       {"sigma", sigma}, {"seed", seed}, {"directions", directions}};
    seq.meta.delta_true = shift_per_step;
    std::vector<double> offset(d, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0)
            for (std::size_t j = 0; j < d; ++j) offset[j] += shift_per_step * directions[(t - 1) % directions.size()][j];
        Rng rng(derive_seed(seed, {t}));
        DomainBatch b{t, Array::zeros({n, d}), std::vector<std::size_t>(n), k};
        for (auto& y : b.labels) y = rng.below(k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                b.features(i, j) = class_means[b.labels[i]][j] + offset[j] + sigma * rng.normal();
        seq.domains.push_back(std::move(b));
    }
    return seq;
}

DomainSequence load_sequence(const std::filesystem::path& path);

inline DomainSequence make_sequence(const GeneratorSpec& g) {
    switch (g.kind) {
        case GeneratorKind::RotatingMoons: return make_rotating_moons(g.T, g.n, g.total_degrees, g.noise_sigma, g.seed);
        case GeneratorKind::RotatingGaussians:
            return make_rotating_gaussians(g.T, g.n, g.total_degrees, g.class_means, g.sigma, g.seed);
        case GeneratorKind::ShiftingGaussians:
            return make_shifting_gaussians(g.T, g.n, g.shift_per_step, g.class_means, g.sigma, g.seed, g.directions);
        case GeneratorKind::File: return load_sequence(g.path);
    }
    throw std::invalid_argument("make_sequence: unknown generator");
}

inline GeneratorKind parse_generator_kind(const std::string& s) {
    if (s == "rotating_moons") return GeneratorKind::RotatingMoons;
    if (s == "rotating_gaussians") return GeneratorKind::RotatingGaussians;
    if (s == "shifting_gaussians") return GeneratorKind::ShiftingGaussians;
    if (s == "file") return GeneratorKind::File;
    throw std::invalid_argument("unknown generator kind '" + s + "'");
}

// --- persistence ----------------------------------------------------------

class DatasetFormatError : public std::runtime_error {
public:
    DatasetFormatError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

inline std::filesystem::path meta_path_for(const std::filesystem::path& csv) {
    auto p = csv;
    p.replace_extension(".meta.json");
    return p;
}

inline void save_sequence(const DomainSequence& seq, const std::filesystem::path& path) {
    seq.validate();
    std::ostringstream os;
    os << "t,y";
    for (std::size_t j = 0; j < seq.d(); ++j) os << ",x" << j;
    os << '\n';
    for (const auto& b : seq.domains)
        for (std::size_t i = 0; i < b.n(); ++i) {
            os << b.t << ',' << b.labels[i];
            for (std::size_t j = 0; j < b.d(); ++j) os << ',' << format_double(b.features(i, j), 17);
            os << '\n';
        }
    nlohmann::json meta = {{"generator", seq.meta.generator},
                           {"params", seq.meta.params},
                           {"T", seq.T()},
                           {"d", seq.d()},
                           {"k", seq.k()}};
    meta["delta_true"] = seq.meta.delta_true ? nlohmann::json(*seq.meta.delta_true) : nlohmann::json(nullptr);
    atomic_write(path, os.str());
    atomic_write(meta_path_for(path), meta.dump(2) + "\n");
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::size_t parse_index(std::string_view s, std::size_t line, const char* what) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw DatasetFormatError(line, std::string(what) + " '" + std::string(s) + "' is not a non-negative integer");
    return v;
}

inline double parse_real(std::string_view s, std::size_t line) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty() || !std::isfinite(v))
        throw DatasetFormatError(line, "feature '" + std::string(s) + "' is not a finite decimal");
    return v;
}

}  // namespace detail

// Reads the CSV (and the .meta.json sidecar when present). Without a sidecar
// k is one more than the largest label seen.
inline DomainSequence load_sequence(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset '" + path.string() + "'");
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw DatasetFormatError(1, "missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = detail::split_commas(line);
    if (header.size() < 3 || header[0] != "t" || header[1] != "y")
        throw DatasetFormatError(1, "header must be t,y,x0,...,x{d-1}");
    const std::size_t d = header.size() - 2;
    for (std::size_t j = 0; j < d; ++j)
        if (header[j + 2] != "x" + std::to_string(j))
            throw DatasetFormatError(1, "header column " + std::to_string(j + 2) + " should be x" + std::to_string(j));

    std::optional<std::size_t> k_meta;
    DomainSequence seq;
    const auto mp = meta_path_for(path);
    if (std::filesystem::exists(mp)) {
        std::ifstream mf(mp);
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(mf);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("malformed sidecar '" + mp.string() + "': " + e.what());
        }
        seq.meta.generator = meta.value("generator", std::string("file"));
        seq.meta.params = meta.value("params", nlohmann::json::object());
        if (meta.contains("delta_true") && !meta["delta_true"].is_null())
            seq.meta.delta_true = meta["delta_true"].get<double>();
        if (meta.contains("k")) k_meta = meta["k"].get<std::size_t>();
        if (meta.contains("d") && meta["d"].get<std::size_t>() != d)
            throw std::runtime_error("sidecar d disagrees with CSV header");
    } else {
        seq.meta.generator = "file";
    }

    std::vector<std::vector<double>> feats;
    std::vector<std::vector<std::size_t>> labels;
    std::size_t max_label = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = detail::split_commas(line);
        if (f.size() != d + 2)
            throw DatasetFormatError(lineno, "expected " + std::to_string(d + 2) + " fields, got " +
                                                 std::to_string(f.size()));
        const std::size_t t = detail::parse_index(f[0], lineno, "t");
        const std::size_t y = detail::parse_index(f[1], lineno, "y");
        if (t + 1 < labels.size()) throw DatasetFormatError(lineno, "rows are not sorted by t");
        if (t > labels.size()) throw DatasetFormatError(lineno, "domain index " + std::to_string(t) + " skips a domain");
        if (t == labels.size()) {
            labels.emplace_back();
            feats.emplace_back();
        }
        if (k_meta && y >= *k_meta)
            throw DatasetFormatError(lineno, "label " + std::to_string(y) + " out of range for k=" + std::to_string(*k_meta));
        max_label = std::max(max_label, y);
        labels[t].push_back(y);
        for (std::size_t j = 0; j < d; ++j) feats[t].push_back(detail::parse_real(f[j + 2], lineno));
    }
    if (labels.empty()) throw DatasetFormatError(lineno, "no data rows");
    const std::size_t k = k_meta.value_or(max_label + 1);
    for (std::size_t t = 0; t < labels.size(); ++t) {
        const std::size_t n = labels[t].size();
        seq.domains.push_back({t, Array({n, d}, std::move(feats[t])), std::move(labels[t]), k});
    }
    seq.validate();
    return seq;
}

// --- holdout ----------------------------------------------------------------

// Per-domain split stratified by label; `fraction` of each domain goes to the
// evaluation side. Per-class eval counts come from largest-remainder
// rounding so that the domain total is round(n * fraction), and every class
// keeps at least one sample on each side.
inline std::pair<DomainSequence, DomainSequence> split_holdout(const DomainSequence& seq, double fraction,
                                                               std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_holdout: fraction must be in (0, 1)");
    DomainSequence train, eval;
    train.meta = eval.meta = seq.meta;
    for (const auto& b : seq.domains) {
        const auto counts = b.class_counts();
        for (std::size_t y = 0; y < b.k; ++y)
            if (counts[y] < 2)
                throw std::invalid_argument("split_holdout: class " + std::to_string(y) + " has fewer than 2 samples in domain " +
                                            std::to_string(b.t));
        std::vector<std::size_t> take(b.k, 0);
        std::vector<std::pair<double, std::size_t>> rem;
        std::size_t assigned = 0;
        for (std::size_t y = 0; y < b.k; ++y) {
            const double q = static_cast<double>(counts[y]) * fraction;
            take[y] = static_cast<std::size_t>(std::floor(q));
            assigned += take[y];
            rem.emplace_back(q - std::floor(q), y);
        }
        const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(b.n()) * fraction));
        std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& c) { return a.first > c.first; });
        for (std::size_t i = 0; assigned < target && i < rem.size(); ++i, ++assigned) ++take[rem[i].second];
        std::vector<std::size_t> ev, tr;
        for (std::size_t y = 0; y < b.k; ++y) {
            take[y] = std::clamp<std::size_t>(take[y], 1, counts[y] - 1);
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < b.n(); ++i)
                if (b.labels[i] == y) idx.push_back(i);
            Rng rng(derive_seed(seed, {b.t, y}));
            auto perm = rng.permutation(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) (i < take[y] ? ev : tr).push_back(idx[perm[i]]);
        }
        std::sort(ev.begin(), ev.end());
        std::sort(tr.begin(), tr.end());
        train.domains.push_back(b.select(tr));
        eval.domains.push_back(b.select(ev));
    }
    return {std::move(train), std::move(eval)};
}

}  // namespace gradshift

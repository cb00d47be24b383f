#pragma once

// Experiment configuration files.
//
// The format is a subset of TOML: `[table]` headers, `key = value` lines,
// `#` comments, and values that are basic strings, integers, floats,
// booleans or single-line arrays of those scalars. Keys are looked up as
// "table.key"; any key the experiment schema does not recognise is an error.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gradshift/domains.hpp"
#include "gradshift/objectives.hpp"

namespace gradshift {

class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& what)
        : std::invalid_argument(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

using TomlScalar = std::variant<std::string, std::int64_t, double, bool>;

struct TomlValue {
    std::variant<std::string, std::int64_t, double, bool, std::vector<TomlScalar>> v;
    std::size_t line = 0;
};

using TomlDocument = std::map<std::string, TomlValue>;

namespace toml_detail {

inline bool is_bare(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

class Cursor {
public:
    Cursor(std::string_view s, std::size_t line) : s_(s), line_(line) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("", "line " + std::to_string(line_) + ": " + what);
    }
    void skip_ws() {
        while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
    }
    bool at_end_or_comment() {
        skip_ws();
        return i_ >= s_.size() || s_[i_] == '#' || s_[i_] == '\r';
    }
    char peek() const { return i_ < s_.size() ? s_[i_] : '\0'; }
    void expect(char c) {
        skip_ws();
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++i_;
    }

    std::string key() {
        skip_ws();
        const std::size_t b = i_;
        while (i_ < s_.size() && is_bare(s_[i_])) ++i_;
        if (b == i_) fail("expected a bare key");
        return std::string(s_.substr(b, i_ - b));
    }

    TomlScalar scalar() {
        skip_ws();
        if (peek() == '"') return string();
        const std::size_t b = i_;
        while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != ']' && s_[i_] != '#' && s_[i_] != ' ' && s_[i_] != '\t' &&
               s_[i_] != '\r')
            ++i_;
        std::string tok(s_.substr(b, i_ - b));
        if (tok.empty()) fail("missing value");
        if (tok == "true") return true;
        if (tok == "false") return false;
        std::string digits;
        for (char c : tok)
            if (c != '_') digits += c;
        const bool is_float = digits.find_first_of(".eE") != std::string::npos;
        if (!is_float) {
            std::int64_t v = 0;
            const char* first = digits.data() + (digits[0] == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(first, digits.data() + digits.size(), v);
            if (ec != std::errc() || p != digits.data() + digits.size()) fail("invalid value '" + tok + "'");
            return v;
        }
        double v = 0.0;
        const char* first = digits.data() + (digits[0] == '+' ? 1 : 0);
        auto [p, ec] = std::from_chars(first, digits.data() + digits.size(), v);
        if (ec != std::errc() || p != digits.data() + digits.size() || !std::isfinite(v))
            fail("invalid value '" + tok + "'");
        return v;
    }

    TomlValue value() {
        skip_ws();
        TomlValue out;
        out.line = line_;
        if (peek() != '[') {
            std::visit([&](auto&& x) { out.v = x; }, scalar());
            return out;
        }
        ++i_;
        std::vector<TomlScalar> items;
        while (true) {
            skip_ws();
            if (peek() == ']') break;
            items.push_back(scalar());
            skip_ws();
            if (peek() == ',') {
                ++i_;
                continue;
            }
            if (peek() != ']') fail("expected ',' or ']' in array (arrays must fit on one line)");
        }
        ++i_;
        out.v = std::move(items);
        return out;
    }

private:
    std::string string() {
        ++i_;
        std::string out;
        while (true) {
            if (i_ >= s_.size()) fail("unterminated string");
            const char c = s_[i_++];
            if (c == '"') return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (i_ >= s_.size()) fail("unterminated escape");
            switch (s_[i_++]) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                default: fail("unsupported escape sequence");
            }
        }
    }

    std::string_view s_;
    std::size_t line_;
    std::size_t i_ = 0;
};

}  // namespace toml_detail

inline TomlDocument parse_toml(std::string_view text) {
    TomlDocument doc;
    std::string table;
    std::set<std::string> tables;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const std::size_t nl = text.find('\n');
        std::string_view raw = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        toml_detail::Cursor cur(raw, line_no);
        if (cur.at_end_or_comment()) continue;
        if (toml_detail::trim(raw).front() == '[') {
            cur.expect('[');
            table = cur.key();
            cur.expect(']');
            if (!cur.at_end_or_comment()) cur.fail("unexpected text after table header");
            if (!tables.insert(table).second) cur.fail("table [" + table + "] defined twice");
            continue;
        }
        const std::string key = cur.key();
        cur.expect('=');
        TomlValue v = cur.value();
        if (!cur.at_end_or_comment()) cur.fail("unexpected text after value");
        const std::string full = table.empty() ? key : table + "." + key;
        if (!doc.emplace(full, std::move(v)).second) cur.fail("key '" + full + "' defined twice");
    }
    return doc;
}

struct ExperimentConfig {
    std::string name = "experiment";
    std::filesystem::path output_dir = "runs/experiment";
    std::vector<std::uint64_t> seeds{1};
    std::vector<ScheduleKind> schedules{ScheduleKind::Gradual};
    double holdout = 0.2;
    GeneratorSpec generator{};
    TrainConfig train{};
    ModelSizes sizes{};

    void validate() const {
        if (name.empty()) throw ConfigError("experiment.name", "must not be empty");
        if (seeds.empty()) throw ConfigError("experiment.seeds", "needs at least one seed");
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
            throw ConfigError("experiment.seeds", "seeds must be distinct");
        if (schedules.empty()) throw ConfigError("experiment.schedules", "needs at least one schedule");
        if (std::set<ScheduleKind>(schedules.begin(), schedules.end()).size() != schedules.size())
            throw ConfigError("experiment.schedules", "schedules must be distinct");
        if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("experiment.holdout", "must lie in (0, 1)");
        if (generator.T < 2) throw ConfigError("generator.T", "must be >= 2");
        if (generator.kind != GeneratorKind::File && generator.n < 2) throw ConfigError("generator.n", "must be >= 2");
        if (generator.kind == GeneratorKind::File && generator.path.empty())
            throw ConfigError("generator.path", "required when kind = \"file\"");
        if (sizes.feature_dim < 1 || sizes.hidden < 1 || sizes.critic_hidden < 1 || sizes.summarizer_hidden < 1 ||
            sizes.summarizer_layers < 1)
            throw ConfigError("model", "all widths and layer counts must be >= 1");
        try {
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("train", e.what());
        }
    }
};

namespace config_detail {

class Reader {
public:
    explicit Reader(TomlDocument doc) : doc_(std::move(doc)) {}

    template <class F>
    void with(const std::string& key, F&& f) {
        auto it = doc_.find(key);
        if (it == doc_.end()) return;
        try {
            f(it->second);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(key, std::string(e.what()) + " (line " + std::to_string(it->second.line) + ")");
        }
        doc_.erase(it);
    }

    void finish() const {
        if (!doc_.empty()) {
            const auto& [k, v] = *doc_.begin();
            throw ConfigError(k, "unknown key (line " + std::to_string(v.line) + ")");
        }
    }

private:
    TomlDocument doc_;
};

inline std::string type_name(const TomlScalar& s) {
    switch (s.index()) {
        case 0: return "string";
        case 1: return "integer";
        case 2: return "float";
        default: return "boolean";
    }
}

inline double as_double(const TomlScalar& s) {
    if (auto* i = std::get_if<std::int64_t>(&s)) return static_cast<double>(*i);
    if (auto* d = std::get_if<double>(&s)) return *d;
    throw std::invalid_argument("expected a number, got " + type_name(s));
}

inline std::int64_t as_int(const TomlScalar& s) {
    if (auto* i = std::get_if<std::int64_t>(&s)) return *i;
    throw std::invalid_argument("expected an integer, got " + type_name(s));
}

inline std::size_t as_count(const TomlScalar& s) {
    const auto v = as_int(s);
    if (v < 0) throw std::invalid_argument("must be >= 0");
    return static_cast<std::size_t>(v);
}

inline std::string as_string(const TomlScalar& s) {
    if (auto* v = std::get_if<std::string>(&s)) return *v;
    throw std::invalid_argument("expected a string, got " + type_name(s));
}

inline bool as_bool(const TomlScalar& s) {
    if (auto* v = std::get_if<bool>(&s)) return *v;
    throw std::invalid_argument("expected a boolean, got " + type_name(s));
}

inline const TomlScalar& scalar_of(const TomlValue& v, TomlScalar& storage) {
    return std::visit(
        [&](auto&& x) -> const TomlScalar& {
            using X = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<X, std::vector<TomlScalar>>)
                throw std::invalid_argument("expected a single value, got an array");
            else {
                storage = x;
                return storage;
            }
        },
        v.v);
}

inline const std::vector<TomlScalar>& array_of(const TomlValue& v) {
    if (auto* a = std::get_if<std::vector<TomlScalar>>(&v.v)) return *a;
    throw std::invalid_argument("expected an array");
}

// Splits a flat list into rows of `k` equal parts.
inline std::vector<std::vector<double>> rows_of(const std::vector<double>& flat, std::size_t k) {
    if (k == 0 || flat.empty() || flat.size() % k != 0)
        throw std::invalid_argument("flat list of " + std::to_string(flat.size()) + " values does not split into " +
                                    std::to_string(k) + " equal rows");
    const std::size_t d = flat.size() / k;
    std::vector<std::vector<double>> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i].assign(flat.begin() + i * d, flat.begin() + (i + 1) * d);
    return out;
}

}  // namespace config_detail

// Builds and validates an experiment from config text. Throws ConfigError
// naming the offending field.
inline ExperimentConfig parse_experiment_config(std::string_view text) {
    using namespace config_detail;
    Reader r(parse_toml(text));
    ExperimentConfig c;
    TomlScalar tmp;
    auto num = [&tmp](double& dst) {
        return [&tmp, p = &dst](const TomlValue& v) { *p = as_double(scalar_of(v, tmp)); };
    };
    auto count = [&tmp](std::size_t& dst) {
        return [&tmp, p = &dst](const TomlValue& v) { *p = as_count(scalar_of(v, tmp)); };
    };
    auto flag = [&tmp](bool& dst) {
        return [&tmp, p = &dst](const TomlValue& v) { *p = as_bool(scalar_of(v, tmp)); };
    };
    auto doubles = [](std::vector<double>& dst) {
        return [p = &dst](const TomlValue& v) {
            p->clear();
            for (const auto& s : array_of(v)) p->push_back(as_double(s));
        };
    };

    r.with("experiment.name", [&](const TomlValue& v) { c.name = as_string(scalar_of(v, tmp)); });
    r.with("experiment.output_dir", [&](const TomlValue& v) { c.output_dir = as_string(scalar_of(v, tmp)); });
    r.with("experiment.seeds", [&](const TomlValue& v) {
        c.seeds.clear();
        for (const auto& s : array_of(v)) {
            const auto x = as_int(s);
            if (x < 0) throw std::invalid_argument("seeds must be >= 0");
            c.seeds.push_back(static_cast<std::uint64_t>(x));
        }
    });
    r.with("experiment.schedules", [&](const TomlValue& v) {
        c.schedules.clear();
        for (const auto& s : array_of(v)) c.schedules.push_back(parse_schedule(as_string(s)));
    });
    r.with("experiment.holdout", num(c.holdout));

    auto& g = c.generator;
    r.with("generator.kind", [&](const TomlValue& v) { g.kind = parse_generator_kind(as_string(scalar_of(v, tmp))); });
    r.with("generator.T", count(g.T));
    r.with("generator.n", count(g.n));
    r.with("generator.total_degrees", num(g.total_degrees));
    r.with("generator.noise_sigma", num(g.noise_sigma));
    r.with("generator.shift_per_step", num(g.shift_per_step));
    r.with("generator.sigma", num(g.sigma));
    r.with("generator.path", [&](const TomlValue& v) { g.path = as_string(scalar_of(v, tmp)); });
    std::size_t classes = 2;
    std::optional<std::vector<double>> means_flat, dirs_flat;
    r.with("generator.classes", count(classes));
    r.with("generator.class_means", [&](const TomlValue& v) { doubles(means_flat.emplace())(v); });
    r.with("generator.directions", [&](const TomlValue& v) { doubles(dirs_flat.emplace())(v); });
    if (means_flat) {
        try {
            g.class_means = rows_of(*means_flat, classes);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("generator.class_means", e.what());
        }
    }
    if (dirs_flat) {
        const std::size_t dim = g.class_means.front().size();
        if (dirs_flat->empty() || dirs_flat->size() % dim != 0)
            throw ConfigError("generator.directions", "length must be a multiple of the class-mean dimension " +
                                                          std::to_string(dim));
        g.directions = rows_of(*dirs_flat, dirs_flat->size() / dim);
    }

    auto& t = c.train;
    r.with("train.lambda", num(t.lambda));
    r.with("train.gp_factor", num(t.gp_factor));
    r.with("train.k_critic", count(t.k_critic));
    r.with("train.lr_model", num(t.lr_model));
    r.with("train.lr_critic", num(t.lr_critic));
    r.with("train.batch_size", count(t.batch_size));
    r.with("train.epochs_per_domain", count(t.epochs_per_domain));
    r.with("train.optimizer", [&](const TomlValue& v) { t.optimizer = parse_optimizer(as_string(scalar_of(v, tmp))); });
    r.with("train.labeled_target", flag(t.labeled_target));
    r.with("train.record_wall_clock", flag(t.record_wall_clock));
    r.with("train.loss", [&](const TomlValue& v) { t.loss.kind = parse_loss_kind(as_string(scalar_of(v, tmp))); });
    r.with("train.loss_bound", num(t.loss.M));
    r.with("train.loss_rho", num(t.loss.rho));

    auto& m = c.sizes;
    r.with("model.feature_dim", count(m.feature_dim));
    r.with("model.hidden", count(m.hidden));
    r.with("model.critic_hidden", count(m.critic_hidden));
    r.with("model.summarizer_hidden", count(m.summarizer_hidden));
    r.with("model.summarizer_layers", count(m.summarizer_layers));

    r.finish();
    c.validate();
    return c;
}

}  // namespace gradshift

#pragma once

// Wasserstein-1 between uniform empirical measures.
//
//  * w1_exact: minimum-cost perfect matching (shortest augmenting path with
//    dual potentials), O(n^3).
//  * w1_sorted_1d / wp_sorted_1d: sorted coupling, exact on the line.
//  * sinkhorn: entropic approximation with log-domain updates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/domains.hpp"
#include "gradshift/rng.hpp"

namespace gradshift {

inline constexpr std::size_t kExactAssignmentLimit = 4096;

enum class TransportMethod { ExactAssignment, Sorted1d, Sinkhorn };

inline const char* method_name(TransportMethod m) {
    switch (m) {
        case TransportMethod::ExactAssignment: return "exact_assignment";
        case TransportMethod::Sorted1d: return "sorted_1d";
        case TransportMethod::Sinkhorn: return "sinkhorn";
    }
    return "?";
}

struct TransportResult {
    double distance = 0.0;
    TransportMethod method = TransportMethod::ExactAssignment;
    // Exact methods: row i of A is sent to assignment[i] of B (mass 1/n).
    std::vector<std::size_t> assignment;
    // Sinkhorn only: the dense n x n coupling.
    std::optional<Array> coupling;
    std::size_t iterations = 0;
    bool converged = true;
    double marginal_error = 0.0;
};

// Pairwise Euclidean distances between the rows of A and B.
inline Array cost_matrix(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw ShapeError("cost_matrix: point sets " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ in dimension");
    const std::size_t n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
    Array c = Array::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < d; ++p) {
                const double diff = a(i, p) - b(j, p);
                s += diff * diff;
            }
            c(i, j) = std::sqrt(s);
        }
    return c;
}

// Minimum-cost assignment of a square cost matrix by successive shortest
// augmenting paths. Returns row -> column.
inline std::vector<std::size_t> solve_assignment(const Array& cost) {
    const std::size_t n = cost.shape()[0];
    if (cost.rank() != 2 || cost.shape()[1] != n) throw ShapeError("solve_assignment: cost must be square");
    constexpr double inf = std::numeric_limits<double>::infinity();
    // 1-based columns; column 0 is the virtual root of each search.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> row_of(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        row_of[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = row_of[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (row_of[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> assign(n);
    for (std::size_t j = 1; j <= n; ++j) assign[row_of[j] - 1] = j - 1;
    return assign;
}

namespace detail {
inline void require_equal_sizes(const Array& a, const Array& b, const char* who) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError(std::string(who) + ": point sets must be [n, d]");
    if (a.shape()[0] != b.shape()[0])
        throw std::invalid_argument(std::string(who) + ": point sets have " + std::to_string(a.shape()[0]) + " and " +
                                    std::to_string(b.shape()[0]) + " points; call resample_to_equal first");
    if (a.shape()[0] == 0) throw std::invalid_argument(std::string(who) + ": empty point sets");
}
}  // namespace detail

inline TransportResult w1_exact(const Array& a, const Array& b) {
    detail::require_equal_sizes(a, b, "w1_exact");
    const std::size_t n = a.shape()[0];
    if (n > kExactAssignmentLimit)
        throw std::invalid_argument("w1_exact: n=" + std::to_string(n) + " exceeds " +
                                    std::to_string(kExactAssignmentLimit) + "; use sinkhorn instead");
    const Array c = cost_matrix(a, b);
    TransportResult r;
    r.method = TransportMethod::ExactAssignment;
    r.assignment = solve_assignment(c);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += c(i, r.assignment[i]);
    r.distance = s / static_cast<double>(n);
    return r;
}

namespace detail {
inline std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    return idx;
}
}  // namespace detail

// W_p on the line via the sorted (monotone) coupling.
inline TransportResult wp_sorted_1d(const std::vector<double>& a, const std::vector<double>& b, double p) {
    if (a.size() != b.size())
        throw std::invalid_argument("wp_sorted_1d: sizes " + std::to_string(a.size()) + " and " +
                                    std::to_string(b.size()) + " differ; call resample_to_equal first");
    if (a.empty()) throw std::invalid_argument("wp_sorted_1d: empty point sets");
    if (!(p >= 1.0)) throw std::invalid_argument("wp_sorted_1d: p must be >= 1");
    auto ia = detail::argsort(a), ib = detail::argsort(b);
    TransportResult r;
    r.method = TransportMethod::Sorted1d;
    r.assignment.resize(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        r.assignment[ia[i]] = ib[i];
        s += std::pow(std::abs(a[ia[i]] - b[ib[i]]), p);
    }
    r.distance = std::pow(s / static_cast<double>(a.size()), 1.0 / p);
    return r;
}

inline TransportResult w1_sorted_1d(const std::vector<double>& a, const std::vector<double>& b) {
    return wp_sorted_1d(a, b, 1.0);
}

struct SinkhornOptions {
    double epsilon = 0.05;
    std::size_t max_iters = 100000;
    double tol = 1e-9;
};

// Entropic OT between uniform measures. Potentials are kept in log domain;
// the reported distance is <coupling, cost> without the entropy term. Hitting
// max_iters sets converged = false rather than throwing.
inline TransportResult sinkhorn(const Array& a, const Array& b, SinkhornOptions opt = {}) {
    detail::require_equal_sizes(a, b, "sinkhorn");
    if (!(opt.epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon must be > 0");
    const std::size_t n = a.shape()[0];
    const Array c = cost_matrix(a, b);
    const double eps = opt.epsilon;
    const double log_w = -std::log(static_cast<double>(n));
    std::vector<double> f(n, 0.0), g(n, 0.0), tmp(n);

    auto lse = [](const std::vector<double>& v) {
        const double mx = *std::max_element(v.begin(), v.end());
        double s = 0.0;
        for (double x : v) s += std::exp(x - mx);
        return mx + std::log(s);
    };
    auto row_error = [&]() {
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += std::exp((f[i] + g[j] - c(i, j)) / eps);
            err += std::abs(s - 1.0 / static_cast<double>(n));
        }
        return err;
    };

    TransportResult r;
    r.method = TransportMethod::Sinkhorn;
    r.converged = false;
    for (std::size_t it = 1; it <= opt.max_iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) tmp[j] = (g[j] - c(i, j)) / eps;
            f[i] = eps * (log_w - lse(tmp));
        }
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) tmp[i] = (f[i] - c(i, j)) / eps;
            g[j] = eps * (log_w - lse(tmp));
        }
        r.iterations = it;
        // Columns are exact after the g-update; only rows can be off.
        r.marginal_error = row_error();
        if (r.marginal_error < opt.tol) {
            r.converged = true;
            break;
        }
    }
    Array p = Array::zeros({n, n});
    double dist = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            p(i, j) = std::exp((f[i] + g[j] - c(i, j)) / eps);
            dist += p(i, j) * c(i, j);
        }
    r.distance = dist;
    r.coupling = std::move(p);
    return r;
}

inline double mean_cost(const Array& a, const Array& b) {
    const Array c = cost_matrix(a, b);
    double s = 0.0;
    for (double v : c.data()) s += v;
    return s / static_cast<double>(c.size());
}

// Resamples the larger set with replacement down to the size of the smaller
// one. Equal-sized inputs come back unchanged.
inline std::pair<Array, Array> resample_to_equal(const Array& a, const Array& b, std::uint64_t seed) {
    const std::size_t na = a.shape()[0], nb = b.shape()[0];
    if (na == nb) return {a, b};
    auto shrink = [&](const Array& big, std::size_t m) {
        Rng rng(seed);
        const std::size_t d = big.shape()[1], n = big.shape()[0];
        Array out = Array::zeros({m, d});
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t src = rng.below(n);
            for (std::size_t j = 0; j < d; ++j) out(i, j) = big(src, j);
        }
        return out;
    };
    if (na > nb) return {shrink(a, nb), b};
    return {a, shrink(b, na)};
}

enum class DeltaEstimator { Exact, Sinkhorn };

struct DeltaReport {
    std::vector<double> per_step;                  // max over classes, one per (t, t+1)
    std::vector<std::vector<double>> per_class;    // [step][class]
    double max_delta = 0.0;
};

// Empirical class-conditional W1 drift between consecutive domains. With the
// exact estimator, one-dimensional features use the sorted coupling (exact
// and O(n log n)); higher dimensions use the assignment solver.
inline DeltaReport class_conditional_delta(const DomainSequence& seq, DeltaEstimator est = DeltaEstimator::Exact,
                                           std::uint64_t seed = 0, SinkhornOptions sk = {}) {
    seq.validate();
    if (seq.T() < 2) throw std::invalid_argument("class_conditional_delta: need at least two domains");
    DeltaReport rep;
    for (std::size_t t = 0; t + 1 < seq.T(); ++t) {
        std::vector<double> row;
        for (std::size_t y = 0; y < seq.k(); ++y) {
            Array a = seq.domains[t].class_rows(y);
            Array b = seq.domains[t + 1].class_rows(y);
            if (a.shape()[0] == 0 || b.shape()[0] == 0)
                throw std::invalid_argument("class_conditional_delta: no samples for (t=" +
                                            std::to_string(a.shape()[0] == 0 ? t : t + 1) + ", y=" + std::to_string(y) +
                                            ")");
            auto [ra, rb] = resample_to_equal(a, b, derive_seed(seed, {t, y}));
            double w = 0.0;
            if (est == DeltaEstimator::Sinkhorn)
                w = sinkhorn(ra, rb, sk).distance;
            else if (seq.d() == 1)
                w = w1_sorted_1d(ra.values(), rb.values()).distance;
            else
                w = w1_exact(ra, rb).distance;
            row.push_back(w);
        }
        rep.per_step.push_back(*std::max_element(row.begin(), row.end()));
        rep.per_class.push_back(std::move(row));
    }
    rep.max_delta = *std::max_element(rep.per_step.begin(), rep.per_step.end());
    return rep;
}

}  // namespace gradshift

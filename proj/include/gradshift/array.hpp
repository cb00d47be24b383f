#pragma once

// Dense row-major float64 arrays of rank 0..2 and the numeric kernels the
// tape evaluates. Kernels are plain functions of their inputs so that the
// tape can replay them and the reverse sweep can reuse them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gradshift {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Array {
public:
    Array() : shape_{}, data_(1, 0.0) {}
    Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_.size() > 2) throw ShapeError("array rank " + std::to_string(shape_.size()) + " exceeds 2");
        if (shape_size(shape_) != data_.size())
            throw ShapeError("array shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
    }

    static Array scalar(double v) { return Array({}, {v}); }
    static Array full(Shape shape, double v) {
        auto n = shape_size(shape);
        return Array(std::move(shape), std::vector<double>(n, v));
    }
    static Array zeros(Shape shape) { return full(std::move(shape), 0.0); }
    static Array vector(std::vector<double> v) {
        auto n = v.size();
        return Array({n}, std::move(v));
    }
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Array({rows, cols}, std::move(v));
    }
    static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Array({rows.size(), cols}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Array reshaped(Shape s) const { return Array(std::move(s), data_); }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline void require_finite(const Array& a, const std::string& what) {
    if (!a.all_finite()) throw std::domain_error(what + ": non-finite value in array of shape " + shape_str(a.shape()));
}

namespace kernels {

namespace detail {
inline void same_shape(const char* op, const Array& a, const Array& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string("op '") + op + "': incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

template <class F>
Array map(const Array& a, F f) {
    std::vector<double> out(a.size());
    auto d = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
    return Array(a.shape(), std::move(out));
}

template <class F>
Array zip(const char* op, const Array& a, const Array& b, F f) {
    same_shape(op, a, b);
    std::vector<double> out(a.size());
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
    return Array(a.shape(), std::move(out));
}

// Right-aligned dims padded to rank 2.
inline std::pair<std::size_t, std::size_t> as2(const Shape& s) {
    if (s.empty()) return {1, 1};
    if (s.size() == 1) return {1, s[0]};
    return {s[0], s[1]};
}
}  // namespace detail

inline Array add(const Array& a, const Array& b) { return detail::zip("add", a, b, std::plus<>{}); }
inline Array sub(const Array& a, const Array& b) { return detail::zip("sub", a, b, std::minus<>{}); }
inline Array mul(const Array& a, const Array& b) { return detail::zip("mul", a, b, std::multiplies<>{}); }
inline Array div(const Array& a, const Array& b) { return detail::zip("div", a, b, std::divides<>{}); }

inline Array relu(const Array& a) {
    return detail::map(a, [](double v) { return v > 0.0 ? v : 0.0; });
}
inline Array tanh(const Array& a) {
    return detail::map(a, [](double v) { return std::tanh(v); });
}
inline Array sigmoid(const Array& a) {
    return detail::map(a, [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
    });
}
inline Array exp(const Array& a) {
    return detail::map(a, [](double v) { return std::exp(v); });
}
inline Array log(const Array& a) {
    return detail::map(a, [](double v) { return std::log(v); });
}
inline Array square(const Array& a) {
    return detail::map(a, [](double v) { return v * v; });
}
inline Array sqrt(const Array& a) {
    return detail::map(a, [](double v) { return std::sqrt(v); });
}
inline Array affine(const Array& a, double scale, double shift) {
    return detail::map(a, [=](double v) { return scale * v + shift; });
}
inline Array clamp_max(const Array& a, double hi) {
    return detail::map(a, [=](double v) { return v < hi ? v : hi; });
}

inline Array matmul(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("op 'matmul': incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    std::vector<double> out(n * m, 0.0);
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = da[i * k + p];
            const double* brow = db.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
    return Array({n, m}, std::move(out));
}

inline Array transpose(const Array& a) {
    if (a.rank() != 2) throw ShapeError("op 'transpose': expected rank 2, got " + shape_str(a.shape()));
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a(i, j);
    return Array({m, n}, std::move(out));
}

// axis < 0 reduces everything to a scalar; otherwise the reduced axis is
// kept with extent 1 so that broadcast() inverts it.
inline Array sum(const Array& a, int axis = -1) {
    if (axis < 0) {
        double s = 0.0;
        for (double v : a.data()) s += v;
        return Array::scalar(s);
    }
    if (a.rank() != 2 || axis > 1)
        throw ShapeError("op 'sum': axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (axis == 0) {
        std::vector<double> out(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out[j] += a(i, j);
        return Array({1, m}, std::move(out));
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i] += a(i, j);
    return Array({n, 1}, std::move(out));
}

inline std::size_t reduced_count(const Shape& s, int axis) {
    return axis < 0 ? shape_size(s) : s.at(static_cast<std::size_t>(axis));
}

inline Array mean(const Array& a, int axis = -1) {
    const std::size_t count = reduced_count(a.shape(), axis);
    if (count == 0) throw ShapeError("op 'mean': empty reduction over shape " + shape_str(a.shape()));
    return affine(sum(a, axis), 1.0 / static_cast<double>(count), 0.0);
}

inline bool broadcastable(const Shape& from, const Shape& to) {
    if (from.size() > to.size()) return false;
    const std::size_t off = to.size() - from.size();
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from[i] != 1 && from[i] != to[off + i]) return false;
    return true;
}

inline Array broadcast(const Array& a, const Shape& to) {
    if (to.size() > 2 || !broadcastable(a.shape(), to))
        throw ShapeError("op 'broadcast': cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(to));
    auto [ar, ac] = detail::as2(a.shape());
    auto [tr, tc] = detail::as2(to);
    std::vector<double> out(tr * tc);
    auto d = a.data();
    for (std::size_t i = 0; i < tr; ++i)
        for (std::size_t j = 0; j < tc; ++j) out[i * tc + j] = d[(ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j)];
    return Array(to, std::move(out));
}

// Adjoint of broadcast: sums the broadcast dimensions back down to `to`.
inline Array reduce_to(const Array& a, const Shape& to) {
    if (!broadcastable(to, a.shape()))
        throw ShapeError("op 'reduce_to': cannot reduce " + shape_str(a.shape()) + " to " + shape_str(to));
    auto [ar, ac] = detail::as2(a.shape());
    auto [tr, tc] = detail::as2(to);
    std::vector<double> out(tr * tc, 0.0);
    auto d = a.data();
    for (std::size_t i = 0; i < ar; ++i)
        for (std::size_t j = 0; j < ac; ++j) out[(tr == 1 ? 0 : i) * tc + (tc == 1 ? 0 : j)] += d[i * ac + j];
    return Array(to, std::move(out));
}

inline Array concat(const Array& a, const Array& b, int axis) {
    if (a.rank() != 2 || b.rank() != 2 || axis < 0 || axis > 1 ||
        a.shape()[1 - axis] != b.shape()[1 - axis])
        throw ShapeError("op 'concat': incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " along axis " + std::to_string(axis));
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (axis == 0) {
        std::vector<double> out(a.values());
        out.insert(out.end(), b.values().begin(), b.values().end());
        return Array({n + b.shape()[0], m}, std::move(out));
    }
    const std::size_t mb = b.shape()[1];
    std::vector<double> out(n * (m + mb));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + i * m, m, out.begin() + i * (m + mb));
        std::copy_n(b.data().begin() + i * mb, mb, out.begin() + i * (m + mb) + m);
    }
    return Array({n, m + mb}, std::move(out));
}

inline Array slice(const Array& a, int axis, std::size_t begin, std::size_t end) {
    if (a.rank() != 2 || axis < 0 || axis > 1 || begin > end || end > a.shape()[axis])
        throw ShapeError("op 'slice': range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid on axis " + std::to_string(axis) + " of shape " + shape_str(a.shape()));
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    if (axis == 0) {
        std::vector<double> out(a.data().begin() + begin * m, a.data().begin() + end * m);
        return Array({end - begin, m}, std::move(out));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(n * w);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(a.data().begin() + i * m + begin, w, out.begin() + i * w);
    return Array({n, w}, std::move(out));
}

// Adjoint of slice: embeds `a` at offset `begin` of a zero array whose extent
// along `axis` is `full`.
inline Array pad(const Array& a, int axis, std::size_t begin, std::size_t full) {
    if (a.rank() != 2 || axis < 0 || axis > 1 || begin + a.shape()[axis] > full)
        throw ShapeError("op 'pad': invalid padding of " + shape_str(a.shape()));
    Shape s = a.shape();
    s[axis] = full;
    Array out = Array::zeros(s);
    for (std::size_t i = 0; i < a.shape()[0]; ++i)
        for (std::size_t j = 0; j < a.shape()[1]; ++j) {
            std::size_t r = axis == 0 ? i + begin : i;
            std::size_t c = axis == 1 ? j + begin : j;
            out(r, c) = a(i, j);
        }
    return out;
}

// Row-wise log-softmax, stabilized by the row maximum.
inline Array log_softmax(const Array& a) {
    if (a.rank() != 2) throw ShapeError("op 'log_softmax': expected rank 2, got " + shape_str(a.shape()));
    Array out = a;
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, a(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += std::exp(a(i, j) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < m; ++j) out(i, j) = a(i, j) - lse;
    }
    return out;
}

}  // namespace kernels
}  // namespace gradshift

#pragma once

// Counter-based 64-bit generator. Every draw is splitmix64 applied to
// (seed + counter * golden gamma), so a stream is a pure function of its seed
// and position. The mixing constants and the Box-Muller transform are frozen:
// changing either changes every generated dataset and initialization.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "gradshift/array.hpp"

namespace gradshift {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from a parent seed and a list of tags
// (domain index, epoch, batch, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = mix64(seed ^ 0x6a09e667f3bcc909ULL);
    for (auto t : tags) s = mix64(s ^ mix64(t + 0x9e3779b97f4a7c15ULL));
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() { return mix64(seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

    // Uniform on [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Uniform integer in [0, n) by rejection, unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do x = next_u64();
        while (x >= limit);
        return x % n;
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1;
        do u1 = uniform();
        while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return mu + sigma * r * std::cos(th);
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
        return p;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct Uniform {
    double a = 0.0;
    double b = 1.0;
};
struct Normal {
    double mu = 0.0;
    double sigma = 1.0;
};

inline Array rng_fill(std::uint64_t seed, const Shape& shape, Uniform d) {
    if (!(d.a <= d.b)) throw std::invalid_argument("rng_fill: uniform requires a <= b");
    Rng rng(seed);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(d.a, d.b);
    return Array(shape, std::move(v));
}

inline Array rng_fill(std::uint64_t seed, const Shape& shape, Normal d) {
    if (!(d.sigma >= 0.0)) throw std::invalid_argument("rng_fill: normal requires sigma >= 0");
    Rng rng(seed);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = d.sigma == 0.0 ? d.mu : rng.normal(d.mu, d.sigma);
    return Array(shape, std::move(v));
}

}  // namespace gradshift

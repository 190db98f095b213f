#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sparsevd/tensor.hpp"

namespace sparsevd {

// Counter-based deterministic generator (SplitMix64 core). Identical seed and
// call sequence give an identical sample stream, independent of platform RNG
// library details.
struct Rng {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit Rng(std::uint64_t s = 0) : seed(s) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform on (0,1), never exactly 0 or 1.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via the Acklam inverse-CDF approximation (|rel err| ~ 1e-9).
    double normal() { return normal_icdf(uniform()); }

    static double normal_icdf(double p) {
        static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
        static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
        static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
        static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
        const double plow = 0.02425;
        if (p < plow) {
            double q = std::sqrt(-2.0 * std::log(p));
            return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        if (p > 1.0 - plow) {
            double q = std::sqrt(-2.0 * std::log(1.0 - p));
            return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        double q = p - 0.5, r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    void fill_normal(Tensor& t) {
        for (double& x : t.v) x = normal();
    }

    Tensor normal_tensor(Shape s) {
        if (s.empty()) throw std::invalid_argument("normal_tensor: shape must be nonempty");
        Tensor t(std::move(s));
        fill_normal(t);
        return t;
    }
};

// i.i.d. standard normal draws with the given shape; advances rng state.
inline Tensor sample_standard_normal(Rng& rng, Shape shape) {
    return rng.normal_tensor(std::move(shape));
}

}  // namespace sparsevd

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace spurgen {

/// Seeded random stream with a fixed, documented draw algorithm.
///
/// The engine is std::mt19937_64. Distributions are implemented here rather
/// than through <random>'s distribution objects, whose algorithms are
/// implementation-defined, so that a scripted oracle can replay a stream
/// bit-for-bit on any standard library:
///   - uniform01():  (u64 >> 11) * 2^-53, in [0, 1)
///   - uniform_int(lo, hi): lo + (u64 % span), rejecting the biased tail
///   - normal(): Box-Muller on two uniform01() draws, both outputs used in
///     order (the second is cached for the next call)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Inclusive range [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace spurgen

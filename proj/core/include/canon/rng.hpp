#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace canon {

/// Deterministic random source. std::mt19937_64 has a fully specified
/// sequence; the distribution transforms below are written out explicitly so
/// that identical seeds give identical streams on every platform and build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, bias-free.
    std::uint64_t uniform_index(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller; the spare value is cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    /// Child generator for per-sample streams (seed = base ^ mix(index)).
    Rng fork(std::uint64_t index) const {
        std::uint64_t z = seed_mix_ + 0x9e3779b97f4a7c15ULL * (index + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    /// Remember the seed so fork() is a pure function of (seed, index).
    static Rng seeded(std::uint64_t seed) {
        Rng r(seed);
        r.seed_mix_ = seed;
        return r;
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_mix_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace canon

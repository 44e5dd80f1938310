#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace entmap {

// Seeded generator used for every source of randomness in the project.
// Gaussians come from an explicit Box-Muller transform so the byte stream
// depends only on mt19937_64, not on library-specific distributions.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return (engine_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        return engine_() % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // uniform in [lo, hi)
    double uniform_range(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace entmap

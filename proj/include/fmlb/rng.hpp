#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fmlb {

// Deterministic RNG. std::mt19937_64 output is fully specified by the
// standard; the uniform/normal mappings are written out here so streams are
// reproducible across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586 * u2);
    }

    // [0, n)
    uint64_t integer(uint64_t n) {
        return gen_() % n;
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace fmlb

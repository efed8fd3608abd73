#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace dgseg {

// Deterministic random stream. mt19937_64 supplies bits; the uniform/normal/
// bernoulli mappings are implemented here rather than with std distributions,
// whose output sequences are implementation-defined. Same seed, same sequence,
// on every standard library.
class Rng {
public:
    Rng() : engine_(0) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform double in [0, 1), 53 mantissa bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without the cached spare, so the engine state is the whole
    // RNG state. Fixed consumption: two draws per normal.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n). n must be >= 1.
    std::uint64_t index(std::uint64_t n) {
        // Rejection-free modulo is biased for huge n; desk-scale n is tiny,
        // so scale a 53-bit uniform instead.
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // mt19937_64 streams its state as whitespace-separated integers; that is
    // exact and portable, so it is the checkpoint representation.
    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& state) {
        std::istringstream is(state);
        is >> engine_;
    }

    // Deterministically derive a child stream (per-sample, per-component).
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
        std::mt19937_64 eng(0);
        eng.seed(seq);
        Rng r;
        r.engine_ = eng;
        return r;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace dgseg

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace petah {

// Deterministic RNG used throughout. Floating-point draws are derived from raw
// mt19937 words with fixed arithmetic, so streams are bit-identical across
// standard library implementations and across processes.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(mix(seed)) {}

    std::uint64_t seed() const { return seed_; }

    std::uint32_t next_u32() { return gen_(); }

    // Uniform in [0, 1) with 24 bits of resolution.
    float uniform() { return static_cast<float>(gen_() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform_double() {
        const std::uint64_t hi = gen_() >> 5, lo = gen_() >> 6;
        return (static_cast<double>(hi) * 67108864.0 + static_cast<double>(lo)) * (1.0 / 9007199254740992.0);
    }

    // Box-Muller; the spare draw is cached.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        float u1 = uniform(), u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float radius = std::sqrt(-2.0f * std::log(u1));
        const float angle = 6.28318530717958647692f * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) { return n <= 1 ? 0 : static_cast<int>(gen_() % static_cast<std::uint32_t>(n)); }

    int uniform_int(int lo, int hi_inclusive) { return lo + uniform_int(hi_inclusive - lo + 1); }

    bool bernoulli(float p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    // Independent child stream; derivation depends only on the parent seed.
    Rng derive(std::uint64_t stream) const { return Rng(mix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)))); }

private:
    static std::uint64_t mix64(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint32_t mix(std::uint64_t seed) { return static_cast<std::uint32_t>(mix64(seed) & 0xffffffffULL); }

    std::uint64_t seed_;
    std::mt19937 gen_;
    bool have_spare_ = false;
    float spare_ = 0.0f;
};

}  // namespace petah

#pragma once

#include <cstdint>
#include <string_view>

namespace moediff {

// Counter-style generator (splitmix64). The stream is a pure integer
// function of (seed, draw index), so identical seeds produce identical
// draws on every platform. Not cryptographic.
class Rng {
  public:
    static constexpr std::string_view algorithm = "splitmix64";

    explicit Rng(uint64_t seed) : state_(seed), seed_value_(seed) {}

    uint64_t seed() const { return seed_value_; }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return finalize(state_);
    }

    // Uniform in [0, 1), 53-bit mantissa. Exact arithmetic, platform-stable.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double next_range(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n) via multiply-shift; no rejection, so one
    // draw is consumed per call regardless of n.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    static uint64_t finalize(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
    uint64_t seed_value_;
};

// Stateless mix of up to four words; used wherever a value must be a pure
// function of its coordinates (planted schedules, synthetic KV).
inline uint64_t mix64(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t h = Rng::finalize(a + 0x9E3779B97F4A7C15ULL);
    h = Rng::finalize(h ^ (b + 0xD1B54A32D192ED03ULL));
    h = Rng::finalize(h ^ (c + 0x8CB92BA72F3D8DD7ULL));
    h = Rng::finalize(h ^ (d + 0xEB44ACCAB455D165ULL));
    return h;
}

// Unit-interval value derived from mix64; pure and platform-stable.
inline double mix_unit(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    return static_cast<double>(mix64(a, b, c, d) >> 11) * 0x1.0p-53;
}

}  // namespace moediff

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace relmem {

// Deterministic PRNG with explicitly coded distributions so that results
// depend only on (seed, call sequence), never on the standard library's
// distribution implementations.
//
// One experiment seed derives independent named streams (see derive_stream):
// "data", "train", "eval", "sampler", ... each with its own state, so e.g.
// changing the number of test-time samples never perturbs training draws.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // splitmix64 warmup decorrelates nearby seeds
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1), safe for log().
    double uniform_open() {
        double u = uniform();
        return u > 0.0 ? u : 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), unbiased via rejection.
    uint64_t uniform_int(uint64_t n) {
        uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (explicitly coded, stateful pair cache).
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (size_t i = xs.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(xs[i - 1], xs[j]);
        }
    }

  private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Named-stream splitting rule: stream seed = fnv1a64(name) XOR experiment seed,
// then the Rng constructor's warmup mixes it. Documented in the README.
inline uint64_t derive_seed(uint64_t seed, std::string_view name) {
    return seed ^ fnv1a64(name);
}

inline Rng derive_stream(uint64_t seed, std::string_view name) {
    return Rng(derive_seed(seed, name));
}

}  // namespace relmem

#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "dcac/error.hpp"

namespace dcac {

// Deterministic RNG used everywhere randomness is needed. Wraps mt19937_64
// but draws uniforms through fixed arithmetic instead of std distributions,
// whose output is implementation-defined. State round-trips through a string
// so checkpoints can carry it.
class Rng {
  public:
    Rng() : engine_(0) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n == 0) raise(ErrorCode::UsageError, "uniform_below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform double in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) raise(ErrorCode::DataError, "Rng: malformed engine state");
    }

  private:
    std::mt19937_64 engine_;
};

// Stateless mixing used to derive independent sub-seeds from (seed, tags).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(seed ^ 0xd6e8feb86659fd93ULL);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    return s;
}

}  // namespace dcac

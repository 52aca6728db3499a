#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace zsad {

// Deterministic PRNG: splitmix64 state transition. Self-contained so that
// streams are reproducible across compilers and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool coin(double p = 0.5) { return uniform() < p; }

    // standard normal via Box-Muller, one value per call (no cached spare,
    // keeps the stream position a pure function of call count)
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Stable 64-bit mix of a seed with arbitrary tags; used to derive per-sample
// streams as hash(global_seed, class_id, index) so parallel and serial
// generation agree.
uint64_t mix_seed(uint64_t seed, const std::string& tag, uint64_t index = 0);
uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0);

}  // namespace zsad

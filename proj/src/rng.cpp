#include "zsad/rng.hpp"

#include <cmath>

namespace zsad {

double Rng::normal() {
    // Box-Muller; u1 kept away from 0 so log is finite
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

namespace {
uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
}  // namespace

uint64_t mix_seed(uint64_t seed, const std::string& tag, uint64_t index) {
    uint64_t h = fnv1a(&seed, sizeof(seed), 0xcbf29ce484222325ull);
    h = fnv1a(tag.data(), tag.size(), h);
    h = fnv1a(&index, sizeof(index), h);
    // final avalanche so consecutive indices do not collide into runs
    Rng r(h);
    return r.next_u64();
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = fnv1a(&seed, sizeof(seed), 0xcbf29ce484222325ull);
    h = fnv1a(&a, sizeof(a), h);
    h = fnv1a(&b, sizeof(b), h);
    Rng r(h);
    return r.next_u64();
}

}  // namespace zsad

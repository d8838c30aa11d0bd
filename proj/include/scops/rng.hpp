#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace scops {

/// 64-bit Mersenne twister with distribution code written out by hand, so that
/// sampled values do not depend on the standard library's distribution
/// implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Independent stream for (seed, stream, index); used to give every
    /// training iteration its own generator so resume needs no RNG state.
    static Rng derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
        std::uint64_t s = splitmix(seed ^ splitmix(stream + 0x632be59bd9b4e019ULL));
        s = splitmix(s ^ splitmix(index + 0x8cb92ba72f3d8dd7ULL));
        return Rng(s);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
};

} // namespace scops

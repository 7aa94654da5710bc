#pragma once

// Deterministic random number utilities. All randomness in the project flows
// through Rng so that a run is fully reproducible from its seed. Distribution
// transforms are hand-rolled because the std ones are implementation-defined.

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace citemtl {

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derive a stream seed from a base seed and one or more tags, e.g.
// derive_seed(run_seed, 2, epoch) for the epoch-2 shuffle stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    return splitmix64(base ^ splitmix64(tag ^ 0xa0761d6478bd642fULL));
}
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag1, std::uint64_t tag2) {
    return derive_seed(derive_seed(base, tag1), tag2);
}
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t t1, std::uint64_t t2,
                                 std::uint64_t t3) {
    return derive_seed(derive_seed(base, t1, t2), t3);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); rejection sampling, no modulo bias.
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the second variate is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Normal(0, stddev) truncated to [-4*stddev, 4*stddev] by resampling.
    double next_trunc_normal(double stddev) {
        double z;
        do {
            z = next_normal();
        } while (z < -4.0 || z > 4.0);
        return z * stddev;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates shuffle on top of Rng::next_below; std::shuffle is
// implementation-defined and would break run reproducibility guarantees.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace citemtl

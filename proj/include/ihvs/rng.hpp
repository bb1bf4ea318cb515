#pragma once

#include <cmath>
#include <cstdint>

namespace ihvs {

/// Counter-free splitmix64 stream. Chosen over <random> engines because the
/// standard distributions are not bit-reproducible across library
/// implementations, and every artifact here (datasets, checkpoints, reports)
/// must be byte-stable for a given seed.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Box-Muller with a cached spare; avoids std::normal_distribution for
    /// cross-platform byte stability.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform01();  // (0, 1]
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Documented stream-split function: sub-stream `stream_id` of `seed` is
    /// seeded with two finalizer rounds over the pair. Episode i of a dataset
    /// collected with seed S uses derive(S, i); training uses the purpose ids
    /// in train.hpp. This is the whole derivation contract.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream_id + 1);
        z = finalize(z);
        z = finalize(z + stream_id);
        return z;
    }

private:
    static std::uint64_t finalize(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace ihvs

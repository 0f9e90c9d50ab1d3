#pragma once

#include <cstdint>
#include <random>

namespace patchforge {

// Deterministic RNG used everywhere. std::mt19937_64 has a fully specified
// output sequence; the distribution helpers below avoid the standard
// distributions, whose outputs vary between library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed), seed_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive on both ends
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    // derive an independent stream, e.g. one per scene or per restart
    Rng fork(std::uint64_t index) const {
        std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (index + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

private:
    std::mt19937_64 eng_;
    std::uint64_t seed_;
};

}  // namespace patchforge

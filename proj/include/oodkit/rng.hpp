#pragma once

#include <cstdint>
#include <vector>

namespace oodkit {

// SplitMix64 (Steele, Lea & Flood). Every seeded draw in the library goes
// through this generator so that results are reproducible across builds and
// across implementations of the same format:
//
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
//
// uniform() = (next() >> 11) * 2^-53, in [0, 1).
// normal() is Box-Muller on two uniforms: sqrt(-2 ln(1-u1)) * cos(2 pi u2);
// the sine half is discarded so every normal consumes exactly two draws.
// split(k) seeds an independent child stream with mix(seed_of_parent ^ k*golden).
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next() noexcept;
    double uniform() noexcept;
    double normal() noexcept;

    // Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) noexcept;

    SplitMix64 split(std::uint64_t key) const noexcept;

    static std::uint64_t mix(std::uint64_t z) noexcept;

private:
    std::uint64_t state_;
};

// Seeded subsample of `take` distinct indices out of [0, n), returned in
// ascending order (partial Fisher-Yates).
std::vector<std::size_t> seeded_subsample(std::size_t n, std::size_t take, std::uint64_t seed);

}  // namespace oodkit

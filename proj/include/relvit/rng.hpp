#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace relvit {

/// Seeded random source used everywhere randomness enters the lab.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard) and
/// provides its own distribution helpers, because the std distributions are
/// implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t uniform_index(std::uint64_t n);

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal();

    /// Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by resampling.
    double truncated_normal(double stddev);

    /// Engine state as text (std::mt19937_64 stream format).
    std::string state() const;
    void set_state(const std::string& state);

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Per-sample seed: hash(global_seed, sample_id, epoch).
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t sample_id, std::uint64_t epoch);

} // namespace relvit

#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace microexp {

/// Seeded generator with hand-rolled distributions. std::uniform_*_distribution
/// output differs between standard libraries; these do not, so a seed means
/// the same thing on every toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 24 bits of resolution.
    float uniform() { return static_cast<float>(engine_() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n);

    bool bernoulli(float p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer; derives independent child seeds (per fold, per job).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace microexp

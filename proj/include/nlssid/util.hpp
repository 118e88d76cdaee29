#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace nlssid {

/// Thrown when a model recursion leaves the numerically representable
/// regime. Carries the first offending time step so callers (and the
/// Levenberg-Marquardt loop) can report or reject precisely.
class SimulationDiverged : public std::runtime_error {
public:
    SimulationDiverged(std::size_t step, double magnitude)
        : std::runtime_error("simulation diverged at step " + std::to_string(step) +
                             " (|x| = " + std::to_string(magnitude) + ")"),
          step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

// State magnitude above which a recursion counts as diverged. Finite on
// purpose: the optimizer needs a rejectable signal, not NaN propagation.
inline constexpr double kDivergenceGuard = 1e8;

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

/// Derive an independent stream seed from a base seed (splitmix64 step).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace nlssid

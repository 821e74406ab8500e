#pragma once

#include "lyapreg/grid_model.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace lyapreg {

/// Independent, reproducible stream for (seed, stream id).
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// Stream ids keep training, selection and held-out draws disjoint.
namespace streams {
inline constexpr std::uint64_t init_weights = 1;
inline constexpr std::uint64_t lyapunov_batches = 2;
inline constexpr std::uint64_t controller_batches = 3;
inline constexpr std::uint64_t selection = 4;
inline constexpr std::uint64_t held_out = 5;
inline constexpr std::uint64_t droop_fit = 6;
inline constexpr std::uint64_t fresh_check = 7;
} // namespace streams

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

/// δ = δ* + U(delta_box), ω = U(omega_box) per coordinate. Box bounds are in
/// rad and rad/s; callers convert file-unit ω boxes with omega_scale().
inline SystemState sample_state(std::mt19937_64& rng, const SystemState& center, Interval delta_box,
                                Interval omega_box) {
    std::uniform_real_distribution<double> ud(delta_box.lo, delta_box.hi);
    std::uniform_real_distribution<double> uw(omega_box.lo, omega_box.hi);
    SystemState s = center;
    for (double& d : s.delta) {
        d += ud(rng);
    }
    for (double& w : s.omega) {
        w += uw(rng);
    }
    return s;
}

inline std::vector<SystemState> sample_states(std::mt19937_64& rng, std::size_t count, const SystemState& center,
                                              Interval delta_box, Interval omega_box) {
    std::vector<SystemState> out;
    out.reserve(count);
    for (std::size_t h = 0; h < count; ++h) {
        out.push_back(sample_state(rng, center, delta_box, omega_box));
    }
    return out;
}

} // namespace lyapreg

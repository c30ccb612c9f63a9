#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pte/numerics/matrix.hpp"

namespace pte {

struct ClipResult {
    double norm = 0.0;    // global L2 norm before clipping
    double factor = 1.0;  // multiplier applied to every gradient
};

/// Rescales all gradients jointly so their global L2 norm is at most max_norm.
ClipResult clip_global_norm(std::span<Matrix> grads, double max_norm);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
    std::uint64_t step = 0;

    /// Zeroed moments shaped like params.
    static AdamState like(std::span<const Matrix> params);

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update applied in place.
void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state, const AdamConfig& config);

}  // namespace pte

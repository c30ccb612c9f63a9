#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "pte/numerics/matrix.hpp"

namespace pte {

using Rng = std::mt19937_64;

/// Independent substream seed for (base, name, index). All run randomness
/// flows from one seed through these named streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
double uniform01(Rng& rng);

/// Standard normal via Box-Muller on uniform01 draws (portable across stdlibs).
double standard_normal(Rng& rng);

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
Matrix random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng);

}  // namespace pte

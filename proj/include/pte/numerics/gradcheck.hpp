#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace pte {

struct FiniteDifferenceResult {
    std::vector<double> gradient;
    /// Coordinates where f(x +/- h e_i) was not finite; their gradient entry is NaN.
    std::vector<std::size_t> failed;

    bool ok() const noexcept { return failed.empty(); }
};

/// three_point: (f(x+h) - f(x-h)) / 2h, error O(h^2).
/// five_point: (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, error O(h^4).
enum class FiniteDifferenceStencil { three_point, five_point };

/// Central-difference gradient for every coordinate.
FiniteDifferenceResult finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                                  std::span<const double> x, double h,
                                                  FiniteDifferenceStencil stencil = FiniteDifferenceStencil::three_point);

/// |a - n| / max(|a|, |n|, floor), the worst over all coordinates.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-8);

}  // namespace pte

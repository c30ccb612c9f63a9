#include "pte/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pte/errors.hpp"

namespace pte {

FiniteDifferenceResult finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                                  std::span<const double> x, double h, FiniteDifferenceStencil stencil) {
    if (!(h > 0.0)) {
        throw ContractError("finite_difference_gradient: step must be positive");
    }
    FiniteDifferenceResult result;
    result.gradient.resize(x.size());
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto at = [&](double offset) {
            probe[i] = x[i] + offset;
            const double v = f(probe);
            probe[i] = x[i];
            return v;
        };
        const double up = at(h);
        const double down = at(-h);
        double up2 = 0.0, down2 = 0.0;
        if (stencil == FiniteDifferenceStencil::five_point) {
            up2 = at(2.0 * h);
            down2 = at(-2.0 * h);
        }
        if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(up2) || !std::isfinite(down2)) {
            result.gradient[i] = std::numeric_limits<double>::quiet_NaN();
            result.failed.push_back(i);
            continue;
        }
        result.gradient[i] = stencil == FiniteDifferenceStencil::three_point
                                 ? (up - down) / (2.0 * h)
                                 : (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
    }
    return result;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
    if (analytic.size() != numeric.size()) {
        throw ContractError("max_relative_error: length mismatch");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i];
        const double n = numeric[i];
        if (!std::isfinite(a) || !std::isfinite(n)) {
            return std::numeric_limits<double>::infinity();
        }
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

}  // namespace pte

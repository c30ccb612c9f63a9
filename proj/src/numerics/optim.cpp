#include "pte/numerics/optim.hpp"

#include <cmath>

#include "pte/errors.hpp"

namespace pte {

ClipResult clip_global_norm(std::span<Matrix> grads, double max_norm) {
    if (!(max_norm > 0.0)) {
        throw ContractError("clip_global_norm: max_norm must be positive");
    }
    double sq = 0.0;
    for (const Matrix& g : grads) {
        for (double x : g.data()) sq += x * x;
    }
    ClipResult result;
    result.norm = std::sqrt(sq);
    if (result.norm > max_norm) {
        result.factor = max_norm / result.norm;
        for (Matrix& g : grads) {
            for (double& x : g.data()) x *= result.factor;
        }
    }
    return result;
}

AdamState AdamState::like(std::span<const Matrix> params) {
    AdamState state;
    for (const Matrix& p : params) {
        state.first_moment.emplace_back(p.rows(), p.cols());
        state.second_moment.emplace_back(p.rows(), p.cols());
    }
    return state;
}

void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state, const AdamConfig& config) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
        params.size() != state.second_moment.size()) {
        throw ContractError("adam_step: parameter/gradient/state counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.first_moment[i]) ||
            !params[i].same_shape(state.second_moment[i])) {
            throw ContractError("adam_step: shape mismatch at parameter " + std::to_string(i));
        }
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = grads[i].data();
        auto m = state.first_moment[i].data();
        auto v = state.second_moment[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            const double m_hat = m[j] / c1;
            const double v_hat = v[j] / c2;
            p[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
        }
    }
}

}  // namespace pte

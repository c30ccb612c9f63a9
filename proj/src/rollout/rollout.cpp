#include "pte/rollout/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "pte/errors.hpp"
#include "pte/numerics/random.hpp"

namespace pte {

void SamplingConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("sampling.temperature must be > 0");
    if (max_new_tokens < 1) throw ConfigError("sampling.max_new_tokens must be >= 1");
    if (window < 1) throw ConfigError("sampling.window must be >= 1");
    if (!(eviction_ratio > 0.0 && eviction_ratio <= 1.0)) throw ConfigError("sampling.eviction_ratio must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const Trajectory& t) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : t.evictions) events.push_back({{"step", e.step}, {"positions", e.positions}});
    j = nlohmann::json{{"prompt", t.prompt},       {"generated", t.generated},   {"logprobs", t.logprobs},
                       {"evictions", events},       {"replay", t.replay},         {"terminated", t.terminated},
                       {"aborted", t.aborted},      {"diagnostic", t.diagnostic}, {"seed", t.seed},
                       {"temperature", t.temperature}};
}

void from_json(const nlohmann::json& j, Trajectory& t) {
    j.at("prompt").get_to(t.prompt);
    j.at("generated").get_to(t.generated);
    j.at("logprobs").get_to(t.logprobs);
    t.evictions.clear();
    for (const auto& e : j.at("evictions")) {
        t.evictions.push_back({e.at("step").get<std::size_t>(), e.at("positions").get<std::vector<std::size_t>>()});
    }
    j.at("replay").get_to(t.replay);
    j.at("terminated").get_to(t.terminated);
    j.at("aborted").get_to(t.aborted);
    j.at("diagnostic").get_to(t.diagnostic);
    j.at("seed").get_to(t.seed);
    j.at("temperature").get_to(t.temperature);
}

namespace {

struct Choice {
    int token;
    double logprob;
};

Choice choose(std::span<const double> logits, double temperature, bool greedy, Rng& rng) {
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& x : scaled) x /= temperature;
    const auto logp = log_softmax_row(scaled);
    std::size_t pick = 0;
    if (greedy) {
        pick = static_cast<std::size_t>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    } else {
        const double u = uniform01(rng);
        double cum = 0.0;
        pick = logp.size() - 1;
        for (std::size_t i = 0; i < logp.size(); ++i) {
            cum += std::exp(logp[i]);
            if (u < cum) {
                pick = i;
                break;
            }
        }
    }
    return {static_cast<int>(pick), logp[pick]};
}

}  // namespace

Trajectory rollout(const BoundModel& model, const BoundAdapterBank* bank, std::span<const int> prompt,
                   const SamplingConfig& config) {
    config.validate();
    if (prompt.empty()) throw ContractError("rollout: empty prompt");
    if (prompt.size() > config.window) {
        throw ConfigError("window " + std::to_string(config.window) + " is smaller than the prompt (" +
                          std::to_string(prompt.size()) + " tokens)");
    }
    ad::NoGradGuard no_grad;
    Trajectory traj;
    traj.prompt.assign(prompt.begin(), prompt.end());
    traj.seed = config.seed;
    traj.temperature = config.temperature;

    Rng rng(derive_seed(config.seed, "sample"));
    KVCache cache(model.config.n_layers, model.config.d_model, config.window, config.eviction_ratio);
    std::optional<PteSession> session;
    if (bank != nullptr) session.emplace(*bank, model);

    const Matrix prompt_logits = prefill(prompt, cache, model, nullptr);
    Matrix row(1, prompt_logits.cols());
    std::copy(prompt_logits.row(prompt_logits.rows() - 1).begin(), prompt_logits.row(prompt_logits.rows() - 1).end(),
              row.row(0).begin());

    for (std::size_t t = 0; t < config.max_new_tokens; ++t) {
        if (!row.all_finite()) {
            traj.aborted = true;
            traj.diagnostic = "non-finite logits at generated step " + std::to_string(t);
            break;
        }
        const Choice c = choose(row.row(0), config.temperature, config.greedy, rng);
        traj.generated.push_back(c.token);
        traj.logprobs.push_back(c.logprob);
        if (c.token == config.terminator) {
            traj.terminated = true;
            break;
        }
        if (t + 1 == config.max_new_tokens) break;
        if (cache.saturated()) {
            EvictedSegment segment = cache.evict();
            if (session) session->on_eviction(segment);
            traj.evictions.push_back({t + 1, segment.positions});
        }
        row = decode_step(c.token, TokenRole::thinking, cache, model, session ? session->overlay() : nullptr);
    }
    traj.replay = cache.snapshot_for_replay();
    return traj;
}

RecomputeResult recompute_logprobs(const Trajectory& trajectory, const BoundModel& model,
                                   const BoundAdapterBank* bank, const RecomputeOptions& options) {
    const ReplayDescriptor& d = trajectory.replay;
    const std::size_t P = trajectory.prompt.size();
    const std::size_t T = trajectory.generated.size();
    if (T == 0 || P == 0) throw ReplayError("trajectory has no prompt or no generated tokens");
    if (trajectory.logprobs.size() != T) throw ReplayError("log-prob count differs from generated token count");
    if (options.expected_window != 0 && d.capacity != options.expected_window) {
        throw ReplayError("descriptor window " + std::to_string(d.capacity) + " differs from expected window " +
                          std::to_string(options.expected_window));
    }
    if (d.capacity < P || d.question_entries != P || d.appended != P + T - 1) {
        throw ReplayError("replay descriptor does not match the trajectory's prompt/response lengths");
    }
    if (d.events.size() != trajectory.evictions.size()) {
        throw ReplayError("eviction log and replay descriptor disagree on the number of events");
    }
    if (options.pinned_segments != nullptr && options.pinned_segments->size() != d.events.size()) {
        throw ReplayError("pinned segment count differs from recorded events");
    }

    // Inputs fed to the model: the prompt, then every generated token except the last.
    std::vector<int> inputs(trajectory.prompt);
    inputs.insert(inputs.end(), trajectory.generated.begin(), trajectory.generated.end() - 1);

    KVCache cache(model.config.n_layers, model.config.d_model, d.capacity, d.eviction_ratio);
    std::optional<PteSession> session;
    if (bank != nullptr) session.emplace(*bank, model);

    RecomputeResult result;
    ad::Var rows(Matrix(0, model.config.vocab_size));
    {
        const std::vector<TokenRole> roles(P, TokenRole::question);
        ad::Var logits = ad::Var(Matrix());
        logits = forward(model, std::span(inputs).first(P), roles, cache, nullptr);
        const std::size_t last[1] = {P - 1};
        rows = ad::select_rows(logits, last);
    }
    std::size_t fed = P;
    std::size_t next_event = 0;
    while (fed < inputs.size()) {
        if (next_event < d.events.size() && d.events[next_event].appended_before == fed) {
            EvictedSegment seg = cache.evict_recorded(d.events[next_event]);
            if (session) {
                session->on_eviction(options.pinned_segments ? (*options.pinned_segments)[next_event] : seg);
            }
            result.segments.push_back(std::move(seg));
            ++next_event;
        }
        std::size_t stop = inputs.size();
        if (next_event < d.events.size()) stop = std::min(stop, d.events[next_event].appended_before);
        if (stop <= fed) throw ReplayError("eviction events are not in append order");
        const std::vector<TokenRole> roles(stop - fed, TokenRole::thinking);
        ad::Var logits = forward(model, std::span(inputs).subspan(fed, stop - fed), roles, cache,
                                 session ? session->overlay() : nullptr);
        rows = ad::concat_rows(rows, logits);
        fed = stop;
    }
    if (next_event != d.events.size()) throw ReplayError("recorded evictions left unreplayed");
    for (std::size_t k = 0; k < d.events.size(); ++k) {
        if (trajectory.evictions[k].step + P - 1 != d.events[k].appended_before ||
            trajectory.evictions[k].positions != d.events[k].positions) {
            throw ReplayError("eviction log entry " + std::to_string(k) + " disagrees with the replay descriptor");
        }
    }

    ad::Var scaled = ad::scale(rows, 1.0 / trajectory.temperature);
    result.logprobs = ad::pick(ad::log_softmax_rows(scaled), trajectory.generated);
    return result;
}

std::vector<double> full_cache_logprobs(const Trajectory& trajectory, const BoundModel& reference) {
    const std::size_t P = trajectory.prompt.size();
    const std::size_t T = trajectory.generated.size();
    if (T == 0) return {};
    ad::NoGradGuard no_grad;
    std::vector<int> inputs(trajectory.prompt);
    inputs.insert(inputs.end(), trajectory.generated.begin(), trajectory.generated.end() - 1);
    std::vector<TokenRole> roles(inputs.size(), TokenRole::thinking);
    std::fill(roles.begin(), roles.begin() + static_cast<std::ptrdiff_t>(P), TokenRole::question);
    KVCache cache(reference.config.n_layers, reference.config.d_model, inputs.size(), 1.0);
    const Matrix logits = forward(reference, inputs, roles, cache, nullptr).value();
    std::vector<double> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> row(logits.row(P - 1 + t).begin(), logits.row(P - 1 + t).end());
        for (double& x : row) x /= trajectory.temperature;
        out[t] = log_softmax_row(row)[static_cast<std::size_t>(trajectory.generated[t])];
    }
    return out;
}

}  // namespace pte

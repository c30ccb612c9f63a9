#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/model/transformer.hpp"
#include "pte/numerics/optim.hpp"
#include "pte/rollout/rollout.hpp"
#include "pte/tasks/tasks.hpp"

namespace pte {

struct TrainConfig {
    std::size_t group_size = 8;  // n
    double kl_weight = 0.01;     // beta
    double reward_eps = 1e-8;
    double learning_rate = 1e-3;
    double max_grad_norm = 1.0;
    std::size_t batch_size = 16;  // prompts per step
    std::size_t iterations = 500;
    std::size_t checkpoint_every = 50;
    /// Stop when the running mean score has not improved by plateau_delta for
    /// this many iterations; 0 disables.
    std::size_t plateau_patience = 0;
    double plateau_delta = 0.0;
    /// Sliding-window-only ablation: A stays a constant zero.
    bool freeze_a = false;
    /// Also update the base model (the reference stays frozen).
    bool train_base = false;

    void validate() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// r_i = (s_i - mean) / sqrt(population variance + eps).
std::vector<double> normalize_rewards(std::span<const double> scores, double eps);

/// Per-token exp(d) - d - 1 with d = logp_ref - logp_policy. Throws
/// ContractError on misaligned or non-finite input.
std::vector<double> kl_penalty(std::span<const double> logp_policy, std::span<const double> logp_ref);

struct RolloutGroup {
    TaskInstance task;
    std::vector<Trajectory> members;
    std::vector<double> scores;   // raw s_i
    std::vector<double> rewards;  // normalized r_i
};

struct LossDiagnostics {
    double loss = 0.0;
    double mean_score = 0.0;
    double mean_kl = 0.0;  // per token
    std::size_t tokens = 0;
    std::size_t trajectories = 0;
    std::size_t skipped = 0;  // aborted or empty trajectories left out of the loss
};

struct GrpoLossOptions {
    /// Per member in (group, member) order: evicted segments to encode in place
    /// of the recomputed ones (see RecomputeOptions::pinned_segments).
    const std::vector<std::vector<EvictedSegment>>* pinned_segments = nullptr;
    /// Per member in (group, member) order: precomputed reference log-probs.
    const std::vector<std::vector<double>>* reference_logprobs = nullptr;
};

/// Evaluates -(1/sum tokens) sum [r_i logp(y_t) - beta kl_t] and accumulates
/// its gradient into every trainable leaf of model and bank. logp comes from
/// recompute_logprobs; r_i and the reference log-probs are constants.
/// Trajectories are processed one at a time in (group, member) order.
LossDiagnostics grpo_loss(std::span<const RolloutGroup> groups, const BoundModel& model, const BoundAdapterBank* bank,
                          const BoundModel& reference, const TrainConfig& config,
                          const GrpoLossOptions& options = {});

struct TrainState {
    ModelParams model;
    ModelParams reference;
    AdapterBank bank;
    AdamState adam;
    std::uint64_t iteration = 0;
    std::uint64_t seed = 0;

    /// Reference = copy of model; optimizer moments sized for the trainable set.
    static TrainState create(ModelParams model, AdapterBank bank, std::uint64_t seed, bool train_base);
    /// Trainable matrices in optimizer order: adapter bank, then (optionally) the base model.
    std::vector<Matrix*> trainable(bool train_base);
};

struct IterationMetrics {
    std::uint64_t iteration = 0;
    double loss = 0.0;
    double mean_score = 0.0;
    double mean_kl = 0.0;
    double grad_norm = 0.0;
    double clip_factor = 1.0;
    double mean_length = 0.0;
    double mean_evictions = 0.0;
    std::size_t tokens = 0;
    std::size_t aborted = 0;
    bool degenerate = false;  // every group had zero reward variance
};

nlohmann::json to_json(const IterationMetrics& m);

/// Rolls out group_size members per prompt under the cache-constrained
/// policy, scores, normalizes, takes one clipped Adam step on the trainable
/// set and advances state.iteration. Member seeds derive from (state.seed,
/// iteration, prompt, member).
IterationMetrics train_step(std::span<const TaskInstance> prompts, TrainState& state, const TrainConfig& config,
                            const SamplingConfig& sampling);

struct PretrainConfig {
    std::size_t iterations = 0;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    double max_grad_norm = 1.0;

    void validate() const;

    friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct PretrainMetrics {
    std::uint64_t iteration = 0;
    double loss = 0.0;  // mean per-token negative log-likelihood
    double grad_norm = 0.0;
    std::size_t tokens = 0;
};

nlohmann::json to_json(const PretrainMetrics& m);

/// One teacher-forced step on gold responses with a full cache.
PretrainMetrics pretrain_step(std::span<const TaskInstance> tasks, ModelParams& params, AdamState& adam,
                              const PretrainConfig& config);

struct EvalResult {
    double success_rate = 0.0;
    std::vector<Trajectory> trajectories;
};

/// Decodes every task once with the given sampling settings and
/// averages the exact-match score.
EvalResult evaluate(std::span<const TaskInstance> tasks, const BoundModel& model, const BoundAdapterBank* bank,
                    const SamplingConfig& sampling);

}  // namespace pte

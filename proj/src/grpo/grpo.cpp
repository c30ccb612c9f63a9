#include "pte/grpo/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pte/errors.hpp"
#include "pte/numerics/random.hpp"
#include "pte/util/parallel.hpp"

namespace pte {

void TrainConfig::validate() const {
    if (group_size < 1) throw ConfigError("train.group_size must be >= 1");
    if (!(kl_weight >= 0.0)) throw ConfigError("train.kl_weight must be >= 0");
    if (!(reward_eps > 0.0)) throw ConfigError("train.reward_eps must be > 0");
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
    if (!(max_grad_norm > 0.0)) throw ConfigError("train.max_grad_norm must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
}

void PretrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate must be >= 0");
    if (!(max_grad_norm > 0.0)) throw ConfigError("pretrain.max_grad_norm must be > 0");
}

std::vector<double> normalize_rewards(std::span<const double> scores, double eps) {
    if (scores.empty()) throw ContractError("normalize_rewards: empty group");
    const double n = static_cast<double>(scores.size());
    double mean = 0.0;
    for (double s : scores) {
        if (!std::isfinite(s)) throw ContractError("normalize_rewards: non-finite score");
        mean += s;
    }
    // A rounded mean can differ from a repeated score, so equal groups are
    // detected directly rather than through the variance.
    if (std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores[0]; })) {
        return std::vector<double>(scores.size(), 0.0);
    }
    mean /= n;
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= n;
    const double denom = std::sqrt(var + eps);
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - mean) / denom;
    return out;
}

std::vector<double> kl_penalty(std::span<const double> logp_policy, std::span<const double> logp_ref) {
    if (logp_policy.size() != logp_ref.size()) throw ContractError("kl_penalty: arrays are not aligned");
    std::vector<double> out(logp_policy.size());
    for (std::size_t t = 0; t < out.size(); ++t) {
        if (!std::isfinite(logp_policy[t]) || !std::isfinite(logp_ref[t])) {
            throw ContractError("kl_penalty: non-finite log-probability at token " + std::to_string(t));
        }
        const double d = logp_ref[t] - logp_policy[t];
        out[t] = std::exp(d) - d - 1.0;
    }
    return out;
}

namespace {

bool usable(const Trajectory& t) { return !t.aborted && !t.generated.empty(); }

}  // namespace

LossDiagnostics grpo_loss(std::span<const RolloutGroup> groups, const BoundModel& model, const BoundAdapterBank* bank,
                          const BoundModel& reference, const TrainConfig& config,
                          const GrpoLossOptions& options) {
    LossDiagnostics diag;
    double score_sum = 0.0;
    std::size_t scored = 0;
    for (const auto& g : groups) {
        if (g.rewards.size() != g.members.size() || g.scores.size() != g.members.size()) {
            throw ContractError("grpo_loss: group rewards/scores do not match its members");
        }
        for (std::size_t i = 0; i < g.members.size(); ++i) {
            score_sum += g.scores[i];
            ++scored;
            if (usable(g.members[i])) diag.tokens += g.members[i].generated.size();
        }
    }
    diag.mean_score = scored ? score_sum / static_cast<double>(scored) : 0.0;
    if (diag.tokens == 0) return diag;
    const double inv_tokens = 1.0 / static_cast<double>(diag.tokens);

    double kl_sum = 0.0;
    std::size_t index = 0;
    for (const auto& g : groups) {
        for (std::size_t i = 0; i < g.members.size(); ++i, ++index) {
            const Trajectory& traj = g.members[i];
            if (!usable(traj)) {
                ++diag.skipped;
                continue;
            }
            ++diag.trajectories;
            const std::size_t T = traj.generated.size();
            RecomputeOptions recompute;
            if (options.pinned_segments) recompute.pinned_segments = &options.pinned_segments->at(index);
            RecomputeResult rr = recompute_logprobs(traj, model, bank, recompute);
            const std::vector<double> ref = options.reference_logprobs ? options.reference_logprobs->at(index)
                                                                       : full_cache_logprobs(traj, reference);
            if (ref.size() != T) throw ContractError("grpo_loss: reference log-probs do not match the trajectory");

            Matrix ref_m(T, 1);
            for (std::size_t t = 0; t < T; ++t) ref_m(t, 0) = ref[t];
            ad::Var delta = ad::add_constant(ad::scale(rr.logprobs, -1.0), ref_m);
            ad::Var kl = ad::add_constant(ad::sub(ad::exp(delta), delta), Matrix(T, 1, -1.0));
            ad::Var objective = ad::sub(ad::scale(ad::sum(rr.logprobs), g.rewards[i]),
                                        ad::scale(ad::sum(kl), config.kl_weight));
            ad::Var root = ad::scale(objective, -inv_tokens);
            ad::backward(root);
            diag.loss += root.value()(0, 0);
            kl_sum += ad::sum(kl).value()(0, 0);
        }
    }
    diag.mean_kl = kl_sum * inv_tokens;
    return diag;
}

TrainState TrainState::create(ModelParams model, AdapterBank bank, std::uint64_t seed, bool train_base) {
    TrainState s;
    s.reference = model;
    s.model = std::move(model);
    s.bank = std::move(bank);
    s.seed = seed;
    std::vector<Matrix> shapes;
    for (Matrix* m : s.trainable(train_base)) shapes.push_back(*m);
    s.adam = AdamState::like(shapes);
    return s;
}

std::vector<Matrix*> TrainState::trainable(bool train_base) {
    std::vector<Matrix*> out;
    for (auto& [name, m] : bank.named()) out.push_back(m);
    if (train_base) {
        for (auto& [name, m] : model.named()) out.push_back(m);
    }
    return out;
}

nlohmann::json to_json(const IterationMetrics& m) {
    return {{"iteration", m.iteration},   {"loss", m.loss},
            {"mean_score", m.mean_score}, {"mean_kl", m.mean_kl},
            {"grad_norm", m.grad_norm},   {"clip_factor", m.clip_factor},
            {"mean_length", m.mean_length}, {"mean_evictions", m.mean_evictions},
            {"tokens", m.tokens},         {"aborted", m.aborted},
            {"degenerate", m.degenerate}};
}

nlohmann::json to_json(const PretrainMetrics& m) {
    return {{"iteration", m.iteration}, {"loss", m.loss}, {"grad_norm", m.grad_norm}, {"tokens", m.tokens}};
}

namespace {

/// Collects leaf gradients (zeros where none arrived), clips, and applies Adam.
std::pair<double, double> apply_update(const std::vector<ad::Var>& leaves, std::vector<Matrix*> targets,
                                       AdamState& adam, double lr, double max_norm) {
    if (leaves.size() != targets.size()) throw ContractError("optimizer: leaf/parameter count mismatch");
    std::vector<Matrix> grads, params;
    grads.reserve(leaves.size());
    params.reserve(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        grads.push_back(leaves[i].has_grad() ? leaves[i].grad() : Matrix(targets[i]->rows(), targets[i]->cols()));
        params.push_back(*targets[i]);
    }
    const ClipResult clip = clip_global_norm(grads, max_norm);
    AdamConfig cfg;
    cfg.learning_rate = lr;
    adam_step(params, grads, adam, cfg);
    for (std::size_t i = 0; i < targets.size(); ++i) *targets[i] = std::move(params[i]);
    return {clip.norm, clip.factor};
}

}  // namespace

IterationMetrics train_step(std::span<const TaskInstance> prompts, TrainState& state, const TrainConfig& config,
                            const SamplingConfig& sampling) {
    config.validate();
    sampling.validate();
    IterationMetrics metrics;
    metrics.iteration = state.iteration;

    const BoundModel behavior = BoundModel::bind(state.model, false);
    const BoundAdapterBank behavior_bank = BoundAdapterBank::bind(state.bank, false);
    const std::size_t n = config.group_size;
    std::vector<RolloutGroup> groups(prompts.size());
    for (auto& g : groups) g.members.resize(n);
    const std::uint64_t step_seed = derive_seed(state.seed, "rollout", state.iteration);
    parallel_for(prompts.size() * n, [&](std::size_t k) {
        const std::size_t p = k / n, m = k % n;
        SamplingConfig cfg = sampling;
        cfg.seed = derive_seed(step_seed, "member", k);
        groups[p].members[m] = rollout(behavior, &behavior_bank, prompts[p].prompt, cfg);
    });

    bool degenerate = true;
    std::size_t total_len = 0, total_evictions = 0, count = 0;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        RolloutGroup& g = groups[p];
        g.task = prompts[p];
        for (const Trajectory& t : g.members) {
            g.scores.push_back(t.aborted ? 0.0 : score(t.generated, g.task));
            metrics.aborted += t.aborted ? 1 : 0;
            total_len += t.generated.size();
            total_evictions += t.evictions.size();
            ++count;
        }
        g.rewards = normalize_rewards(g.scores, config.reward_eps);
        for (double r : g.rewards) {
            if (r != 0.0) degenerate = false;
        }
    }
    metrics.degenerate = degenerate;
    metrics.mean_length = static_cast<double>(total_len) / static_cast<double>(count);
    metrics.mean_evictions = static_cast<double>(total_evictions) / static_cast<double>(count);

    const BoundModel model = BoundModel::bind(state.model, config.train_base);
    const BoundAdapterBank bank = BoundAdapterBank::bind(state.bank, true, config.freeze_a);
    const BoundModel reference = BoundModel::bind(state.reference, false);
    const LossDiagnostics diag = grpo_loss(groups, model, &bank, reference, config);
    metrics.loss = diag.loss;
    metrics.mean_score = diag.mean_score;
    metrics.mean_kl = diag.mean_kl;
    metrics.tokens = diag.tokens;

    std::vector<ad::Var> leaves = bank.leaves();
    if (config.train_base) {
        const auto base = model.leaves();
        leaves.insert(leaves.end(), base.begin(), base.end());
    }
    const auto [norm, factor] =
        apply_update(leaves, state.trainable(config.train_base), state.adam, config.learning_rate, config.max_grad_norm);
    metrics.grad_norm = norm;
    metrics.clip_factor = factor;
    ++state.iteration;
    return metrics;
}

PretrainMetrics pretrain_step(std::span<const TaskInstance> tasks, ModelParams& params, AdamState& adam,
                              const PretrainConfig& config) {
    config.validate();
    PretrainMetrics metrics;
    metrics.iteration = adam.step;
    const BoundModel model = BoundModel::bind(params, true);

    std::vector<std::vector<int>> golds;
    for (const auto& t : tasks) {
        golds.push_back(gold_response(t));
        metrics.tokens += golds.back().size();
    }
    if (metrics.tokens == 0) throw ContractError("pretrain_step: empty batch");
    const double inv_tokens = 1.0 / static_cast<double>(metrics.tokens);

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& prompt = tasks[i].prompt;
        const auto& gold = golds[i];
        std::vector<int> inputs(prompt);
        inputs.insert(inputs.end(), gold.begin(), gold.end() - 1);
        std::vector<TokenRole> roles(inputs.size(), TokenRole::thinking);
        std::fill(roles.begin(), roles.begin() + static_cast<std::ptrdiff_t>(prompt.size()), TokenRole::question);
        KVCache cache(params.config.n_layers, params.config.d_model, inputs.size(), 1.0);
        ad::Var logits = forward(model, inputs, roles, cache, nullptr);
        std::vector<std::size_t> rows(gold.size());
        std::iota(rows.begin(), rows.end(), prompt.size() - 1);
        ad::Var logp = ad::pick(ad::log_softmax_rows(ad::select_rows(logits, rows)), gold);
        ad::Var root = ad::scale(ad::sum(logp), -inv_tokens);
        ad::backward(root);
        metrics.loss += root.value()(0, 0);
    }
    std::vector<Matrix*> targets;
    for (auto& [name, m] : params.named()) targets.push_back(m);
    const auto [norm, factor] = apply_update(model.leaves(), targets, adam, config.learning_rate, config.max_grad_norm);
    (void)factor;
    metrics.grad_norm = norm;
    return metrics;
}

EvalResult evaluate(std::span<const TaskInstance> tasks, const BoundModel& model, const BoundAdapterBank* bank,
                    const SamplingConfig& sampling) {
    EvalResult result;
    result.trajectories.resize(tasks.size());
    std::vector<double> scores(tasks.size(), 0.0);
    parallel_for(tasks.size(), [&](std::size_t i) {
        SamplingConfig cfg = sampling;
        cfg.seed = derive_seed(sampling.seed, "eval", i);
        result.trajectories[i] = rollout(model, bank, tasks[i].prompt, cfg);
        scores[i] = result.trajectories[i].aborted ? 0.0 : score(result.trajectories[i].generated, tasks[i]);
    });
    double sum = 0.0;
    for (double s : scores) sum += s;
    result.success_rate = tasks.empty() ? 0.0 : sum / static_cast<double>(tasks.size());
    return result;
}

}  // namespace pte

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/cache/kv_cache.hpp"
#include "pte/model/transformer.hpp"

namespace pte {

struct SamplingConfig {
    double temperature = 1.0;
    std::size_t max_new_tokens = 256;
    std::size_t window = 64;  // W, counts question entries too
    double eviction_ratio = 0.25;
    std::uint64_t seed = 0;
    bool greedy = false;
    int terminator = 24;  // Vocabulary::kEnd; -1 disables early stop

    void validate() const;
};

struct EvictionEvent {
    std::size_t step = 0;  // first generated token whose distribution saw the refreshed overlay
    std::vector<std::size_t> positions;

    friend bool operator==(const EvictionEvent&, const EvictionEvent&) = default;
};

struct Trajectory {
    std::vector<int> prompt;
    std::vector<int> generated;
    std::vector<double> logprobs;  // behavior policy, one per generated token
    std::vector<EvictionEvent> evictions;
    ReplayDescriptor replay;
    bool terminated = false;  // terminator emitted (vs. length cap)
    bool aborted = false;     // non-finite logits
    std::string diagnostic;
    std::uint64_t seed = 0;
    double temperature = 1.0;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

void to_json(nlohmann::json& j, const Trajectory& t);
void from_json(const nlohmann::json& j, Trajectory& t);

/// Samples one response under the cache-constrained policy: the prompt is
/// prefilled as question tokens, and whenever the cache is saturated before
/// a decode step it is evicted and the PTE session folds the evicted segment
/// into the overlay used from then on. bank may be nullptr (plain
/// sliding-window decoding). Throws ConfigError if the prompt exceeds W.
Trajectory rollout(const BoundModel& model, const BoundAdapterBank* bank, std::span<const int> prompt,
                   const SamplingConfig& config);

struct RecomputeOptions {
    /// Evicted keys/values to encode instead of the recomputed ones, one
    /// segment per recorded event. Keeps K_e/V_e fixed under parameter
    /// perturbation (finite-difference checks).
    const std::vector<EvictedSegment>* pinned_segments = nullptr;
    /// When non-zero, the descriptor's window must equal this.
    std::size_t expected_window = 0;
};

struct RecomputeResult {
    ad::Var logprobs;  // generated.size() x 1, differentiable
    std::vector<EvictedSegment> segments;
};

/// Replays the recorded eviction schedule (never re-deciding saturation) and
/// recomputes per-token log-probabilities under the current parameters.
/// Tokens between evictions are processed as one block. Throws ReplayError
/// if the descriptor does not fit the trajectory.
RecomputeResult recompute_logprobs(const Trajectory& trajectory, const BoundModel& model,
                                   const BoundAdapterBank* bank, const RecomputeOptions& options = {});

/// Log-probabilities of the same tokens under the reference model with a full
/// cache and no overlay.
std::vector<double> full_cache_logprobs(const Trajectory& trajectory, const BoundModel& reference);

}  // namespace pte

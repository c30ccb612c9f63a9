#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/numerics/autodiff.hpp"

namespace pte {

enum class TokenRole : std::uint8_t { question, thinking, global_reserved };

std::string to_string(TokenRole role);
TokenRole token_role_from_string(const std::string& name);

/// Keys/values removed by one eviction, per layer, ordered by ascending position.
struct EvictedSegment {
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    std::vector<std::size_t> positions;

    std::size_t size() const noexcept { return positions.size(); }
};

/// One eviction as recorded for replay: how many entries had been appended
/// in total when it fired, and which absolute positions it removed.
struct EvictionRecord {
    std::size_t appended_before = 0;
    std::vector<std::size_t> positions;

    friend bool operator==(const EvictionRecord&, const EvictionRecord&) = default;
};

/// Occupancy and eviction history, enough to re-derive the identical schedule.
struct ReplayDescriptor {
    std::size_t capacity = 0;
    double eviction_ratio = 0.0;
    std::size_t question_entries = 0;
    std::size_t appended = 0;
    std::vector<EvictionRecord> events;

    friend bool operator==(const ReplayDescriptor&, const ReplayDescriptor&) = default;
};

/// n_e = max(1, ceil(ratio * capacity)); the ratio is measured against total capacity.
std::size_t eviction_count(std::size_t capacity, double ratio);

/// Bounded per-layer key/value store with question-token retention and
/// sliding-window eviction of thinking tokens.
///
/// Rows live in ad::Var handles so the same cache serves inference (constant
/// values) and differentiable replay (rows remain connected to the graph).
class KVCache {
public:
    KVCache(std::size_t n_layers, std::size_t d_model, std::size_t capacity, double eviction_ratio);

    std::size_t n_layers() const noexcept { return keys_.size(); }
    std::size_t d_model() const noexcept { return d_model_; }
    std::size_t capacity() const noexcept { return capacity_; }
    double eviction_ratio() const noexcept { return eviction_ratio_; }
    std::size_t size() const noexcept { return positions_.size(); }
    bool empty() const noexcept { return positions_.empty(); }
    bool saturated() const noexcept { return positions_.size() == capacity_; }
    /// Total entries ever appended (also the next absolute position).
    std::size_t appended() const noexcept { return appended_; }

    /// Appends one block of rows (T >= 1) to every layer with shared metadata.
    /// layer_keys[l] and layer_values[l] are T x d_model; the rows receive the
    /// absolute positions appended() .. appended() + T - 1. Throws
    /// ContractError if the block would exceed capacity.
    void append(std::span<const ad::Var> layer_keys, std::span<const ad::Var> layer_values,
                std::span<const TokenRole> roles);

    /// Removes the eviction_count() oldest-position thinking entries (fewer if
    /// fewer exist). Requires a saturated cache.
    EvictedSegment evict();

    /// Replay path: removes exactly the given positions, after checking they
    /// are what evict() would have chosen. Throws ReplayError otherwise.
    EvictedSegment evict_recorded(const EvictionRecord& record);

    const ad::Var& keys(std::size_t layer) const { return keys_.at(layer); }
    const ad::Var& values(std::size_t layer) const { return values_.at(layer); }
    std::span<const TokenRole> roles() const noexcept { return roles_; }
    /// Absolute stream index of each row; eviction never renumbers survivors.
    std::span<const std::size_t> positions() const noexcept { return positions_; }

    ReplayDescriptor snapshot_for_replay() const;

private:
    std::vector<std::size_t> plan_eviction() const;
    EvictedSegment remove(const std::vector<std::size_t>& victim_rows);

    std::size_t d_model_;
    std::size_t capacity_;
    double eviction_ratio_;
    std::vector<ad::Var> keys_;
    std::vector<ad::Var> values_;
    std::vector<TokenRole> roles_;
    std::vector<std::size_t> positions_;
    std::size_t appended_ = 0;
    std::size_t question_appended_ = 0;
    std::vector<EvictionRecord> history_;
};

void to_json(nlohmann::json& j, const EvictionRecord& r);
void from_json(const nlohmann::json& j, EvictionRecord& r);
void to_json(nlohmann::json& j, const ReplayDescriptor& d);
void from_json(const nlohmann::json& j, ReplayDescriptor& d);

}  // namespace pte

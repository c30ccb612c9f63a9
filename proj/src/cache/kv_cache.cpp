#include "pte/cache/kv_cache.hpp"

#include <algorithm>
#include <cmath>

#include "pte/errors.hpp"

namespace pte {

std::string to_string(TokenRole role) {
    switch (role) {
        case TokenRole::question: return "question";
        case TokenRole::thinking: return "thinking";
        case TokenRole::global_reserved: return "global-reserved";
    }
    return "unknown";
}

TokenRole token_role_from_string(const std::string& name) {
    if (name == "question") return TokenRole::question;
    if (name == "thinking") return TokenRole::thinking;
    if (name == "global-reserved") return TokenRole::global_reserved;
    throw ContractError("unknown token role '" + name + "'");
}

std::size_t eviction_count(std::size_t capacity, double ratio) {
    const double raw = ratio * static_cast<double>(capacity);
    // 0.15 * 20 evaluates to 3.0000000000000004; don't let that round up.
    const double n = std::ceil(raw - 1e-9 * std::max(1.0, raw));
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::max(0.0, n)));
}

KVCache::KVCache(std::size_t n_layers, std::size_t d_model, std::size_t capacity, double eviction_ratio)
    : d_model_(d_model), capacity_(capacity), eviction_ratio_(eviction_ratio) {
    if (n_layers == 0 || d_model == 0 || capacity == 0) {
        throw ContractError("KVCache: layers, width and capacity must be >= 1");
    }
    if (!(eviction_ratio > 0.0 && eviction_ratio <= 1.0)) {
        throw ContractError("KVCache: eviction ratio must lie in (0, 1]");
    }
    keys_.assign(n_layers, ad::Var(Matrix(0, d_model)));
    values_.assign(n_layers, ad::Var(Matrix(0, d_model)));
}

void KVCache::append(std::span<const ad::Var> layer_keys, std::span<const ad::Var> layer_values,
                     std::span<const TokenRole> roles) {
    const std::size_t block = roles.size();
    if (layer_keys.size() != n_layers() || layer_values.size() != n_layers()) {
        throw ContractError("KVCache::append: one key/value block per layer required");
    }
    if (block == 0) {
        throw ContractError("KVCache::append: empty block");
    }
    if (size() + block > capacity_) {
        throw ContractError("KVCache::append: capacity " + std::to_string(capacity_) +
                            " exceeded; evict before appending");
    }
    for (std::size_t l = 0; l < n_layers(); ++l) {
        if (layer_keys[l].rows() != block || layer_values[l].rows() != block ||
            layer_keys[l].cols() != d_model_ || layer_values[l].cols() != d_model_) {
            throw ContractError("KVCache::append: block shape mismatch");
        }
    }
    for (std::size_t l = 0; l < n_layers(); ++l) {
        keys_[l] = ad::concat_rows(keys_[l], layer_keys[l]);
        values_[l] = ad::concat_rows(values_[l], layer_values[l]);
    }
    for (TokenRole role : roles) {
        roles_.push_back(role);
        positions_.push_back(appended_++);
        if (role == TokenRole::question) {
            ++question_appended_;
        }
    }
}

std::vector<std::size_t> KVCache::plan_eviction() const {
    if (!saturated()) {
        throw ContractError("KVCache::evict: cache is not saturated");
    }
    const std::size_t quota = eviction_count(capacity_, eviction_ratio_);
    // Rows are stored in append order, so the first thinking rows are the
    // oldest-position ones.
    std::vector<std::size_t> victims;
    for (std::size_t i = 0; i < roles_.size() && victims.size() < quota; ++i) {
        if (roles_[i] == TokenRole::thinking) {
            victims.push_back(i);
        }
    }
    if (victims.empty()) {
        throw ConfigError("KVCache::evict: saturated cache holds no thinking entries (window " +
                          std::to_string(capacity_) + " is not larger than the prompt)");
    }
    return victims;
}

EvictedSegment KVCache::evict() {
    return remove(plan_eviction());
}

EvictedSegment KVCache::evict_recorded(const EvictionRecord& record) {
    if (record.appended_before != appended_) {
        throw ReplayError("eviction recorded after " + std::to_string(record.appended_before) +
                          " appends replayed after " + std::to_string(appended_));
    }
    if (!saturated()) {
        throw ReplayError("recorded eviction replayed on an unsaturated cache (size " + std::to_string(size()) +
                          ", window " + std::to_string(capacity_) + ")");
    }
    const auto victims = plan_eviction();
    if (victims.size() != record.positions.size()) {
        throw ReplayError("recorded eviction size differs from the window/ratio schedule");
    }
    for (std::size_t i = 0; i < victims.size(); ++i) {
        if (positions_[victims[i]] != record.positions[i]) {
            throw ReplayError("recorded eviction positions differ from the window/ratio schedule");
        }
    }
    return remove(victims);
}

EvictedSegment KVCache::remove(const std::vector<std::size_t>& victim_rows) {
    std::vector<std::size_t> survivors;
    survivors.reserve(size() - victim_rows.size());
    std::size_t v = 0;
    for (std::size_t i = 0; i < size(); ++i) {
        if (v < victim_rows.size() && victim_rows[v] == i) {
            ++v;
        } else {
            survivors.push_back(i);
        }
    }

    EvictedSegment segment;
    EvictionRecord record;
    record.appended_before = appended_;
    for (std::size_t row : victim_rows) {
        segment.positions.push_back(positions_[row]);
    }
    record.positions = segment.positions;
    for (std::size_t l = 0; l < n_layers(); ++l) {
        {
            ad::NoGradGuard no_grad;
            segment.keys.push_back(ad::select_rows(keys_[l], victim_rows).value());
            segment.values.push_back(ad::select_rows(values_[l], victim_rows).value());
        }
        keys_[l] = ad::select_rows(keys_[l], survivors);
        values_[l] = ad::select_rows(values_[l], survivors);
    }
    std::vector<TokenRole> roles;
    std::vector<std::size_t> positions;
    for (std::size_t row : survivors) {
        roles.push_back(roles_[row]);
        positions.push_back(positions_[row]);
    }
    roles_ = std::move(roles);
    positions_ = std::move(positions);
    history_.push_back(std::move(record));
    return segment;
}

ReplayDescriptor KVCache::snapshot_for_replay() const {
    ReplayDescriptor d;
    d.capacity = capacity_;
    d.eviction_ratio = eviction_ratio_;
    d.question_entries = question_appended_;
    d.appended = appended_;
    d.events = history_;
    return d;
}

void to_json(nlohmann::json& j, const EvictionRecord& r) {
    j = nlohmann::json{{"appended_before", r.appended_before}, {"positions", r.positions}};
}

void from_json(const nlohmann::json& j, EvictionRecord& r) {
    j.at("appended_before").get_to(r.appended_before);
    j.at("positions").get_to(r.positions);
}

void to_json(nlohmann::json& j, const ReplayDescriptor& d) {
    j = nlohmann::json{{"capacity", d.capacity},
                       {"eviction_ratio", d.eviction_ratio},
                       {"question_entries", d.question_entries},
                       {"appended", d.appended},
                       {"events", d.events}};
}

void from_json(const nlohmann::json& j, ReplayDescriptor& d) {
    j.at("capacity").get_to(d.capacity);
    j.at("eviction_ratio").get_to(d.eviction_ratio);
    j.at("question_entries").get_to(d.question_entries);
    j.at("appended").get_to(d.appended);
    j.at("events").get_to(d.events);
}

}  // namespace pte

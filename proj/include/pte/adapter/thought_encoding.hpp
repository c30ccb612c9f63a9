#pragma once

// Progressive thought encoding: evicted KV segments are folded into a fixed
// size context state S_e (g x d_c) through learnable global tokens, and the
// state is turned into low-rank projection deltas dW = A S_e B.
//
// Row-vector convention throughout: q_g = h_g W_Q^T is g x d_model, the
// latent projections W^a_* are d_model x d_c, A is d_model x g and B is
// d_c x d_model.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pte/cache/kv_cache.hpp"
#include "pte/model/transformer.hpp"
#include "pte/numerics/autodiff.hpp"

namespace pte {

/// row_rms: S <- rowRMS(S + S'). segment_mean: running mean over the initial
/// state and every encoded segment.
enum class NormalizeMode : std::uint8_t { row_rms, segment_mean };

/// global_tokens: S_e starts from the global-token triple product.
/// zero: S_e starts at zero (global tokens still supply the latent query).
enum class StateInit : std::uint8_t { global_tokens, zero };

struct PteConfig {
    std::size_t global_tokens = 4;  // g
    std::size_t latent_dim = 4;     // d_c
    NormalizeMode normalize = NormalizeMode::row_rms;
    StateInit state_init = StateInit::global_tokens;
    std::vector<Projection> targets{Projection::query, Projection::value};
    bool shared_global_tokens = true;
    double init_std = 0.02;

    void validate() const;

    friend bool operator==(const PteConfig&, const PteConfig&) = default;
};

struct AdapterParams {
    Matrix proj_q;  // W^a_Q, d_model x d_c
    Matrix proj_k;  // W^a_K
    Matrix proj_v;  // W^a_V
    Matrix a;       // d_model x g
    Matrix b;       // d_c x d_model

    friend bool operator==(const AdapterParams&, const AdapterParams&) = default;
};

struct AdapterSlot {
    std::size_t layer = 0;
    Projection target = Projection::query;
};

/// Learnable PTE parameters for every (layer, target projection).
struct AdapterBank {
    PteConfig config;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::vector<Matrix> global_tokens;  // one shared, or one per layer; g x d_model
    std::vector<AdapterParams> adapters;

    /// A = 0 so the initial delta is zero; everything else small random.
    static AdapterBank initialize(const PteConfig& config, const ModelConfig& model, std::uint64_t seed);

    std::vector<AdapterSlot> slots() const;
    std::size_t global_index(std::size_t layer) const;

    std::vector<std::pair<std::string, Matrix*>> named();
    std::vector<std::pair<std::string, const Matrix*>> named() const;
    std::size_t parameter_count() const;

    friend bool operator==(const AdapterBank&, const AdapterBank&) = default;
};

struct AdapterVars {
    ad::Var proj_q, proj_k, proj_v, a, b;
};

struct BoundAdapterBank {
    PteConfig config;
    std::vector<AdapterSlot> slots;
    std::vector<ad::Var> global_tokens;
    std::vector<AdapterVars> adapters;

    /// freeze_a keeps A a constant (the sliding-window-only ablation).
    static BoundAdapterBank bind(const AdapterBank& bank, bool trainable = false, bool freeze_a = false);
    /// Leaves in AdapterBank::named() order.
    std::vector<ad::Var> leaves() const;
};

struct GlobalQkv {
    ad::Var q, k, v;  // each g x d_model
};

/// Global tokens pushed through the layer's base (un-adapted) projections.
GlobalQkv derive_global_qkv(const ad::Var& global_tokens, const BoundModel& model, std::size_t layer);

/// S_e = ((q_g W^a_Q)(k_g W^a_K)^T)(v_g W^a_V), g x d_c.
ad::Var init_context_state(const AdapterVars& adapter, const GlobalQkv& global);

/// S'_e = ((q_g W^a_Q)(K_e W^a_K)^T)(V_e W^a_V). No softmax, no scaling.
/// Evicted keys/values enter as constants; an empty segment gives zero.
ad::Var encode_evicted(const AdapterVars& adapter, const Matrix& evicted_keys, const Matrix& evicted_values,
                       const ad::Var& global_query);

/// New state from the old one and an encoded segment. segments_before is the
/// number of segments already folded in (used by segment_mean).
ad::Var accumulate(const ad::Var& state, const ad::Var& update, NormalizeMode mode, std::size_t segments_before);

/// dW = A S_e B, d_model x d_model.
ad::Var delta_weights(const AdapterVars& adapter, const ad::Var& state);

/// Per-trajectory PTE state: context states, the fixed global queries and
/// the overlay currently applied to the model. The overlay stays empty until
/// the first eviction, so decoding before any eviction is the base policy.
class PteSession {
public:
    PteSession(const BoundAdapterBank& bank, const BoundModel& model);

    /// Encodes the segment into every adapter, accumulates, and refreshes dW.
    const AdapterOverlay& on_eviction(const EvictedSegment& segment);

    /// nullptr until the first eviction.
    const AdapterOverlay* overlay() const { return segments_ == 0 ? nullptr : &overlay_; }
    std::size_t segment_count() const noexcept { return segments_; }
    const ad::Var& context_state(std::size_t adapter) const { return states_.at(adapter); }
    std::size_t adapter_count() const noexcept { return states_.size(); }

private:
    const BoundAdapterBank* bank_;
    std::vector<ad::Var> global_queries_;  // per layer
    std::vector<ad::Var> states_;          // per adapter
    AdapterOverlay overlay_;
    std::size_t segments_ = 0;
};

}  // namespace pte

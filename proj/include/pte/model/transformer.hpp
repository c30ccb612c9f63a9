#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pte/cache/kv_cache.hpp"
#include "pte/numerics/autodiff.hpp"
#include "pte/numerics/matrix.hpp"

namespace pte {

enum class PositionalScheme : std::uint8_t { rotary, none };

/// absolute: a token keeps the index it had in the generated stream.
/// slot: a token is rotated by the cache slot it lands in (survivors are not re-rotated).
enum class PositionIndexing : std::uint8_t { absolute, slot };

enum class Projection : std::uint8_t { query = 0, key = 1, value = 2, output = 3 };
inline constexpr std::size_t kProjectionCount = 4;

std::string to_string(Projection p);
Projection projection_from_string(const std::string& name);

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_head = 8;
    std::size_t d_ff = 64;
    std::size_t vocab_size = 32;
    std::size_t max_positions = 512;
    PositionalScheme positional_scheme = PositionalScheme::rotary;
    PositionIndexing position_indexing = PositionIndexing::absolute;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    std::size_t parameter_count() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
    Matrix attn_norm;  // 1 x d_model
    Matrix wq, wk, wv, wo;  // d_model x d_model
    Matrix ffn_norm;   // 1 x d_model
    Matrix w_up;       // d_ff x d_model
    Matrix w_down;     // d_model x d_ff

    Matrix& projection(Projection p);
    const Matrix& projection(Projection p) const;

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelParams {
    ModelConfig config;
    Matrix embedding;   // vocab x d_model
    std::vector<LayerParams> layers;
    Matrix final_norm;  // 1 x d_model
    Matrix head;        // vocab x d_model

    static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

    /// Every matrix with a stable name, in a fixed order.
    std::vector<std::pair<std::string, Matrix*>> named();
    std::vector<std::pair<std::string, const Matrix*>> named() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct LayerVars {
    ad::Var attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down;

    const ad::Var& projection(Projection p) const;
};

/// ModelParams wrapped as graph leaves. Bind once per rollout or loss
/// evaluation; trainable=true makes every matrix a parameter leaf.
struct BoundModel {
    ModelConfig config;
    ad::Var embedding;
    std::vector<LayerVars> layers;
    ad::Var final_norm;
    ad::Var head;

    static BoundModel bind(const ModelParams& params, bool trainable = false);
    /// Leaves in ModelParams::named() order.
    std::vector<ad::Var> leaves() const;
};

/// Optional weight deltas per (layer, projection); absent entries mean zero.
class AdapterOverlay {
public:
    AdapterOverlay() = default;
    explicit AdapterOverlay(std::size_t n_layers) : deltas_(n_layers) {}

    void set(std::size_t layer, Projection p, ad::Var delta);
    /// nullptr when absent.
    const ad::Var* get(std::size_t layer, Projection p) const;
    bool empty() const noexcept;
    std::size_t n_layers() const noexcept { return deltas_.size(); }

private:
    std::vector<std::array<ad::Var, kProjectionCount>> deltas_;
};

struct QkvProjection {
    ad::Var q, k, v;
};

/// q = h (W_Q + dW_Q)^T etc. for the rows of h (T x d_model).
QkvProjection project_qkv(const ad::Var& h, std::size_t layer, const BoundModel& model,
                          const AdapterOverlay* overlay);

/// Single-head softmax(q K^T / sqrt(d_head)) V for one query row.
std::vector<double> attend(std::span<const double> q, const Matrix& keys, const Matrix& values, std::size_t d_head);

/// Runs a block of tokens through the model against the cache, appends one
/// entry per token to every layer, and returns T x vocab logits. Query j sees
/// the whole cache plus block tokens 0..j.
ad::Var forward(const BoundModel& model, std::span<const int> tokens, std::span<const TokenRole> roles,
                KVCache& cache, const AdapterOverlay* overlay);

/// One token; returns 1 x vocab logits.
Matrix decode_step(int token, TokenRole role, KVCache& cache, const BoundModel& model, const AdapterOverlay* overlay);

/// Whole prompt tagged as question; returns T x vocab logits.
Matrix prefill(std::span<const int> tokens, KVCache& cache, const BoundModel& model, const AdapterOverlay* overlay);

}  // namespace pte

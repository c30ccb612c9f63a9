#include "pte/model/transformer.hpp"

#include <cmath>

#include "pte/errors.hpp"
#include "pte/numerics/random.hpp"

namespace pte {

std::string to_string(Projection p) {
    switch (p) {
        case Projection::query: return "q";
        case Projection::key: return "k";
        case Projection::value: return "v";
        case Projection::output: return "o";
    }
    return "?";
}

Projection projection_from_string(const std::string& name) {
    if (name == "q") return Projection::query;
    if (name == "k") return Projection::key;
    if (name == "v") return Projection::value;
    if (name == "o") return Projection::output;
    throw ConfigError("unknown projection '" + name + "' (expected q, k, v or o)");
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v < 1) throw ConfigError(std::string("model.") + field + " must be >= 1");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_head, "d_head");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_positions, "max_positions");
    if (d_model % n_heads != 0 || n_heads * d_head != d_model) {
        throw ConfigError("model.d_model must equal n_heads * d_head");
    }
    if (positional_scheme == PositionalScheme::rotary && d_head % 2 != 0) {
        throw ConfigError("model.d_head must be even for rotary positions");
    }
    if (!(rope_base > 0.0) || !(norm_eps > 0.0)) {
        throw ConfigError("model.rope_base and model.norm_eps must be positive");
    }
}

std::size_t ModelConfig::parameter_count() const {
    const std::size_t per_layer = 2 * d_model + 4 * d_model * d_model + 2 * d_ff * d_model;
    return 2 * vocab_size * d_model + d_model + n_layers * per_layer;
}

Matrix& LayerParams::projection(Projection p) {
    switch (p) {
        case Projection::query: return wq;
        case Projection::key: return wk;
        case Projection::value: return wv;
        case Projection::output: return wo;
    }
    return wq;
}

const Matrix& LayerParams::projection(Projection p) const {
    return const_cast<LayerParams*>(this)->projection(p);
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, "model-init"));
    const double d = static_cast<double>(config.d_model);
    const double ff = static_cast<double>(config.d_ff);
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

    ModelParams p;
    p.config = config;
    p.embedding = random_normal(config.vocab_size, config.d_model, 1.0, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams layer;
        layer.attn_norm = Matrix(1, config.d_model, 1.0);
        layer.wq = random_normal(config.d_model, config.d_model, 1.0 / std::sqrt(d), rng);
        layer.wk = random_normal(config.d_model, config.d_model, 1.0 / std::sqrt(d), rng);
        layer.wv = random_normal(config.d_model, config.d_model, 1.0 / std::sqrt(d), rng);
        layer.wo = random_normal(config.d_model, config.d_model, residual_scale / std::sqrt(d), rng);
        layer.ffn_norm = Matrix(1, config.d_model, 1.0);
        layer.w_up = random_normal(config.d_ff, config.d_model, 1.0 / std::sqrt(d), rng);
        layer.w_down = random_normal(config.d_model, config.d_ff, residual_scale / std::sqrt(ff), rng);
        p.layers.push_back(std::move(layer));
    }
    p.final_norm = Matrix(1, config.d_model, 1.0);
    p.head = random_normal(config.vocab_size, config.d_model, 1.0 / std::sqrt(d), rng);
    return p;
}

std::vector<std::pair<std::string, Matrix*>> ModelParams::named() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        auto& layer = layers[l];
        out.emplace_back(prefix + "attn_norm", &layer.attn_norm);
        out.emplace_back(prefix + "wq", &layer.wq);
        out.emplace_back(prefix + "wk", &layer.wk);
        out.emplace_back(prefix + "wv", &layer.wv);
        out.emplace_back(prefix + "wo", &layer.wo);
        out.emplace_back(prefix + "ffn_norm", &layer.ffn_norm);
        out.emplace_back(prefix + "w_up", &layer.w_up);
        out.emplace_back(prefix + "w_down", &layer.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("head", &head);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::named() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : const_cast<ModelParams*>(this)->named()) {
        out.emplace_back(name, m);
    }
    return out;
}

const ad::Var& LayerVars::projection(Projection p) const {
    switch (p) {
        case Projection::query: return wq;
        case Projection::key: return wk;
        case Projection::value: return wv;
        case Projection::output: return wo;
    }
    return wq;
}

BoundModel BoundModel::bind(const ModelParams& params, bool trainable) {
    auto wrap = [trainable](const Matrix& m, const std::string& name) {
        return trainable ? ad::Var::parameter(m, name) : ad::Var(m);
    };
    BoundModel b;
    b.config = params.config;
    b.embedding = wrap(params.embedding, "embedding");
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& lp = params.layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        b.layers.push_back(LayerVars{wrap(lp.attn_norm, prefix + "attn_norm"), wrap(lp.wq, prefix + "wq"),
                                     wrap(lp.wk, prefix + "wk"), wrap(lp.wv, prefix + "wv"),
                                     wrap(lp.wo, prefix + "wo"), wrap(lp.ffn_norm, prefix + "ffn_norm"),
                                     wrap(lp.w_up, prefix + "w_up"), wrap(lp.w_down, prefix + "w_down")});
    }
    b.final_norm = wrap(params.final_norm, "final_norm");
    b.head = wrap(params.head, "head");
    return b;
}

std::vector<ad::Var> BoundModel::leaves() const {
    std::vector<ad::Var> out{embedding};
    for (const auto& l : layers) {
        out.insert(out.end(), {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_up, l.w_down});
    }
    out.push_back(final_norm);
    out.push_back(head);
    return out;
}

void AdapterOverlay::set(std::size_t layer, Projection p, ad::Var delta) {
    deltas_.at(layer)[static_cast<std::size_t>(p)] = std::move(delta);
}

const ad::Var* AdapterOverlay::get(std::size_t layer, Projection p) const {
    if (layer >= deltas_.size()) return nullptr;
    const ad::Var& v = deltas_[layer][static_cast<std::size_t>(p)];
    return v.valid() ? &v : nullptr;
}

bool AdapterOverlay::empty() const noexcept {
    for (const auto& layer : deltas_) {
        for (const auto& v : layer) {
            if (v.valid()) return false;
        }
    }
    return true;
}

namespace {

ad::Var effective_weight(const BoundModel& model, std::size_t layer, Projection p, const AdapterOverlay* overlay) {
    const ad::Var& base = model.layers[layer].projection(p);
    if (overlay != nullptr) {
        if (const ad::Var* delta = overlay->get(layer, p)) {
            if (!delta->value().same_shape(base.value())) {
                throw ContractError("adapter delta shape differs from its target projection");
            }
            return ad::add(base, *delta);
        }
    }
    return base;
}

}  // namespace

QkvProjection project_qkv(const ad::Var& h, std::size_t layer, const BoundModel& model, const AdapterOverlay* overlay) {
    if (layer >= model.layers.size()) {
        throw ContractError("project_qkv: layer out of range");
    }
    if (h.cols() != model.config.d_model) {
        throw ContractError("project_qkv: hidden width differs from d_model");
    }
    return QkvProjection{ad::matmul_nt(h, effective_weight(model, layer, Projection::query, overlay)),
                         ad::matmul_nt(h, effective_weight(model, layer, Projection::key, overlay)),
                         ad::matmul_nt(h, effective_weight(model, layer, Projection::value, overlay))};
}

std::vector<double> attend(std::span<const double> q, const Matrix& keys, const Matrix& values, std::size_t d_head) {
    if (keys.rows() == 0 || keys.rows() != values.rows()) {
        throw ContractError("attend: keys/values must have equal, non-zero row counts");
    }
    if (keys.cols() != q.size()) {
        throw ContractError("attend: query width differs from key width");
    }
    std::vector<double> scores(keys.rows());
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < q.size(); ++c) acc += q[c] * keys(i, c);
        scores[i] = acc * scale;
    }
    const auto weights = softmax_row(scores);
    std::vector<double> out(values.cols(), 0.0);
    for (std::size_t i = 0; i < values.rows(); ++i) {
        for (std::size_t c = 0; c < values.cols(); ++c) out[c] += weights[i] * values(i, c);
    }
    return out;
}

ad::Var forward(const BoundModel& model, std::span<const int> tokens, std::span<const TokenRole> roles,
                KVCache& cache, const AdapterOverlay* overlay) {
    const ModelConfig& cfg = model.config;
    const std::size_t T = tokens.size();
    if (T == 0 || roles.size() != T) {
        throw ContractError("forward: need one role per token and at least one token");
    }
    if (cache.n_layers() != cfg.n_layers || cache.d_model() != cfg.d_model) {
        throw ContractError("forward: cache geometry differs from the model");
    }
    if (cache.appended() + T > cfg.max_positions) {
        throw CapacityError("position " + std::to_string(cache.appended() + T - 1) + " exceeds max_positions " +
                            std::to_string(cfg.max_positions));
    }
    if (cache.size() + T > cache.capacity()) {
        throw ContractError("forward: block does not fit in the cache; evict first");
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw ContractError("forward: token id out of vocabulary");
        }
    }

    std::vector<std::size_t> rope_positions(T);
    const std::size_t first =
        cfg.position_indexing == PositionIndexing::absolute ? cache.appended() : cache.size();
    for (std::size_t i = 0; i < T; ++i) rope_positions[i] = first + i;

    const std::size_t n_prefix = cache.size();
    std::vector<ad::Var> new_keys;
    std::vector<ad::Var> new_values;
    ad::Var x = ad::gather_rows(model.embedding, tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerVars& layer = model.layers[l];
        ad::Var h = ad::rms_norm(x, layer.attn_norm, cfg.norm_eps);
        QkvProjection qkv = project_qkv(h, l, model, overlay);
        if (cfg.positional_scheme == PositionalScheme::rotary) {
            qkv.q = ad::rotary(qkv.q, rope_positions, cfg.d_head, cfg.rope_base);
            qkv.k = ad::rotary(qkv.k, rope_positions, cfg.d_head, cfg.rope_base);
        }
        ad::Var all_k = ad::concat_rows(cache.keys(l), qkv.k);
        ad::Var all_v = ad::concat_rows(cache.values(l), qkv.v);
        ad::Var attn = ad::causal_attention(qkv.q, all_k, all_v, cfg.n_heads, n_prefix);
        x = ad::add(x, ad::matmul_nt(attn, effective_weight(model, l, Projection::output, overlay)));
        ad::Var h2 = ad::rms_norm(x, layer.ffn_norm, cfg.norm_eps);
        x = ad::add(x, ad::matmul_nt(ad::gelu(ad::matmul_nt(h2, layer.w_up)), layer.w_down));
        new_keys.push_back(std::move(qkv.k));
        new_values.push_back(std::move(qkv.v));
    }
    cache.append(new_keys, new_values, roles);
    x = ad::rms_norm(x, model.final_norm, cfg.norm_eps);
    return ad::matmul_nt(x, model.head);
}

Matrix decode_step(int token, TokenRole role, KVCache& cache, const BoundModel& model, const AdapterOverlay* overlay) {
    const int tokens[1] = {token};
    const TokenRole roles[1] = {role};
    return forward(model, tokens, roles, cache, overlay).value();
}

Matrix prefill(std::span<const int> tokens, KVCache& cache, const BoundModel& model, const AdapterOverlay* overlay) {
    if (tokens.empty()) {
        throw ContractError("prefill: empty prompt");
    }
    std::vector<TokenRole> roles(tokens.size(), TokenRole::question);
    return forward(model, tokens, roles, cache, overlay).value();
}

}  // namespace pte

#include "pte/adapter/thought_encoding.hpp"

#include <algorithm>

#include "pte/errors.hpp"
#include "pte/numerics/random.hpp"

namespace pte {

void PteConfig::validate() const {
    if (global_tokens < 1) throw ConfigError("pte.global_tokens must be >= 1");
    if (latent_dim < 1) throw ConfigError("pte.latent_dim must be >= 1");
    if (!(init_std >= 0.0)) throw ConfigError("pte.init_std must be non-negative");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        for (std::size_t j = i + 1; j < targets.size(); ++j) {
            if (targets[i] == targets[j]) throw ConfigError("pte.targets lists a projection twice");
        }
    }
}

AdapterBank AdapterBank::initialize(const PteConfig& config, const ModelConfig& model, std::uint64_t seed) {
    config.validate();
    model.validate();
    Rng rng(derive_seed(seed, "adapter-init"));
    AdapterBank bank;
    bank.config = config;
    bank.n_layers = model.n_layers;
    bank.d_model = model.d_model;
    const std::size_t n_global = config.shared_global_tokens ? 1 : model.n_layers;
    for (std::size_t i = 0; i < n_global; ++i) {
        bank.global_tokens.push_back(random_normal(config.global_tokens, model.d_model, config.init_std, rng));
    }
    for (std::size_t l = 0; l < model.n_layers; ++l) {
        for (std::size_t t = 0; t < config.targets.size(); ++t) {
            AdapterParams p;
            p.proj_q = random_normal(model.d_model, config.latent_dim, config.init_std, rng);
            p.proj_k = random_normal(model.d_model, config.latent_dim, config.init_std, rng);
            p.proj_v = random_normal(model.d_model, config.latent_dim, config.init_std, rng);
            p.a = Matrix(model.d_model, config.global_tokens);
            p.b = random_normal(config.latent_dim, model.d_model, config.init_std, rng);
            bank.adapters.push_back(std::move(p));
        }
    }
    return bank;
}

std::vector<AdapterSlot> AdapterBank::slots() const {
    std::vector<AdapterSlot> out;
    for (std::size_t l = 0; l < n_layers; ++l) {
        for (Projection t : config.targets) out.push_back({l, t});
    }
    return out;
}

std::size_t AdapterBank::global_index(std::size_t layer) const {
    return global_tokens.size() == 1 ? 0 : layer;
}

std::vector<std::pair<std::string, Matrix*>> AdapterBank::named() {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t i = 0; i < global_tokens.size(); ++i) {
        out.emplace_back(global_tokens.size() == 1 ? "h_g" : "h_g." + std::to_string(i), &global_tokens[i]);
    }
    const auto all = slots();
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string prefix = "adapter." + std::to_string(all[i].layer) + "." + to_string(all[i].target) + ".";
        out.emplace_back(prefix + "Wa_Q", &adapters[i].proj_q);
        out.emplace_back(prefix + "Wa_K", &adapters[i].proj_k);
        out.emplace_back(prefix + "Wa_V", &adapters[i].proj_v);
        out.emplace_back(prefix + "A", &adapters[i].a);
        out.emplace_back(prefix + "B", &adapters[i].b);
    }
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> AdapterBank::named() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : const_cast<AdapterBank*>(this)->named()) out.emplace_back(name, m);
    return out;
}

std::size_t AdapterBank::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named()) n += m->size();
    return n;
}

BoundAdapterBank BoundAdapterBank::bind(const AdapterBank& bank, bool trainable, bool freeze_a) {
    BoundAdapterBank b;
    b.config = bank.config;
    b.slots = bank.slots();
    auto named = bank.named();
    std::size_t next = 0;
    auto wrap = [&](bool learnable) {
        const auto& [name, m] = named[next++];
        return learnable ? ad::Var::parameter(*m, name) : ad::Var(*m);
    };
    for (std::size_t i = 0; i < bank.global_tokens.size(); ++i) b.global_tokens.push_back(wrap(trainable));
    for (std::size_t i = 0; i < bank.adapters.size(); ++i) {
        AdapterVars v;
        v.proj_q = wrap(trainable);
        v.proj_k = wrap(trainable);
        v.proj_v = wrap(trainable);
        v.a = wrap(trainable && !freeze_a);
        v.b = wrap(trainable);
        b.adapters.push_back(std::move(v));
    }
    return b;
}

std::vector<ad::Var> BoundAdapterBank::leaves() const {
    std::vector<ad::Var> out(global_tokens.begin(), global_tokens.end());
    for (const auto& a : adapters) out.insert(out.end(), {a.proj_q, a.proj_k, a.proj_v, a.a, a.b});
    return out;
}

GlobalQkv derive_global_qkv(const ad::Var& global_tokens, const BoundModel& model, std::size_t layer) {
    if (layer >= model.layers.size()) throw ContractError("derive_global_qkv: layer out of range");
    if (global_tokens.cols() != model.config.d_model) {
        throw ContractError("derive_global_qkv: global tokens must have d_model columns");
    }
    const LayerVars& l = model.layers[layer];
    return GlobalQkv{ad::matmul_nt(global_tokens, l.wq), ad::matmul_nt(global_tokens, l.wk),
                     ad::matmul_nt(global_tokens, l.wv)};
}

ad::Var init_context_state(const AdapterVars& adapter, const GlobalQkv& global) {
    ad::Var lq = ad::matmul(global.q, adapter.proj_q);
    ad::Var lk = ad::matmul(global.k, adapter.proj_k);
    ad::Var lv = ad::matmul(global.v, adapter.proj_v);
    return ad::matmul(ad::matmul_nt(lq, lk), lv);
}

ad::Var encode_evicted(const AdapterVars& adapter, const Matrix& evicted_keys, const Matrix& evicted_values,
                       const ad::Var& global_query) {
    const std::size_t d_c = adapter.proj_q.cols();
    if (evicted_keys.rows() != evicted_values.rows()) {
        throw ContractError("encode_evicted: key/value row counts differ");
    }
    if (global_query.cols() != adapter.proj_q.rows()) {
        throw ContractError("encode_evicted: global query width differs from the latent projection");
    }
    if (evicted_keys.rows() == 0) {
        return ad::Var(Matrix(global_query.rows(), d_c));
    }
    if (evicted_keys.cols() != adapter.proj_k.rows() || evicted_values.cols() != adapter.proj_v.rows()) {
        throw ContractError("encode_evicted: evicted row width differs from the latent projection");
    }
    ad::Var lq = ad::matmul(global_query, adapter.proj_q);
    ad::Var lk = ad::matmul(ad::Var(evicted_keys), adapter.proj_k);
    ad::Var lv = ad::matmul(ad::Var(evicted_values), adapter.proj_v);
    return ad::matmul(ad::matmul_nt(lq, lk), lv);
}

ad::Var accumulate(const ad::Var& state, const ad::Var& update, NormalizeMode mode, std::size_t segments_before) {
    if (!state.value().same_shape(update.value())) {
        throw ContractError("accumulate: state and update shapes differ");
    }
    if (!state.value().all_finite() || !update.value().all_finite()) {
        throw ContractError("accumulate: non-finite context state");
    }
    switch (mode) {
        case NormalizeMode::row_rms:
            return ad::row_rms_normalize(ad::add(state, update));
        case NormalizeMode::segment_mean: {
            const double k = static_cast<double>(segments_before);
            return ad::scale(ad::add(ad::scale(state, k + 1.0), update), 1.0 / (k + 2.0));
        }
    }
    throw ContractError("accumulate: unknown normalize mode");
}

ad::Var delta_weights(const AdapterVars& adapter, const ad::Var& state) {
    if (state.rows() != adapter.a.cols() || state.cols() != adapter.b.rows()) {
        throw ContractError("delta_weights: context state shape differs from A/B");
    }
    return ad::matmul(ad::matmul(adapter.a, state), adapter.b);
}

PteSession::PteSession(const BoundAdapterBank& bank, const BoundModel& model)
    : bank_(&bank), overlay_(model.config.n_layers) {
    global_queries_.resize(model.config.n_layers);
    std::vector<GlobalQkv> per_layer(model.config.n_layers);
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        const std::size_t gi = bank.global_tokens.size() == 1 ? 0 : l;
        per_layer[l] = derive_global_qkv(bank.global_tokens.at(gi), model, l);
        global_queries_[l] = per_layer[l].q;
    }
    for (std::size_t i = 0; i < bank.adapters.size(); ++i) {
        const std::size_t layer = bank.slots[i].layer;
        if (bank.config.state_init == StateInit::zero) {
            states_.emplace_back(Matrix(bank.config.global_tokens, bank.config.latent_dim));
        } else {
            states_.push_back(init_context_state(bank.adapters[i], per_layer[layer]));
        }
    }
}

const AdapterOverlay& PteSession::on_eviction(const EvictedSegment& segment) {
    for (std::size_t i = 0; i < states_.size(); ++i) {
        const std::size_t layer = bank_->slots[i].layer;
        const AdapterVars& adapter = bank_->adapters[i];
        ad::Var update =
            encode_evicted(adapter, segment.keys.at(layer), segment.values.at(layer), global_queries_[layer]);
        states_[i] = accumulate(states_[i], update, bank_->config.normalize, segments_);
        overlay_.set(layer, bank_->slots[i].target, delta_weights(adapter, states_[i]));
    }
    ++segments_;
    return overlay_;
}

}  // namespace pte

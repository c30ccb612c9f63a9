#pragma once

// Shared builders for the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/cache/kv_cache.hpp"
#include "pte/cli/config.hpp"
#include "pte/model/transformer.hpp"
#include "pte/numerics/matrix.hpp"
#include "pte/numerics/random.hpp"
#include "pte/rollout/rollout.hpp"

namespace pte::testing {

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.size(), j.at(0).size());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = j.at(r).at(c).get<double>();
    return m;
}

/// Every parameter (norm gains included) redrawn with the given spread.
inline ModelParams random_model(const ModelConfig& config, std::uint64_t seed, double stddev = 0.5) {
    ModelParams p = ModelParams::initialize(config, seed);
    Rng rng(derive_seed(seed, "test-model"));
    for (auto& [name, m] : p.named()) {
        const bool gain = name.find("norm") != std::string::npos;
        Matrix draw = random_normal(m->rows(), m->cols(), gain ? 0.1 : stddev, rng);
        if (gain) {
            for (double& v : draw.data()) v += 1.0;
        }
        *m = draw;
    }
    return p;
}

/// Adapter bank with every matrix (A included) drawn at the given spread.
inline AdapterBank random_bank(const PteConfig& pte, const ModelConfig& model, std::uint64_t seed,
                               double stddev = 0.5) {
    AdapterBank bank = AdapterBank::initialize(pte, model, seed);
    Rng rng(derive_seed(seed, "test-bank"));
    for (auto& [name, m] : bank.named()) *m = random_normal(m->rows(), m->cols(), stddev, rng);
    return bank;
}

inline ModelConfig tiny_config(std::size_t vocab = 2, std::size_t d_model = 2, std::size_t heads = 1) {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = d_model;
    c.n_heads = heads;
    c.d_head = d_model / heads;
    c.d_ff = 2 * d_model;
    c.vocab_size = vocab;
    c.max_positions = 64;
    return c;
}

/// Runs a fixed response through the cache-constrained policy exactly as
/// rollout() would have sampled it, recording log-probs and evictions.
inline Trajectory teacher_force(const BoundModel& model, const BoundAdapterBank* bank, std::span<const int> prompt,
                                std::span<const int> generated, std::size_t window, double ratio,
                                double temperature = 1.0) {
    ad::NoGradGuard no_grad;
    Trajectory t;
    t.prompt.assign(prompt.begin(), prompt.end());
    t.temperature = temperature;
    KVCache cache(model.config.n_layers, model.config.d_model, window, ratio);
    std::optional<PteSession> session;
    if (bank != nullptr) session.emplace(*bank, model);
    const Matrix pl = prefill(prompt, cache, model, nullptr);
    std::vector<double> row(pl.row(pl.rows() - 1).begin(), pl.row(pl.rows() - 1).end());
    for (std::size_t i = 0; i < generated.size(); ++i) {
        for (double& v : row) v /= temperature;
        t.generated.push_back(generated[i]);
        t.logprobs.push_back(log_softmax_row(row)[static_cast<std::size_t>(generated[i])]);
        if (i + 1 == generated.size()) break;
        if (cache.saturated()) {
            EvictedSegment seg = cache.evict();
            if (session) session->on_eviction(seg);
            t.evictions.push_back({i + 1, seg.positions});
        }
        const Matrix next = decode_step(generated[i], TokenRole::thinking, cache, model,
                                        session ? session->overlay() : nullptr);
        row.assign(next.row(0).begin(), next.row(0).end());
    }
    t.replay = cache.snapshot_for_replay();
    return t;
}

struct Fixture {
    nlohmann::json json;
    ModelParams model;
    AdapterBank bank;
};

inline Fixture load_fixture(const std::string& name) {
    std::ifstream in(std::filesystem::path(PTE_FIXTURE_DIR) / name);
    if (!in) throw std::runtime_error("missing fixture " + name);
    Fixture f;
    in >> f.json;
    const ModelConfig cfg = model_config_from_json(f.json.at("model_config"));
    f.model = ModelParams::initialize(cfg, 0);
    for (auto& [n, m] : f.model.named()) *m = matrix_from_json(f.json.at("params").at(n));
    PteConfig pte;
    pte.global_tokens = f.json["pte"]["global_tokens"].get<std::size_t>();
    pte.latent_dim = f.json["pte"]["latent_dim"].get<std::size_t>();
    pte.targets.clear();
    for (const auto& t : f.json["pte"]["targets"]) pte.targets.push_back(projection_from_string(t.get<std::string>()));
    f.bank = AdapterBank::initialize(pte, cfg, 0);
    for (auto& [n, m] : f.bank.named()) *m = matrix_from_json(f.json.at("bank").at(n));
    return f;
}

}  // namespace pte::testing

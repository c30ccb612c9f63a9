#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/grpo/grpo.hpp"
#include "pte/model/transformer.hpp"
#include "pte/rollout/rollout.hpp"

namespace pte {

struct TaskConfig {
    std::size_t depth = 4;
    int modulus = 10;
    std::string dataset;  // optional JSONL held-out set; generated when empty
    std::size_t eval_size = 64;

    friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

struct EvalConfig {
    std::string checkpoint;
    /// Window lengths to evaluate; 0 means a full cache.
    std::vector<std::size_t> windows{0};
    bool use_adapter = true;
    std::string report_format = "csv";

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct SweepConfig {
    std::string axis;  // eviction_ratio | window | global_tokens
    std::vector<double> values;

    friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct GradcheckConfig {
    double step = 1e-4;  // five-point stencil
    double tolerance = 1e-4;
    std::size_t max_parameters = 10000;
    std::size_t members = 2;
    std::size_t response_tokens = 12;
    std::size_t thinking_slots = 4;  // window = prompt + thinking_slots
    double adapter_a_std = 0.1;      // A is drawn non-zero so every group has signal

    friend bool operator==(const GradcheckConfig&, const GradcheckConfig&) = default;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "run";
    /// Base model checkpoint to start training from (e.g. a pretrain output).
    std::string init_checkpoint;
    ModelConfig model;
    PteConfig pte;
    SamplingConfig sampling;
    TrainConfig train;
    PretrainConfig pretrain;
    TaskConfig task;
    EvalConfig eval;
    SweepConfig sweep;
    GradcheckConfig gradcheck;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const PteConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
PteConfig pte_config_from_json(const nlohmann::json& j);

/// Layers j over the defaults; any key the defaults lack is rejected with its
/// dotted path, as is a value of the wrong type.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to j. The value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads the file (or starts from defaults when path is empty), applies the
/// overrides in order and validates.
RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides);

}  // namespace pte

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/model/transformer.hpp"
#include "pte/rollout/rollout.hpp"

namespace pte {

/// 4 * layers * heads * d_head * L: score and mixing products only. L >= 1.
std::uint64_t attention_flops_step(std::size_t cache_length, const ModelConfig& config);

/// 2 * layers * L * d_model (keys + values).
std::uint64_t cache_elements(std::size_t cache_length, const ModelConfig& config);

/// Keys attended when producing each generated token.
struct DecodeSchedule {
    std::vector<std::size_t> lengths;

    /// Replays the trajectory's eviction log: step 0 attends the prompt, each
    /// later step the cache after appending the previous token.
    static DecodeSchedule windowed(const Trajectory& trajectory);
    /// Same tokens with nothing evicted: prompt + t.
    static DecodeSchedule full(const Trajectory& trajectory);
    /// Synthetic schedule for a generation of `steps` tokens under window W
    /// (0 = no window), without running a model.
    static DecodeSchedule simulate(std::size_t prompt, std::size_t steps, std::size_t window, double eviction_ratio);
};

struct EfficiencyReport {
    std::uint64_t max_flops = 0;
    double mean_flops = 0.0;
    std::uint64_t max_cache = 0;
    double mean_cache = 0.0;
    std::size_t steps = 0;

    /// Max and per-step mean over every step of every schedule.
    static EfficiencyReport aggregate(std::span<const DecodeSchedule> schedules, const ModelConfig& config);

    friend bool operator==(const EfficiencyReport&, const EfficiencyReport&) = default;
};

/// One row of an evaluation or sweep report.
struct RunReport {
    std::string label;
    std::string axis;  // sweep axis name, empty for plain evaluation
    double axis_value = 0.0;
    std::size_t window = 0;
    double eviction_ratio = 0.0;
    std::size_t global_tokens = 0;
    double success_rate = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
    EfficiencyReport windowed;
    EfficiencyReport full;

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

nlohmann::json to_json(const RunReport& r);

enum class ReportFormat : std::uint8_t { csv, json };
ReportFormat report_format_from_string(const std::string& name);

/// Header row then one row per run (csv), or one top-level array (json).
/// Throws IoError if the file cannot be written.
void emit_report(std::span<const RunReport> runs, const std::filesystem::path& path, ReportFormat format);

}  // namespace pte

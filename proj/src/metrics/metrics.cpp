#include "pte/metrics/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "pte/errors.hpp"

namespace pte {

std::uint64_t attention_flops_step(std::size_t cache_length, const ModelConfig& config) {
    if (cache_length < 1) throw ContractError("attention_flops_step: cache length must be >= 1");
    return 4ull * config.n_layers * config.n_heads * config.d_head * cache_length;
}

std::uint64_t cache_elements(std::size_t cache_length, const ModelConfig& config) {
    return 2ull * config.n_layers * cache_length * config.d_model;
}

DecodeSchedule DecodeSchedule::windowed(const Trajectory& trajectory) {
    DecodeSchedule s;
    std::size_t occupancy = trajectory.prompt.size();
    std::size_t next_event = 0;
    for (std::size_t t = 0; t < trajectory.generated.size(); ++t) {
        if (t > 0) {
            while (next_event < trajectory.evictions.size() && trajectory.evictions[next_event].step == t) {
                occupancy -= trajectory.evictions[next_event].positions.size();
                ++next_event;
            }
            ++occupancy;
        }
        s.lengths.push_back(occupancy);
    }
    return s;
}

DecodeSchedule DecodeSchedule::full(const Trajectory& trajectory) {
    DecodeSchedule s;
    for (std::size_t t = 0; t < trajectory.generated.size(); ++t) s.lengths.push_back(trajectory.prompt.size() + t);
    return s;
}

DecodeSchedule DecodeSchedule::simulate(std::size_t prompt, std::size_t steps, std::size_t window,
                                        double eviction_ratio) {
    if (window != 0 && window < prompt) throw ConfigError("window is smaller than the prompt");
    DecodeSchedule s;
    std::size_t occupancy = prompt;
    for (std::size_t t = 0; t < steps; ++t) {
        if (t > 0) {
            if (window != 0 && occupancy == window) {
                const std::size_t thinking = occupancy - prompt;
                if (thinking == 0) throw ConfigError("saturated window holds no thinking entries");
                occupancy -= std::min(eviction_count(window, eviction_ratio), thinking);
            }
            ++occupancy;
        }
        s.lengths.push_back(occupancy);
    }
    return s;
}

EfficiencyReport EfficiencyReport::aggregate(std::span<const DecodeSchedule> schedules, const ModelConfig& config) {
    EfficiencyReport r;
    double flops_sum = 0.0, cache_sum = 0.0;
    for (const auto& s : schedules) {
        for (std::size_t L : s.lengths) {
            const auto f = attention_flops_step(L, config);
            const auto c = cache_elements(L, config);
            r.max_flops = std::max(r.max_flops, f);
            r.max_cache = std::max(r.max_cache, c);
            flops_sum += static_cast<double>(f);
            cache_sum += static_cast<double>(c);
            ++r.steps;
        }
    }
    if (r.steps > 0) {
        r.mean_flops = flops_sum / static_cast<double>(r.steps);
        r.mean_cache = cache_sum / static_cast<double>(r.steps);
    }
    return r;
}

namespace {

const char* const kColumns[] = {"label",
                                "axis",
                                "axis_value",
                                "window",
                                "eviction_ratio",
                                "global_tokens",
                                "success_rate",
                                "evaluated",
                                "skipped",
                                "max_attention_flops",
                                "mean_attention_flops",
                                "max_cache_elements",
                                "mean_cache_elements",
                                "full_max_attention_flops",
                                "full_mean_attention_flops",
                                "full_max_cache_elements",
                                "full_mean_cache_elements"};

std::string format_real(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

nlohmann::json to_json(const RunReport& r) {
    nlohmann::ordered_json j;
    j["label"] = r.label;
    j["axis"] = r.axis;
    j["axis_value"] = r.axis_value;
    j["window"] = r.window;
    j["eviction_ratio"] = r.eviction_ratio;
    j["global_tokens"] = r.global_tokens;
    j["success_rate"] = r.success_rate;
    j["evaluated"] = r.evaluated;
    j["skipped"] = r.skipped;
    j["max_attention_flops"] = r.windowed.max_flops;
    j["mean_attention_flops"] = r.windowed.mean_flops;
    j["max_cache_elements"] = r.windowed.max_cache;
    j["mean_cache_elements"] = r.windowed.mean_cache;
    j["full_max_attention_flops"] = r.full.max_flops;
    j["full_mean_attention_flops"] = r.full.mean_flops;
    j["full_max_cache_elements"] = r.full.max_cache;
    j["full_mean_cache_elements"] = r.full.mean_cache;
    return nlohmann::json::parse(j.dump());
}

ReportFormat report_format_from_string(const std::string& name) {
    if (name == "csv") return ReportFormat::csv;
    if (name == "json") return ReportFormat::json;
    throw ConfigError("report format must be csv or json, got '" + name + "'");
}

void emit_report(std::span<const RunReport> runs, const std::filesystem::path& path, ReportFormat format) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report " + path.string());
    if (format == ReportFormat::json) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& r : runs) {
            nlohmann::ordered_json row;
            const auto flat = to_json(r);
            for (const char* c : kColumns) row[c] = flat.at(c);
            arr.push_back(std::move(row));
        }
        out << arr.dump(2) << '\n';
    } else {
        for (std::size_t i = 0; i < std::size(kColumns); ++i) out << (i ? "," : "") << kColumns[i];
        out << '\n';
        for (const auto& r : runs) {
            out << csv_field(r.label) << ',' << csv_field(r.axis) << ',' << format_real(r.axis_value) << ','
                << r.window << ',' << format_real(r.eviction_ratio) << ',' << r.global_tokens << ','
                << format_real(r.success_rate) << ',' << r.evaluated << ',' << r.skipped << ','
                << r.windowed.max_flops << ',' << format_real(r.windowed.mean_flops) << ',' << r.windowed.max_cache
                << ',' << format_real(r.windowed.mean_cache) << ',' << r.full.max_flops << ','
                << format_real(r.full.mean_flops) << ',' << r.full.max_cache << ',' << format_real(r.full.mean_cache)
                << '\n';
        }
    }
    out.flush();
    if (!out) throw IoError("failed writing report " + path.string());
}

}  // namespace pte

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pte/cli/checkpoint.hpp"
#include "pte/cli/config.hpp"
#include "pte/metrics/metrics.hpp"
#include "pte/tasks/tasks.hpp"

namespace pte {

/// Exclusive use of an output directory: creates it with checkpoints/ and
/// reports/, and holds a .lock file until destruction. Throws IoError if
/// another process holds the lock.
class OutputDir {
public:
    explicit OutputDir(std::filesystem::path root);
    ~OutputDir();
    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;

    const std::filesystem::path& root() const noexcept { return root_; }
    std::filesystem::path checkpoints() const { return root_ / "checkpoints"; }
    std::filesystem::path reports() const { return root_ / "reports"; }
    std::filesystem::path metrics() const { return root_ / "metrics.jsonl"; }

    /// Writes the effective config to config.json.
    void echo_config(const RunConfig& config) const;

private:
    std::filesystem::path root_;
};

/// Prompts for one training (or pretraining) iteration, derived from the run seed.
std::vector<TaskInstance> training_batch(const RunConfig& config, std::string_view stream, std::uint64_t iteration,
                                         std::size_t batch_size);

/// Held-out tasks: the dataset file when set, otherwise eval_size generated
/// tasks on a stream disjoint from training.
std::vector<TaskInstance> eval_tasks(const RunConfig& config, std::vector<std::string>* diagnostics = nullptr);

/// Base model and adapter bank for a fresh run: init_checkpoint's model when
/// set, otherwise seeded initialization.
Checkpoint initial_checkpoint(const RunConfig& config);

struct TrainOutcome {
    Checkpoint final;
    std::vector<IterationMetrics> metrics;  // iterations run by this call
    bool stopped_early = false;
};

/// Runs (or resumes) GRPO training up to config.train.iterations total
/// iterations. Metrics are appended to metrics_path when it is non-empty and
/// checkpoints are written under checkpoint_dir when it is non-empty.
TrainOutcome run_training(const RunConfig& config, Checkpoint start, const std::filesystem::path& metrics_path,
                          const std::filesystem::path& checkpoint_dir, std::ostream* log);

/// Supervised pretraining of the base model on gold responses.
Checkpoint run_pretraining(const RunConfig& config, const std::filesystem::path& metrics_path, std::ostream* log);

/// Greedy evaluation of one checkpoint at one (window, ratio); window 0 means
/// a full cache. Tasks whose prompt exceeds the window are skipped.
RunReport evaluate_checkpoint(const Checkpoint& checkpoint, const RunConfig& config,
                              const std::vector<TaskInstance>& tasks, std::size_t window, double eviction_ratio,
                              std::vector<std::string>* diagnostics = nullptr);

struct GradcheckGroup {
    std::string name;
    std::size_t parameters = 0;
    double worst_relative_error = 0.0;
    double max_abs_gradient = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    std::size_t trainable_parameters = 0;
    std::size_t eviction_events = 0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Finite-difference check of the GRPO loss gradient over every trainable
/// parameter on one synthetic group whose trajectories include evictions.
/// Throws ConfigError when the trainable set exceeds gradcheck.max_parameters.
GradcheckReport run_gradcheck(const RunConfig& config);

/// Sweep rows for config.sweep; training-time axes train under out/sweep/.
std::vector<RunReport> run_sweep(const RunConfig& config, const std::optional<Checkpoint>& checkpoint,
                                 const std::filesystem::path& out, std::ostream* log);
void validate_sweep(const RunConfig& config);

struct CommandOptions {
    std::string resume;      // train: checkpoint to resume from
    std::string checkpoint;  // eval/sweep/rollout-dump: overrides eval.checkpoint
    std::size_t count = 8;   // rollout-dump: number of tasks
};

/// Each returns a process exit status: 0 success, 1 runtime failure or failed
/// check, 2 invalid configuration.
int cmd_pretrain(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_sweep(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_rollout_dump(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err);

}  // namespace pte

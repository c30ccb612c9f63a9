#include "pte/cli/commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "pte/errors.hpp"
#include "pte/grpo/grpo.hpp"
#include "pte/numerics/gradcheck.hpp"
#include "pte/numerics/random.hpp"
#include "pte/util/parallel.hpp"

namespace pte {

namespace fs = std::filesystem;

OutputDir::OutputDir(fs::path root) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
    const fs::path lock = root_ / ".lock";
    const int fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw IoError("output directory " + root_.string() + " is locked by another run (remove " + lock.string() +
                      " if no run is active)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
    fs::create_directories(checkpoints(), ec);
    fs::create_directories(reports(), ec);
    if (ec) throw IoError("cannot create " + root_.string() + " subdirectories: " + ec.message());
}

OutputDir::~OutputDir() {
    std::error_code ec;
    fs::remove(root_ / ".lock", ec);
}

void OutputDir::echo_config(const RunConfig& config) const {
    std::ofstream out(root_ / "config.json", std::ios::binary | std::ios::trunc);
    out << to_json(config).dump(2) << '\n';
    if (!out) throw IoError("cannot write " + (root_ / "config.json").string());
}

std::vector<TaskInstance> training_batch(const RunConfig& config, std::string_view stream, std::uint64_t iteration,
                                         std::size_t batch_size) {
    const std::uint64_t base = derive_seed(config.seed, stream, iteration);
    std::vector<TaskInstance> tasks;
    for (std::size_t i = 0; i < batch_size; ++i) {
        tasks.push_back(generate_task(derive_seed(base, "prompt", i), config.task.depth, config.task.modulus));
    }
    return tasks;
}

std::vector<TaskInstance> eval_tasks(const RunConfig& config, std::vector<std::string>* diagnostics) {
    if (!config.task.dataset.empty()) {
        LoadedDataset data = load_dataset(config.task.dataset, Vocabulary(config.model.vocab_size));
        if (diagnostics) {
            for (const auto& d : data.diagnostics) {
                diagnostics->push_back(config.task.dataset + ":" + std::to_string(d.line) + ": " + d.message);
            }
        }
        return std::move(data.instances);
    }
    std::vector<TaskInstance> tasks;
    for (std::size_t i = 0; i < config.task.eval_size; ++i) {
        tasks.push_back(generate_task(derive_seed(config.seed, "eval-task", i), config.task.depth, config.task.modulus));
    }
    return tasks;
}

namespace {

std::vector<Matrix> trainable_shapes(const Checkpoint& c, bool train_base) {
    std::vector<Matrix> out;
    for (const auto& [n, m] : c.bank.named()) out.push_back(*m);
    if (train_base) {
        for (const auto& [n, m] : c.model.named()) out.push_back(*m);
    }
    return out;
}

void append_line(const fs::path& path, const nlohmann::json& j) {
    if (path.empty()) return;
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << j.dump() << '\n';
    if (!out) throw IoError("cannot append to " + path.string());
}

std::string iteration_name(std::uint64_t it) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "iter_%06llu.ckpt", static_cast<unsigned long long>(it));
    return buf;
}

}  // namespace

Checkpoint initial_checkpoint(const RunConfig& config) {
    Checkpoint c;
    if (!config.init_checkpoint.empty()) {
        Checkpoint base = load_checkpoint(config.init_checkpoint);
        if (!(base.model.config == config.model)) {
            throw ConfigError("init_checkpoint " + config.init_checkpoint +
                              " was saved with a different model config than this run's 'model' section");
        }
        c.model = std::move(base.model);
    } else {
        c.model = ModelParams::initialize(config.model, derive_seed(config.seed, "model-init"));
    }
    c.reference = c.model;
    c.bank = AdapterBank::initialize(config.pte, config.model, config.seed);
    c.adam = AdamState::like(trainable_shapes(c, config.train.train_base));
    c.seed = config.seed;
    c.run_config = to_json(config);
    return c;
}

TrainOutcome run_training(const RunConfig& config, Checkpoint start, const fs::path& metrics_path,
                          const fs::path& checkpoint_dir, std::ostream* log) {
    TrainState state;
    state.model = std::move(start.model);
    state.reference = std::move(start.reference);
    state.bank = std::move(start.bank);
    state.adam = std::move(start.adam);
    state.iteration = start.iteration;
    state.seed = start.seed;
    if (state.adam.first_moment.size() != state.trainable(config.train.train_base).size()) {
        throw ConfigError("checkpoint optimizer state does not match train.train_base=" +
                          std::string(config.train.train_base ? "true" : "false"));
    }

    auto snapshot = [&] {
        Checkpoint c;
        c.model = state.model;
        c.reference = state.reference;
        c.bank = state.bank;
        c.adam = state.adam;
        c.iteration = state.iteration;
        c.seed = state.seed;
        c.run_config = to_json(config);
        return c;
    };

    TrainOutcome outcome;
    double best = -1.0;
    std::size_t stale = 0;
    while (state.iteration < config.train.iterations) {
        const auto prompts = training_batch(config, "train-task", state.iteration, config.train.batch_size);
        const IterationMetrics m = train_step(prompts, state, config.train, config.sampling);
        append_line(metrics_path, to_json(m));
        outcome.metrics.push_back(m);
        if (log) {
            *log << "iter " << m.iteration << " loss " << m.loss << " score " << m.mean_score << " kl " << m.mean_kl
                 << (m.degenerate ? " (degenerate)" : "") << '\n';
        }
        const bool last = state.iteration == config.train.iterations;
        if (config.train.plateau_patience > 0) {
            if (m.mean_score > best + config.train.plateau_delta) {
                best = m.mean_score;
                stale = 0;
            } else if (++stale >= config.train.plateau_patience) {
                outcome.stopped_early = true;
            }
        }
        if (!checkpoint_dir.empty() &&
            (last || outcome.stopped_early || state.iteration % config.train.checkpoint_every == 0)) {
            const Checkpoint c = snapshot();
            save_checkpoint(c, checkpoint_dir / iteration_name(state.iteration));
            save_checkpoint(c, checkpoint_dir / "latest.ckpt");
        }
        if (outcome.stopped_early) break;
    }
    outcome.final = snapshot();
    return outcome;
}

Checkpoint run_pretraining(const RunConfig& config, const fs::path& metrics_path, std::ostream* log) {
    Checkpoint c = initial_checkpoint(config);
    std::vector<Matrix> shapes;
    for (const auto& [n, m] : c.model.named()) shapes.push_back(*m);
    AdamState adam = AdamState::like(shapes);
    for (std::size_t it = 0; it < config.pretrain.iterations; ++it) {
        const auto tasks = training_batch(config, "pretrain-task", it, config.pretrain.batch_size);
        const PretrainMetrics m = pretrain_step(tasks, c.model, adam, config.pretrain);
        append_line(metrics_path, to_json(m));
        if (log && (it % 50 == 0 || it + 1 == config.pretrain.iterations)) {
            *log << "pretrain " << it << " nll " << m.loss << '\n';
        }
    }
    c.reference = c.model;
    c.run_config = to_json(config);
    return c;
}

RunReport evaluate_checkpoint(const Checkpoint& checkpoint, const RunConfig& config,
                              const std::vector<TaskInstance>& tasks, std::size_t window, double eviction_ratio,
                              std::vector<std::string>* diagnostics) {
    const BoundModel model = BoundModel::bind(checkpoint.model, false);
    const BoundAdapterBank bank = BoundAdapterBank::bind(checkpoint.bank, false);
    const BoundAdapterBank* bank_ptr = config.eval.use_adapter ? &bank : nullptr;

    RunReport row;
    row.window = window;
    row.eviction_ratio = eviction_ratio;
    row.global_tokens = checkpoint.bank.config.global_tokens;
    std::vector<std::size_t> runnable;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (window != 0 && window < tasks[i].prompt.size()) {
            ++row.skipped;
            if (diagnostics) {
                diagnostics->push_back("task " + std::to_string(i) + ": window " + std::to_string(window) +
                                       " is smaller than its prompt (" + std::to_string(tasks[i].prompt.size()) +
                                       " tokens); skipped");
            }
        } else {
            runnable.push_back(i);
        }
    }
    std::vector<Trajectory> trajectories(runnable.size());
    std::vector<double> scores(runnable.size(), 0.0);
    parallel_for(runnable.size(), [&](std::size_t k) {
        const TaskInstance& task = tasks[runnable[k]];
        SamplingConfig s = config.sampling;
        s.greedy = true;
        s.window = window == 0 ? task.prompt.size() + s.max_new_tokens : window;
        s.eviction_ratio = eviction_ratio;
        s.seed = derive_seed(config.seed, "eval", runnable[k]);
        trajectories[k] = rollout(model, bank_ptr, task.prompt, s);
        scores[k] = trajectories[k].aborted ? 0.0 : score(trajectories[k].generated, task);
    });
    row.evaluated = runnable.size();
    double sum = 0.0;
    std::vector<DecodeSchedule> windowed, full;
    for (std::size_t k = 0; k < runnable.size(); ++k) {
        sum += scores[k];
        windowed.push_back(DecodeSchedule::windowed(trajectories[k]));
        full.push_back(DecodeSchedule::full(trajectories[k]));
    }
    row.success_rate = row.evaluated ? sum / static_cast<double>(row.evaluated) : 0.0;
    row.windowed = EfficiencyReport::aggregate(windowed, checkpoint.model.config);
    row.full = EfficiencyReport::aggregate(full, checkpoint.model.config);
    return row;
}

// ---------------------------------------------------------------------------

namespace {

std::string group_of(const std::string& name) {
    if (name == "h_g" || name.rfind("h_g.", 0) == 0) return "h_g";
    if (name.rfind("adapter.", 0) == 0) return name.substr(name.rfind('.') + 1);
    return "base." + name;
}

}  // namespace

GradcheckReport run_gradcheck(const RunConfig& config) {
    const bool train_base = config.train.train_base;
    Checkpoint start = initial_checkpoint(config);
    std::size_t trainable = start.bank.parameter_count();
    if (train_base) trainable += config.model.parameter_count();
    if (trainable > config.gradcheck.max_parameters) {
        throw ConfigError("gradcheck: " + std::to_string(trainable) + " trainable parameters exceed the cap of " +
                          std::to_string(config.gradcheck.max_parameters));
    }
    if (config.gradcheck.response_tokens < config.gradcheck.thinking_slots + 2) {
        throw ConfigError("gradcheck.response_tokens must exceed gradcheck.thinking_slots + 1 to force an eviction");
    }
    Rng rng(derive_seed(config.seed, "gradcheck"));
    if (!config.train.freeze_a) {
        for (auto& a : start.bank.adapters) {
            a.a = random_normal(a.a.rows(), a.a.cols(), config.gradcheck.adapter_a_std, rng);
        }
    }

    const TaskInstance task = generate_task(derive_seed(config.seed, "gradcheck-task"), config.task.depth,
                                            config.task.modulus);
    SamplingConfig sampling = config.sampling;
    sampling.window = task.prompt.size() + config.gradcheck.thinking_slots;
    sampling.max_new_tokens = config.gradcheck.response_tokens;
    sampling.terminator = -1;
    sampling.greedy = false;

    RolloutGroup group;
    group.task = task;
    {
        const BoundModel model = BoundModel::bind(start.model, false);
        const BoundAdapterBank bank = BoundAdapterBank::bind(start.bank, false);
        for (std::size_t i = 0; i < config.gradcheck.members; ++i) {
            sampling.seed = derive_seed(config.seed, "gradcheck-member", i);
            group.members.push_back(rollout(model, &bank, task.prompt, sampling));
            group.scores.push_back(i % 2 == 0 ? 1.0 : 0.0);
        }
    }
    group.rewards = normalize_rewards(group.scores, config.train.reward_eps);
    const std::vector<RolloutGroup> groups{group};

    GradcheckReport report;
    report.tolerance = config.gradcheck.tolerance;
    report.trainable_parameters = trainable;
    std::vector<std::vector<EvictedSegment>> pins;
    std::vector<std::vector<double>> refs;
    {
        const BoundModel model = BoundModel::bind(start.model, false);
        const BoundAdapterBank bank = BoundAdapterBank::bind(start.bank, false);
        const BoundModel reference = BoundModel::bind(start.reference, false);
        ad::NoGradGuard no_grad;
        for (const auto& t : group.members) {
            report.eviction_events += t.evictions.size();
            pins.push_back(recompute_logprobs(t, model, &bank).segments);
            refs.push_back(full_cache_logprobs(t, reference));
        }
    }
    GrpoLossOptions options{&pins, &refs};

    // Analytic gradient.
    std::vector<std::pair<std::string, Matrix*>> params;
    for (auto& [n, m] : start.bank.named()) params.emplace_back(n, m);
    if (train_base) {
        for (auto& [n, m] : start.model.named()) params.emplace_back(n, m);
    }
    std::vector<Matrix> analytic;
    {
        const BoundModel model = BoundModel::bind(start.model, train_base);
        const BoundAdapterBank bank = BoundAdapterBank::bind(start.bank, true, config.train.freeze_a);
        const BoundModel reference = BoundModel::bind(start.reference, false);
        grpo_loss(groups, model, &bank, reference, config.train, options);
        std::vector<ad::Var> leaves = bank.leaves();
        if (train_base) {
            const auto base = model.leaves();
            leaves.insert(leaves.end(), base.begin(), base.end());
        }
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            analytic.push_back(leaves[i].has_grad() ? leaves[i].grad()
                                                    : Matrix(params[i].second->rows(), params[i].second->cols()));
        }
    }

    auto loss_at = [&]() {
        ad::NoGradGuard no_grad;
        const BoundModel model = BoundModel::bind(start.model, false);
        const BoundAdapterBank bank = BoundAdapterBank::bind(start.bank, false);
        const BoundModel reference = BoundModel::bind(start.reference, false);
        return grpo_loss(groups, model, &bank, reference, config.train, options).loss;
    };

    std::map<std::string, GradcheckGroup> by_group;
    std::vector<std::string> order;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const std::string gname = group_of(params[p].first);
        if (gname == "A" && config.train.freeze_a) continue;
        Matrix& target = *params[p].second;
        std::vector<double> x(target.data().begin(), target.data().end());
        const auto fd = finite_difference_gradient(
            [&](std::span<const double> v) {
                std::copy(v.begin(), v.end(), target.data().begin());
                return loss_at();
            },
            x, config.gradcheck.step, FiniteDifferenceStencil::five_point);
        std::copy(x.begin(), x.end(), target.data().begin());
        const auto a = analytic[p].data();
        if (!by_group.count(gname)) {
            order.push_back(gname);
            by_group[gname].name = gname;
        }
        GradcheckGroup& g = by_group[gname];
        g.parameters += x.size();
        g.worst_relative_error = std::max(g.worst_relative_error,
                                          fd.ok() ? max_relative_error(a, fd.gradient)
                                                  : std::numeric_limits<double>::infinity());
        for (double v : a) g.max_abs_gradient = std::max(g.max_abs_gradient, std::abs(v));
    }
    report.passed = report.eviction_events > 0;
    for (const auto& name : order) {
        report.groups.push_back(by_group[name]);
        if (!(by_group[name].worst_relative_error < report.tolerance)) report.passed = false;
    }
    return report;
}

// ---------------------------------------------------------------------------

void validate_sweep(const RunConfig& config) {
    const auto& s = config.sweep;
    if (s.axis != "eviction_ratio" && s.axis != "window" && s.axis != "global_tokens") {
        throw ConfigError("sweep.axis must be eviction_ratio, window or global_tokens, got '" + s.axis + "'");
    }
    if (s.values.empty()) throw ConfigError("sweep.values must not be empty");
    for (double v : s.values) {
        if (s.axis == "eviction_ratio") {
            if (!(v > 0.0 && v <= 1.0)) throw ConfigError("sweep.values: eviction ratio " + std::to_string(v) +
                                                          " is outside (0, 1]");
        } else if (!(v >= 0.0 && std::floor(v) == v && v < 1e9)) {
            throw ConfigError("sweep.values: " + s.axis + " value " + std::to_string(v) +
                              " is not a non-negative integer");
        }
    }
}

std::vector<RunReport> run_sweep(const RunConfig& config, const std::optional<Checkpoint>& checkpoint,
                                 const fs::path& out, std::ostream* log) {
    validate_sweep(config);
    const auto& s = config.sweep;
    std::vector<RunReport> rows;
    const auto tasks = eval_tasks(config);
    if (s.axis == "global_tokens") {
        for (double v : s.values) {
            RunConfig run = config;
            const auto g = static_cast<std::size_t>(v);
            if (g == 0) {
                run.pte.state_init = StateInit::zero;
            } else {
                run.pte.global_tokens = g;
            }
            const fs::path dir = out / "sweep" / ("global_tokens_" + std::to_string(g));
            fs::create_directories(dir / "checkpoints");
            std::error_code ec;
            fs::remove(dir / "metrics.jsonl", ec);
            if (log) *log << "sweep: training global_tokens=" << g << '\n';
            TrainOutcome trained =
                run_training(run, initial_checkpoint(run), dir / "metrics.jsonl", dir / "checkpoints", log);
            RunReport row = evaluate_checkpoint(trained.final, run, tasks, run.sampling.window,
                                                run.sampling.eviction_ratio);
            row.label = g == 0 ? "global_tokens=0 (zero-initialized state)" : "global_tokens=" + std::to_string(g);
            row.axis = s.axis;
            row.axis_value = v;
            row.global_tokens = g;
            rows.push_back(std::move(row));
        }
        return rows;
    }
    if (!checkpoint) throw ConfigError("sweep over " + s.axis + " needs a checkpoint (--checkpoint or eval.checkpoint)");
    for (double v : s.values) {
        const std::size_t window = s.axis == "window" ? static_cast<std::size_t>(v) : config.sampling.window;
        const double ratio = s.axis == "eviction_ratio" ? v : config.sampling.eviction_ratio;
        RunReport row = evaluate_checkpoint(*checkpoint, config, tasks, window, ratio);
        char label[64];
        std::snprintf(label, sizeof label, "%s=%g", s.axis.c_str(), v);
        row.label = label;
        row.axis = s.axis;
        row.axis_value = v;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

std::string checkpoint_path(const RunConfig& config, const CommandOptions& options) {
    return options.checkpoint.empty() ? config.eval.checkpoint : options.checkpoint;
}

void print_rows(std::ostream& out, const std::vector<RunReport>& rows) {
    for (const auto& r : rows) {
        out << (r.label.empty() ? "window=" + std::to_string(r.window) : r.label) << "  success " << r.success_rate
            << "  evaluated " << r.evaluated << "  skipped " << r.skipped << "  max_flops " << r.windowed.max_flops
            << "  max_cache " << r.windowed.max_cache << '\n';
    }
}

}  // namespace

int cmd_pretrain(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        OutputDir dir(config.out);
        dir.echo_config(config);
        std::error_code ec;
        fs::remove(dir.metrics(), ec);
        const Checkpoint c = run_pretraining(config, dir.metrics(), &out);
        save_checkpoint(c, dir.checkpoints() / "pretrained.ckpt");
        out << "wrote " << (dir.checkpoints() / "pretrained.ckpt").string() << '\n';
        return 0;
    });
}

int cmd_train(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        OutputDir dir(config.out);
        dir.echo_config(config);
        Checkpoint start;
        if (!options.resume.empty()) {
            start = load_checkpoint(options.resume);
            if (start.seed != config.seed) {
                err << "note: resuming with the checkpoint's seed " << start.seed << '\n';
            }
            out << "resuming at iteration " << start.iteration << '\n';
        } else {
            std::error_code ec;
            fs::remove(dir.metrics(), ec);
            start = initial_checkpoint(config);
        }
        const TrainOutcome outcome = run_training(config, std::move(start), dir.metrics(), dir.checkpoints(), &out);
        if (outcome.stopped_early) out << "stopped early on a reward plateau\n";
        out << "finished at iteration " << outcome.final.iteration << '\n';
        return 0;
    });
}

int cmd_eval(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        const std::string path = checkpoint_path(config, options);
        if (path.empty()) throw ConfigError("eval needs a checkpoint (--checkpoint or eval.checkpoint)");
        const Checkpoint c = load_checkpoint(path);
        OutputDir dir(config.out);
        dir.echo_config(config);
        std::vector<std::string> diagnostics;
        const auto tasks = eval_tasks(config, &diagnostics);
        std::vector<RunReport> rows;
        for (std::size_t w : config.eval.windows) {
            RunReport row = evaluate_checkpoint(c, config, tasks, w, config.sampling.eviction_ratio, &diagnostics);
            row.label = w == 0 ? "full" : "window=" + std::to_string(w);
            rows.push_back(std::move(row));
        }
        for (const auto& d : diagnostics) err << d << '\n';
        const auto format = report_format_from_string(config.eval.report_format);
        const fs::path report = dir.reports() / ("eval." + config.eval.report_format);
        emit_report(rows, report, format);
        print_rows(out, rows);
        out << "wrote " << report.string() << '\n';
        return 0;
    });
}

int cmd_sweep(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        validate_sweep(config);
        std::optional<Checkpoint> c;
        const std::string path = checkpoint_path(config, options);
        if (!path.empty()) c = load_checkpoint(path);
        OutputDir dir(config.out);
        dir.echo_config(config);
        const auto rows = run_sweep(config, c, dir.root(), &out);
        const auto format = report_format_from_string(config.eval.report_format);
        const fs::path report = dir.reports() / ("sweep_" + config.sweep.axis + "." + config.eval.report_format);
        emit_report(rows, report, format);
        print_rows(out, rows);
        out << "wrote " << report.string() << '\n';
        return 0;
    });
}

int cmd_gradcheck(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        const GradcheckReport r = run_gradcheck(config);
        out << "trainable parameters " << r.trainable_parameters << ", eviction events " << r.eviction_events << '\n';
        for (const auto& g : r.groups) {
            out << "  " << g.name << "  params " << g.parameters << "  worst rel err " << g.worst_relative_error
                << "  max |grad| " << g.max_abs_gradient << '\n';
        }
        out << (r.passed ? "PASS" : "FAIL") << " (tolerance " << r.tolerance << ")\n";
        return r.passed ? 0 : 1;
    });
}

int cmd_rollout_dump(const RunConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        config.validate();
        const std::string path = checkpoint_path(config, options);
        const Checkpoint c = path.empty() ? initial_checkpoint(config) : load_checkpoint(path);
        OutputDir dir(config.out);
        dir.echo_config(config);
        auto tasks = eval_tasks(config);
        tasks.resize(std::min(tasks.size(), options.count));
        const BoundModel model = BoundModel::bind(c.model, false);
        const BoundAdapterBank bank = BoundAdapterBank::bind(c.bank, false);
        const Vocabulary vocab(config.model.vocab_size);
        const fs::path file = dir.reports() / "rollouts.jsonl";
        std::ofstream dump(file, std::ios::binary | std::ios::trunc);
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            SamplingConfig s = config.sampling;
            s.seed = derive_seed(config.seed, "dump", i);
            const Trajectory t = rollout(model, config.eval.use_adapter ? &bank : nullptr, tasks[i].prompt, s);
            nlohmann::json j;
            j["task"] = i;
            j["prompt_text"] = vocab.render(t.prompt);
            j["response_text"] = vocab.render(t.generated);
            j["score"] = t.aborted ? 0.0 : score(t.generated, tasks[i]);
            j["trajectory"] = t;
            dump << j.dump() << '\n';
            out << vocab.render(t.prompt) << " => " << vocab.render(t.generated) << '\n';
        }
        if (!dump) throw IoError("cannot write " + file.string());
        out << "wrote " << file.string() << '\n';
        return 0;
    });
}

}  // namespace pte

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pte/cli/checkpoint.hpp"
#include "pte/cli/commands.hpp"
#include "pte/cli/config.hpp"
#include "pte/errors.hpp"

namespace pte {
namespace {

namespace fs = std::filesystem;

// A fresh directory per test, so ctest can run them in parallel.
fs::path scratch() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    const fs::path dir = fs::temp_directory_path() / "pte_cli_test" / (std::string(info->test_suite_name()) + "." + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::istringstream in(slurp(p));
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

RunConfig small(const fs::path& out) {
    RunConfig c;
    c.seed = 3;
    c.out = out.string();
    c.task.depth = 1;
    c.task.eval_size = 8;
    c.sampling.max_new_tokens = 12;
    c.sampling.window = 9;
    c.train.batch_size = 2;
    c.train.group_size = 2;
    c.train.iterations = 1;
    c.train.checkpoint_every = 1;
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Config

TEST(RunConfig, DefaultsValidate) { EXPECT_NO_THROW(RunConfig{}.validate()); }

TEST(RunConfig, UnknownKeyIsRejectedWithItsPath) {
    try {
        run_config_from_json(nlohmann::json::parse(R"({"train": {"learning_rte": 0.1}})"));
        FAIL() << "accepted an unknown key";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.learning_rte"), std::string::npos) << e.what();
    }
}

TEST(RunConfig, WrongTypeIsRejected) {
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"iterations": "ten"}})")), ConfigError);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"iterations": -1}})")), ConfigError);
    EXPECT_THROW(run_config_from_json(nlohmann::json::parse("[1]")), ConfigError);
}

TEST(RunConfig, InvalidValueNamesTheField) {
    try {
        run_config_from_json(nlohmann::json::parse(R"({"task": {"modulus": 40}})")).validate();
        FAIL() << "accepted modulus 40";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("task.modulus"), std::string::npos) << e.what();
    }
}

TEST(RunConfig, OverridesApplyInOrderOverTheFile) {
    const fs::path dir = scratch();
    std::ofstream(dir / "c.json") << R"({"seed": 5, "train": {"learning_rate": 0.5}})";
    const std::vector<std::string> overrides{"train.learning_rate=0.25", "pte.normalize=segment_mean",
                                             "eval.windows=[8,16]", "seed=7"};
    const RunConfig c = load_run_config(dir / "c.json", overrides);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.train.learning_rate, 0.25);
    EXPECT_EQ(c.pte.normalize, NormalizeMode::segment_mean);
    EXPECT_EQ(c.eval.windows, (std::vector<std::size_t>{8, 16}));
    EXPECT_THROW(load_run_config("", std::vector<std::string>{"nonsense"}), ConfigError);
    EXPECT_THROW(load_run_config("", std::vector<std::string>{"model.depth=3"}), ConfigError);
}

TEST(RunConfig, EchoReproducesTheConfig) {
    const fs::path dir = scratch();
    RunConfig c = small(dir / "run");
    c.pte.targets = {Projection::key, Projection::output};
    c.sweep = {"eviction_ratio", {0.25, 0.1}};
    {
        OutputDir out(c.out);
        out.echo_config(c);
    }
    const RunConfig back = load_run_config(dir / "run" / "config.json", {});
    EXPECT_EQ(to_json(back), to_json(c));
}

// ---------------------------------------------------------------------------
// Checkpoint

Checkpoint trained_checkpoint(const fs::path& dir) {
    RunConfig c = small(dir);
    c.train.iterations = 2;
    return run_training(c, initial_checkpoint(c), "", "", nullptr).final;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const fs::path dir = scratch();
    const Checkpoint c = trained_checkpoint(dir);
    save_checkpoint(c, dir / "a.ckpt");
    const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(loaded, c);
    save_checkpoint(loaded, dir / "b.ckpt");
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
    EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, HeaderListsEveryParameter) {
    const fs::path dir = scratch();
    const Checkpoint c = trained_checkpoint(dir);
    save_checkpoint(c, dir / "a.ckpt");
    const CheckpointHeader h = read_checkpoint_header(dir / "a.ckpt");
    EXPECT_EQ(h.format_version, kCheckpointVersion);
    std::set<std::string> names;
    for (const auto& t : h.tensors) names.insert(t.name);
    for (const auto& [n, m] : c.model.named()) EXPECT_TRUE(names.count("model." + n)) << n;
    for (const auto& [n, m] : c.bank.named()) EXPECT_TRUE(names.count("bank." + n)) << n;
}

TEST(Checkpoint, CorruptedByteFailsTheChecksum) {
    const fs::path dir = scratch();
    save_checkpoint(trained_checkpoint(dir), dir / "a.ckpt");
    std::string bytes = slurp(dir / "a.ckpt");
    bytes[bytes.size() - 100] ^= 0x01;
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
    try {
        load_checkpoint(dir / "bad.ckpt");
        FAIL() << "loaded a corrupted checkpoint";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, TruncatedOrForeignFilesAreRefused) {
    const fs::path dir = scratch();
    save_checkpoint(trained_checkpoint(dir), dir / "a.ckpt");
    const std::string bytes = slurp(dir / "a.ckpt");
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    std::ofstream(dir / "foreign.ckpt", std::ios::binary) << "hello world, not a checkpoint";
    EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), IoError);
    EXPECT_THROW(load_checkpoint(dir / "foreign.ckpt"), IoError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

// ---------------------------------------------------------------------------
// Commands

TEST(OutputDir, SecondWriterIsLockedOut) {
    const fs::path dir = scratch();
    {
        OutputDir first(dir / "run");
        EXPECT_TRUE(fs::is_directory(first.checkpoints()));
        EXPECT_TRUE(fs::is_directory(first.reports()));
        EXPECT_THROW(OutputDir second(dir / "run"), IoError);
    }
    EXPECT_NO_THROW(OutputDir again(dir / "run"));
}

TEST(CmdTrain, OneIterationWritesACheckpointAndOneRecord) {
    const fs::path dir = scratch();
    std::ostringstream out, err;
    ASSERT_EQ(cmd_train(small(dir / "run"), {}, out, err), 0) << err.str();
    const auto records = lines_of(dir / "run" / "metrics.jsonl");
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(nlohmann::json::parse(records[0])["iteration"], 0);
    const Checkpoint c = load_checkpoint(dir / "run" / "checkpoints" / "latest.ckpt");
    EXPECT_EQ(c.iteration, 1u);
    EXPECT_TRUE(fs::exists(dir / "run" / "checkpoints" / "iter_000001.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
}

TEST(CmdTrain, IdenticalRunsGiveIdenticalLogs) {
    const fs::path dir = scratch();
    std::ostringstream out, err;
    RunConfig a = small(dir / "a"), b = small(dir / "b");
    a.train.iterations = b.train.iterations = 3;
    ASSERT_EQ(cmd_train(a, {}, out, err), 0) << err.str();
    ASSERT_EQ(cmd_train(b, {}, out, err), 0) << err.str();
    EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
    // The checkpoints differ only in the echoed output path.
    Checkpoint ca = load_checkpoint(dir / "a" / "checkpoints" / "latest.ckpt");
    const Checkpoint cb = load_checkpoint(dir / "b" / "checkpoints" / "latest.ckpt");
    ca.run_config["out"] = cb.run_config["out"];
    EXPECT_EQ(ca, cb);
}

TEST(CmdTrain, ResumeContinuesWithMatchingMetrics) {
    const fs::path dir = scratch();
    std::ostringstream out, err;
    RunConfig whole = small(dir / "whole");
    whole.train.iterations = 4;
    ASSERT_EQ(cmd_train(whole, {}, out, err), 0) << err.str();

    RunConfig first = small(dir / "split");
    first.train.iterations = 2;
    ASSERT_EQ(cmd_train(first, {}, out, err), 0) << err.str();
    RunConfig rest = first;
    rest.train.iterations = 4;
    CommandOptions resume;
    resume.resume = (dir / "split" / "checkpoints" / "iter_000002.ckpt").string();
    ASSERT_EQ(cmd_train(rest, resume, out, err), 0) << err.str();

    const auto a = lines_of(dir / "whole" / "metrics.jsonl");
    const auto b = lines_of(dir / "split" / "metrics.jsonl");
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(nlohmann::json::parse(b[2])["iteration"], 2);
    EXPECT_EQ(a, b);
    EXPECT_EQ(load_checkpoint(dir / "whole" / "checkpoints" / "latest.ckpt").bank,
              load_checkpoint(dir / "split" / "checkpoints" / "latest.ckpt").bank);
}

TEST(CmdTrain, InvalidConfigExitsWithTwo) {
    const fs::path dir = scratch();
    RunConfig c = small(dir / "run");
    c.train.learning_rate = -1.0;
    std::ostringstream out, err;
    EXPECT_EQ(cmd_train(c, {}, out, err), 2);
    EXPECT_NE(err.str().find("learning_rate"), std::string::npos) << err.str();
}

TEST(CmdEval, OneRowPerWindow) {
    const fs::path dir = scratch();
    save_checkpoint(trained_checkpoint(dir), dir / "a.ckpt");
    RunConfig c = small(dir / "eval");
    c.eval.windows = {8, 16, 32};
    c.eval.checkpoint = (dir / "a.ckpt").string();
    std::ostringstream out, err;
    ASSERT_EQ(cmd_eval(c, {}, out, err), 0) << err.str();
    const auto rows = lines_of(dir / "eval" / "reports" / "eval.csv");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[1].rfind("window=8,", 0), 0u);
    EXPECT_EQ(rows[3].rfind("window=32,", 0), 0u);
}

TEST(CmdEval, WindowSmallerThanThePromptIsSkipped) {
    const fs::path dir = scratch();
    save_checkpoint(trained_checkpoint(dir), dir / "a.ckpt");
    RunConfig c = small(dir / "eval");
    c.eval.windows = {3};  // depth-1 prompts are 5 tokens
    std::ostringstream out, err;
    CommandOptions o;
    o.checkpoint = (dir / "a.ckpt").string();
    ASSERT_EQ(cmd_eval(c, o, out, err), 0) << err.str();
    EXPECT_NE(err.str().find("smaller than its prompt"), std::string::npos);
    const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
    const RunReport r = evaluate_checkpoint(ck, c, eval_tasks(c), 3, 0.25);
    EXPECT_EQ(r.evaluated, 0u);
    EXPECT_EQ(r.skipped, c.task.eval_size);
}

TEST(CmdEval, WindowCoveringTheWholeGenerationMatchesFullCache) {
    const fs::path dir = scratch();
    const Checkpoint ck = trained_checkpoint(dir);
    const RunConfig c = small(dir / "eval");
    const auto tasks = eval_tasks(c);
    const RunReport full = evaluate_checkpoint(ck, c, tasks, 0, 0.25);
    const RunReport wide = evaluate_checkpoint(ck, c, tasks, 5 + c.sampling.max_new_tokens, 0.25);
    EXPECT_EQ(wide.success_rate, full.success_rate);
    EXPECT_EQ(wide.windowed, full.windowed);
}

TEST(CmdEval, MissingCheckpointIsAConfigError) {
    const fs::path dir = scratch();
    std::ostringstream out, err;
    EXPECT_EQ(cmd_eval(small(dir / "eval"), {}, out, err), 2);
}

TEST(CmdSweep, InvalidAxisOrValuesAreRejectedBeforeCompute) {
    RunConfig c;
    c.sweep = {"temperature", {1.0}};
    EXPECT_THROW(validate_sweep(c), ConfigError);
    c.sweep = {"eviction_ratio", {0.25, 1.5}};
    EXPECT_THROW(validate_sweep(c), ConfigError);
    c.sweep = {"window", {8.5}};
    EXPECT_THROW(validate_sweep(c), ConfigError);
    c.sweep = {"global_tokens", {}};
    EXPECT_THROW(validate_sweep(c), ConfigError);
    const fs::path dir = scratch();
    RunConfig bad = small(dir / "sweep");
    bad.sweep = {"temperature", {1.0}};
    std::ostringstream out, err;
    EXPECT_EQ(cmd_sweep(bad, {}, out, err), 2);
    EXPECT_FALSE(fs::exists(dir / "sweep"));
}

TEST(CmdSweep, RatioSweepIsRepeatableByteForByte) {
    const fs::path dir = scratch();
    save_checkpoint(trained_checkpoint(dir), dir / "a.ckpt");
    CommandOptions o;
    o.checkpoint = (dir / "a.ckpt").string();
    std::ostringstream out, err;
    for (const char* run : {"one", "two"}) {
        RunConfig c = small(dir / run);
        c.sweep = {"eviction_ratio", {0.25, 0.20, 0.15, 0.10, 0.05}};
        ASSERT_EQ(cmd_sweep(c, o, out, err), 0) << err.str();
    }
    const fs::path report = fs::path("reports") / "sweep_eviction_ratio.csv";
    EXPECT_EQ(lines_of(dir / "one" / report).size(), 6u);
    EXPECT_EQ(slurp(dir / "one" / report), slurp(dir / "two" / report));
}

TEST(CmdSweep, FullLengthWindowRowMatchesFullCacheEval) {
    const fs::path dir = scratch();
    const Checkpoint ck = trained_checkpoint(dir);
    RunConfig c = small(dir / "sweep");
    const std::size_t full_length = 5 + c.sampling.max_new_tokens;
    c.sweep = {"window", {8.0, static_cast<double>(full_length)}};
    const auto rows = run_sweep(c, ck, dir / "sweep", nullptr);
    ASSERT_EQ(rows.size(), 2u);
    const RunReport full = evaluate_checkpoint(ck, c, eval_tasks(c), 0, c.sampling.eviction_ratio);
    EXPECT_EQ(rows[1].window, full_length);
    EXPECT_EQ(rows[1].success_rate, full.success_rate);
    EXPECT_EQ(rows[1].windowed, full.windowed);
}

TEST(CmdGradcheck, DefaultConfigPasses) {
    const GradcheckReport r = run_gradcheck(RunConfig{});
    EXPECT_TRUE(r.passed);
    EXPECT_GT(r.eviction_events, 0u);
    std::vector<std::string> names;
    for (const auto& g : r.groups) {
        names.push_back(g.name);
        EXPECT_LT(g.worst_relative_error, 1e-4) << g.name;
    }
    EXPECT_EQ(names, (std::vector<std::string>{"h_g", "Wa_Q", "Wa_K", "Wa_V", "A", "B"}));
}

TEST(CmdGradcheck, OverTheParameterCapIsRefused) {
    RunConfig c;
    c.gradcheck.max_parameters = 100;
    EXPECT_THROW(run_gradcheck(c), ConfigError);
    const fs::path dir = scratch();
    c.out = (dir / "gc").string();
    std::ostringstream out, err;
    EXPECT_EQ(cmd_gradcheck(c, out, err), 2);
}

}  // namespace
}  // namespace pte

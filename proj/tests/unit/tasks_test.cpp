#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "pte/errors.hpp"
#include "pte/tasks/tasks.hpp"

namespace pte {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "pte_tasks_test";
    fs::create_directories(dir);
    return dir / name;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream(path, std::ios::binary) << text;
}

TEST(Vocabulary, IsABijection) {
    const Vocabulary v(32);
    EXPECT_EQ(v.size(), 32u);
    for (int i = 0; i < 32; ++i) EXPECT_EQ(v.id(v.symbol(i)), i);
    EXPECT_FALSE(v.id("nope").has_value());
    EXPECT_THROW(Vocabulary(Vocabulary::kMinSize - 1), ConfigError);
}

TEST(GenerateTask, SeedFixedDeterminism) {
    EXPECT_EQ(generate_task(42, 3, 10), generate_task(42, 3, 10));
    EXPECT_NE(generate_task(42, 3, 10), generate_task(43, 3, 10));
}

TEST(GenerateTask, StartThreeAddFour) {
    const std::array<ChainStep, 1> steps{{{Operator::add, 4}}};
    const TaskInstance t = make_task(3, steps, 10);
    EXPECT_EQ(t.answer, std::vector<int>{7});
    EXPECT_EQ(t.prompt, (std::vector<int>{Vocabulary::kStart, 3, Vocabulary::kPlus, 4, Vocabulary::kQuery}));
}

TEST(GenerateTask, WrapsModulo) {
    const std::array<ChainStep, 2> steps{{{Operator::sub, 5}, {Operator::mul, 3}}};
    EXPECT_EQ(make_task(2, steps, 10).answer, std::vector<int>{1});  // (2 - 5) * 3 = -9 = 1 mod 10
}

TEST(GenerateTask, AnswersCoverAllResiduesWithinThreeSigma) {
    constexpr int kSeeds = 10000;
    std::array<int, 10> counts{};
    for (int s = 0; s < kSeeds; ++s) {
        const TaskInstance t = generate_task(static_cast<std::uint64_t>(s), 3, 10);
        ASSERT_EQ(t.answer.size(), 1u);
        ++counts[static_cast<std::size_t>(t.answer[0])];
    }
    const double p = 0.1, mean = kSeeds * p, sigma = std::sqrt(kSeeds * p * (1 - p));
    for (int r = 0; r < 10; ++r) EXPECT_LE(std::abs(counts[r] - mean), 3 * sigma) << "residue " << r;
}

TEST(GenerateTask, RejectsInvalidArguments) {
    EXPECT_THROW(generate_task(1, 0, 10), ContractError);
    EXPECT_THROW(generate_task(1, 2, 1), ContractError);
    EXPECT_THROW(generate_task(1, 2, 17), ContractError);
}

TEST(GoldResponse, ScoresOneForEveryInstance) {
    for (std::size_t depth = 1; depth <= 6; ++depth) {
        for (std::uint64_t s = 0; s < 200; ++s) {
            const TaskInstance t = generate_task(s, depth, 10);
            const auto gold = gold_response(t);
            EXPECT_EQ(gold.size(), minimal_response_length(depth));
            EXPECT_EQ(score(gold, t), 1.0);
        }
    }
}

TEST(GoldResponse, MinimalLengthGrowsWithDepth) {
    for (std::size_t d = 1; d < 20; ++d) EXPECT_LT(minimal_response_length(d), minimal_response_length(d + 1));
}

TEST(Score, ExactAnswerSpan) {
    TaskInstance t;
    t.answer = {4, 2};
    EXPECT_EQ(score(std::vector<int>{5, Vocabulary::kAnswer, 4, 2, Vocabulary::kEnd}, t), 1.0);
    // The last marker before the terminator counts.
    EXPECT_EQ(score(std::vector<int>{Vocabulary::kAnswer, 9, Vocabulary::kAnswer, 4, 2, Vocabulary::kEnd}, t), 1.0);
}

TEST(Score, MissingTerminatorIsZero) {
    TaskInstance t;
    t.answer = {4};
    EXPECT_EQ(score(std::vector<int>{Vocabulary::kAnswer, 4}, t), 0.0);
    EXPECT_EQ(score(std::vector<int>{}, t), 0.0);
}

TEST(Score, WrongOrderIsZero) {
    TaskInstance t;
    t.answer = {4, 2};
    EXPECT_EQ(score(std::vector<int>{Vocabulary::kAnswer, 2, 4, Vocabulary::kEnd}, t), 0.0);
}

TEST(Score, MissingMarkerOrExtraTokensIsZero) {
    TaskInstance t;
    t.answer = {4};
    EXPECT_EQ(score(std::vector<int>{4, Vocabulary::kEnd}, t), 0.0);
    EXPECT_EQ(score(std::vector<int>{Vocabulary::kAnswer, 4, 4, Vocabulary::kEnd}, t), 0.0);
}

TEST(LoadDataset, EmptyFileGivesEmptyList) {
    const fs::path p = scratch("empty.jsonl");
    write_text(p, "");
    const LoadedDataset d = load_dataset(p, Vocabulary());
    EXPECT_TRUE(d.instances.empty());
    EXPECT_TRUE(d.diagnostics.empty());
}

TEST(LoadDataset, MalformedLineIsReportedAndSkipped) {
    const fs::path p = scratch("mixed.jsonl");
    write_text(p, "{\"prompt\": [\"S\", 3, \"+\", \"4\", \"?\"], \"answer\": [7]}\n{\"prompt\": [1]}\n");
    const LoadedDataset d = load_dataset(p, Vocabulary());
    ASSERT_EQ(d.instances.size(), 1u);
    EXPECT_EQ(d.instances[0].answer, std::vector<int>{7});
    ASSERT_EQ(d.diagnostics.size(), 1u);
    EXPECT_EQ(d.diagnostics[0].line, 2u);
    EXPECT_NE(d.diagnostics[0].message.find("answer"), std::string::npos);
}

TEST(LoadDataset, UnknownSymbolAndOutOfRangeIdAreReported) {
    const fs::path p = scratch("bad.jsonl");
    write_text(p, "{\"prompt\": [\"zz\"], \"answer\": [1]}\n{\"prompt\": [99], \"answer\": [1]}\nnot json\n");
    const LoadedDataset d = load_dataset(p, Vocabulary());
    EXPECT_TRUE(d.instances.empty());
    ASSERT_EQ(d.diagnostics.size(), 3u);
    EXPECT_EQ(d.diagnostics[2].line, 3u);
}

TEST(LoadDataset, MissingFileIsAnIoError) {
    EXPECT_THROW(load_dataset(scratch("does_not_exist.jsonl"), Vocabulary()), IoError);
}

TEST(LoadDataset, RoundTripReproducesInstances) {
    std::vector<TaskInstance> tasks;
    for (std::uint64_t s = 0; s < 20; ++s) tasks.push_back(generate_task(s, 1 + s % 4, 7 + static_cast<int>(s % 5)));
    const fs::path p = scratch("round_trip.jsonl");
    const Vocabulary v;
    write_dataset(p, tasks, v);
    const LoadedDataset d = load_dataset(p, v);
    EXPECT_TRUE(d.diagnostics.empty());
    EXPECT_EQ(d.instances, tasks);
}

}  // namespace
}  // namespace pte

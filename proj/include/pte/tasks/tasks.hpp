#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace pte {

/// Symbol <-> id table for the synthetic arithmetic language.
///
/// ids 0..15 are the residues "0".."15", followed by the operators and the
/// structural markers; remaining ids up to vocab_size are reserved "<rN>".
class Vocabulary {
public:
    static constexpr int kMaxResidue = 16;
    static constexpr int kPlus = 16;
    static constexpr int kMinus = 17;
    static constexpr int kTimes = 18;
    static constexpr int kStart = 19;
    static constexpr int kStep = 20;    // ";"
    static constexpr int kEquals = 21;  // "="
    static constexpr int kQuery = 22;   // "?"
    static constexpr int kAnswer = 23;  // "A"
    static constexpr int kEnd = 24;     // "E", terminator
    static constexpr std::size_t kMinSize = 25;

    explicit Vocabulary(std::size_t size = 32);

    std::size_t size() const noexcept { return symbols_.size(); }
    const std::string& symbol(int id) const;
    /// nullopt for unknown symbols.
    std::optional<int> id(const std::string& symbol) const;
    std::string render(std::span<const int> ids) const;

private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> ids_;
};

struct TaskInstance {
    std::vector<int> prompt;
    std::vector<int> answer;
    std::size_t depth = 0;
    std::uint64_t seed = 0;
    int modulus = 0;  // 0 when unknown (loaded datasets)

    friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

enum class Operator : std::uint8_t { add, sub, mul };

struct ChainStep {
    Operator op;
    int operand;
};

/// "S a op b ... ?" for an explicit chain.
TaskInstance make_task(int start, std::span<const ChainStep> steps, int modulus);

/// Random chain over Z_modulus. Multiplication only uses units of the ring,
/// so every step is a bijection and answers are uniform.
TaskInstance generate_task(std::uint64_t seed, std::size_t depth, int modulus);

/// Step-by-step solution: "op b = r ;" per step, then "A r E".
std::vector<int> gold_response(const TaskInstance& task);

/// Generated tokens of a minimal correct response.
std::size_t minimal_response_length(std::size_t depth);

/// 1 iff the span between the last answer marker before the first terminator
/// and that terminator equals the gold answer.
double score(std::span<const int> generated, const TaskInstance& task);

struct DatasetDiagnostic {
    std::size_t line = 0;
    std::string message;
};

struct LoadedDataset {
    std::vector<TaskInstance> instances;
    std::vector<DatasetDiagnostic> diagnostics;
};

/// JSON lines, one {"prompt": [...], "answer": [...]} per line; entries are
/// ids or symbols. Bad lines are reported and skipped. Throws IoError if the
/// file cannot be opened.
LoadedDataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab);
void write_dataset(const std::filesystem::path& path, std::span<const TaskInstance> tasks, const Vocabulary& vocab);

}  // namespace pte

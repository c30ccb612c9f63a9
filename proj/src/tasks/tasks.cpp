#include "pte/tasks/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "pte/errors.hpp"
#include "pte/numerics/random.hpp"

namespace pte {

Vocabulary::Vocabulary(std::size_t size) {
    if (size < kMinSize) {
        throw ConfigError("vocabulary needs at least " + std::to_string(kMinSize) + " symbols");
    }
    for (int i = 0; i < kMaxResidue; ++i) symbols_.push_back(std::to_string(i));
    for (const char* s : {"+", "-", "*", "S", ";", "=", "?", "A", "E"}) symbols_.emplace_back(s);
    while (symbols_.size() < size) symbols_.push_back("<r" + std::to_string(symbols_.size()) + ">");
    for (std::size_t i = 0; i < symbols_.size(); ++i) ids_.emplace(symbols_[i], static_cast<int>(i));
}

const std::string& Vocabulary::symbol(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
        throw ContractError("Vocabulary: id " + std::to_string(id) + " out of range");
    }
    return symbols_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

std::string Vocabulary::render(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) out += ' ';
        out += (id >= 0 && static_cast<std::size_t>(id) < symbols_.size()) ? symbols_[static_cast<std::size_t>(id)]
                                                                             : "<?>";
    }
    return out;
}

namespace {

int op_token(Operator op) {
    switch (op) {
        case Operator::add: return Vocabulary::kPlus;
        case Operator::sub: return Vocabulary::kMinus;
        case Operator::mul: return Vocabulary::kTimes;
    }
    return Vocabulary::kPlus;
}

int apply(Operator op, int acc, int operand, int modulus) {
    switch (op) {
        case Operator::add: return (acc + operand) % modulus;
        case Operator::sub: return ((acc - operand) % modulus + modulus) % modulus;
        case Operator::mul: return (acc * operand) % modulus;
    }
    return acc;
}

void check_modulus(int modulus) {
    if (modulus < 2 || modulus > Vocabulary::kMaxResidue) {
        throw ContractError("modulus must lie in [2, " + std::to_string(Vocabulary::kMaxResidue) + "]");
    }
}

struct ParsedChain {
    int start;
    std::vector<ChainStep> steps;
};

ParsedChain parse_prompt(const TaskInstance& task) {
    const auto& p = task.prompt;
    if (p.size() < 3 || p.front() != Vocabulary::kStart || p.back() != Vocabulary::kQuery || p.size() % 2 == 0) {
        throw ContractError("prompt is not a chain task");
    }
    ParsedChain chain{p[1], {}};
    for (std::size_t i = 2; i + 1 < p.size(); i += 2) {
        Operator op;
        switch (p[i]) {
            case Vocabulary::kPlus: op = Operator::add; break;
            case Vocabulary::kMinus: op = Operator::sub; break;
            case Vocabulary::kTimes: op = Operator::mul; break;
            default: throw ContractError("prompt is not a chain task");
        }
        chain.steps.push_back({op, p[i + 1]});
    }
    return chain;
}

}  // namespace

TaskInstance make_task(int start, std::span<const ChainStep> steps, int modulus) {
    check_modulus(modulus);
    if (steps.empty()) throw ContractError("make_task: depth must be >= 1");
    TaskInstance task;
    task.modulus = modulus;
    task.depth = steps.size();
    task.prompt = {Vocabulary::kStart, start % modulus};
    int acc = start % modulus;
    for (const ChainStep& s : steps) {
        task.prompt.push_back(op_token(s.op));
        task.prompt.push_back(s.operand % modulus);
        acc = apply(s.op, acc, s.operand % modulus, modulus);
    }
    task.prompt.push_back(Vocabulary::kQuery);
    task.answer = {acc};
    return task;
}

TaskInstance generate_task(std::uint64_t seed, std::size_t depth, int modulus) {
    check_modulus(modulus);
    if (depth < 1) throw ContractError("generate_task: depth must be >= 1");
    Rng rng(derive_seed(seed, "task"));
    auto draw = [&rng](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
    std::vector<int> units;
    for (int u = 1; u < modulus; ++u) {
        if (std::gcd(u, modulus) == 1) units.push_back(u);
    }
    const int start = draw(modulus);
    std::vector<ChainStep> steps;
    for (std::size_t i = 0; i < depth; ++i) {
        const auto op = static_cast<Operator>(draw(3));
        const int operand = op == Operator::mul ? units[static_cast<std::size_t>(draw(static_cast<int>(units.size())))]
                                                : draw(modulus);
        steps.push_back({op, operand});
    }
    TaskInstance task = make_task(start, steps, modulus);
    task.seed = seed;
    return task;
}

std::vector<int> gold_response(const TaskInstance& task) {
    const ParsedChain chain = parse_prompt(task);
    const int modulus = task.modulus > 0 ? task.modulus : Vocabulary::kMaxResidue;
    std::vector<int> out;
    int acc = chain.start;
    for (const ChainStep& s : chain.steps) {
        acc = apply(s.op, acc, s.operand, modulus);
        out.insert(out.end(), {op_token(s.op), s.operand, Vocabulary::kEquals, acc, Vocabulary::kStep});
    }
    out.push_back(Vocabulary::kAnswer);
    out.insert(out.end(), task.answer.begin(), task.answer.end());
    out.push_back(Vocabulary::kEnd);
    return out;
}

std::size_t minimal_response_length(std::size_t depth) { return 5 * depth + 3; }

double score(std::span<const int> generated, const TaskInstance& task) {
    const auto end = std::find(generated.begin(), generated.end(), Vocabulary::kEnd);
    if (end == generated.end()) return 0.0;
    const auto rbegin = std::make_reverse_iterator(end);
    const auto rmarker = std::find(rbegin, generated.rend(), Vocabulary::kAnswer);
    if (rmarker == generated.rend()) return 0.0;
    const auto first = rmarker.base();  // one past the marker
    if (static_cast<std::size_t>(end - first) != task.answer.size()) return 0.0;
    return std::equal(first, end, task.answer.begin()) ? 1.0 : 0.0;
}

namespace {

std::vector<int> parse_tokens(const nlohmann::json& arr, const Vocabulary& vocab, const char* field) {
    if (!arr.is_array() || arr.empty()) {
        throw std::runtime_error(std::string("field '") + field + "' must be a non-empty array");
    }
    std::vector<int> out;
    for (const auto& item : arr) {
        if (item.is_number_integer()) {
            const auto v = item.get<long long>();
            if (v < 0 || static_cast<std::size_t>(v) >= vocab.size()) {
                throw std::runtime_error(std::string("id ") + std::to_string(v) + " in '" + field +
                                         "' is outside the vocabulary");
            }
            out.push_back(static_cast<int>(v));
        } else if (item.is_string()) {
            auto id = vocab.id(item.get<std::string>());
            if (!id) {
                throw std::runtime_error("unknown symbol '" + item.get<std::string>() + "' in '" + field + "'");
            }
            out.push_back(*id);
        } else {
            throw std::runtime_error(std::string("entries of '") + field + "' must be ids or symbols");
        }
    }
    return out;
}

}  // namespace

LoadedDataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path.string());
    LoadedDataset result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (!j.is_object()) throw std::runtime_error("line is not a JSON object");
            if (!j.contains("prompt")) throw std::runtime_error("missing field 'prompt'");
            if (!j.contains("answer")) throw std::runtime_error("missing field 'answer'");
            TaskInstance task;
            task.prompt = parse_tokens(j["prompt"], vocab, "prompt");
            task.answer = parse_tokens(j["answer"], vocab, "answer");
            task.depth = j.value("depth", std::size_t{0});
            task.seed = j.value("seed", std::uint64_t{0});
            task.modulus = j.value("modulus", 0);
            result.instances.push_back(std::move(task));
        } catch (const std::exception& e) {
            result.diagnostics.push_back({line_no, e.what()});
        }
    }
    return result;
}

void write_dataset(const std::filesystem::path& path, std::span<const TaskInstance> tasks, const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset " + path.string());
    for (const auto& t : tasks) {
        nlohmann::json j;
        auto symbols = [&vocab](const std::vector<int>& ids) {
            nlohmann::json arr = nlohmann::json::array();
            for (int id : ids) arr.push_back(vocab.symbol(id));
            return arr;
        };
        j["prompt"] = symbols(t.prompt);
        j["answer"] = symbols(t.answer);
        j["depth"] = t.depth;
        j["seed"] = t.seed;
        j["modulus"] = t.modulus;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing dataset " + path.string());
}

}  // namespace pte

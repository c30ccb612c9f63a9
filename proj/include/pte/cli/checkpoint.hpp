#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pte/adapter/thought_encoding.hpp"
#include "pte/model/transformer.hpp"
#include "pte/numerics/optim.hpp"

namespace pte {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// File layout: 8-byte magic, u64 header length, JSON header, the tensors as
/// little-endian f64 in header order, then a CRC32 (u32) of every preceding byte.
struct Checkpoint {
    ModelParams model;
    ModelParams reference;
    AdapterBank bank;
    AdamState adam;
    std::uint64_t iteration = 0;
    std::uint64_t seed = 0;
    nlohmann::json run_config = nlohmann::json::object();

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct TensorEntry {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::uint64_t offset = 0;  // bytes from the start of the binary section
};

struct CheckpointHeader {
    std::uint32_t format_version = 0;
    nlohmann::json json;
    std::vector<TensorEntry> tensors;
};

/// Writes atomically (temporary file + rename). Throws IoError.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

/// Throws IoError on a missing or truncated file, a version mismatch, a
/// checksum failure or a tensor that does not fit the stored configs.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Reads only the magic, length and JSON header.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

}  // namespace pte

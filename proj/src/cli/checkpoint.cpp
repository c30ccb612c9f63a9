#include "pte/cli/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "pte/cli/config.hpp"
#include "pte/errors.hpp"

namespace pte {

namespace {

constexpr char kMagic[8] = {'P', 'T', 'E', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

std::uint32_t crc32_of(const char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

struct Named {
    std::string name;
    const Matrix* m;
};

std::vector<Named> tensors_of(const Checkpoint& c) {
    std::vector<Named> out;
    for (const auto& [n, m] : c.model.named()) out.push_back({"model." + n, m});
    for (const auto& [n, m] : c.reference.named()) out.push_back({"reference." + n, m});
    for (const auto& [n, m] : c.bank.named()) out.push_back({"bank." + n, m});
    for (std::size_t i = 0; i < c.adam.first_moment.size(); ++i) {
        out.push_back({"adam.m." + std::to_string(i), &c.adam.first_moment[i]});
    }
    for (std::size_t i = 0; i < c.adam.second_moment.size(); ++i) {
        out.push_back({"adam.v." + std::to_string(i), &c.adam.second_moment[i]});
    }
    return out;
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CheckpointHeader parse_header(const std::string& text, const std::string& where) {
    CheckpointHeader h;
    try {
        h.json = nlohmann::json::parse(text);
        h.format_version = h.json.at("format_version").get<std::uint32_t>();
        if (h.format_version != kCheckpointVersion) {
            throw IoError("checkpoint " + where + " has format_version " + std::to_string(h.format_version) +
                          ", expected " + std::to_string(kCheckpointVersion));
        }
        for (const auto& t : h.json.at("tensors")) {
            h.tensors.push_back({t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                                 t.at("cols").get<std::size_t>(), t.at("offset").get<std::uint64_t>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + where + " has a malformed header: " + e.what());
    }
    return h;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["model_config"] = to_json(c.model.config);
    header["reference_config"] = to_json(c.reference.config);
    header["pte_config"] = to_json(c.bank.config);
    header["bank_layers"] = c.bank.n_layers;
    header["bank_d_model"] = c.bank.d_model;
    header["iteration"] = c.iteration;
    header["seed"] = c.seed;
    header["adam_step"] = c.adam.step;
    header["run_config"] = c.run_config;
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    const auto tensors = tensors_of(c);
    for (const auto& t : tensors) {
        entries.push_back({{"name", t.name}, {"rows", t.m->rows()}, {"cols", t.m->cols()}, {"offset", offset}});
        offset += 8ull * t.m->size();
    }
    header["tensors"] = entries;
    const std::string text = header.dump();

    std::string blob(kMagic, sizeof kMagic);
    put_u64(blob, text.size());
    blob += text;
    for (const auto& t : tensors) {
        blob.append(reinterpret_cast<const char*>(t.m->data().data()), 8 * t.m->size());
    }
    put_u32(blob, crc32_of(blob.data(), blob.size()));

    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        out.flush();
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint64_t length = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError(path.string() + " is not a checkpoint");
    }
    if (!in.read(reinterpret_cast<char*>(&length), 8)) throw IoError("checkpoint " + path.string() + " is truncated");
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
        throw IoError("checkpoint " + path.string() + " is truncated");
    }
    return parse_header(text, path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string blob = read_all(path);
    const std::string where = path.string();
    if (blob.size() < 8 + 8 + 4 || std::memcmp(blob.data(), kMagic, 8) != 0) {
        throw IoError(where + " is not a checkpoint or is truncated");
    }
    std::uint64_t length = 0;
    std::memcpy(&length, blob.data() + 8, 8);
    if (length > blob.size() - 20) throw IoError("checkpoint " + where + " is truncated");
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, blob.data() + blob.size() - 4, 4);
    if (crc32_of(blob.data(), blob.size() - 4) != stored_crc) {
        throw IoError("checkpoint " + where + " failed its checksum");
    }
    const CheckpointHeader h = parse_header(blob.substr(16, length), where);
    const std::size_t data_begin = 16 + length;
    const std::size_t data_size = blob.size() - 4 - data_begin;

    Checkpoint c;
    try {
        const auto& j = h.json;
        c.iteration = j.at("iteration").get<std::uint64_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.run_config = j.at("run_config");
        const ModelConfig mc = model_config_from_json(j.at("model_config"));
        const ModelConfig rc = model_config_from_json(j.at("reference_config"));
        const PteConfig pc = pte_config_from_json(j.at("pte_config"));
        c.model = ModelParams::initialize(mc, 0);
        c.reference = ModelParams::initialize(rc, 0);
        ModelConfig bank_shape = mc;
        bank_shape.n_layers = j.at("bank_layers").get<std::size_t>();
        bank_shape.d_model = j.at("bank_d_model").get<std::size_t>();
        c.bank = AdapterBank::initialize(pc, bank_shape, 0);
        c.adam.step = j.at("adam_step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + where + " has a malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw IoError("checkpoint " + where + " stores an invalid config: " + e.what());
    }

    std::map<std::string, const TensorEntry*> by_name;
    std::size_t moments = 0;
    for (const auto& t : h.tensors) {
        by_name[t.name] = &t;
        if (t.name.rfind("adam.m.", 0) == 0) ++moments;
    }
    c.adam.first_moment.resize(moments);
    c.adam.second_moment.resize(moments);
    for (std::size_t i = 0; i < moments; ++i) {
        const auto it = by_name.find("adam.m." + std::to_string(i));
        if (it == by_name.end()) throw IoError("checkpoint " + where + " lacks adam.m." + std::to_string(i));
        c.adam.first_moment[i] = Matrix(it->second->rows, it->second->cols);
        c.adam.second_moment[i] = Matrix(it->second->rows, it->second->cols);
    }

    auto fill = [&](const std::string& name, Matrix& m) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint " + where + " lacks tensor " + name);
        const TensorEntry& t = *it->second;
        if (t.rows != m.rows() || t.cols != m.cols()) {
            throw IoError("checkpoint " + where + ": tensor " + name + " has shape " + std::to_string(t.rows) + "x" +
                          std::to_string(t.cols) + ", expected " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
        }
        const std::uint64_t bytes = 8ull * m.size();
        if (t.offset > data_size || bytes > data_size - t.offset) {
            throw IoError("checkpoint " + where + ": tensor " + name + " lies outside the data section");
        }
        std::memcpy(m.data().data(), blob.data() + data_begin + t.offset, bytes);
    };
    for (auto& [n, m] : c.model.named()) fill("model." + n, *m);
    for (auto& [n, m] : c.reference.named()) fill("reference." + n, *m);
    for (auto& [n, m] : c.bank.named()) fill("bank." + n, *m);
    for (std::size_t i = 0; i < moments; ++i) {
        fill("adam.m." + std::to_string(i), c.adam.first_moment[i]);
        fill("adam.v." + std::to_string(i), c.adam.second_moment[i]);
    }
    if (by_name.size() != tensors_of(c).size()) {
        throw IoError("checkpoint " + where + " holds tensors that match no parameter");
    }
    return c;
}

}  // namespace pte

#include "pte/cli/config.hpp"

#include <fstream>

#include "pte/errors.hpp"

namespace pte {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const char* kind(const json& j) {
    if (j.is_number_unsigned()) return "non-negative integer";
    if (j.is_number_integer()) return "integer";
    if (j.is_number()) return "number";
    return j.type_name();
}

bool compatible(const json& def, const json& v) {
    if (def.is_number_unsigned()) return v.is_number_unsigned();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number_float()) return v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    if (def.is_object()) return v.is_object();
    return false;
}

void merge(json& base, const json& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError(path.empty() ? "config must be a JSON object" : path + ": expected object");
    for (const auto& [key, value] : user.items()) {
        const std::string here = join(path, key);
        if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
        json& slot = base[key];
        if (!compatible(slot, value)) {
            throw ConfigError(here + ": expected " + kind(slot) + ", got " + kind(value));
        }
        if (slot.is_object()) {
            merge(slot, value, here);
        } else {
            slot = value;
        }
    }
}

template <class T>
T field(const json& j, const char* key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(join(path, key) + ": " + e.what());
    }
}

std::string scheme_name(PositionalScheme s) { return s == PositionalScheme::rotary ? "rotary" : "none"; }
std::string indexing_name(PositionIndexing p) { return p == PositionIndexing::absolute ? "absolute" : "slot"; }
std::string normalize_name(NormalizeMode m) { return m == NormalizeMode::row_rms ? "row_rms" : "segment_mean"; }
std::string init_name(StateInit s) { return s == StateInit::global_tokens ? "global_tokens" : "zero"; }

PositionalScheme scheme_from(const std::string& s) {
    if (s == "rotary") return PositionalScheme::rotary;
    if (s == "none") return PositionalScheme::none;
    throw ConfigError("model.positional_scheme must be rotary or none, got '" + s + "'");
}
PositionIndexing indexing_from(const std::string& s) {
    if (s == "absolute") return PositionIndexing::absolute;
    if (s == "slot") return PositionIndexing::slot;
    throw ConfigError("model.position_indexing must be absolute or slot, got '" + s + "'");
}
NormalizeMode normalize_from(const std::string& s) {
    if (s == "row_rms") return NormalizeMode::row_rms;
    if (s == "segment_mean") return NormalizeMode::segment_mean;
    throw ConfigError("pte.normalize must be row_rms or segment_mean, got '" + s + "'");
}
StateInit init_from(const std::string& s) {
    if (s == "global_tokens") return StateInit::global_tokens;
    if (s == "zero") return StateInit::zero;
    throw ConfigError("pte.state_init must be global_tokens or zero, got '" + s + "'");
}

json to_json(const SamplingConfig& s) {
    return {{"temperature", s.temperature},
            {"max_new_tokens", s.max_new_tokens},
            {"window", s.window},
            {"eviction_ratio", s.eviction_ratio},
            {"greedy", s.greedy}};
}

json to_json(const TrainConfig& t) {
    return {{"group_size", t.group_size},
            {"kl_weight", t.kl_weight},
            {"reward_eps", t.reward_eps},
            {"learning_rate", t.learning_rate},
            {"max_grad_norm", t.max_grad_norm},
            {"batch_size", t.batch_size},
            {"iterations", t.iterations},
            {"checkpoint_every", t.checkpoint_every},
            {"plateau_patience", t.plateau_patience},
            {"plateau_delta", t.plateau_delta},
            {"freeze_a", t.freeze_a},
            {"train_base", t.train_base}};
}

json to_json(const PretrainConfig& p) {
    return {{"iterations", p.iterations},
            {"batch_size", p.batch_size},
            {"learning_rate", p.learning_rate},
            {"max_grad_norm", p.max_grad_norm}};
}

json to_json(const TaskConfig& t) {
    return {{"depth", t.depth}, {"modulus", t.modulus}, {"dataset", t.dataset}, {"eval_size", t.eval_size}};
}

json to_json(const EvalConfig& e) {
    return {{"checkpoint", e.checkpoint},
            {"windows", e.windows},
            {"use_adapter", e.use_adapter},
            {"report_format", e.report_format}};
}

json to_json(const SweepConfig& s) { return {{"axis", s.axis}, {"values", json(s.values)}}; }

json to_json(const GradcheckConfig& g) {
    return {{"step", g.step},
            {"tolerance", g.tolerance},
            {"max_parameters", g.max_parameters},
            {"members", g.members},
            {"response_tokens", g.response_tokens},
            {"thinking_slots", g.thinking_slots},
            {"adapter_a_std", g.adapter_a_std}};
}

}  // namespace

json to_json(const ModelConfig& m) {
    return {{"n_layers", m.n_layers},
            {"d_model", m.d_model},
            {"n_heads", m.n_heads},
            {"d_head", m.d_head},
            {"d_ff", m.d_ff},
            {"vocab_size", m.vocab_size},
            {"max_positions", m.max_positions},
            {"positional_scheme", scheme_name(m.positional_scheme)},
            {"position_indexing", indexing_name(m.position_indexing)},
            {"rope_base", m.rope_base},
            {"norm_eps", m.norm_eps}};
}

json to_json(const PteConfig& p) {
    std::vector<std::string> targets;
    for (Projection t : p.targets) targets.push_back(to_string(t));
    return {{"global_tokens", p.global_tokens},
            {"latent_dim", p.latent_dim},
            {"normalize", normalize_name(p.normalize)},
            {"state_init", init_name(p.state_init)},
            {"targets", targets},
            {"shared_global_tokens", p.shared_global_tokens},
            {"init_std", p.init_std}};
}

json to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"out", c.out},
            {"init_checkpoint", c.init_checkpoint},
            {"model", to_json(c.model)},
            {"pte", to_json(c.pte)},
            {"sampling", to_json(c.sampling)},
            {"train", to_json(c.train)},
            {"pretrain", to_json(c.pretrain)},
            {"task", to_json(c.task)},
            {"eval", to_json(c.eval)},
            {"sweep", to_json(c.sweep)},
            {"gradcheck", to_json(c.gradcheck)}};
}

ModelConfig model_config_from_json(const json& j) {
    json merged = to_json(ModelConfig{});
    merge(merged, j, "model");
    const std::string p = "model";
    ModelConfig m;
    m.n_layers = field<std::size_t>(merged, "n_layers", p);
    m.d_model = field<std::size_t>(merged, "d_model", p);
    m.n_heads = field<std::size_t>(merged, "n_heads", p);
    m.d_head = field<std::size_t>(merged, "d_head", p);
    m.d_ff = field<std::size_t>(merged, "d_ff", p);
    m.vocab_size = field<std::size_t>(merged, "vocab_size", p);
    m.max_positions = field<std::size_t>(merged, "max_positions", p);
    m.positional_scheme = scheme_from(field<std::string>(merged, "positional_scheme", p));
    m.position_indexing = indexing_from(field<std::string>(merged, "position_indexing", p));
    m.rope_base = field<double>(merged, "rope_base", p);
    m.norm_eps = field<double>(merged, "norm_eps", p);
    return m;
}

PteConfig pte_config_from_json(const json& j) {
    json merged = to_json(PteConfig{});
    merge(merged, j, "pte");
    const std::string p = "pte";
    PteConfig c;
    c.global_tokens = field<std::size_t>(merged, "global_tokens", p);
    c.latent_dim = field<std::size_t>(merged, "latent_dim", p);
    c.normalize = normalize_from(field<std::string>(merged, "normalize", p));
    c.state_init = init_from(field<std::string>(merged, "state_init", p));
    c.targets.clear();
    for (const auto& name : field<std::vector<std::string>>(merged, "targets", p)) {
        try {
            c.targets.push_back(projection_from_string(name));
        } catch (const std::exception&) {
            throw ConfigError("pte.targets: unknown projection '" + name + "' (expected q, k, v or o)");
        }
    }
    c.shared_global_tokens = field<bool>(merged, "shared_global_tokens", p);
    c.init_std = field<double>(merged, "init_std", p);
    return c;
}

RunConfig run_config_from_json(const json& j) {
    json m = to_json(RunConfig{});
    merge(m, j, "");
    RunConfig c;
    c.seed = field<std::uint64_t>(m, "seed", "");
    c.out = field<std::string>(m, "out", "");
    c.init_checkpoint = field<std::string>(m, "init_checkpoint", "");
    c.model = model_config_from_json(m["model"]);
    c.pte = pte_config_from_json(m["pte"]);

    const json& s = m["sampling"];
    c.sampling.temperature = field<double>(s, "temperature", "sampling");
    c.sampling.max_new_tokens = field<std::size_t>(s, "max_new_tokens", "sampling");
    c.sampling.window = field<std::size_t>(s, "window", "sampling");
    c.sampling.eviction_ratio = field<double>(s, "eviction_ratio", "sampling");
    c.sampling.greedy = field<bool>(s, "greedy", "sampling");

    const json& t = m["train"];
    c.train.group_size = field<std::size_t>(t, "group_size", "train");
    c.train.kl_weight = field<double>(t, "kl_weight", "train");
    c.train.reward_eps = field<double>(t, "reward_eps", "train");
    c.train.learning_rate = field<double>(t, "learning_rate", "train");
    c.train.max_grad_norm = field<double>(t, "max_grad_norm", "train");
    c.train.batch_size = field<std::size_t>(t, "batch_size", "train");
    c.train.iterations = field<std::size_t>(t, "iterations", "train");
    c.train.checkpoint_every = field<std::size_t>(t, "checkpoint_every", "train");
    c.train.plateau_patience = field<std::size_t>(t, "plateau_patience", "train");
    c.train.plateau_delta = field<double>(t, "plateau_delta", "train");
    c.train.freeze_a = field<bool>(t, "freeze_a", "train");
    c.train.train_base = field<bool>(t, "train_base", "train");

    const json& pt = m["pretrain"];
    c.pretrain.iterations = field<std::size_t>(pt, "iterations", "pretrain");
    c.pretrain.batch_size = field<std::size_t>(pt, "batch_size", "pretrain");
    c.pretrain.learning_rate = field<double>(pt, "learning_rate", "pretrain");
    c.pretrain.max_grad_norm = field<double>(pt, "max_grad_norm", "pretrain");

    const json& tk = m["task"];
    c.task.depth = field<std::size_t>(tk, "depth", "task");
    c.task.modulus = field<int>(tk, "modulus", "task");
    c.task.dataset = field<std::string>(tk, "dataset", "task");
    c.task.eval_size = field<std::size_t>(tk, "eval_size", "task");

    const json& e = m["eval"];
    c.eval.checkpoint = field<std::string>(e, "checkpoint", "eval");
    for (const auto& w : e.at("windows")) {
        if (!w.is_number_unsigned()) throw ConfigError("eval.windows: entries must be non-negative integers");
    }
    c.eval.windows = field<std::vector<std::size_t>>(e, "windows", "eval");
    c.eval.use_adapter = field<bool>(e, "use_adapter", "eval");
    c.eval.report_format = field<std::string>(e, "report_format", "eval");

    const json& sw = m["sweep"];
    c.sweep.axis = field<std::string>(sw, "axis", "sweep");
    for (const auto& v : sw.at("values")) {
        if (!v.is_number()) throw ConfigError("sweep.values: entries must be numbers");
    }
    c.sweep.values = field<std::vector<double>>(sw, "values", "sweep");

    const json& g = m["gradcheck"];
    c.gradcheck.step = field<double>(g, "step", "gradcheck");
    c.gradcheck.tolerance = field<double>(g, "tolerance", "gradcheck");
    c.gradcheck.max_parameters = field<std::size_t>(g, "max_parameters", "gradcheck");
    c.gradcheck.members = field<std::size_t>(g, "members", "gradcheck");
    c.gradcheck.response_tokens = field<std::size_t>(g, "response_tokens", "gradcheck");
    c.gradcheck.thinking_slots = field<std::size_t>(g, "thinking_slots", "gradcheck");
    c.gradcheck.adapter_a_std = field<double>(g, "adapter_a_std", "gradcheck");
    c.validate();
    return c;
}

void RunConfig::validate() const {
    model.validate();
    pte.validate();
    sampling.validate();
    train.validate();
    pretrain.validate();
    if (out.empty()) throw ConfigError("out must not be empty");
    if (task.depth < 1) throw ConfigError("task.depth must be >= 1");
    if (task.modulus < 2 || task.modulus > Vocabulary::kMaxResidue) {
        throw ConfigError("task.modulus must lie in [2, " + std::to_string(Vocabulary::kMaxResidue) + "]");
    }
    if (model.vocab_size < Vocabulary::kMinSize) {
        throw ConfigError("model.vocab_size must be >= " + std::to_string(Vocabulary::kMinSize) +
                          " for the task vocabulary");
    }
    if (task.eval_size < 1) throw ConfigError("task.eval_size must be >= 1");
    if (eval.windows.empty()) throw ConfigError("eval.windows must not be empty");
    if (eval.report_format != "csv" && eval.report_format != "json") {
        throw ConfigError("eval.report_format must be csv or json");
    }
    if (!(gradcheck.step > 0.0)) throw ConfigError("gradcheck.step must be > 0");
    if (!(gradcheck.tolerance > 0.0)) throw ConfigError("gradcheck.tolerance must be > 0");
    if (gradcheck.members < 2) throw ConfigError("gradcheck.members must be >= 2");
    if (gradcheck.response_tokens < 2) throw ConfigError("gradcheck.response_tokens must be >= 2");
    if (gradcheck.thinking_slots < 1) throw ConfigError("gradcheck.thinking_slots must be >= 1");
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config " + path.string());
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j);
}

}  // namespace pte

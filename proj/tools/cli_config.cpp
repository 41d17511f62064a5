#include "cli_config.hpp"

#include <fstream>

namespace qedit::cli {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw Error(ErrorKind::config, "section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw Error(ErrorKind::config, "unknown key '" + k + "' in section '" + section + "'");
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::config, "bad value for '" + section + "." + key + "'");
    }
}

}  // namespace

void CliConfig::propagate_seed() {
    stream.seed = seed;
    model.seed = seed;
    pretrain.seed = seed;
    corpus.seed = seed;
    trace.seed = seed;
    run.seed = seed;
}

void CliConfig::validate() const {
    if (world.n_entities == 0 || world.n_relations == 0 || world.n_facts == 0) {
        throw Error(ErrorKind::config, "world sizes must be positive");
    }
    if (stream.edits == 0) throw Error(ErrorKind::config, "stream.edits must be at least 1");
    if (!(stream.chain_fraction >= 0.0 && stream.chain_fraction < 1.0)) {
        throw Error(ErrorKind::config, "stream.chain_fraction must lie in [0, 1)");
    }
    if (stream.n_rephrase == 0) throw Error(ErrorKind::config, "stream.n_rephrase must be at least 1");
    if (pretrain.lr <= 0.0) throw Error(ErrorKind::config, "pretrain.lr must be positive");
    if (pretrain.batch_size == 0) throw Error(ErrorKind::config, "pretrain.batch_size must be at least 1");
    if (trace.noise_samples == 0) throw Error(ErrorKind::config, "trace.noise_samples must be at least 1");
    if (trace_facts == 0) throw Error(ErrorKind::config, "trace.facts must be at least 1");
    ModelConfig m = model;
    m.vocab_size = 1;  // known only once the world exists
    m.validate();
    run.validate();
}

json to_json(const CliConfig& c) {
    return {{"seed", c.seed},
            {"world", {{"n_entities", c.world.n_entities}, {"n_relations", c.world.n_relations}, {"n_facts", c.world.n_facts}}},
            {"stream",
             {{"edits", c.stream.edits},
              {"chain_fraction", c.stream.chain_fraction},
              {"n_rephrase", c.stream.n_rephrase},
              {"n_locality", c.stream.n_locality},
              {"max_chain_gap", c.stream.max_chain_gap}}},
            {"model",
             {{"n_layers", c.model.n_layers},
              {"d_model", c.model.d_model},
              {"d_ff", c.model.d_ff},
              {"n_heads", c.model.n_heads},
              {"max_seq", c.model.max_seq},
              {"activation", to_string(c.model.activation)}}},
            {"pretrain",
             {{"steps", c.pretrain.steps},
              {"lr", c.pretrain.lr},
              {"batch_size", c.pretrain.batch_size},
              {"weight_decay", c.pretrain.weight_decay},
              {"prefixed_copies", c.corpus.prefixed_copies},
              {"max_prefix", c.corpus.max_prefix}}},
            {"trace", {{"noise_scale", c.trace.noise_scale}, {"noise_samples", c.trace.noise_samples}, {"facts", c.trace_facts}}},
            {"run", qedit::to_json(c.run)}};
}

CliConfig config_from_json(const json& j, CliConfig c) {
    check_keys(j, "config", {"seed", "world", "stream", "model", "pretrain", "trace", "run"});
    read(j, "seed", c.seed, "config");
    if (j.contains("world")) {
        const auto& w = j["world"];
        check_keys(w, "world", {"n_entities", "n_relations", "n_facts"});
        read(w, "n_entities", c.world.n_entities, "world");
        read(w, "n_relations", c.world.n_relations, "world");
        read(w, "n_facts", c.world.n_facts, "world");
    }
    if (j.contains("stream")) {
        const auto& s = j["stream"];
        check_keys(s, "stream", {"edits", "chain_fraction", "n_rephrase", "n_locality", "max_chain_gap"});
        read(s, "edits", c.stream.edits, "stream");
        read(s, "chain_fraction", c.stream.chain_fraction, "stream");
        read(s, "n_rephrase", c.stream.n_rephrase, "stream");
        read(s, "n_locality", c.stream.n_locality, "stream");
        read(s, "max_chain_gap", c.stream.max_chain_gap, "stream");
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m, "model", {"n_layers", "d_model", "d_ff", "n_heads", "max_seq", "activation"});
        read(m, "n_layers", c.model.n_layers, "model");
        read(m, "d_model", c.model.d_model, "model");
        read(m, "d_ff", c.model.d_ff, "model");
        read(m, "n_heads", c.model.n_heads, "model");
        read(m, "max_seq", c.model.max_seq, "model");
        std::string act = to_string(c.model.activation);
        read(m, "activation", act, "model");
        try {
            c.model.activation = activation_from_string(act);
        } catch (const Error& e) {
            throw Error(ErrorKind::config, e.what());
        }
    }
    if (j.contains("pretrain")) {
        const auto& p = j["pretrain"];
        check_keys(p, "pretrain", {"steps", "lr", "batch_size", "weight_decay", "prefixed_copies", "max_prefix"});
        read(p, "steps", c.pretrain.steps, "pretrain");
        read(p, "lr", c.pretrain.lr, "pretrain");
        read(p, "batch_size", c.pretrain.batch_size, "pretrain");
        read(p, "weight_decay", c.pretrain.weight_decay, "pretrain");
        read(p, "prefixed_copies", c.corpus.prefixed_copies, "pretrain");
        read(p, "max_prefix", c.corpus.max_prefix, "pretrain");
    }
    if (j.contains("trace")) {
        const auto& t = j["trace"];
        check_keys(t, "trace", {"noise_scale", "noise_samples", "facts"});
        read(t, "noise_scale", c.trace.noise_scale, "trace");
        read(t, "noise_samples", c.trace.noise_samples, "trace");
        read(t, "facts", c.trace_facts, "trace");
    }
    if (j.contains("run")) c.run = run_config_from_json(j["run"], c.run);
    c.propagate_seed();
    return c;
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, path.string() + ": " + e.what());
    }
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::data:
        case ErrorKind::input:
        case ErrorKind::trace:
            return kExitConfig;
        case ErrorKind::io:
        case ErrorKind::parse:
            return kExitIo;
        default:
            return kExitNumeric;
    }
}

}  // namespace qedit::cli

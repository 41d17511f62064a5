#pragma once

// The command-line configuration: one JSON document with a section per
// stage. See docs/config.md for the dialect.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "qedit/dataset.hpp"
#include "qedit/harness.hpp"
#include "qedit/model.hpp"
#include "qedit/tracing.hpp"

namespace qedit::cli {

struct CliConfig {
    std::uint64_t seed = 0;
    WorldSizes world;
    StreamOptions stream;
    ModelConfig model;
    PretrainOptions pretrain;
    PretrainCorpusOptions corpus;
    TraceOptions trace;
    std::size_t trace_facts = 20;
    RunConfig run;

    // Pushes `seed` into every stage.
    void propagate_seed();
    void validate() const;
};

nlohmann::json to_json(const CliConfig& config);
// Fields missing from `j` keep their value in `base`; unknown keys and
// ill-typed values are Error(config).
CliConfig config_from_json(const nlohmann::json& j, CliConfig base = {});
// Error(io) when the file is missing, Error(config) when it is not JSON.
nlohmann::json read_json_file(const std::filesystem::path& path);

// Exit status for a library error.
int exit_code(ErrorKind kind);

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitDegraded = 5;

}  // namespace qedit::cli

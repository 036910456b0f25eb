#pragma once

#include <filesystem>

#include <json.hpp>

#include "fimode/datagen.hpp"
#include "fimode/evaluation.hpp"
#include "fimode/model.hpp"
#include "fimode/training.hpp"

// JSON forms of the configuration structs. Readers start from the defaults,
// override the keys present and throw ConfigError on unknown keys or values
// of the wrong type. Key names are the struct field names.

namespace fimode {

using Json = nlohmann::json;

Json to_json(const SolverConfig& cfg);
Json to_json(const GeneratorConfig& cfg);
Json to_json(const ModelConfig& cfg);
Json to_json(const TrainConfig& cfg);
Json to_json(const EvalOptions& cfg);

/// `path` prefixes key names in error messages (e.g. "generator.solver").
SolverConfig solver_from_json(const Json& j, const std::string& path = "solver");
GeneratorConfig generator_from_json(const Json& j, const std::string& path = "generator");
ModelConfig model_from_json(const Json& j, const std::string& path = "model");
TrainConfig train_from_json(const Json& j, const std::string& path = "train");
EvalOptions eval_from_json(const Json& j, const std::string& path = "eval");

/// The whole run configuration: {"generator", "model", "train", "eval"}.
struct RunConfig {
    GeneratorConfig generator;
    ModelConfig model;
    TrainConfig train;
    EvalOptions eval;
};

Json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const Json& j);
/// Throws ParseError for malformed JSON and ConfigError for bad keys.
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace fimode

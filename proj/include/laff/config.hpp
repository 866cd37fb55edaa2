#pragma once

// JSON forms of the configuration structs and the run configuration used by
// the command-line tool. Parsing is strict: unknown keys are ConfigErrors.

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "laff/dataio.hpp"
#include "laff/fusion.hpp"
#include "laff/optim.hpp"

namespace laff {

using Json = nlohmann::json;

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const Json& j);

/// The seed is not part of the JSON form; it comes from RunConfig::seed.
Json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const Json& j);

Json to_json(const RetrievalMetrics& m);

struct DataSettings {
  std::string manifest;
  std::string train_split = "train";
  std::string val_split = "val";
  std::string test_split = "test";
};

struct EvalSettings {
  std::string split = "test";
  std::size_t jaccard_k = 5;
  bool ranked_tsv = false;
};

struct SelectSettings {
  std::size_t top_video = 0;  // 0: keep all but one
  std::size_t top_text = 0;
};

struct RankSettings {
  std::map<std::string, std::string> queries;  // text feature name → file
  std::string split = "test";
  std::size_t top = 0;  // 0: the whole list
};

struct RunConfig {
  std::uint64_t seed = 2022;
  std::size_t threads = 1;
  DataSettings data;
  std::string model_path;
  ModelConfig model;  // empty feature lists are filled from the manifest
  TrainConfig train;
  SynthSpec synth = SynthSpec::desk_default();
  bool synth_binary = true;
  EvalSettings eval;
  SelectSettings select;
  RankSettings rank;
};

Json to_json(const RunConfig& config);
/// Missing keys take their defaults. The seed is copied into train and synth.
RunConfig run_config_from_json(const Json& j);

/// Applies `a.b.c=value`. The value is parsed as JSON when it parses, and is
/// taken as a string otherwise. Intermediate objects are created as needed.
void apply_override(Json& j, const std::string& assignment);

/// Reads `path` (empty: all defaults), applies overrides in order.
RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides);

Json read_json_file(const std::string& path);
void write_json_file(const Json& j, const std::string& path);

}  // namespace laff

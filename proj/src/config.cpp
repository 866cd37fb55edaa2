#include "laff/config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>

#include "laff/errors.hpp"

namespace laff {

namespace {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items()) {
    if (!ok.count(item.key())) throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

// Reads j[key] into out when present, turning type errors into ConfigErrors.
template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
  }
}

std::size_t read_count(const Json& j, const char* key, std::size_t fallback, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
    throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  return it->get<std::size_t>();
}

Json features_json(const std::vector<FeatureDecl>& feats) {
  Json arr = Json::array();
  for (const auto& f : feats) {
    arr.push_back({{"name", f.name}, {"dim", f.dim}, {"level", to_string(f.level)}});
  }
  return arr;
}

std::vector<FeatureDecl> features_from(const Json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected an array");
  std::vector<FeatureDecl> out;
  for (const Json& f : arr) {
    check_keys(f, {"name", "dim", "level"}, where);
    FeatureDecl d;
    read(f, "name", d.name, where);
    d.dim = read_count(f, "dim", 0, where);
    std::string level = "video";
    read(f, "level", level, where);
    d.level = parse_feature_level(level);
    out.push_back(d);
  }
  return out;
}

Json synth_features_json(const std::vector<SynthFeature>& feats) {
  Json arr = Json::array();
  for (const auto& f : feats) {
    Json e = {{"name", f.name},   {"dim", f.dim},       {"sigma", f.sigma},
              {"noise_only", f.noise_only}, {"level", to_string(f.level)},
              {"frames", f.frames}, {"frame_jitter", f.frame_jitter}};
    if (f.mixing_seed) e["mixing_seed"] = *f.mixing_seed;
    arr.push_back(e);
  }
  return arr;
}

std::vector<SynthFeature> synth_features_from(const Json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected an array");
  std::vector<SynthFeature> out;
  for (const Json& f : arr) {
    check_keys(f, {"name", "dim", "sigma", "noise_only", "level", "frames", "frame_jitter",
                   "mixing_seed"},
               where);
    SynthFeature s;
    read(f, "name", s.name, where);
    s.dim = read_count(f, "dim", 0, where);
    read(f, "sigma", s.sigma, where);
    read(f, "noise_only", s.noise_only, where);
    std::string level = "video";
    read(f, "level", level, where);
    s.level = parse_feature_level(level);
    s.frames = read_count(f, "frames", s.frames, where);
    read(f, "frame_jitter", s.frame_jitter, where);
    if (f.contains("mixing_seed")) {
      std::uint64_t seed = 0;
      read(f, "mixing_seed", seed, where);
      s.mixing_seed = seed;
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

// ---- model / train / synth ----------------------------------------------------------

Json to_json(const ModelConfig& c) {
  return {{"block", to_string(c.block)},
          {"spaces", c.spaces},
          {"total_dim", c.total_dim},
          {"mhsa_heads", c.mhsa_heads},
          {"dropout", c.dropout},
          {"video_features", features_json(c.video_features)},
          {"text_features", features_json(c.text_features)}};
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string where = "model";
  check_keys(j, {"block", "spaces", "total_dim", "mhsa_heads", "dropout", "video_features",
                 "text_features"},
             where);
  ModelConfig c;
  std::string block = to_string(c.block);
  read(j, "block", block, where);
  c.block = parse_block_kind(block);
  c.spaces = read_count(j, "spaces", c.spaces, where);
  c.total_dim = read_count(j, "total_dim", c.total_dim, where);
  c.mhsa_heads = read_count(j, "mhsa_heads", c.mhsa_heads, where);
  read(j, "dropout", c.dropout, where);
  if (j.contains("video_features")) c.video_features = features_from(j["video_features"], where + ".video_features");
  if (j.contains("text_features")) c.text_features = features_from(j["text_features"], where + ".text_features");
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"margin", c.margin},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"lr_decay", c.lr_decay},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"early_stop_patience", c.early_stop_patience},
          {"rmsprop_rho", c.rmsprop_rho},
          {"rmsprop_eps", c.rmsprop_eps},
          {"max_epochs", c.max_epochs},
          {"validation_metric", to_string(c.validation_metric)},
          {"loss", to_string(c.loss)}};
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string where = "train";
  check_keys(j, {"margin", "batch_size", "base_lr", "lr_decay", "plateau_patience",
                 "plateau_factor", "early_stop_patience", "rmsprop_rho", "rmsprop_eps",
                 "max_epochs", "validation_metric", "loss"},
             where);
  TrainConfig c;
  read(j, "margin", c.margin, where);
  c.batch_size = read_count(j, "batch_size", c.batch_size, where);
  read(j, "base_lr", c.base_lr, where);
  read(j, "lr_decay", c.lr_decay, where);
  c.plateau_patience = read_count(j, "plateau_patience", c.plateau_patience, where);
  read(j, "plateau_factor", c.plateau_factor, where);
  c.early_stop_patience = read_count(j, "early_stop_patience", c.early_stop_patience, where);
  read(j, "rmsprop_rho", c.rmsprop_rho, where);
  read(j, "rmsprop_eps", c.rmsprop_eps, where);
  c.max_epochs = read_count(j, "max_epochs", c.max_epochs, where);
  std::string metric = to_string(c.validation_metric);
  read(j, "validation_metric", metric, where);
  c.validation_metric = parse_validation_metric(metric);
  std::string loss = to_string(c.loss);
  read(j, "loss", loss, where);
  c.loss = parse_loss_mode(loss);
  return c;
}

Json to_json(const SynthSpec& s) {
  return {{"latent_dim", s.latent_dim},
          {"videos", s.videos},
          {"captions_per_video", s.captions_per_video},
          {"train_fraction", s.train_fraction},
          {"val_fraction", s.val_fraction},
          {"video_features", synth_features_json(s.video_features)},
          {"text_features", synth_features_json(s.text_features)}};
}

SynthSpec synth_spec_from_json(const Json& j) {
  const std::string where = "synth";
  check_keys(j, {"latent_dim", "videos", "captions_per_video", "train_fraction", "val_fraction",
                 "video_features", "text_features"},
             where);
  SynthSpec s = SynthSpec::desk_default();
  s.latent_dim = read_count(j, "latent_dim", s.latent_dim, where);
  s.videos = read_count(j, "videos", s.videos, where);
  s.captions_per_video = read_count(j, "captions_per_video", s.captions_per_video, where);
  read(j, "train_fraction", s.train_fraction, where);
  read(j, "val_fraction", s.val_fraction, where);
  if (j.contains("video_features")) s.video_features = synth_features_from(j["video_features"], where + ".video_features");
  if (j.contains("text_features")) s.text_features = synth_features_from(j["text_features"], where + ".text_features");
  return s;
}

Json to_json(const RetrievalMetrics& m) {
  return {{"r1", m.r1},
          {"r5", m.r5},
          {"r10", m.r10},
          {"median_rank", m.median_rank},
          {"map", m.map},
          {"sum_of_recalls", m.sum_of_recalls()}};
}

// ---- run config ---------------------------------------------------------------------

Json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"data",
           {{"manifest", c.data.manifest},
            {"train_split", c.data.train_split},
            {"val_split", c.data.val_split},
            {"test_split", c.data.test_split}}},
          {"model_path", c.model_path},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"synth", to_json(c.synth)},
          {"synth_binary", c.synth_binary},
          {"eval", {{"split", c.eval.split}, {"jaccard_k", c.eval.jaccard_k}, {"ranked_tsv", c.eval.ranked_tsv}}},
          {"select", {{"top_video", c.select.top_video}, {"top_text", c.select.top_text}}},
          {"rank", {{"queries", c.rank.queries}, {"split", c.rank.split}, {"top", c.rank.top}}}};
}

RunConfig run_config_from_json(const Json& j) {
  check_keys(j, {"seed", "threads", "data", "model_path", "model", "train", "synth",
                 "synth_binary", "eval", "select", "rank"},
             "config");
  RunConfig c;
  read(j, "seed", c.seed, "config");
  c.threads = read_count(j, "threads", c.threads, "config");
  if (c.threads < 1) throw ConfigError("config.threads must be >= 1");
  if (j.contains("data")) {
    const Json& d = j["data"];
    check_keys(d, {"manifest", "train_split", "val_split", "test_split"}, "data");
    read(d, "manifest", c.data.manifest, "data");
    read(d, "train_split", c.data.train_split, "data");
    read(d, "val_split", c.data.val_split, "data");
    read(d, "test_split", c.data.test_split, "data");
  }
  read(j, "model_path", c.model_path, "config");
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("synth")) c.synth = synth_spec_from_json(j["synth"]);
  read(j, "synth_binary", c.synth_binary, "config");
  if (j.contains("eval")) {
    const Json& e = j["eval"];
    check_keys(e, {"split", "jaccard_k", "ranked_tsv"}, "eval");
    read(e, "split", c.eval.split, "eval");
    c.eval.jaccard_k = read_count(e, "jaccard_k", c.eval.jaccard_k, "eval");
    read(e, "ranked_tsv", c.eval.ranked_tsv, "eval");
  }
  if (j.contains("select")) {
    const Json& s = j["select"];
    check_keys(s, {"top_video", "top_text"}, "select");
    c.select.top_video = read_count(s, "top_video", 0, "select");
    c.select.top_text = read_count(s, "top_text", 0, "select");
  }
  if (j.contains("rank")) {
    const Json& r = j["rank"];
    check_keys(r, {"queries", "split", "top"}, "rank");
    read(r, "queries", c.rank.queries, "rank");
    read(r, "split", c.rank.split, "rank");
    c.rank.top = read_count(r, "top", 0, "rank");
  }
  c.train.seed = c.seed;
  c.synth.seed = c.seed;
  return c;
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;

  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("--set: empty path component in '" + path + "'");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("--set: '" + path + "' descends into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  try {
    return Json::parse(is);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

void write_json_file(const Json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw ConfigError("write failed: " + path);
}

RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides) {
  Json j = path.empty() ? Json::object() : read_json_file(path);
  for (const std::string& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

}  // namespace laff

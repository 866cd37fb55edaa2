#include "laff/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "laff/errors.hpp"
#include "laff/evalkit.hpp"
#include "laff/optim.hpp"

namespace laff::cli {

namespace fs = std::filesystem;

namespace {

std::string out_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void prepare_out(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  fs::create_directories(dir);
}

Dataset load_dataset(const RunConfig& config) {
  if (config.data.manifest.empty()) throw ConfigError("data.manifest is not set");
  return Dataset::load(config.data.manifest);
}

/// The configured model, with empty feature lists taken from the manifest.
ModelConfig resolved_model(const RunConfig& config, const Dataset& data) {
  ModelConfig m = config.model;
  if (m.video_features.empty()) m.video_features = data.manifest().feature_decls(Modality::video);
  if (m.text_features.empty()) m.text_features = data.manifest().feature_decls(Modality::text);
  m.validate();
  return m;
}

FusionModel trained_model(const RunConfig& config) {
  if (config.model_path.empty()) throw ConfigError("model_path is not set");
  return load_model(config.model_path);
}

Json epoch_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"lr", r.lr},
          {"train_loss", r.train_loss},
          {"val", to_json(r.val)},
          {"val_metric", r.val_metric},
          {"attn_min", r.attn_min},
          {"attn_sum_dev", r.attn_sum_dev},
          {"halved", r.halved},
          {"stagnant", r.stagnant}};
}

Json attention_json(const AttentionSummary& a) {
  auto side = [](const std::vector<std::string>& names, const std::vector<double>& w) {
    Json arr = Json::array();
    for (std::size_t i = 0; i < names.size(); ++i) arr.push_back({{"feature", names[i]}, {"weight", w[i]}});
    return arr;
  };
  return {{"video", side(a.video_names, a.video)}, {"text", side(a.text_names, a.text)}};
}

void write_ranked_tsv(const std::string& path, const std::vector<std::string>& query_ids,
                      const std::vector<RankedList>& lists, const EmbeddingIndex& index,
                      std::size_t top) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << std::setprecision(9);
  for (std::size_t q = 0; q < lists.size(); ++q) {
    const std::size_t n = top == 0 ? lists[q].order.size() : std::min(top, lists[q].order.size());
    for (std::size_t r = 0; r < n; ++r) {
      os << query_ids[q] << '\t' << r + 1 << '\t' << index.ids[lists[q].order[r]] << '\t'
         << lists[q].scores[r] << '\n';
    }
  }
  if (!os) throw ConfigError("write failed: " + path);
}

bool attentional(BlockKind b) { return b == BlockKind::laff || b == BlockKind::laff_ml; }

}  // namespace

void cmd_synth(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const SynthDataset data = synth_generate(config.synth);
  write_dataset(data, out_dir, config.synth_binary);
}

void cmd_train(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const ModelConfig model_config = resolved_model(config, data);
  const FusionModel initial(model_config, config.seed);

  std::ofstream log(out_path(out_dir, "train_log.jsonl"));
  std::ofstream timing(out_path(out_dir, "train_timing.jsonl"));
  if (!log || !timing) throw ConfigError("cannot write training logs under " + out_dir);
  auto observer = [&](const EpochRecord& r, const FusionModel&) {
    log << epoch_json(r).dump() << '\n' << std::flush;
    timing << Json{{"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}}.dump() << '\n';
    std::cerr << "epoch " << r.epoch << " loss " << r.train_loss << " val " << r.val_metric
              << (r.halved ? " (lr halved)" : "") << '\n';
  };

  const FitResult result = [&] {
    try {
      return fit(initial, data, config.data.train_split, config.data.val_split, config.train,
                 observer);
    } catch (const NumericError& e) {
      log << Json{{"error", e.what()}}.dump() << '\n';
      throw;
    }
  }();

  const std::string model_file = out_path(out_dir, "model.laff");
  save_model(result.model, model_file);
  save_model_sidecar(result.model, out_path(out_dir, "model.json"));

  RunConfig resolved = config;
  resolved.model = model_config;
  resolved.model_path = model_file;
  write_json_file(to_json(resolved), out_path(out_dir, "config.json"));

  Json summary = {{"best_epoch", result.best_epoch},
                  {"best_metric", result.best_metric},
                  {"baseline", result.baseline},
                  {"epochs", result.log.size()},
                  {"stopped_early", result.stopped_early},
                  {"parameter_count", result.model.parameter_count()}};
  write_json_file(summary, out_path(out_dir, "train_summary.json"));
}

void cmd_eval(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const FusionModel model = trained_model(config);
  EvalOptions options;
  options.threads = config.threads;
  options.keep_lists = config.eval.ranked_tsv;
  options.with_jaccard = model.spaces() >= 2;
  options.jaccard_k = config.eval.jaccard_k;
  options.with_attention = attentional(model.config().block);
  const EvalReport report = evaluate(model, data, config.eval.split, options);

  Json j = {{"split", config.eval.split},
            {"queries", report.queries},
            {"videos", report.videos},
            {"metrics", to_json(report.metrics)}};
  if (report.jaccard) {
    Json rows = Json::array();
    for (std::size_t r = 0; r < report.jaccard->rows(); ++r) {
      auto row = report.jaccard->row(r);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["jaccard"] = {{"k", config.eval.jaccard_k}, {"matrix", rows}};
  }
  if (report.attention) j["attention"] = attention_json(*report.attention);
  write_json_file(j, out_path(out_dir, "eval_report.json"));

  if (config.eval.ranked_tsv) {
    const SplitView split = data.split(config.eval.split);
    const EmbeddingIndex index = build_index(model, data, split.videos);
    write_ranked_tsv(out_path(out_dir, "ranked.tsv"), report.query_ids, report.lists, index, 0);
  }
}

void cmd_weights(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const FusionModel model = trained_model(config);
  const AttentionSummary a = average_attention_weights(model, data, data.split(config.eval.split));
  write_json_file(attention_json(a), out_path(out_dir, "weights.json"));

  std::ofstream csv(out_path(out_dir, "weights.csv"));
  if (!csv) throw ConfigError("cannot write weights.csv");
  csv << std::setprecision(9) << "modality,feature,weight\n";
  for (std::size_t i = 0; i < a.video.size(); ++i) csv << "video," << a.video_names[i] << ',' << a.video[i] << '\n';
  for (std::size_t i = 0; i < a.text.size(); ++i) csv << "text," << a.text_names[i] << ',' << a.text[i] << '\n';
}

void cmd_select(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const FusionModel model = trained_model(config);
  const ModelConfig& mc = model.config();
  const AttentionSummary a = average_attention_weights(model, data, data.split(config.data.val_split));
  auto default_top = [](std::size_t requested, std::size_t k) {
    return requested != 0 ? requested : std::max<std::size_t>(1, k - 1);
  };
  RunConfig reduced = config;
  reduced.model = select_features(mc, a, default_top(config.select.top_video, mc.video_features.size()),
                                  default_top(config.select.top_text, mc.text_features.size()));
  reduced.model_path.clear();
  write_json_file(to_json(reduced), out_path(out_dir, "selected_config.json"));
  write_json_file({{"model_path", config.model_path}, {"weights", attention_json(a)}},
                  out_path(out_dir, "selection.json"));
}

void cmd_rank(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const FusionModel model = trained_model(config);
  const ModelConfig& mc = model.config();
  if (config.rank.queries.empty()) throw ConfigError("rank.queries is empty");

  ModalityBatch batch;
  std::vector<std::string> ids;
  for (const FeatureDecl& f : mc.text_features) {
    auto it = config.rank.queries.find(f.name);
    if (it == config.rank.queries.end()) {
      throw ConfigError("rank.queries has no file for text feature '" + f.name + "'");
    }
    const FeatureSpace space = load_features(it->second, f.name, f.dim, FeatureLevel::video);
    if (ids.empty()) {
      ids = space.ids();
      if (ids.empty()) throw DegenerateInputError("query file " + it->second + " is empty");
    } else if (space.size() != ids.size()) {
      throw FormatError("query file " + it->second + " has " + std::to_string(space.size()) +
                        " items, expected " + std::to_string(ids.size()));
    }
    Matrix m(ids.size(), f.dim);
    for (std::size_t q = 0; q < ids.size(); ++q) {
      auto src = space.pooled(space.index_of(ids[q]));
      std::copy(src.begin(), src.end(), m.row(q).begin());
    }
    batch.pooled.push_back(std::move(m));
    batch.frames.emplace_back(std::nullopt);
  }
  for (const auto& [name, path] : config.rank.queries) {
    const bool known = std::any_of(mc.text_features.begin(), mc.text_features.end(),
                                   [&](const FeatureDecl& f) { return f.name == name; });
    if (!known) throw ConfigError("rank.queries names unknown text feature '" + name + "'");
  }
  batch.samples = ids.size();

  const SplitView split = data.split(config.rank.split);
  const EmbeddingIndex index = build_index(model, data, split.videos);
  const ModalityEncoding enc = model.encode(Modality::text, batch, Mode::eval, nullptr);
  std::vector<Matrix> queries;
  for (const SpaceEncoding& s : enc.spaces) queries.push_back(s.embedding);
  const std::vector<RankedList> lists = rank_all(queries, index, config.threads);
  write_ranked_tsv(out_path(out_dir, "ranked.tsv"), ids, lists, index, config.rank.top);
}

void cmd_jaccard(const RunConfig& config, const std::string& out_dir) {
  prepare_out(out_dir);
  const Dataset data = load_dataset(config);
  const FusionModel model = trained_model(config);
  if (model.spaces() < 2) throw UnsupportedError("jaccard needs a model with at least two spaces");
  const SplitView split = data.split(config.eval.split);
  const EmbeddingIndex index = build_index(model, data, split.videos);
  const std::vector<Matrix> queries = encode_queries(model, data, split.captions);
  const Matrix m = jaccard_interspace(queries, index, config.eval.jaccard_k, config.threads);
  Json rows = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  write_json_file({{"split", config.eval.split}, {"k", config.eval.jaccard_k}, {"matrix", rows}},
                  out_path(out_dir, "jaccard.json"));
}

int run(int argc, const char* const* argv) {
  CLI::App app{"LAFF text-to-video retrieval"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::vector<std::string> sets;

  using Command = void (*)(const RunConfig&, const std::string&);
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands = {
      {"synth", {"generate a synthetic dataset", cmd_synth}},
      {"train", {"train a model and save the best checkpoint", cmd_train}},
      {"eval", {"retrieval metrics on a split", cmd_eval}},
      {"weights", {"average attention weight per feature", cmd_weights}},
      {"select", {"keep the top-weighted features in a new config", cmd_select}},
      {"rank", {"rank split videos for query feature files", cmd_rank}},
      {"jaccard", {"inter-space top-k overlap", cmd_jaccard}},
  };
  std::map<CLI::App*, Command> dispatch;
  std::map<CLI::App*, CLI::Option*> seed_opts, thread_opts;
  for (const auto& [name, info] : commands) {
    CLI::App* sub = app.add_subcommand(name, info.first);
    sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    seed_opts[sub] = sub->add_option("--seed", seed, "seed for every random stream");
    thread_opts[sub] = sub->add_option("--threads", threads, "ranking worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--set", sets, "override a config key: path.to.key=value");
    dispatch[sub] = info.second;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (seed_opts[sub]->count() > 0) sets.push_back("seed=" + std::to_string(seed));
    if (thread_opts[sub]->count() > 0) sets.push_back("threads=" + std::to_string(threads));
    const RunConfig config = load_run_config(config_path, sets);
    dispatch[sub](config, out_dir);
    return kExitOk;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
  } catch (const DegenerateInputError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
  } catch (const UnsupportedError& e) {
    std::cerr << "unsupported: " << e.what() << '\n';
  } catch (const fs::filesystem_error& e) {
    std::cerr << "filesystem error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitConfig;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace laff::cli

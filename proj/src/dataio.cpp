#include "laff/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "laff/errors.hpp"
#include <nlohmann/json.hpp>

namespace laff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- FeatureSpace --------------------------------------------------------------

FeatureSpace::FeatureSpace(std::string name, FeatureLevel level, std::size_t dim)
    : name_(std::move(name)), level_(level), dim_(dim) {}

void FeatureSpace::register_id(const std::string& id) {
  if (id.empty()) throw FormatError("feature '" + name_ + "': empty item id");
  if (!index_.emplace(id, ids_.size()).second) {
    throw FormatError("feature '" + name_ + "': duplicate id '" + id + "'");
  }
  ids_.push_back(id);
}

void FeatureSpace::add(const std::string& id, std::span<const double> vector) {
  if (level_ != FeatureLevel::video) {
    throw FormatError("feature '" + name_ + "' is frame-level; use add_frames");
  }
  if (vector.size() != dim_) {
    throw FormatError("feature '" + name_ + "': item '" + id + "' has dim " +
                      std::to_string(vector.size()) + ", expected " + std::to_string(dim_));
  }
  register_id(id);
  pooled_.insert(pooled_.end(), vector.begin(), vector.end());
}

void FeatureSpace::add_frames(const std::string& id, Matrix frames) {
  if (level_ != FeatureLevel::frame) {
    throw FormatError("feature '" + name_ + "' is video-level; use add");
  }
  if (frames.cols() != dim_) {
    throw FormatError("feature '" + name_ + "': item '" + id + "' has frame dim " +
                      std::to_string(frames.cols()) + ", expected " + std::to_string(dim_));
  }
  if (frames.rows() == 0) {
    throw FormatError("feature '" + name_ + "': item '" + id + "' has no frames");
  }
  std::vector<double> mean = mean_pool_frames(frames);
  register_id(id);
  pooled_.insert(pooled_.end(), mean.begin(), mean.end());
  frames_.push_back(std::move(frames));
}

std::size_t FeatureSpace::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw FormatError("feature '" + name_ + "': unknown id '" + id + "'");
  return it->second;
}

std::span<const double> FeatureSpace::pooled(std::size_t item) const {
  return {pooled_.data() + item * dim_, dim_};
}

std::vector<double> mean_pool_frames(const Matrix& frames) {
  if (frames.rows() == 0) throw DegenerateInputError("mean_pool_frames: empty frame sequence");
  std::vector<double> mean = column_sums(frames);
  const double inv = 1.0 / static_cast<double>(frames.rows());
  for (double& v : mean) v *= inv;
  return mean;
}

// ---- feature files ---------------------------------------------------------------

namespace {

constexpr char kFeatureMagic[4] = {'L', 'F', 'T', 'R'};

FeatureSpace load_binary(std::istream& is, const std::string& path, const std::string& name,
                         std::size_t expected_dim, FeatureLevel level) {
  detail::LeReader in(is, path);
  const std::string magic = in.read_bytes(4, "magic");
  if (magic != std::string(kFeatureMagic, 4)) in.fail(0, "bad magic (expected LFTR)");
  const auto version = in.read<std::uint32_t>("version");
  if (version != kFeatureFormatVersion) {
    in.fail(4, "unsupported version " + std::to_string(version));
  }
  const auto dim = in.read<std::uint32_t>("dim");
  if (dim != expected_dim) {
    in.fail(8, "dim " + std::to_string(dim) + " does not match declared dim " +
                   std::to_string(expected_dim));
  }
  const auto count = in.read<std::uint64_t>("count");

  FeatureSpace space(name, level, dim);
  std::vector<double> vec(dim);
  for (std::uint64_t item = 0; item < count; ++item) {
    const auto item_offset = in.offset();
    const auto id_len = in.read<std::uint16_t>("id length");
    std::string id = in.read_bytes(id_len, "id");
    if (space.contains(id)) in.fail(item_offset, "duplicate id '" + id + "'");
    if (id.empty()) in.fail(item_offset, "empty id");
    if (level == FeatureLevel::video) {
      for (auto& v : vec) v = in.read<float>("vector");
      space.add(id, vec);
    } else {
      const auto frames = in.read<std::uint32_t>("frame count");
      if (frames == 0) in.fail(item_offset, "item '" + id + "' has no frames");
      Matrix m(frames, dim);
      for (double& v : m.values()) v = in.read<float>("frame");
      space.add_frames(id, std::move(m));
    }
  }
  if (!in.at_end()) in.fail(in.offset(), "trailing bytes after " + std::to_string(count) + " items");
  return space;
}

FeatureSpace load_text(std::istream& is, const std::string& path, const std::string& name,
                       std::size_t expected_dim, FeatureLevel level) {
  FeatureSpace space(name, level, expected_dim);
  std::string line;
  std::size_t line_no = 0;
  std::string pending_id;
  std::vector<double> pending_frames;
  std::size_t pending_count = 0;
  std::set<std::string> seen;

  auto flush = [&]() {
    if (pending_count == 0) return;
    space.add_frames(pending_id, Matrix(pending_count, expected_dim, std::move(pending_frames)));
    pending_frames.clear();
    pending_count = 0;
  };
  auto fail = [&](const std::string& msg) -> void {
    throw FormatError(path + ": " + msg + " at line " + std::to_string(line_no));
  };

  std::vector<double> vec;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream tokens(line);
    std::string id;
    tokens >> id;
    vec.clear();
    std::string tok;
    while (tokens >> tok) {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc{} || ptr != tok.data() + tok.size()) fail("bad number '" + tok + "'");
      // Stored precision matches the binary format.
      vec.push_back(static_cast<double>(static_cast<float>(v)));
    }
    if (vec.size() != expected_dim) {
      fail("item '" + id + "' has " + std::to_string(vec.size()) + " values, expected " +
           std::to_string(expected_dim));
    }
    if (level == FeatureLevel::video) {
      if (space.contains(id)) fail("duplicate id '" + id + "'");
      space.add(id, vec);
    } else {
      if (id != pending_id || pending_count == 0) {
        flush();
        if (!seen.insert(id).second) fail("frames of id '" + id + "' are not contiguous");
        pending_id = id;
      }
      pending_frames.insert(pending_frames.end(), vec.begin(), vec.end());
      ++pending_count;
    }
  }
  flush();
  return space;
}

}  // namespace

FeatureSpace load_features(const std::string& path, const std::string& name,
                           std::size_t expected_dim, FeatureLevel level) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open feature file '" + path + "'");
  char head[4] = {};
  is.read(head, 4);
  const bool binary = is.gcount() == 4 && std::equal(head, head + 4, kFeatureMagic);
  is.clear();
  is.seekg(0);
  return binary ? load_binary(is, path, name, expected_dim, level)
                : load_text(is, path, name, expected_dim, level);
}

void write_features_binary(const FeatureSpace& space, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write feature file '" + path + "'");
  os.write(kFeatureMagic, 4);
  detail::write_le<std::uint32_t>(os, kFeatureFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(space.dim()));
  detail::write_le<std::uint64_t>(os, space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    const std::string& id = space.ids()[i];
    if (id.size() > 0xFFFF) throw FormatError("feature id longer than 65535 bytes");
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    if (space.level() == FeatureLevel::video) {
      for (double v : space.pooled(i)) detail::write_le<float>(os, static_cast<float>(v));
    } else {
      const Matrix& frames = space.frames(i);
      detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(frames.rows()));
      for (double v : frames.values()) detail::write_le<float>(os, static_cast<float>(v));
    }
  }
  if (!os) throw FormatError("failed writing feature file '" + path + "'");
}

void write_features_text(const FeatureSpace& space, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write feature file '" + path + "'");
  os.precision(9);
  auto write_row = [&](const std::string& id, std::span<const double> row) {
    os << id;
    for (double v : row) os << ' ' << static_cast<float>(v);
    os << '\n';
  };
  for (std::size_t i = 0; i < space.size(); ++i) {
    const std::string& id = space.ids()[i];
    if (space.level() == FeatureLevel::video) {
      write_row(id, space.pooled(i));
    } else {
      const Matrix& frames = space.frames(i);
      for (std::size_t f = 0; f < frames.rows(); ++f) write_row(id, frames.row(f));
    }
  }
  if (!os) throw FormatError("failed writing feature file '" + path + "'");
}

// ---- manifest ------------------------------------------------------------------------

void DatasetManifest::validate() const {
  std::set<std::string> video_set;
  for (const auto& v : videos) {
    if (v.empty()) throw FormatError("manifest: empty video id");
    if (!video_set.insert(v).second) throw FormatError("manifest: duplicate video id '" + v + "'");
  }
  std::set<std::string> caption_set;
  for (const auto& c : captions) {
    if (c.id.empty()) throw FormatError("manifest: empty caption id");
    if (!caption_set.insert(c.id).second) {
      throw FormatError("manifest: duplicate caption id '" + c.id + "'");
    }
    if (!video_set.count(c.video)) {
      throw FormatError("manifest: caption '" + c.id + "' references unknown video '" + c.video +
                        "'");
    }
  }
  std::set<std::string> assigned;
  for (const auto& [name, ids] : splits) {
    for (const auto& v : ids) {
      if (!video_set.count(v)) {
        throw FormatError("manifest: split '" + name + "' references unknown video '" + v + "'");
      }
      if (!assigned.insert(v).second) {
        throw FormatError("manifest: video '" + v + "' appears in more than one split");
      }
    }
  }
  for (const auto* list : {&video_features, &text_features}) {
    std::set<std::string> names;
    for (const auto& f : *list) {
      if (f.name.empty() || f.dim == 0) throw FormatError("manifest: invalid feature declaration");
      if (!names.insert(f.name).second) {
        throw FormatError("manifest: duplicate feature '" + f.name + "'");
      }
    }
  }
  for (const auto& f : text_features) {
    if (f.level != FeatureLevel::video) {
      throw FormatError("manifest: text feature '" + f.name + "' cannot be frame-level");
    }
  }
}

std::vector<FeatureDecl> DatasetManifest::feature_decls(Modality modality) const {
  std::vector<FeatureDecl> out;
  for (const auto& f : modality == Modality::video ? video_features : text_features) {
    out.push_back({f.name, f.dim, f.level});
  }
  return out;
}

namespace {

json feature_files_json(const std::vector<FeatureFile>& files) {
  json arr = json::array();
  for (const auto& f : files) {
    arr.push_back({{"name", f.name}, {"dim", f.dim}, {"level", to_string(f.level)}, {"path", f.path}});
  }
  return arr;
}

std::vector<FeatureFile> feature_files_from(const json& arr) {
  std::vector<FeatureFile> out;
  for (const auto& j : arr) {
    FeatureFile f;
    f.name = j.at("name").get<std::string>();
    f.dim = j.at("dim").get<std::size_t>();
    f.level = parse_feature_level(j.value("level", std::string("video")));
    f.path = j.at("path").get<std::string>();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest '" + path + "'");
  DatasetManifest m;
  try {
    json j = json::parse(is);
    m.videos = j.at("videos").get<std::vector<std::string>>();
    for (const auto& c : j.at("captions")) {
      m.captions.push_back({c.at("id").get<std::string>(), c.at("video").get<std::string>(),
                            c.value("text", std::string())});
    }
    m.splits = j.at("splits").get<std::map<std::string, std::vector<std::string>>>();
    const json& feats = j.at("features");
    m.video_features = feature_files_from(feats.at("video"));
    m.text_features = feature_files_from(feats.at("text"));
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + path + "': " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError("manifest '" + path + "': " + e.what());
  }
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json captions = json::array();
  for (const auto& c : m.captions) {
    json entry = {{"id", c.id}, {"video", c.video}};
    if (!c.text.empty()) entry["text"] = c.text;
    captions.push_back(std::move(entry));
  }
  json j = {{"videos", m.videos},
            {"captions", std::move(captions)},
            {"splits", m.splits},
            {"features",
             {{"video", feature_files_json(m.video_features)},
              {"text", feature_files_json(m.text_features)}}}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write manifest '" + path + "'");
  os << j.dump(1) << '\n';
}

// ---- Dataset -----------------------------------------------------------------------------

Dataset::Dataset(DatasetManifest manifest, FeatureStore video_store, FeatureStore text_store)
    : manifest_(std::move(manifest)),
      video_store_(std::move(video_store)),
      text_store_(std::move(text_store)) {
  manifest_.validate();
  std::unordered_map<std::string, std::size_t> video_index;
  for (std::size_t i = 0; i < manifest_.videos.size(); ++i) video_index[manifest_.videos[i]] = i;
  for (const auto& c : manifest_.captions) caption_video_.push_back(video_index.at(c.video));

  for (const auto& f : manifest_.video_features) {
    auto it = video_store_.find(f.name);
    if (it == video_store_.end()) throw FormatError("dataset: video feature '" + f.name + "' not loaded");
    const FeatureSpace& space = it->second;
    if (space.dim() != f.dim || space.level() != f.level) {
      throw FormatError("dataset: video feature '" + f.name + "' disagrees with its declaration");
    }
    auto& rows = video_rows_[f.name];
    for (const auto& v : manifest_.videos) {
      if (!space.contains(v)) {
        throw FormatError("dataset: video '" + v + "' missing from feature '" + f.name + "'");
      }
      rows.push_back(space.index_of(v));
    }
  }
  for (const auto& f : manifest_.text_features) {
    auto it = text_store_.find(f.name);
    if (it == text_store_.end()) throw FormatError("dataset: text feature '" + f.name + "' not loaded");
    const FeatureSpace& space = it->second;
    if (space.dim() != f.dim) {
      throw FormatError("dataset: text feature '" + f.name + "' disagrees with its declaration");
    }
    auto& rows = caption_rows_[f.name];
    for (const auto& c : manifest_.captions) {
      if (!space.contains(c.id)) {
        throw FormatError("dataset: caption '" + c.id + "' missing from feature '" + f.name + "'");
      }
      rows.push_back(space.index_of(c.id));
    }
  }
}

Dataset Dataset::load(const std::string& manifest_path) {
  DatasetManifest m = load_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  FeatureStore videos, texts;
  for (const auto& f : m.video_features) {
    videos.emplace(f.name, load_features(resolve(f.path), f.name, f.dim, f.level));
  }
  for (const auto& f : m.text_features) {
    texts.emplace(f.name, load_features(resolve(f.path), f.name, f.dim, f.level));
  }
  return Dataset(std::move(m), std::move(videos), std::move(texts));
}

SplitView Dataset::split(const std::string& name) const {
  auto it = manifest_.splits.find(name);
  if (it == manifest_.splits.end()) throw ConfigError("dataset: no split named '" + name + "'");
  std::set<std::string> members(it->second.begin(), it->second.end());
  SplitView view;
  for (std::size_t i = 0; i < manifest_.videos.size(); ++i) {
    if (members.count(manifest_.videos[i])) view.videos.push_back(i);
  }
  for (std::size_t c = 0; c < manifest_.captions.size(); ++c) {
    if (members.count(manifest_.captions[c].video)) view.captions.push_back(c);
  }
  return view;
}

void Dataset::check_compatible(const ModelConfig& config) const {
  for (Modality m : {Modality::video, Modality::text}) {
    const auto declared = manifest_.feature_decls(m);
    for (const FeatureDecl& f : config.features(m)) {
      auto it = std::find_if(declared.begin(), declared.end(),
                             [&](const FeatureDecl& d) { return d.name == f.name; });
      if (it == declared.end()) {
        throw ConfigError("model feature '" + f.name + "' is not in the dataset");
      }
      if (it->dim != f.dim || it->level != f.level) {
        throw ConfigError("model feature '" + f.name + "' disagrees with the dataset (dim " +
                          std::to_string(f.dim) + " vs " + std::to_string(it->dim) + ")");
      }
    }
  }
}

ModalityBatch Dataset::assemble(const std::vector<FeatureDecl>& decls, bool with_frames,
                                std::span<const std::size_t> items, Modality modality) const {
  const FeatureStore& store = this->store(modality);
  const auto& row_map = modality == Modality::video ? video_rows_ : caption_rows_;
  ModalityBatch batch;
  batch.samples = items.size();
  for (const FeatureDecl& f : decls) {
    const FeatureSpace& space = store.at(f.name);
    const auto& rows = row_map.at(f.name);
    Matrix pooled(items.size(), space.dim());
    for (std::size_t b = 0; b < items.size(); ++b) {
      auto src = space.pooled(rows.at(items[b]));
      std::copy(src.begin(), src.end(), pooled.row(b).begin());
    }
    batch.pooled.push_back(std::move(pooled));
    if (with_frames && space.level() == FeatureLevel::frame) {
      FrameBatch fb;
      fb.offsets.push_back(0);
      std::vector<double> data;
      for (std::size_t b = 0; b < items.size(); ++b) {
        const Matrix& frames = space.frames(rows.at(items[b]));
        data.insert(data.end(), frames.values().begin(), frames.values().end());
        fb.offsets.push_back(fb.offsets.back() + frames.rows());
      }
      fb.frames = Matrix(fb.offsets.back(), space.dim(), std::move(data));
      batch.frames.emplace_back(std::move(fb));
    } else {
      batch.frames.emplace_back(std::nullopt);
    }
  }
  return batch;
}

ModalityBatch Dataset::video_batch(const ModelConfig& config,
                                   std::span<const std::size_t> videos) const {
  return assemble(config.video_features, config.block == BlockKind::laff_ml, videos,
                  Modality::video);
}

ModalityBatch Dataset::text_batch(const ModelConfig& config,
                                  std::span<const std::size_t> captions) const {
  return assemble(config.text_features, false, captions, Modality::text);
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> items,
                                                   std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch) {
  if (batch_size < 2) throw ConfigError("batch size must be >= 2");
  std::vector<std::size_t> order(items.begin(), items.end());
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

PairedBatch make_paired_batch(const Dataset& data, const ModelConfig& config,
                              std::span<const std::size_t> captions) {
  PairedBatch batch;
  std::vector<std::size_t> videos;
  for (std::size_t q = 0; q < captions.size(); ++q) {
    videos.push_back(data.caption_video(captions[q]));
    batch.positive.push_back(q);
  }
  batch.video_groups = videos;
  batch.videos = data.video_batch(config, videos);
  batch.texts = data.text_batch(config, captions);
  return batch;
}

}  // namespace laff

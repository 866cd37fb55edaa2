#pragma once

// Feature files, dataset manifests, batching and the synthetic generator.
//
// Binary feature file ("LFTR"), all integers little-endian:
//   magic "LFTR" | version u32 | dim u32 | count u64 | items...
//   video-level item: id_len u16 | id bytes | dim × f32
//   frame-level item: id_len u16 | id bytes | frames u32 | frames × dim × f32
// Text feature file: one line per vector, `id v1 ... vdim`. For frame-level
// features consecutive lines sharing an id are that item's frames in order.
// Blank lines and lines starting with '#' are ignored.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "laff/fusion.hpp"
#include "laff/matrix.hpp"
#include "laff/objective.hpp"

namespace laff {

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

/// One named feature: item id → vector (video level) or frame sequence.
class FeatureSpace {
 public:
  FeatureSpace() = default;
  FeatureSpace(std::string name, FeatureLevel level, std::size_t dim);

  const std::string& name() const { return name_; }
  FeatureLevel level() const { return level_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  /// Adds a video-level vector. Throws FormatError on duplicate id or dim mismatch.
  void add(const std::string& id, std::span<const double> vector);
  /// Adds a frame sequence (frames × dim). Stores the mean-pooled vector too.
  void add_frames(const std::string& id, Matrix frames);

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const;

  /// Video-level vector, or the mean-pooled frames for frame-level features.
  std::span<const double> pooled(std::size_t item) const;
  const Matrix& frames(std::size_t item) const { return frames_.at(item); }

 private:
  void register_id(const std::string& id);

  std::string name_;
  FeatureLevel level_ = FeatureLevel::video;
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> pooled_;
  std::vector<Matrix> frames_;
};

using FeatureStore = std::map<std::string, FeatureSpace>;

/// Elementwise mean of the rows. Throws DegenerateInputError when empty.
std::vector<double> mean_pool_frames(const Matrix& frames);

/// Reads either format (detected by the magic). Validates dim and level;
/// errors carry the byte offset (binary) or line number (text).
FeatureSpace load_features(const std::string& path, const std::string& name,
                           std::size_t expected_dim, FeatureLevel level);

void write_features_binary(const FeatureSpace& space, const std::string& path);
void write_features_text(const FeatureSpace& space, const std::string& path);

// ---- manifest -------------------------------------------------------------------

struct CaptionRecord {
  std::string id;
  std::string video;
  std::string text;
};

struct FeatureFile {
  std::string name;
  std::size_t dim = 0;
  FeatureLevel level = FeatureLevel::video;
  std::string path;  // relative paths resolve against the manifest's directory
};

struct DatasetManifest {
  std::vector<std::string> videos;
  std::vector<CaptionRecord> captions;
  std::map<std::string, std::vector<std::string>> splits;  // split → video ids
  std::vector<FeatureFile> video_features;
  std::vector<FeatureFile> text_features;

  /// Structural checks that need no feature data.
  void validate() const;
  std::vector<FeatureDecl> feature_decls(Modality modality) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// ---- dataset ----------------------------------------------------------------------

struct SplitView {
  std::vector<std::size_t> captions;  // indices into manifest().captions
  std::vector<std::size_t> videos;    // indices into manifest().videos
};

/// Manifest plus loaded features, indexed for batch assembly. Immutable.
class Dataset {
 public:
  Dataset(DatasetManifest manifest, FeatureStore video_store, FeatureStore text_store);
  static Dataset load(const std::string& manifest_path);

  const DatasetManifest& manifest() const { return manifest_; }
  const FeatureStore& store(Modality modality) const {
    return modality == Modality::video ? video_store_ : text_store_;
  }

  SplitView split(const std::string& name) const;
  std::size_t caption_video(std::size_t caption) const { return caption_video_[caption]; }
  const std::string& video_id(std::size_t video) const { return manifest_.videos[video]; }
  const std::string& caption_id(std::size_t caption) const { return manifest_.captions[caption].id; }

  /// Throws ConfigError if `config` names features this dataset lacks or
  /// declares them with a different dim/level.
  void check_compatible(const ModelConfig& config) const;

  ModalityBatch video_batch(const ModelConfig& config, std::span<const std::size_t> videos) const;
  ModalityBatch text_batch(const ModelConfig& config, std::span<const std::size_t> captions) const;

 private:
  ModalityBatch assemble(const std::vector<FeatureDecl>& decls, bool with_frames,
                         std::span<const std::size_t> items, Modality modality) const;

  DatasetManifest manifest_;
  FeatureStore video_store_;
  FeatureStore text_store_;
  std::vector<std::size_t> caption_video_;
  // feature name → row of each video / caption in that FeatureSpace
  std::map<std::string, std::vector<std::size_t>> video_rows_;
  std::map<std::string, std::vector<std::size_t>> caption_rows_;
};

/// Seeded shuffle keyed by (seed, epoch), then chunks of `batch_size`; a final
/// chunk shorter than 2 is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> items,
                                                   std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch);

/// Caption batch paired with its videos; positive[q] = q, groups = video index.
PairedBatch make_paired_batch(const Dataset& data, const ModelConfig& config,
                              std::span<const std::size_t> captions);

// ---- synthetic generator ------------------------------------------------------------

struct SynthFeature {
  std::string name;
  std::size_t dim = 0;
  double sigma = 0.1;
  bool noise_only = false;
  FeatureLevel level = FeatureLevel::video;
  std::size_t frames = 4;       // frame-level only
  double frame_jitter = 0.05;   // frame-level only
  std::optional<std::uint64_t> mixing_seed;
};

struct SynthSpec {
  std::size_t latent_dim = 16;
  std::size_t videos = 2000;
  std::size_t captions_per_video = 1;
  std::vector<SynthFeature> video_features;
  std::vector<SynthFeature> text_features;
  double train_fraction = 0.7;
  double val_fraction = 0.15;
  std::uint64_t seed = 2022;

  /// 2,000 videos, g = 16, video dims 32/48/24 (the 24-d one noise-only),
  /// text dims 32/16, σ = 0.1.
  static SynthSpec desk_default();
  void validate() const;
};

struct SynthDataset {
  DatasetManifest manifest;
  FeatureStore video_store;
  FeatureStore text_store;
};

SynthDataset synth_generate(const SynthSpec& spec);

/// Writes manifest.json plus one feature file per feature under `dir`.
/// Returns the manifest path.
std::string write_dataset(const SynthDataset& data, const std::string& dir, bool binary = true);

}  // namespace laff

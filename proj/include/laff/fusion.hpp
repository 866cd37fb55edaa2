#pragma once

// Feature-fusion blocks and the multi-space paired encoder.
//
// Every block maps a set of heterogeneous per-sample features to one vector of
// the per-space dimension d = d0 / h. Blocks operate on whole batches; the
// per-sample forms used in tests are batches of one.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "laff/diffmath.hpp"
#include "laff/matrix.hpp"

namespace laff {

enum class BlockKind { laff, attention_free, mhsa, concat, laff_ml };
enum class FeatureLevel { video, frame };
enum class Modality { video, text };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);
std::string to_string(FeatureLevel level);
FeatureLevel parse_feature_level(const std::string& name);

struct FeatureDecl {
  std::string name;
  std::size_t dim = 0;
  FeatureLevel level = FeatureLevel::video;

  friend bool operator==(const FeatureDecl&, const FeatureDecl&) = default;
};

struct ModelConfig {
  std::vector<FeatureDecl> video_features;
  std::vector<FeatureDecl> text_features;
  std::size_t spaces = 8;        // h
  std::size_t total_dim = 2048;  // d0
  BlockKind block = BlockKind::laff;
  std::size_t mhsa_heads = 4;
  double dropout = 0.2;

  std::size_t space_dim() const { return spaces == 0 ? 0 : total_dim / spaces; }
  const std::vector<FeatureDecl>& features(Modality m) const {
    return m == Modality::video ? video_features : text_features;
  }
  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form trainable-parameter count of a model built from `config`.
std::size_t param_count(const ModelConfig& config);

// ---- batched inputs ---------------------------------------------------------

/// All frames of one stream for a batch, stacked; sample b owns rows
/// [offsets[b], offsets[b + 1]).
struct FrameBatch {
  Matrix frames;
  std::vector<std::size_t> offsets;

  std::size_t samples() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

/// One modality's inputs for a batch, one slot per declared feature. `pooled`
/// always holds a samples×dim matrix (frame-level streams mean-pooled);
/// `frames` is populated for frame-level streams when frame data is loaded.
struct ModalityBatch {
  std::size_t samples = 0;
  std::vector<Matrix> pooled;
  std::vector<std::optional<FrameBatch>> frames;
};

// ---- blocks -----------------------------------------------------------------

/// LAFF: ê_i = tanh(dropout(W_i f_i + b_i)), a = softmax(w·ê_i), out = Σ a_i ê_i.
/// With `attentional` false the weights are fixed at 1/k (attention-free block)
/// and no attention vector is allocated.
class LaffBlock {
 public:
  struct Tape {
    std::vector<Matrix> inputs;
    std::vector<Matrix> masks;
    std::vector<Matrix> activations;
    Matrix weights;  // samples × k
  };

  LaffBlock() = default;
  LaffBlock(std::span<const std::size_t> input_dims, std::size_t out_dim, double dropout,
            bool attentional, const std::string& prefix, Rng& init);

  std::size_t inputs() const { return projections_.size(); }
  std::size_t output_dim() const { return out_dim_; }
  bool attentional() const { return attentional_; }

  Matrix forward(std::span<const Matrix> inputs, Mode mode, Rng* rng, Tape& tape) const;
  /// Accumulates parameter gradients; returns gradients w.r.t. the inputs.
  std::vector<Matrix> backward(const Matrix& upstream, const Tape& tape);

  Parameter& projection(std::size_t i) { return projections_[i]; }
  Parameter& bias(std::size_t i) { return biases_[i]; }
  /// 1×d attention vector; only valid when attentional().
  Parameter& attention() { return attention_; }

  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::size_t out_dim_ = 0;
  double dropout_ = 0.0;
  bool attentional_ = true;
  std::vector<Parameter> projections_;
  std::vector<Parameter> biases_;
  Parameter attention_;
};

/// Attention over the frames of a single stream with one shared projection.
class FrameLaff {
 public:
  struct Tape {
    Matrix frames;
    std::vector<std::size_t> offsets;
    Matrix mask;
    Matrix activations;  // total_frames × d
    std::vector<double> weights;
  };

  FrameLaff() = default;
  FrameLaff(std::size_t frame_dim, std::size_t out_dim, double dropout, const std::string& prefix,
            Rng& init);

  Matrix forward(const FrameBatch& batch, Mode mode, Rng* rng, Tape& tape) const;
  void backward(const Matrix& upstream, const Tape& tape);

  Parameter& projection() { return projection_; }
  Parameter& bias() { return bias_; }
  Parameter& attention() { return attention_; }

  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::size_t out_dim_ = 0;
  double dropout_ = 0.0;
  Parameter projection_;
  Parameter bias_;
  Parameter attention_;
};

/// One self-attention layer over per-feature tokens, mean-pooled.
class MhsaBlock {
 public:
  struct Tape {
    std::vector<Matrix> inputs;
    std::vector<Matrix> masks;
    Matrix tokens;  // (samples·k) × d
    Matrix q, k, v;
    std::vector<Matrix> attention;  // per sample·head, k×k
    Matrix concat;                  // (samples·k) × d
    std::size_t samples = 0;
  };

  MhsaBlock() = default;
  MhsaBlock(std::span<const std::size_t> input_dims, std::size_t out_dim, std::size_t heads,
            double dropout, const std::string& prefix, Rng& init);

  std::size_t inputs() const { return projections_.size(); }
  std::size_t heads() const { return heads_; }

  Matrix forward(std::span<const Matrix> inputs, Mode mode, Rng* rng, Tape& tape) const;
  void backward(const Matrix& upstream, const Tape& tape);

  Parameter& projection(std::size_t i) { return projections_[i]; }
  Parameter& bias(std::size_t i) { return biases_[i]; }
  Parameter& query_weight() { return wq_; }
  Parameter& query_bias() { return bq_; }
  Parameter& key_weight() { return wk_; }
  Parameter& key_bias() { return bk_; }
  Parameter& value_weight() { return wv_; }
  Parameter& value_bias() { return bv_; }
  Parameter& output_weight() { return wo_; }
  Parameter& output_bias() { return bo_; }

  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::size_t out_dim_ = 0;
  std::size_t heads_ = 1;
  double dropout_ = 0.0;
  std::vector<Parameter> projections_;
  std::vector<Parameter> biases_;
  Parameter wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

/// Raw features concatenated, one affine map, tanh.
class ConcatBlock {
 public:
  struct Tape {
    Matrix input;
    Matrix mask;
    Matrix output;
  };

  ConcatBlock() = default;
  ConcatBlock(std::span<const std::size_t> input_dims, std::size_t out_dim, double dropout,
              const std::string& prefix, Rng& init);

  Matrix forward(std::span<const Matrix> inputs, Mode mode, Rng* rng, Tape& tape) const;
  void backward(const Matrix& upstream, const Tape& tape);

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::vector<std::size_t> input_dims_;
  double dropout_ = 0.0;
  Parameter weight_;
  Parameter bias_;
};

/// Frame-level LAFF per frame stream, then a video-level LAFF fusing the
/// stream outputs with the remaining video-level features.
class LaffMlBlock {
 public:
  struct Tape {
    std::vector<FrameLaff::Tape> streams;
    LaffBlock::Tape top;
  };

  LaffMlBlock() = default;
  LaffMlBlock(std::span<const FeatureDecl> features, std::size_t out_dim, double dropout,
              const std::string& prefix, Rng& init);

  Matrix forward(const ModalityBatch& batch, Mode mode, Rng* rng, Tape& tape) const;
  void backward(const Matrix& upstream, const Tape& tape);

  LaffBlock& top() { return top_; }
  const LaffBlock& top() const { return top_; }
  FrameLaff& stream(std::size_t i) { return streams_[i]; }

  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::vector<FeatureLevel> levels_;
  std::vector<std::size_t> stream_slot_;  // feature index -> stream index (frame-level only)
  std::vector<FrameLaff> streams_;
  LaffBlock top_;
};

using FusionBlock = std::variant<LaffBlock, MhsaBlock, ConcatBlock, LaffMlBlock>;
using BlockTape = std::variant<LaffBlock::Tape, MhsaBlock::Tape, ConcatBlock::Tape, LaffMlBlock::Tape>;

// ---- paired multi-space model ----------------------------------------------

struct SpaceEncoding {
  Matrix raw;        // block output, samples × d
  Matrix embedding;  // L2-normalized rows
  Matrix weights;    // samples × k attention weights; empty for non-attentional blocks
  BlockTape tape;
};

struct ModalityEncoding {
  std::vector<SpaceEncoding> spaces;

  std::size_t samples() const { return spaces.empty() ? 0 : spaces.front().embedding.rows(); }
};

/// h pairs of (video block, text block); each pair defines one common space.
class FusionModel {
 public:
  FusionModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t spaces() const { return config_.spaces; }

  ModalityEncoding encode(Modality modality, const ModalityBatch& batch, Mode mode,
                          Rng* dropout_rng) const;
  /// `embedding_grads[i]` is dLoss/d(embedding of space i).
  void backward(Modality modality, std::span<const Matrix> embedding_grads,
                const ModalityEncoding& encoding);

  FusionBlock& block(Modality modality, std::size_t space);
  const FusionBlock& block(Modality modality, std::size_t space) const;

  /// Declaration order: per space, video block then text block.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  std::vector<double> flat_values() const;
  void set_flat_values(std::span<const double> values);

 private:
  ModelConfig config_;
  std::vector<FusionBlock> video_blocks_;
  std::vector<FusionBlock> text_blocks_;
};

/// Per-space cosines and their mean for one (video, text) pair.
struct PairSimilarity {
  double mean = 0.0;
  std::vector<double> per_space;
};

PairSimilarity similarity(const ModalityEncoding& videos, std::size_t video_row,
                          const ModalityEncoding& texts, std::size_t text_row);

/// queries × videos cosine matrix per space.
std::vector<Matrix> space_similarities(const ModalityEncoding& texts,
                                       const ModalityEncoding& videos);

/// Elementwise mean over spaces.
Matrix mean_similarity(std::span<const Matrix> per_space);

// ---- serialization ------------------------------------------------------------

inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(const FusionModel& model, const std::string& path);
FusionModel load_model(const std::string& path);
/// JSON mirror of the model configuration, written next to the binary.
void save_model_sidecar(const FusionModel& model, const std::string& path);

}  // namespace laff

#include <numeric>
#include <set>

#include "laff/errors.hpp"
#include "laff/fusion.hpp"

namespace laff {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::laff: return "laff";
    case BlockKind::attention_free: return "attention_free";
    case BlockKind::mhsa: return "mhsa";
    case BlockKind::concat: return "concat";
    case BlockKind::laff_ml: return "laff_ml";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& name) {
  if (name == "laff") return BlockKind::laff;
  if (name == "attention_free") return BlockKind::attention_free;
  if (name == "mhsa") return BlockKind::mhsa;
  if (name == "concat") return BlockKind::concat;
  if (name == "laff_ml") return BlockKind::laff_ml;
  throw ConfigError("unknown fusion block '" + name +
                    "' (expected laff, attention_free, mhsa, concat or laff_ml)");
}

std::string to_string(FeatureLevel level) {
  return level == FeatureLevel::video ? "video" : "frame";
}

FeatureLevel parse_feature_level(const std::string& name) {
  if (name == "video") return FeatureLevel::video;
  if (name == "frame") return FeatureLevel::frame;
  throw ConfigError("unknown feature level '" + name + "' (expected video or frame)");
}

void ModelConfig::validate() const {
  if (spaces < 1) throw ConfigError("model: space count h must be >= 1");
  if (total_dim % spaces != 0) {
    throw ConfigError("model: d0 = " + std::to_string(total_dim) + " is not divisible by h = " +
                      std::to_string(spaces));
  }
  if (space_dim() < 1) throw ConfigError("model: per-space dimension d0/h must be >= 1");
  validate_dropout_rate(dropout);
  for (Modality m : {Modality::video, Modality::text}) {
    const char* label = m == Modality::video ? "video" : "text";
    const auto& feats = features(m);
    if (feats.empty()) throw ConfigError(std::string("model: no ") + label + " features declared");
    std::set<std::string> names;
    for (const FeatureDecl& f : feats) {
      if (f.name.empty()) throw ConfigError(std::string("model: empty ") + label + " feature name");
      if (!names.insert(f.name).second) {
        throw ConfigError(std::string("model: duplicate ") + label + " feature '" + f.name + "'");
      }
      if (f.dim < 1) throw ConfigError("model: feature '" + f.name + "' has dim 0");
      if (m == Modality::text && f.level != FeatureLevel::video) {
        throw ConfigError("model: text feature '" + f.name + "' must be sentence-level");
      }
    }
  }
  if (block == BlockKind::mhsa && (mhsa_heads < 1 || space_dim() % mhsa_heads != 0)) {
    throw ConfigError("model: " + std::to_string(mhsa_heads) +
                      " attention heads do not divide the per-space dim " +
                      std::to_string(space_dim()));
  }
}

namespace {

std::size_t block_param_count(BlockKind kind, const std::vector<FeatureDecl>& feats, std::size_t d,
                              bool is_video) {
  const std::size_t k = feats.size();
  std::size_t dims = 0;
  for (const FeatureDecl& f : feats) dims += f.dim;
  switch (kind) {
    case BlockKind::laff: return dims * d + k * d + d;
    case BlockKind::attention_free: return dims * d + k * d;
    case BlockKind::concat: return dims * d + d;
    case BlockKind::mhsa: return dims * d + k * d + 4 * (d * d + d);
    case BlockKind::laff_ml: {
      if (!is_video) return dims * d + k * d + d;
      std::size_t total = 0;
      for (const FeatureDecl& f : feats) {
        if (f.level == FeatureLevel::frame) {
          total += f.dim * d + 2 * d;  // stream projection, bias, attention
          total += d * d + d;          // top-level projection of the stream output
        } else {
          total += f.dim * d + d;
        }
      }
      return total + d;  // top-level attention vector
    }
  }
  return 0;
}

FusionBlock make_block(const ModelConfig& cfg, Modality modality, const std::string& prefix,
                       Rng& init) {
  const auto& feats = cfg.features(modality);
  std::vector<std::size_t> dims;
  for (const FeatureDecl& f : feats) dims.push_back(f.dim);
  const std::size_t d = cfg.space_dim();
  switch (cfg.block) {
    case BlockKind::laff: return LaffBlock(dims, d, cfg.dropout, true, prefix, init);
    case BlockKind::attention_free: return LaffBlock(dims, d, cfg.dropout, false, prefix, init);
    case BlockKind::mhsa: return MhsaBlock(dims, d, cfg.mhsa_heads, cfg.dropout, prefix, init);
    case BlockKind::concat: return ConcatBlock(dims, d, cfg.dropout, prefix, init);
    case BlockKind::laff_ml:
      if (modality == Modality::video) return LaffMlBlock(feats, d, cfg.dropout, prefix, init);
      return LaffBlock(dims, d, cfg.dropout, true, prefix, init);
  }
  throw ConfigError("unknown block kind");
}

}  // namespace

std::size_t param_count(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.space_dim();
  return config.spaces * (block_param_count(config.block, config.video_features, d, true) +
                          block_param_count(config.block, config.text_features, d, false));
}

FusionModel::FusionModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng init(seed);
  for (std::size_t s = 0; s < config_.spaces; ++s) {
    const std::string space = "space" + std::to_string(s);
    video_blocks_.push_back(make_block(config_, Modality::video, space + ".video", init));
    text_blocks_.push_back(make_block(config_, Modality::text, space + ".text", init));
  }
}

FusionBlock& FusionModel::block(Modality modality, std::size_t space) {
  return modality == Modality::video ? video_blocks_.at(space) : text_blocks_.at(space);
}

const FusionBlock& FusionModel::block(Modality modality, std::size_t space) const {
  return modality == Modality::video ? video_blocks_.at(space) : text_blocks_.at(space);
}

ModalityEncoding FusionModel::encode(Modality modality, const ModalityBatch& batch, Mode mode,
                                     Rng* dropout_rng) const {
  const auto& feats = config_.features(modality);
  if (batch.pooled.size() != feats.size()) {
    throw DimensionError("encode: expected " + std::to_string(feats.size()) + " features, got " +
                         std::to_string(batch.pooled.size()));
  }
  ModalityEncoding enc;
  enc.spaces.reserve(config_.spaces);
  for (std::size_t s = 0; s < config_.spaces; ++s) {
    SpaceEncoding out;
    const FusionBlock& blk = block(modality, s);
    std::visit(
        [&](const auto& b) {
          using B = std::decay_t<decltype(b)>;
          typename B::Tape tape;
          if constexpr (std::is_same_v<B, LaffMlBlock>) {
            out.raw = b.forward(batch, mode, dropout_rng, tape);
            out.weights = tape.top.weights;
          } else {
            out.raw = b.forward(batch.pooled, mode, dropout_rng, tape);
            if constexpr (std::is_same_v<B, LaffBlock>) {
              if (b.attentional()) out.weights = tape.weights;
            }
          }
          out.tape = std::move(tape);
        },
        blk);
    out.embedding = l2_normalize_rows(out.raw);
    enc.spaces.push_back(std::move(out));
  }
  return enc;
}

void FusionModel::backward(Modality modality, std::span<const Matrix> embedding_grads,
                           const ModalityEncoding& encoding) {
  if (embedding_grads.size() != config_.spaces || encoding.spaces.size() != config_.spaces) {
    throw DimensionError("backward: expected one gradient per space");
  }
  for (std::size_t s = 0; s < config_.spaces; ++s) {
    const SpaceEncoding& enc = encoding.spaces[s];
    Matrix draw = l2_normalize_rows_backward(embedding_grads[s], enc.raw, enc.embedding);
    std::visit(
        [&](auto& b) {
          using B = std::decay_t<decltype(b)>;
          b.backward(draw, std::get<typename B::Tape>(enc.tape));
        },
        block(modality, s));
  }
}

std::vector<Parameter*> FusionModel::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t s = 0; s < config_.spaces; ++s) {
    std::visit([&](auto& b) { b.collect(out); }, video_blocks_[s]);
    std::visit([&](auto& b) { b.collect(out); }, text_blocks_[s]);
  }
  return out;
}

std::vector<const Parameter*> FusionModel::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t s = 0; s < config_.spaces; ++s) {
    std::visit([&](const auto& b) { b.collect(out); }, video_blocks_[s]);
    std::visit([&](const auto& b) { b.collect(out); }, text_blocks_[s]);
  }
  return out;
}

std::size_t FusionModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

void FusionModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::vector<double> FusionModel::flat_values() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const Parameter* p : parameters()) {
    auto v = p->value.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void FusionModel::set_flat_values(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw DimensionError("set_flat_values: got " + std::to_string(values.size()) +
                         " values for " + std::to_string(parameter_count()) + " parameters");
  }
  std::size_t offset = 0;
  for (Parameter* p : parameters()) {
    auto v = p->value.values();
    std::copy(values.begin() + offset, values.begin() + offset + v.size(), v.begin());
    offset += v.size();
  }
}

PairSimilarity similarity(const ModalityEncoding& videos, std::size_t video_row,
                          const ModalityEncoding& texts, std::size_t text_row) {
  if (videos.spaces.size() != texts.spaces.size() || videos.spaces.empty()) {
    throw DimensionError("similarity: encodings disagree on space count");
  }
  PairSimilarity out;
  for (std::size_t s = 0; s < videos.spaces.size(); ++s) {
    const double c = dot(videos.spaces[s].embedding.row(video_row),
                         texts.spaces[s].embedding.row(text_row));
    out.per_space.push_back(c);
    out.mean += c;
  }
  out.mean *= 1.0 / static_cast<double>(out.per_space.size());
  return out;
}

std::vector<Matrix> space_similarities(const ModalityEncoding& texts,
                                       const ModalityEncoding& videos) {
  if (videos.spaces.size() != texts.spaces.size()) {
    throw DimensionError("space_similarities: encodings disagree on space count");
  }
  std::vector<Matrix> out;
  for (std::size_t s = 0; s < texts.spaces.size(); ++s) {
    out.push_back(cosine_matrix(texts.spaces[s].embedding, videos.spaces[s].embedding));
  }
  return out;
}

Matrix mean_similarity(std::span<const Matrix> per_space) {
  if (per_space.empty()) throw DimensionError("mean_similarity: no spaces");
  Matrix out(per_space.front().rows(), per_space.front().cols());
  for (const Matrix& m : per_space) out += m;
  out *= 1.0 / static_cast<double>(per_space.size());
  return out;
}

}  // namespace laff

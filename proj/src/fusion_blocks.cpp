#include <cmath>
#include <numeric>
#include <limits>

#include "laff/errors.hpp"
#include "laff/fusion.hpp"

namespace laff {

namespace {

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

// Weight (fan_in × out) and bias (1 × out), both U(±1/√fan_in).
std::pair<Parameter, Parameter> make_affine(std::size_t fan_in, std::size_t out,
                                            const std::string& name, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Parameter w(name + ".weight", uniform_matrix(fan_in, out, bound, rng));
  Parameter b(name + ".bias", uniform_matrix(1, out, bound, rng));
  return {std::move(w), std::move(b)};
}

std::size_t common_rows(std::span<const Matrix> inputs) {
  if (inputs.empty()) throw DegenerateInputError("fusion block: empty feature list");
  const std::size_t rows = inputs.front().rows();
  for (const Matrix& m : inputs) {
    if (m.rows() != rows) {
      throw DimensionError("fusion block: inputs disagree on sample count (" +
                           std::to_string(rows) + " vs " + std::to_string(m.rows()) + ")");
    }
  }
  return rows;
}

void check_dims(std::span<const Matrix> inputs, const std::vector<Parameter>& projections,
                const char* what) {
  if (inputs.size() != projections.size()) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(projections.size()) +
                         " features, got " + std::to_string(inputs.size()));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].cols() != projections[i].value.rows()) {
      throw DimensionError(std::string(what) + ": feature " + std::to_string(i) + " has dim " +
                           std::to_string(inputs[i].cols()) + ", expected " +
                           std::to_string(projections[i].value.rows()));
    }
  }
}

// Projection + dropout. The mask stays empty outside training.
Matrix project(const Matrix& input, const Parameter& w, const Parameter& b, double rate, Mode mode,
               Rng* rng, Matrix& mask) {
  Matrix p = affine_forward(input, w.value, b.value.values());
  if (mode == Mode::train && rate > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("training-mode dropout needs a generator");
    auto d = dropout_forward(p, rate, mode, *rng);
    mask = std::move(d.mask);
    return std::move(d.output);
  }
  mask = Matrix{};
  return p;
}

// Backward through dropout + affine; accumulates into w/b, returns input grad.
Matrix project_backward(const Matrix& upstream, const Matrix& mask, const Matrix& input,
                        Parameter& w, Parameter& b) {
  Matrix dp = dropout_backward(upstream, mask);
  AffineGrads g = affine_backward(dp, input, w.value);
  w.grad += g.weight;
  auto bg = b.grad.values();
  for (std::size_t c = 0; c < bg.size(); ++c) bg[c] += g.bias[c];
  return std::move(g.input);
}

}  // namespace

// ---- LaffBlock ---------------------------------------------------------------

LaffBlock::LaffBlock(std::span<const std::size_t> input_dims, std::size_t out_dim, double dropout,
                     bool attentional, const std::string& prefix, Rng& init)
    : out_dim_(out_dim), dropout_(dropout), attentional_(attentional) {
  validate_dropout_rate(dropout);
  for (std::size_t i = 0; i < input_dims.size(); ++i) {
    auto [w, b] = make_affine(input_dims[i], out_dim, prefix + ".proj" + std::to_string(i), init);
    projections_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
  if (attentional_) attention_ = Parameter(prefix + ".attention", Matrix(1, out_dim, 0.0));
}

Matrix LaffBlock::forward(std::span<const Matrix> inputs, Mode mode, Rng* rng, Tape& tape) const {
  const std::size_t samples = common_rows(inputs);
  check_dims(inputs, projections_, "laff");
  const std::size_t k = inputs.size();

  tape.inputs.assign(inputs.begin(), inputs.end());
  tape.masks.assign(k, Matrix{});
  tape.activations.clear();
  for (std::size_t i = 0; i < k; ++i) {
    Matrix p = project(inputs[i], projections_[i], biases_[i], dropout_, mode, rng, tape.masks[i]);
    tape.activations.push_back(tanh_forward(p));
  }

  if (attentional_) {
    Matrix logits(samples, k);
    auto w = attention_.value.values();
    for (std::size_t b = 0; b < samples; ++b)
      for (std::size_t i = 0; i < k; ++i) logits(b, i) = dot(tape.activations[i].row(b), w);
    tape.weights = softmax_rows(logits);
  } else {
    tape.weights = Matrix(samples, k, 1.0 / static_cast<double>(k));
  }

  Matrix out(samples, out_dim_);
  for (std::size_t b = 0; b < samples; ++b) {
    auto o = out.row(b);
    for (std::size_t i = 0; i < k; ++i) {
      const double a = tape.weights(b, i);
      auto e = tape.activations[i].row(b);
      for (std::size_t c = 0; c < out_dim_; ++c) o[c] += a * e[c];
    }
  }
  return out;
}

std::vector<Matrix> LaffBlock::backward(const Matrix& upstream, const Tape& tape) {
  const std::size_t k = tape.activations.size();
  const std::size_t samples = upstream.rows();

  Matrix dlogits;
  if (attentional_) {
    Matrix dweights(samples, k);
    for (std::size_t b = 0; b < samples; ++b)
      for (std::size_t i = 0; i < k; ++i)
        dweights(b, i) = dot(upstream.row(b), tape.activations[i].row(b));
    dlogits = softmax_rows_backward(dweights, tape.weights);
    auto dw = attention_.grad.values();
    for (std::size_t b = 0; b < samples; ++b)
      for (std::size_t i = 0; i < k; ++i) {
        const double g = dlogits(b, i);
        auto e = tape.activations[i].row(b);
        for (std::size_t c = 0; c < out_dim_; ++c) dw[c] += g * e[c];
      }
  }

  std::vector<Matrix> input_grads;
  input_grads.reserve(k);
  auto w = attention_.value.values();
  for (std::size_t i = 0; i < k; ++i) {
    Matrix de(samples, out_dim_);
    for (std::size_t b = 0; b < samples; ++b) {
      auto row = de.row(b);
      auto up = upstream.row(b);
      const double a = tape.weights(b, i);
      for (std::size_t c = 0; c < out_dim_; ++c) row[c] = a * up[c];
      if (attentional_) {
        const double g = dlogits(b, i);
        for (std::size_t c = 0; c < out_dim_; ++c) row[c] += g * w[c];
      }
    }
    Matrix dp = tanh_backward(de, tape.activations[i]);
    input_grads.push_back(
        project_backward(dp, tape.masks[i], tape.inputs[i], projections_[i], biases_[i]));
  }
  return input_grads;
}

void LaffBlock::collect(std::vector<Parameter*>& out) {
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    out.push_back(&projections_[i]);
    out.push_back(&biases_[i]);
  }
  if (attentional_) out.push_back(&attention_);
}

void LaffBlock::collect(std::vector<const Parameter*>& out) const {
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    out.push_back(&projections_[i]);
    out.push_back(&biases_[i]);
  }
  if (attentional_) out.push_back(&attention_);
}

// ---- FrameLaff ---------------------------------------------------------------

FrameLaff::FrameLaff(std::size_t frame_dim, std::size_t out_dim, double dropout,
                     const std::string& prefix, Rng& init)
    : out_dim_(out_dim), dropout_(dropout) {
  validate_dropout_rate(dropout);
  auto [w, b] = make_affine(frame_dim, out_dim, prefix + ".proj", init);
  projection_ = std::move(w);
  bias_ = std::move(b);
  attention_ = Parameter(prefix + ".attention", Matrix(1, out_dim, 0.0));
}

Matrix FrameLaff::forward(const FrameBatch& batch, Mode mode, Rng* rng, Tape& tape) const {
  if (batch.frames.cols() != projection_.value.rows()) {
    throw DimensionError("frame laff: frame dim " + std::to_string(batch.frames.cols()) +
                         ", expected " + std::to_string(projection_.value.rows()));
  }
  if (batch.offsets.empty() || batch.offsets.back() != batch.frames.rows()) {
    throw DimensionError("frame laff: offsets do not cover the frame matrix");
  }
  const std::size_t samples = batch.samples();
  tape.frames = batch.frames;
  tape.offsets = batch.offsets;
  Matrix p = project(batch.frames, projection_, bias_, dropout_, mode, rng, tape.mask);
  tape.activations = tanh_forward(p);
  tape.weights.assign(batch.frames.rows(), 0.0);

  auto w = attention_.value.values();
  Matrix out(samples, out_dim_);
  for (std::size_t b = 0; b < samples; ++b) {
    const std::size_t begin = batch.offsets[b];
    const std::size_t end = batch.offsets[b + 1];
    if (end <= begin) {
      throw DegenerateInputError("frame laff: sample " + std::to_string(b) + " has no frames");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t f = begin; f < end; ++f) {
      tape.weights[f] = dot(tape.activations.row(f), w);
      mx = std::max(mx, tape.weights[f]);
    }
    double sum = 0.0;
    for (std::size_t f = begin; f < end; ++f) {
      tape.weights[f] = std::exp(tape.weights[f] - mx);
      sum += tape.weights[f];
    }
    auto o = out.row(b);
    for (std::size_t f = begin; f < end; ++f) {
      tape.weights[f] /= sum;
      auto e = tape.activations.row(f);
      for (std::size_t c = 0; c < out_dim_; ++c) o[c] += tape.weights[f] * e[c];
    }
  }
  return out;
}

void FrameLaff::backward(const Matrix& upstream, const Tape& tape) {
  const std::size_t samples = upstream.rows();
  Matrix de(tape.activations.rows(), out_dim_);
  auto w = attention_.value.values();
  auto dw = attention_.grad.values();
  std::vector<double> dweight;
  for (std::size_t b = 0; b < samples; ++b) {
    const std::size_t begin = tape.offsets[b];
    const std::size_t end = tape.offsets[b + 1];
    auto up = upstream.row(b);
    dweight.assign(end - begin, 0.0);
    double inner = 0.0;
    for (std::size_t f = begin; f < end; ++f) {
      dweight[f - begin] = dot(up, tape.activations.row(f));
      inner += tape.weights[f] * dweight[f - begin];
    }
    for (std::size_t f = begin; f < end; ++f) {
      const double a = tape.weights[f];
      const double dz = a * (dweight[f - begin] - inner);
      auto e = tape.activations.row(f);
      auto row = de.row(f);
      for (std::size_t c = 0; c < out_dim_; ++c) {
        row[c] = a * up[c] + dz * w[c];
        dw[c] += dz * e[c];
      }
    }
  }
  Matrix dp = tanh_backward(de, tape.activations);
  project_backward(dp, tape.mask, tape.frames, projection_, bias_);
}

void FrameLaff::collect(std::vector<Parameter*>& out) {
  out.push_back(&projection_);
  out.push_back(&bias_);
  out.push_back(&attention_);
}

void FrameLaff::collect(std::vector<const Parameter*>& out) const {
  out.push_back(&projection_);
  out.push_back(&bias_);
  out.push_back(&attention_);
}

// ---- MhsaBlock ---------------------------------------------------------------

MhsaBlock::MhsaBlock(std::span<const std::size_t> input_dims, std::size_t out_dim,
                     std::size_t heads, double dropout, const std::string& prefix, Rng& init)
    : out_dim_(out_dim), heads_(heads), dropout_(dropout) {
  validate_dropout_rate(dropout);
  if (heads == 0 || out_dim % heads != 0) {
    throw ConfigError("mhsa: " + std::to_string(heads) + " heads do not divide dim " +
                      std::to_string(out_dim));
  }
  for (std::size_t i = 0; i < input_dims.size(); ++i) {
    auto [w, b] = make_affine(input_dims[i], out_dim, prefix + ".proj" + std::to_string(i), init);
    projections_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
  std::tie(wq_, bq_) = make_affine(out_dim, out_dim, prefix + ".query", init);
  std::tie(wk_, bk_) = make_affine(out_dim, out_dim, prefix + ".key", init);
  std::tie(wv_, bv_) = make_affine(out_dim, out_dim, prefix + ".value", init);
  std::tie(wo_, bo_) = make_affine(out_dim, out_dim, prefix + ".output", init);
}

Matrix MhsaBlock::forward(std::span<const Matrix> inputs, Mode mode, Rng* rng, Tape& tape) const {
  const std::size_t samples = common_rows(inputs);
  check_dims(inputs, projections_, "mhsa");
  const std::size_t k = inputs.size();
  const std::size_t d = out_dim_;
  const std::size_t head_dim = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  tape.samples = samples;
  tape.inputs.assign(inputs.begin(), inputs.end());
  tape.masks.assign(k, Matrix{});
  tape.tokens = Matrix(samples * k, d);
  for (std::size_t i = 0; i < k; ++i) {
    Matrix p = project(inputs[i], projections_[i], biases_[i], dropout_, mode, rng, tape.masks[i]);
    for (std::size_t b = 0; b < samples; ++b) {
      auto src = p.row(b);
      std::copy(src.begin(), src.end(), tape.tokens.row(b * k + i).begin());
    }
  }
  tape.q = affine_forward(tape.tokens, wq_.value, bq_.value.values());
  // The key bias only shifts each score row by a constant, which softmax ignores, so it is
  // left out here. Keeps its gradient exactly zero instead of rounding noise.
  tape.k = affine_forward(tape.tokens, wk_.value, std::vector<double>(d, 0.0));
  tape.v = affine_forward(tape.tokens, wv_.value, bv_.value.values());

  tape.attention.assign(samples * heads_, Matrix{});
  tape.concat = Matrix(samples * k, d);
  for (std::size_t b = 0; b < samples; ++b) {
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t c0 = h * head_dim;
      Matrix scores(k, k);
      for (std::size_t i = 0; i < k; ++i) {
        auto qi = tape.q.row(b * k + i).subspan(c0, head_dim);
        for (std::size_t j = 0; j < k; ++j)
          scores(i, j) = scale * dot(qi, tape.k.row(b * k + j).subspan(c0, head_dim));
      }
      Matrix attn = softmax_rows(scores);
      for (std::size_t i = 0; i < k; ++i) {
        auto o = tape.concat.row(b * k + i).subspan(c0, head_dim);
        for (std::size_t j = 0; j < k; ++j) {
          const double a = attn(i, j);
          auto vj = tape.v.row(b * k + j).subspan(c0, head_dim);
          for (std::size_t c = 0; c < head_dim; ++c) o[c] += a * vj[c];
        }
      }
      tape.attention[b * heads_ + h] = std::move(attn);
    }
  }

  Matrix y = affine_forward(tape.concat, wo_.value, bo_.value.values());
  Matrix out(samples, d);
  const double inv_k = 1.0 / static_cast<double>(k);
  for (std::size_t b = 0; b < samples; ++b) {
    auto o = out.row(b);
    for (std::size_t i = 0; i < k; ++i) {
      auto yr = y.row(b * k + i);
      for (std::size_t c = 0; c < d; ++c) o[c] += yr[c];
    }
    for (double& v : o) v *= inv_k;
  }
  return out;
}

void MhsaBlock::backward(const Matrix& upstream, const Tape& tape) {
  const std::size_t samples = tape.samples;
  const std::size_t k = tape.inputs.size();
  const std::size_t d = out_dim_;
  const std::size_t head_dim = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const double inv_k = 1.0 / static_cast<double>(k);

  Matrix dy(samples * k, d);
  for (std::size_t b = 0; b < samples; ++b)
    for (std::size_t i = 0; i < k; ++i) {
      auto row = dy.row(b * k + i);
      auto up = upstream.row(b);
      for (std::size_t c = 0; c < d; ++c) row[c] = up[c] * inv_k;
    }
  Matrix dconcat = project_backward(dy, Matrix{}, tape.concat, wo_, bo_);

  Matrix dq(samples * k, d), dk(samples * k, d), dv(samples * k, d);
  for (std::size_t b = 0; b < samples; ++b) {
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t c0 = h * head_dim;
      const Matrix& attn = tape.attention[b * heads_ + h];
      Matrix dattn(k, k);
      for (std::size_t i = 0; i < k; ++i) {
        auto doi = dconcat.row(b * k + i).subspan(c0, head_dim);
        for (std::size_t j = 0; j < k; ++j) {
          dattn(i, j) = dot(doi, tape.v.row(b * k + j).subspan(c0, head_dim));
          auto dvj = dv.row(b * k + j).subspan(c0, head_dim);
          const double a = attn(i, j);
          for (std::size_t c = 0; c < head_dim; ++c) dvj[c] += a * doi[c];
        }
      }
      Matrix dscores = softmax_rows_backward(dattn, attn);
      for (std::size_t i = 0; i < k; ++i) {
        auto dqi = dq.row(b * k + i).subspan(c0, head_dim);
        auto qi = tape.q.row(b * k + i).subspan(c0, head_dim);
        for (std::size_t j = 0; j < k; ++j) {
          const double g = scale * dscores(i, j);
          auto kj = tape.k.row(b * k + j).subspan(c0, head_dim);
          auto dkj = dk.row(b * k + j).subspan(c0, head_dim);
          for (std::size_t c = 0; c < head_dim; ++c) {
            dqi[c] += g * kj[c];
            dkj[c] += g * qi[c];
          }
        }
      }
    }
  }

  Matrix dtokens = project_backward(dq, Matrix{}, tape.tokens, wq_, bq_);
  const Matrix bk_grad = bk_.grad;
  dtokens += project_backward(dk, Matrix{}, tape.tokens, wk_, bk_);
  bk_.grad = bk_grad;
  dtokens += project_backward(dv, Matrix{}, tape.tokens, wv_, bv_);

  for (std::size_t i = 0; i < k; ++i) {
    Matrix dp(samples, d);
    for (std::size_t b = 0; b < samples; ++b) {
      auto src = dtokens.row(b * k + i);
      std::copy(src.begin(), src.end(), dp.row(b).begin());
    }
    project_backward(dp, tape.masks[i], tape.inputs[i], projections_[i], biases_[i]);
  }
}

void MhsaBlock::collect(std::vector<Parameter*>& out) {
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    out.push_back(&projections_[i]);
    out.push_back(&biases_[i]);
  }
  for (Parameter* p : {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_}) out.push_back(p);
}

void MhsaBlock::collect(std::vector<const Parameter*>& out) const {
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    out.push_back(&projections_[i]);
    out.push_back(&biases_[i]);
  }
  for (const Parameter* p : {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_}) out.push_back(p);
}

// ---- ConcatBlock -------------------------------------------------------------

ConcatBlock::ConcatBlock(std::span<const std::size_t> input_dims, std::size_t out_dim,
                         double dropout, const std::string& prefix, Rng& init)
    : input_dims_(input_dims.begin(), input_dims.end()), dropout_(dropout) {
  validate_dropout_rate(dropout);
  const std::size_t total = std::accumulate(input_dims_.begin(), input_dims_.end(), std::size_t{0});
  std::tie(weight_, bias_) = make_affine(total, out_dim, prefix + ".concat", init);
}

Matrix ConcatBlock::forward(std::span<const Matrix> inputs, Mode mode, Rng* rng,
                            Tape& tape) const {
  const std::size_t samples = common_rows(inputs);
  if (inputs.size() != input_dims_.size()) {
    throw DimensionError("concat: expected " + std::to_string(input_dims_.size()) +
                         " features, got " + std::to_string(inputs.size()));
  }
  tape.input = Matrix(samples, weight_.value.rows());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].cols() != input_dims_[i]) {
      throw DimensionError("concat: feature " + std::to_string(i) + " has dim " +
                           std::to_string(inputs[i].cols()) + ", expected " +
                           std::to_string(input_dims_[i]));
    }
    for (std::size_t b = 0; b < samples; ++b) {
      auto src = inputs[i].row(b);
      std::copy(src.begin(), src.end(), tape.input.row(b).begin() + offset);
    }
    offset += input_dims_[i];
  }
  Matrix p = project(tape.input, weight_, bias_, dropout_, mode, rng, tape.mask);
  tape.output = tanh_forward(p);
  return tape.output;
}

void ConcatBlock::backward(const Matrix& upstream, const Tape& tape) {
  Matrix dp = tanh_backward(upstream, tape.output);
  project_backward(dp, tape.mask, tape.input, weight_, bias_);
}

void ConcatBlock::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void ConcatBlock::collect(std::vector<const Parameter*>& out) const {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---- LaffMlBlock ---------------------------------------------------------------

LaffMlBlock::LaffMlBlock(std::span<const FeatureDecl> features, std::size_t out_dim,
                         double dropout, const std::string& prefix, Rng& init) {
  std::vector<std::size_t> top_dims;
  stream_slot_.assign(features.size(), 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    levels_.push_back(features[i].level);
    if (features[i].level == FeatureLevel::frame) {
      stream_slot_[i] = streams_.size();
      streams_.emplace_back(features[i].dim, out_dim, dropout,
                            prefix + ".frame" + std::to_string(i), init);
      top_dims.push_back(out_dim);
    } else {
      top_dims.push_back(features[i].dim);
    }
  }
  top_ = LaffBlock(top_dims, out_dim, dropout, true, prefix, init);
}

Matrix LaffMlBlock::forward(const ModalityBatch& batch, Mode mode, Rng* rng, Tape& tape) const {
  if (batch.pooled.size() != levels_.size()) {
    throw DimensionError("laff-ml: expected " + std::to_string(levels_.size()) +
                         " features, got " + std::to_string(batch.pooled.size()));
  }
  tape.streams.assign(streams_.size(), FrameLaff::Tape{});
  std::vector<Matrix> top_inputs;
  top_inputs.reserve(levels_.size());
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (levels_[i] == FeatureLevel::frame) {
      if (i >= batch.frames.size() || !batch.frames[i]) {
        throw DegenerateInputError("laff-ml: frame data missing for feature " + std::to_string(i));
      }
      const std::size_t s = stream_slot_[i];
      top_inputs.push_back(streams_[s].forward(*batch.frames[i], mode, rng, tape.streams[s]));
    } else {
      top_inputs.push_back(batch.pooled[i]);
    }
  }
  return top_.forward(top_inputs, mode, rng, tape.top);
}

void LaffMlBlock::backward(const Matrix& upstream, const Tape& tape) {
  std::vector<Matrix> input_grads = top_.backward(upstream, tape.top);
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (levels_[i] != FeatureLevel::frame) continue;
    const std::size_t s = stream_slot_[i];
    streams_[s].backward(input_grads[i], tape.streams[s]);
  }
}

void LaffMlBlock::collect(std::vector<Parameter*>& out) {
  for (FrameLaff& s : streams_) s.collect(out);
  top_.collect(out);
}

void LaffMlBlock::collect(std::vector<const Parameter*>& out) const {
  for (const FrameLaff& s : streams_) s.collect(out);
  top_.collect(out);
}

}  // namespace laff

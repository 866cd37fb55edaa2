#include "laff/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "laff/errors.hpp"

namespace laff {

Matrix affine_forward(const Matrix& input, const Matrix& weight, std::span<const double> bias) {
  if (input.cols() != weight.rows()) {
    throw DimensionError("affine: input " + input.shape_string() + " vs weight " +
                         weight.shape_string());
  }
  if (!bias.empty() && bias.size() != weight.cols()) {
    throw DimensionError("affine: bias length " + std::to_string(bias.size()) + " vs weight " +
                         weight.shape_string());
  }
  Matrix out = matmul(input, weight);
  if (!bias.empty()) {
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
  }
  return out;
}

AffineGrads affine_backward(const Matrix& upstream, const Matrix& input, const Matrix& weight) {
  if (input.cols() != weight.rows() || upstream.rows() != input.rows() ||
      upstream.cols() != weight.cols()) {
    throw DimensionError("affine backward: upstream " + upstream.shape_string() + ", input " +
                         input.shape_string() + ", weight " + weight.shape_string());
  }
  return {matmul_nt(upstream, weight), matmul_tn(input, upstream), column_sums(upstream)};
}

Matrix tanh_forward(const Matrix& input) {
  Matrix out = input;
  for (double& v : out.values()) v = std::tanh(v);
  return out;
}

Matrix tanh_backward(const Matrix& upstream, const Matrix& output) {
  require_same_shape(upstream, output, "tanh backward");
  Matrix g = upstream;
  auto o = output.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= 1.0 - o[i] * o[i];
  return g;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& upstream, const Matrix& output) {
  require_same_shape(upstream, output, "softmax backward");
  Matrix g(upstream.rows(), upstream.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    auto y = output.row(r);
    auto dy = upstream.row(r);
    const double inner = dot(y, dy);
    auto gr = g.row(r);
    for (std::size_t c = 0; c < gr.size(); ++c) gr[c] = y[c] * (dy[c] - inner);
  }
  return g;
}

Matrix l2_normalize_rows(const Matrix& input) {
  Matrix out = input;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double norm = std::sqrt(dot(row, row));
    if (!std::isfinite(norm)) {
      throw NumericError("l2_normalize: row " + std::to_string(r) + " is not finite");
    }
    if (norm < 1e-12) {
      std::ostringstream os;
      os << "l2_normalize: row " << r << " has norm " << norm << " (degenerate vector)";
      throw DegenerateInputError(os.str());
    }
    for (double& v : row) v /= norm;
  }
  return out;
}

Matrix l2_normalize_rows_backward(const Matrix& upstream, const Matrix& input,
                                  const Matrix& output) {
  require_same_shape(upstream, input, "l2_normalize backward");
  require_same_shape(output, input, "l2_normalize backward");
  Matrix g(input.rows(), input.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    auto x = input.row(r);
    auto y = output.row(r);
    auto dy = upstream.row(r);
    const double norm = std::sqrt(dot(x, x));
    const double proj = dot(y, dy);
    auto gr = g.row(r);
    for (std::size_t c = 0; c < gr.size(); ++c) gr[c] = (dy[c] - y[c] * proj) / norm;
  }
  return g;
}

Matrix cosine_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_matrix: " + a.shape_string() + " vs " + b.shape_string());
  }
  return matmul_nt(a, b);
}

CosineGrads cosine_matrix_backward(const Matrix& upstream, const Matrix& a, const Matrix& b) {
  if (upstream.rows() != a.rows() || upstream.cols() != b.rows()) {
    throw DimensionError("cosine_matrix backward: upstream " + upstream.shape_string());
  }
  return {matmul(upstream, b), matmul_tn(upstream, a)};
}

void validate_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    std::ostringstream os;
    os << "dropout rate " << rate << " outside [0, 1)";
    throw ConfigError(os.str());
  }
}

DropoutResult dropout_forward(const Matrix& input, double rate, Mode mode, Rng& rng) {
  validate_dropout_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return {input, Matrix{}};
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  DropoutResult res{input, Matrix(input.rows(), input.cols())};
  auto mask = res.mask.values();
  auto out = res.output.values();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = keep(rng) ? keep_scale : 0.0;
    out[i] *= mask[i];
  }
  return res;
}

Matrix dropout_backward(const Matrix& upstream, const Matrix& mask) {
  if (mask.empty()) return upstream;
  require_same_shape(upstream, mask, "dropout backward");
  Matrix g = upstream;
  auto gv = g.values();
  auto mv = mask.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv[i];
  return g;
}

GradCheckReport grad_check(const ScalarObjective& objective, std::span<Parameter* const> params,
                           double step) {
  GradCheckReport report;
  const double base = objective(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: objective is non-finite");

  // Snapshot analytic gradients before the probing evaluations overwrite anything.
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    auto values = p.value.values();
    auto ga = analytic[pi].values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = objective(false);
      values[i] = original - step;
      const double down = objective(false);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      if (!std::isfinite(numeric) || !std::isfinite(ga[i])) {
        std::ostringstream os;
        os << "grad_check: non-finite gradient at " << p.name << "[" << i << "] (analytic "
           << ga[i] << ", numeric " << numeric << ")";
        throw NumericError(os.str());
      }
      const double denom = std::max(1e-8, std::abs(ga[i]) + std::abs(numeric));
      const double rel = std::abs(ga[i] - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = rel;
        report.worst_parameter = p.name;
        report.worst_index = i;
        report.analytic = ga[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace laff

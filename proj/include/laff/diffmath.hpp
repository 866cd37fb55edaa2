#pragma once

// Dense kernels with hand-derived backward passes, plus a central-difference
// gradient checker. Everything here is a pure function of its inputs except
// dropout, which draws from the caller's generator.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "laff/matrix.hpp"

namespace laff {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

/// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

// ---- affine ---------------------------------------------------------------

/// out[r] = input[r]·weight + bias. An empty bias span means no bias.
Matrix affine_forward(const Matrix& input, const Matrix& weight, std::span<const double> bias = {});

struct AffineGrads {
  Matrix input;
  Matrix weight;
  std::vector<double> bias;
};

AffineGrads affine_backward(const Matrix& upstream, const Matrix& input, const Matrix& weight);

// ---- elementwise / row-wise -----------------------------------------------

Matrix tanh_forward(const Matrix& input);
/// `output` is the cached forward result.
Matrix tanh_backward(const Matrix& upstream, const Matrix& output);

/// Row-wise softmax with row-max subtraction.
Matrix softmax_rows(const Matrix& logits);
Matrix softmax_rows_backward(const Matrix& upstream, const Matrix& output);

/// Throws DegenerateInputError when a row norm is below 1e-12.
Matrix l2_normalize_rows(const Matrix& input);
Matrix l2_normalize_rows_backward(const Matrix& upstream, const Matrix& input,
                                  const Matrix& output);

/// a·bᵀ for unit-row operands; entry (i, j) is the cosine of a[i] and b[j].
Matrix cosine_matrix(const Matrix& a, const Matrix& b);

struct CosineGrads {
  Matrix a;
  Matrix b;
};
CosineGrads cosine_matrix_backward(const Matrix& upstream, const Matrix& a, const Matrix& b);

// ---- dropout ----------------------------------------------------------------

/// Inverted dropout. `mask` holds 0 or 1/(1-rate) per entry and is empty when
/// the op is the identity (eval mode or rate 0).
struct DropoutResult {
  Matrix output;
  Matrix mask;
};

DropoutResult dropout_forward(const Matrix& input, double rate, Mode mode, Rng& rng);
Matrix dropout_backward(const Matrix& upstream, const Matrix& mask);

void validate_dropout_rate(double rate);

// ---- gradient checking ----------------------------------------------------

/// Scalar objective used by grad_check. When `with_grad` is true the callee
/// must zero and then fill every checked Parameter::grad.
using ScalarObjective = std::function<double(bool with_grad)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares analytic gradients with central differences over every coordinate
/// of every parameter. Relative error is |ga - gn| / max(1e-8, |ga| + |gn|).
/// Throws NumericError on non-finite values.
GradCheckReport grad_check(const ScalarObjective& objective, std::span<Parameter* const> params,
                           double step = 1e-5);

}  // namespace laff

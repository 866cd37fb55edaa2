#pragma once

// Triplet ranking loss with in-batch hardest-negative mining, applied either
// per common space (combined loss) or once on the mean similarity (single loss).

#include <cstddef>
#include <span>
#include <vector>

#include "laff/diffmath.hpp"
#include "laff/fusion.hpp"
#include "laff/matrix.hpp"

namespace laff {

enum class LossMode { combined, single };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& name);

/// queries × videos similarity matrix with one positive column per query.
/// `column_groups`, when non-empty, tags each column with its video identity;
/// columns sharing the positive's group are never treated as negatives.
struct TripletResult {
  double loss = 0.0;
  Matrix grad;                       // dLoss/dS, same shape as S
  std::vector<std::size_t> hardest;  // column of the mined negative per query
  std::vector<double> per_query;
};

TripletResult triplet_hard_loss(const Matrix& sims, std::span<const std::size_t> positive,
                                double margin, std::span<const std::size_t> column_groups = {});

struct LossReport {
  std::vector<double> space_losses;
  double combined = 0.0;
  std::vector<std::vector<std::size_t>> hardest;  // per mined similarity, per query
};

struct LossResult {
  LossReport report;
  std::vector<Matrix> grads;  // dLoss/dS_i per space
};

/// Σ_i loss_i, each mined on its own space's similarities.
LossResult combined_loss(std::span<const Matrix> per_space, std::span<const std::size_t> positive,
                         double margin, std::span<const std::size_t> column_groups = {});

/// One triplet loss on the mean similarity (1/h) Σ_i S_i.
LossResult single_loss(std::span<const Matrix> per_space, std::span<const std::size_t> positive,
                       double margin, std::span<const std::size_t> column_groups = {});

LossResult batch_loss(LossMode mode, std::span<const Matrix> per_space,
                      std::span<const std::size_t> positive, double margin,
                      std::span<const std::size_t> column_groups = {});

/// Text rows of a batch paired with video rows; text row q's positive is
/// video row positive[q].
struct PairedBatch {
  ModalityBatch videos;
  ModalityBatch texts;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> video_groups;
};

struct BatchOutcome {
  LossReport report;
  std::vector<Matrix> video_weights;  // per space, empty if the block has none
  std::vector<Matrix> text_weights;
};

/// Forward pass, loss, and (when `backprop`) gradient accumulation into the
/// model's parameters. Gradients are added, not reset.
BatchOutcome run_batch(FusionModel& model, const PairedBatch& batch, double margin, LossMode mode,
                       Mode run_mode, Rng* dropout_rng, bool backprop);

}  // namespace laff

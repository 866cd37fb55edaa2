#include "laff/objective.hpp"

#include <cmath>
#include <sstream>

#include "laff/errors.hpp"

namespace laff {

std::string to_string(LossMode mode) { return mode == LossMode::combined ? "combined" : "single"; }

LossMode parse_loss_mode(const std::string& name) {
  if (name == "combined") return LossMode::combined;
  if (name == "single") return LossMode::single;
  throw ConfigError("unknown loss mode '" + name + "' (expected combined or single)");
}

TripletResult triplet_hard_loss(const Matrix& sims, std::span<const std::size_t> positive,
                                double margin, std::span<const std::size_t> column_groups) {
  if (!(margin > 0.0)) throw ConfigError("triplet loss: margin must be positive");
  const std::size_t queries = sims.rows();
  const std::size_t columns = sims.cols();
  if (positive.size() != queries) {
    throw DimensionError("triplet loss: " + std::to_string(positive.size()) +
                         " positives for " + std::to_string(queries) + " queries");
  }
  if (!column_groups.empty() && column_groups.size() != columns) {
    throw DimensionError("triplet loss: column group count does not match similarity columns");
  }
  if (queries == 0 || columns < 2) {
    throw DegenerateInputError("triplet loss: batch of " + std::to_string(columns) +
                               " has no in-batch negatives");
  }

  TripletResult res;
  res.grad = Matrix(queries, columns);
  res.hardest.assign(queries, 0);
  res.per_query.assign(queries, 0.0);
  const double scale = 1.0 / static_cast<double>(queries);
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t pos = positive[q];
    if (pos >= columns) throw DimensionError("triplet loss: positive column out of range");
    auto row = sims.row(q);
    bool found = false;
    std::size_t best = 0;
    for (std::size_t j = 0; j < columns; ++j) {
      const bool negative =
          column_groups.empty() ? j != pos : column_groups[j] != column_groups[pos];
      if (!negative) continue;
      if (!found || row[j] > row[best]) {
        best = j;
        found = true;
      }
    }
    if (!found) {
      throw DegenerateInputError("triplet loss: query " + std::to_string(q) +
                                 " has no in-batch negative");
    }
    res.hardest[q] = best;
    const double violation = margin + row[best] - row[pos];
    if (violation > 0.0) {
      res.per_query[q] = violation;
      res.grad(q, best) += scale;
      res.grad(q, pos) -= scale;
    }
    res.loss += res.per_query[q];
  }
  res.loss *= scale;
  return res;
}

LossResult combined_loss(std::span<const Matrix> per_space, std::span<const std::size_t> positive,
                         double margin, std::span<const std::size_t> column_groups) {
  if (per_space.empty()) throw DimensionError("combined loss: no spaces");
  LossResult out;
  for (const Matrix& s : per_space) {
    TripletResult t = triplet_hard_loss(s, positive, margin, column_groups);
    out.report.space_losses.push_back(t.loss);
    out.report.combined += t.loss;
    out.report.hardest.push_back(std::move(t.hardest));
    out.grads.push_back(std::move(t.grad));
  }
  return out;
}

LossResult single_loss(std::span<const Matrix> per_space, std::span<const std::size_t> positive,
                       double margin, std::span<const std::size_t> column_groups) {
  Matrix mean = mean_similarity(per_space);
  TripletResult t = triplet_hard_loss(mean, positive, margin, column_groups);
  LossResult out;
  out.report.space_losses.push_back(t.loss);
  out.report.combined = t.loss;
  out.report.hardest.push_back(std::move(t.hardest));
  t.grad *= 1.0 / static_cast<double>(per_space.size());
  out.grads.assign(per_space.size(), t.grad);
  return out;
}

LossResult batch_loss(LossMode mode, std::span<const Matrix> per_space,
                      std::span<const std::size_t> positive, double margin,
                      std::span<const std::size_t> column_groups) {
  return mode == LossMode::combined ? combined_loss(per_space, positive, margin, column_groups)
                                    : single_loss(per_space, positive, margin, column_groups);
}

BatchOutcome run_batch(FusionModel& model, const PairedBatch& batch, double margin, LossMode mode,
                       Mode run_mode, Rng* dropout_rng, bool backprop) {
  ModalityEncoding videos = model.encode(Modality::video, batch.videos, run_mode, dropout_rng);
  ModalityEncoding texts = model.encode(Modality::text, batch.texts, run_mode, dropout_rng);
  std::vector<Matrix> sims = space_similarities(texts, videos);
  LossResult loss = batch_loss(mode, sims, batch.positive, margin, batch.video_groups);
  if (!std::isfinite(loss.report.combined)) {
    throw NumericError("batch loss is non-finite");
  }

  if (backprop) {
    std::vector<Matrix> video_grads;
    std::vector<Matrix> text_grads;
    for (std::size_t s = 0; s < sims.size(); ++s) {
      CosineGrads g = cosine_matrix_backward(loss.grads[s], texts.spaces[s].embedding,
                                             videos.spaces[s].embedding);
      text_grads.push_back(std::move(g.a));
      video_grads.push_back(std::move(g.b));
    }
    model.backward(Modality::video, video_grads, videos);
    model.backward(Modality::text, text_grads, texts);
  }

  BatchOutcome out;
  out.report = std::move(loss.report);
  for (auto& s : videos.spaces) out.video_weights.push_back(std::move(s.weights));
  for (auto& s : texts.spaces) out.text_weights.push_back(std::move(s.weights));
  return out;
}

}  // namespace laff

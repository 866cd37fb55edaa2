#pragma once

// RMSProp, the epoch-level learning-rate schedule, and the training loop.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "laff/dataio.hpp"
#include "laff/diffmath.hpp"
#include "laff/evalkit.hpp"
#include "laff/fusion.hpp"
#include "laff/objective.hpp"

namespace laff {

enum class ValidationMetric { map, sum_of_recalls };

std::string to_string(ValidationMetric metric);
ValidationMetric parse_validation_metric(const std::string& name);
double metric_value(const RetrievalMetrics& m, ValidationMetric metric);

struct TrainConfig {
  double margin = 0.2;
  std::size_t batch_size = 128;
  double base_lr = 1e-4;
  double lr_decay = 0.99;              // per epoch
  std::size_t plateau_patience = 3;    // stagnant epochs per halving
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 10;
  double rmsprop_rho = 0.99;
  double rmsprop_eps = 1e-8;
  std::size_t max_epochs = 30;
  std::uint64_t seed = 0;
  ValidationMetric validation_metric = ValidationMetric::map;
  LossMode loss = LossMode::combined;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// v ← ρv + (1−ρ)g²;  θ ← θ − lr·g / (√v + ε). No bias correction.
class RmsProp {
 public:
  RmsProp(double rho, double eps);

  /// Throws NumericError, leaving every parameter untouched, if any gradient
  /// entry is non-finite.
  void step(std::span<Parameter* const> params, double lr);

  /// Mean-square accumulators, one per parameter in step order.
  const std::vector<Matrix>& accumulators() const { return v_; }

 private:
  double rho_;
  double eps_;
  std::vector<Matrix> v_;
};

struct ScheduleDecision {
  double lr = 0.0;
  bool halved = false;
  bool stop = false;
  std::size_t stagnant = 0;  // trailing epochs without strict improvement
};

/// Learning rate for the next epoch given the validation values of all
/// completed epochs. Improvement is measured against the best value so far,
/// starting from `baseline` (the untrained model's score) when given.
/// Decay applies every epoch; the plateau factor applies in addition whenever
/// the stagnant count reaches a positive multiple of plateau_patience.
ScheduleDecision schedule_step(std::span<const double> history, std::optional<double> baseline,
                               double current_lr, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // rate used during this epoch
  double train_loss = 0.0;
  RetrievalMetrics val;
  double val_metric = 0.0;
  double attn_min = 1.0;      // smallest attention weight seen in training batches
  double attn_sum_dev = 0.0;  // largest |Σa − 1| seen in training batches
  bool halved = false;
  std::size_t stagnant = 0;
  double wall_seconds = 0.0;
};

struct FitResult {
  FusionModel model;  // best validation checkpoint
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;  // 0: every epoch scored below the initial model
  double best_metric = 0.0;
  double baseline = 0.0;
  bool stopped_early = false;
};

/// Called after every epoch with the model as trained so far.
using EpochObserver = std::function<void(const EpochRecord&, const FusionModel&)>;

/// Trains a copy of `initial` on the captions of `train_split`, selecting the
/// checkpoint by the validation metric on `val_split`. Among equal scores the
/// most recent epoch wins.
FitResult fit(const FusionModel& initial, const Dataset& data, const std::string& train_split,
              const std::string& val_split, const TrainConfig& config,
              const EpochObserver& observer = {});

}  // namespace laff

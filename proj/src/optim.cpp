#include "laff/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "laff/errors.hpp"

namespace laff {

std::string to_string(ValidationMetric metric) {
  return metric == ValidationMetric::map ? "map" : "sum_of_recalls";
}

ValidationMetric parse_validation_metric(const std::string& name) {
  if (name == "map") return ValidationMetric::map;
  if (name == "sum_of_recalls") return ValidationMetric::sum_of_recalls;
  throw ConfigError("unknown validation metric '" + name + "' (expected map or sum_of_recalls)");
}

double metric_value(const RetrievalMetrics& m, ValidationMetric metric) {
  return metric == ValidationMetric::map ? m.map : m.sum_of_recalls();
}

void TrainConfig::validate() const {
  auto rate = [](double v, const char* name) {
    if (!(v > 0.0 && v <= 1.0)) {
      throw ConfigError(std::string("train.") + name + " must lie in (0, 1], got " +
                        std::to_string(v));
    }
  };
  if (!(margin > 0.0) || !std::isfinite(margin)) throw ConfigError("train.margin must be > 0");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train.base_lr must be > 0");
  rate(lr_decay, "lr_decay");
  rate(plateau_factor, "plateau_factor");
  rate(rmsprop_rho, "rmsprop_rho");
  if (!(rmsprop_eps > 0.0)) throw ConfigError("train.rmsprop_eps must be > 0");
  if (plateau_patience < 1) throw ConfigError("train.plateau_patience must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be >= 1");
}

// ---- RMSProp ------------------------------------------------------------------

RmsProp::RmsProp(double rho, double eps) : rho_(rho), eps_(eps) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rmsprop rho must lie in (0, 1]");
  if (!(eps > 0.0)) throw ConfigError("rmsprop eps must be > 0");
}

void RmsProp::step(std::span<Parameter* const> params, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (v_.empty()) {
    for (const Parameter* p : params) v_.emplace_back(p->value.rows(), p->value.cols());
  }
  if (v_.size() != params.size()) {
    throw DimensionError("rmsprop: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    require_same_shape(p.grad, v_[i], "rmsprop state");
    auto g = p.grad.values();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient in " + p.name + " at index " + std::to_string(j) +
                           "; step aborted");
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->value.values();
    auto g = params[i]->grad.values();
    auto v = v_[i].values();
    for (std::size_t j = 0; j < g.size(); ++j) {
      v[j] = rho_ * v[j] + (1.0 - rho_) * g[j] * g[j];
      theta[j] -= lr * g[j] / (std::sqrt(v[j]) + eps_);
    }
  }
}

// ---- schedule -----------------------------------------------------------------

ScheduleDecision schedule_step(std::span<const double> history, std::optional<double> baseline,
                               double current_lr, const TrainConfig& config) {
  double best = baseline.value_or(-std::numeric_limits<double>::infinity());
  std::size_t stagnant = 0;
  for (double v : history) {
    if (v > best) {
      best = v;
      stagnant = 0;
    } else {
      ++stagnant;
    }
  }
  ScheduleDecision d;
  d.stagnant = stagnant;
  d.lr = current_lr * config.lr_decay;
  if (stagnant > 0 && stagnant % config.plateau_patience == 0) {
    d.lr *= config.plateau_factor;
    d.halved = true;
  }
  d.stop = stagnant >= config.early_stop_patience;
  return d;
}

// ---- training loop --------------------------------------------------------------

namespace {

Rng dropout_stream(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x64726f70u};
  return Rng(seq);
}

void track_weights(std::span<const Matrix> weights, EpochRecord& rec) {
  for (const Matrix& w : weights) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double sum = 0.0;
      for (double a : w.row(r)) {
        rec.attn_min = std::min(rec.attn_min, a);
        sum += a;
      }
      rec.attn_sum_dev = std::max(rec.attn_sum_dev, std::abs(sum - 1.0));
    }
  }
}

}  // namespace

FitResult fit(const FusionModel& initial, const Dataset& data, const std::string& train_split,
              const std::string& val_split, const TrainConfig& config,
              const EpochObserver& observer) {
  config.validate();
  data.check_compatible(initial.config());
  const SplitView train = data.split(train_split);
  if (train.captions.size() < 2) {
    throw DegenerateInputError("training split '" + train_split + "' needs at least 2 captions");
  }
  if (data.split(val_split).captions.empty()) {
    throw DegenerateInputError("validation split '" + val_split + "' is empty");
  }

  FusionModel model = initial;
  const double baseline =
      metric_value(evaluate(model, data, val_split).metrics, config.validation_metric);
  FitResult result{initial, {}, 0, baseline, baseline, false};

  RmsProp optimizer(config.rmsprop_rho, config.rmsprop_eps);
  Rng dropout_rng = dropout_stream(config.seed);
  std::vector<Parameter*> params = model.parameters();
  std::vector<double> history;
  double lr = config.base_lr;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& ids : make_batches(train.captions, config.batch_size, config.seed, epoch)) {
      PairedBatch batch = make_paired_batch(data, model.config(), ids);
      model.zero_grad();
      BatchOutcome out = run_batch(model, batch, config.margin, config.loss, Mode::train,
                                   &dropout_rng, true);
      optimizer.step(params, lr);
      loss_sum += out.report.combined;
      ++batches;
      track_weights(out.video_weights, rec);
      track_weights(out.text_weights, rec);
    }
    rec.train_loss = batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches);
    const bool finite = std::all_of(params.begin(), params.end(),
                                    [](const Parameter* p) { return p->value.all_finite(); });
    if (!std::isfinite(rec.train_loss) || !finite) {
      throw NumericError("training diverged in epoch " + std::to_string(epoch));
    }

    rec.val = evaluate(model, data, val_split).metrics;
    rec.val_metric = metric_value(rec.val, config.validation_metric);
    history.push_back(rec.val_metric);
    if (rec.val_metric >= result.best_metric) {  // ties: keep the later epoch
      result.best_metric = rec.val_metric;
      result.best_epoch = epoch;
      result.model = model;
    }

    const ScheduleDecision next = schedule_step(history, baseline, lr, config);
    rec.halved = next.halved;
    rec.stagnant = next.stagnant;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(rec);
    if (observer) observer(rec, model);
    lr = next.lr;
    if (next.stop) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace laff

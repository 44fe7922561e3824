#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "mmfuse/calibration.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/model.hpp"

namespace mmfuse {

enum class OptimizerKind { Sgd, Adam };

inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ParameterError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct TrainConfig {
  std::size_t batch_size = 4;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  Real lr = Real(1e-2);
  Real momentum = Real(0.9);
  Real adam_beta1 = Real(0.9);
  Real adam_beta2 = Real(0.999);
  Real adam_eps = Real(1e-8);
  std::size_t step_size = 4;
  Real gamma = Real(0.1);
  std::size_t patience = 8;
  std::size_t runs = 5;
  Real val_split = Real(0.35);  // used only when the task has no validation split
  std::size_t max_epochs = 100;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // overrides seed + r when nonempty
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
    if (!(lr > 0)) throw ParameterError("train: lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ParameterError("train: momentum must lie in [0, 1)");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
      throw ParameterError("train: adam betas must lie in [0, 1) and adam_eps be positive");
    }
    if (step_size < 1 || !(gamma > 0)) throw ParameterError("train: step_size must be >= 1 and gamma positive");
    if (patience < 1) throw ParameterError("train: patience must be >= 1");
    if (runs < 1) throw ParameterError("train: runs must be >= 1");
    if (max_epochs < 1) throw ParameterError("train: max_epochs must be >= 1");
    if (!seeds.empty() && seeds.size() != runs) {
      throw ParameterError("train: " + std::to_string(seeds.size()) + " seeds listed for " + std::to_string(runs) +
                           " runs");
    }
  }

  std::vector<std::uint64_t> seed_list() const {
    if (!seeds.empty()) return seeds;
    std::vector<std::uint64_t> out(runs);
    for (std::size_t r = 0; r < runs; ++r) out[r] = seed + r;
    return out;
  }
};

/// Learning rate for `epoch` (0-based) under a step schedule.
inline Real step_lr(Real base, Real gamma, std::size_t step_size, std::size_t epoch) {
  return base * std::pow(gamma, static_cast<Real>(epoch / step_size));
}

/// Stops once `patience` consecutive epochs pass without a new strict minimum.
struct EarlyStopping {
  std::size_t patience = 8;
  Real best = std::numeric_limits<Real>::infinity();
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;

  // Returns true if `loss` is a new best.
  bool observe(std::size_t epoch, Real loss) {
    if (loss < best) {
      best = loss;
      best_epoch = epoch;
      since_best = 0;
      return true;
    }
    ++since_best;
    return false;
  }
  bool should_stop() const { return since_best >= patience; }
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& tc, std::vector<Parameter*> params) : tc_(tc), params_(std::move(params)) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      if (tc_.optimizer == OptimizerKind::Adam) v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step(Real lr) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (!p.grad.same_shape(p.value)) continue;
      if (tc_.optimizer == OptimizerKind::Sgd) {
        for (std::size_t k = 0; k < p.value.size(); ++k) {
          m_[i][k] = tc_.momentum * m_[i][k] + p.grad[k];
          p.value[k] -= lr * m_[i][k];
        }
      } else {
        const Real c1 = 1 - std::pow(tc_.adam_beta1, static_cast<Real>(t_));
        const Real c2 = 1 - std::pow(tc_.adam_beta2, static_cast<Real>(t_));
        for (std::size_t k = 0; k < p.value.size(); ++k) {
          const Real g = p.grad[k];
          m_[i][k] = tc_.adam_beta1 * m_[i][k] + (1 - tc_.adam_beta1) * g;
          v_[i][k] = tc_.adam_beta2 * v_[i][k] + (1 - tc_.adam_beta2) * g * g;
          p.value[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + tc_.adam_eps);
        }
      }
    }
  }

 private:
  TrainConfig tc_;
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------

inline Var sample_loss(Model& model, Tape& t, const Sample& s, bool training, std::mt19937_64& rng) {
  Var logits = model.forward(t, s.text, s.image, training, rng);
  return ls_cross_entropy(softmax_rows(logits), smooth_targets(s.label, {model.cfg.label_smoothing, 2}));
}

struct Evaluation {
  PredictionSet predictions;
  Confusion counts;
  ClassificationMetrics metrics;
  Real ece = 0;
  Real ace = 0;
  Real loss = 0;  // mean smoothed cross-entropy
};

inline constexpr std::size_t kCalibrationBins = 10;

inline Evaluation evaluate(Model& model, const Split& split) {
  if (split.empty()) throw InputError("evaluate: empty split");
  Evaluation ev;
  ev.predictions.probs = Matrix(split.size(), 2);
  std::vector<std::size_t> predicted;
  const SmoothingConfig sc{model.cfg.label_smoothing, 2};
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::vector<Real> p = model.predict_proba(split[i].text, split[i].image);
    if (!std::isfinite(p[0]) || !std::isfinite(p[1])) throw NumericalError("evaluate: non-finite probabilities");
    ev.predictions.probs(i, 0) = p[0];
    ev.predictions.probs(i, 1) = p[1];
    ev.predictions.labels.push_back(split[i].label);
    predicted.push_back(ev.predictions.predicted(i));
    ev.loss += ls_cross_entropy(p, smooth_targets(split[i].label, sc));
  }
  ev.loss /= static_cast<Real>(split.size());
  ev.counts = confusion(ev.predictions.labels, predicted);
  ev.metrics = classification_metrics(ev.counts);
  ev.ece = ece(ev.predictions, kCalibrationBins).value;
  ev.ace = ace(ev.predictions, std::min(kCalibrationBins, split.size())).value;
  return ev;
}

struct EpochLog {
  std::size_t epoch = 0;
  Real lr = 0;
  Real train_loss = 0;
  Real val_loss = 0;
};

struct RunResult {
  std::uint64_t seed = 0;
  ClassificationMetrics metrics;
  Real ece = 0;
  Real ace = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  Real best_val_loss = 0;
  std::vector<EpochLog> history;
};

namespace detail {
inline std::mt19937_64 stream(std::uint64_t seed, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
  return std::mt19937_64(seq);
}

inline std::vector<Matrix> snapshot(const std::vector<Parameter*>& ps) {
  std::vector<Matrix> out;
  out.reserve(ps.size());
  for (Parameter* p : ps) out.push_back(p->value);
  return out;
}
}  // namespace detail

/// Trains `model` in place, restores the parameters with the lowest
/// validation loss and scores them on `test`.
inline RunResult train(Model& model, const Split& train_split, const Split& val, const Split& test,
                       const TrainConfig& tc, std::uint64_t seed) {
  tc.validate();
  if (train_split.empty() || val.empty() || test.empty()) throw InputError("train: every split must be nonempty");
  std::mt19937_64 shuffle_rng = detail::stream(seed, 1);
  std::mt19937_64 dropout_rng = detail::stream(seed, 2);
  std::mt19937_64 ref_rng = detail::stream(seed, 3);

  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  if (model.uses_otk()) {
    std::vector<const Sample*> first;
    for (std::size_t i = 0; i < std::min(tc.batch_size, order.size()); ++i) first.push_back(&train_split[order[i]]);
    model.init_references(first, ref_rng);
  }

  std::vector<Parameter*> params = model.parameters();
  Optimizer opt(tc, params);
  EarlyStopping stopper{tc.patience};
  std::vector<Matrix> best = detail::snapshot(params);
  RunResult res;
  res.seed = seed;

  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    const Real lr = step_lr(tc.lr, tc.gamma, tc.step_size, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Real train_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(start + tc.batch_size, order.size());
      const Real inv = Real(1) / static_cast<Real>(end - start);
      opt.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        Tape t;
        Var loss = sample_loss(model, t, train_split[order[k]], true, dropout_rng);
        const Real v = loss.value()(0, 0);
        if (!std::isfinite(v)) {
          throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", seed " +
                               std::to_string(seed));
        }
        train_loss += v;
        t.backward(scale(loss, inv));
      }
      opt.step(lr);
    }
    train_loss /= static_cast<Real>(order.size());
    const Real val_loss = evaluate(model, val).loss;
    if (!std::isfinite(val_loss)) throw NumericalError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    res.history.push_back({epoch, lr, train_loss, val_loss});
    res.epochs_run = epoch + 1;
    if (stopper.observe(epoch, val_loss)) best = detail::snapshot(params);
    if (stopper.should_stop()) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  res.best_epoch = stopper.best_epoch;
  res.best_val_loss = stopper.best;

  const Evaluation ev = evaluate(model, test);
  res.metrics = ev.metrics;
  res.ece = ev.ece;
  res.ace = ev.ace;
  return res;
}

}  // namespace mmfuse

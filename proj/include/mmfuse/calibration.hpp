#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"

namespace mmfuse {

struct SmoothingConfig {
  Real alpha = Real(0.001);
  std::size_t classes = 2;
};

/// Label-smoothed target y * (1 - alpha) + alpha / K. The true-class entry is
/// formed as 1 - (K - 1) * alpha / K so the vector sums to one.
inline std::vector<Real> smooth_targets(std::size_t label, const SmoothingConfig& cfg) {
  if (!(cfg.alpha >= Real(0) && cfg.alpha <= Real(1))) {
    throw ParameterError("smooth_targets: alpha must lie in [0, 1], got " + std::to_string(cfg.alpha));
  }
  if (cfg.classes < 1) throw ParameterError("smooth_targets: need at least one class");
  if (label >= cfg.classes) {
    throw InputError("smooth_targets: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(cfg.classes) + ")");
  }
  const Real off = cfg.alpha / static_cast<Real>(cfg.classes);
  std::vector<Real> y(cfg.classes, off);
  y[label] = Real(1) - static_cast<Real>(cfg.classes - 1) * off;
  return y;
}

inline constexpr Real kProbFloor = Real(1e-12);

/// sum_k -y_k log(max(p_k, 1e-12)).
inline Real ls_cross_entropy(const std::vector<Real>& probs, const std::vector<Real>& targets) {
  if (probs.size() != targets.size()) throw DimensionError("ls_cross_entropy: length mismatch");
  Real loss = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) loss -= targets[k] * std::log(std::max(probs[k], kProbFloor));
  return loss;
}

// probs is 1 x K; returns a 1 x 1 node.
inline Var ls_cross_entropy(const Var& probs, const std::vector<Real>& targets) {
  if (probs.rows() != 1 || probs.cols() != targets.size()) {
    throw DimensionError("ls_cross_entropy: probs " + probs.value().shape() + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  Tape& t = *probs.tape();
  Matrix y(1, targets.size());
  for (std::size_t k = 0; k < targets.size(); ++k) y(0, k) = -targets[k];
  return sum_all(elementwise_mul(t.constant(std::move(y)), log_clamped(probs, kProbFloor)));
}

// ---------------------------------------------------------------------------

/// Predicted class probabilities (N x K) and true labels.
struct PredictionSet {
  Matrix probs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return probs.cols(); }

  void validate() const {
    if (labels.empty()) throw InputError("PredictionSet: empty");
    if (probs.rows() != labels.size()) {
      throw DimensionError("PredictionSet: " + std::to_string(labels.size()) + " labels for probs " + probs.shape());
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= probs.cols()) throw InputError("PredictionSet: label out of range at row " + std::to_string(i));
      Real s = 0;
      for (Real v : probs.row(i)) {
        if (!(v >= Real(0))) throw InputError("PredictionSet: negative probability at row " + std::to_string(i));
        s += v;
      }
      if (std::abs(s - Real(1)) > Real(1e-9)) {
        throw InputError("PredictionSet: row " + std::to_string(i) + " sums to " + std::to_string(s));
      }
    }
  }

  // First index of the largest probability.
  std::size_t predicted(std::size_t i) const {
    auto r = probs.row(i);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  Real confidence(std::size_t i) const {
    auto r = probs.row(i);
    return *std::max_element(r.begin(), r.end());
  }
};

enum class BinningMode { EqualWidth, EqualMass };

struct ReliabilityBin {
  std::size_t class_index = 0;  // always 0 for equal-width bins
  Real lower = 0;
  Real upper = 0;
  std::size_t count = 0;
  Real accuracy = 0;
  Real confidence = 0;
};

struct ReliabilityBins {
  BinningMode mode = BinningMode::EqualWidth;
  std::vector<ReliabilityBin> bins;
};

struct CalibrationResult {
  Real value = 0;
  ReliabilityBins bins;
};

/// Index m in [0, M) with m/M < p <= (m+1)/M; p <= 0 falls into the first bin.
inline std::size_t ece_bin_index(Real p, std::size_t bins) {
  const auto m = static_cast<Real>(bins);
  auto bound = [m](std::size_t k) { return static_cast<Real>(k) / m; };
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(p * m)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(bins) - 1);
  auto k = static_cast<std::size_t>(idx);
  while (k > 0 && p <= bound(k)) --k;
  while (k + 1 < bins && p > bound(k + 1)) ++k;
  return k;
}

/// Expected calibration error over M equal-width confidence bins; empty bins
/// contribute nothing.
inline CalibrationResult ece(const PredictionSet& preds, std::size_t num_bins = 10) {
  if (preds.size() == 0) throw InputError("ece: empty prediction set");
  if (num_bins < 1) throw ParameterError("ece: need at least one bin");
  preds.validate();
  std::vector<std::size_t> count(num_bins, 0), correct(num_bins, 0);
  std::vector<Real> conf_sum(num_bins, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Real p = preds.confidence(i);
    const std::size_t b = ece_bin_index(p, num_bins);
    ++count[b];
    conf_sum[b] += p;
    if (preds.predicted(i) == preds.labels[i]) ++correct[b];
  }
  CalibrationResult res;
  res.bins.mode = BinningMode::EqualWidth;
  const auto n = static_cast<Real>(preds.size());
  for (std::size_t b = 0; b < num_bins; ++b) {
    ReliabilityBin bin;
    bin.lower = static_cast<Real>(b) / static_cast<Real>(num_bins);
    bin.upper = static_cast<Real>(b + 1) / static_cast<Real>(num_bins);
    bin.count = count[b];
    if (count[b] > 0) {
      bin.accuracy = static_cast<Real>(correct[b]) / static_cast<Real>(count[b]);
      bin.confidence = conf_sum[b] / static_cast<Real>(count[b]);
      res.value += static_cast<Real>(count[b]) / n * std::abs(bin.accuracy - bin.confidence);
    }
    res.bins.bins.push_back(bin);
  }
  return res;
}

/// Adaptive calibration error. For each class the predicted probabilities are
/// sorted (ties broken by sample index) and cut into R ranges of near-equal
/// population at floor(r * N / R); each range contributes |accuracy -
/// confidence| for that class, averaged over K * R. Predictions below
/// `threshold` are dropped first.
inline CalibrationResult ace(const PredictionSet& preds, std::size_t ranges = 10, Real threshold = 0) {
  if (preds.size() == 0) throw InputError("ace: empty prediction set");
  if (ranges < 1) throw ParameterError("ace: need at least one range");
  if (ranges > preds.size()) {
    throw ParameterError("ace: " + std::to_string(ranges) + " ranges exceed " + std::to_string(preds.size()) +
                         " predictions");
  }
  preds.validate();
  const std::size_t k_classes = preds.classes();
  CalibrationResult res;
  res.bins.mode = BinningMode::EqualMass;
  Real total = 0;
  for (std::size_t k = 0; k < k_classes; ++k) {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds.probs(i, k) >= threshold) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return preds.probs(x, k) < preds.probs(y, k); });
    const std::size_t n_k = order.size();
    for (std::size_t r = 0; r < ranges; ++r) {
      const std::size_t lo = r * n_k / ranges, hi = (r + 1) * n_k / ranges;
      ReliabilityBin bin;
      bin.class_index = k;
      bin.count = hi - lo;
      if (bin.count > 0) {
        std::size_t hits = 0;
        Real conf = 0;
        for (std::size_t q = lo; q < hi; ++q) {
          conf += preds.probs(order[q], k);
          if (preds.labels[order[q]] == k) ++hits;
        }
        bin.lower = preds.probs(order[lo], k);
        bin.upper = preds.probs(order[hi - 1], k);
        bin.accuracy = static_cast<Real>(hits) / static_cast<Real>(bin.count);
        bin.confidence = conf / static_cast<Real>(bin.count);
        total += std::abs(bin.accuracy - bin.confidence);
      }
      res.bins.bins.push_back(bin);
    }
  }
  res.value = total / static_cast<Real>(k_classes * ranges);
  return res;
}

}  // namespace mmfuse

#pragma once

#include <string>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/matrix.hpp"

namespace mmfuse {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

// Class 1 is the positive class.
inline Confusion confusion(const std::vector<std::size_t>& labels, const std::vector<std::size_t>& predicted) {
  if (labels.size() != predicted.size()) throw DimensionError("confusion: label and prediction counts differ");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1 || predicted[i] > 1) throw InputError("confusion: binary labels expected");
    const bool pos = labels[i] == 1, hit = predicted[i] == 1;
    if (pos && hit) ++c.tp;
    else if (pos) ++c.fn;
    else if (hit) ++c.fp;
    else ++c.tn;
  }
  return c;
}

struct ClassificationMetrics {
  Real precision = 0, recall = 0, f1 = 0, accuracy = 0, specificity = 0;
  std::vector<std::string> undefined;  // ratios whose denominator was zero; reported as 0
};

inline ClassificationMetrics classification_metrics(const Confusion& c) {
  if (c.total() == 0) throw InputError("classification_metrics: empty confusion matrix");
  ClassificationMetrics m;
  auto ratio = [&m](std::size_t num, std::size_t den, const char* name) {
    if (den == 0) {
      m.undefined.emplace_back(name);
      return Real(0);
    }
    return static_cast<Real>(num) / static_cast<Real>(den);
  };
  m.precision = ratio(c.tp, c.tp + c.fp, "precision");
  m.recall = ratio(c.tp, c.tp + c.fn, "recall");
  m.specificity = ratio(c.tn, c.tn + c.fp, "specificity");
  m.accuracy = static_cast<Real>(c.tp + c.tn) / static_cast<Real>(c.total());
  if (m.precision + m.recall > 0) {
    m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.undefined.emplace_back("f1");
  }
  return m;
}

}  // namespace mmfuse

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmfuse/init.hpp"
#include "mmfuse/matrix.hpp"

namespace mmfuse {

struct SyntheticTaskConfig {
  std::size_t seq_text = 12;   // n
  std::size_t seq_image = 12;  // T
  std::size_t dim = 32;        // D
  Real class_separation = 3;   // distance between class means, in noise_std units
  Real correlation = Real(0.5);
  Real noise_std = 1;
  std::size_t train_size = 200;
  std::size_t val_size = 60;
  std::size_t test_size = 60;
  std::uint64_t seed = 7;

  void validate() const {
    if (seq_text < 1 || seq_image < 1 || dim < 1) throw ParameterError("task: sequence lengths and dim must be >= 1");
    if (train_size < 2 || test_size < 1) throw ParameterError("task: need >= 2 training and >= 1 test samples");
    if (!(correlation >= 0 && correlation <= 1)) throw ParameterError("task: correlation must lie in [0, 1]");
    if (!(noise_std > 0)) throw ParameterError("task: noise_std must be positive");
    if (!(class_separation >= 0)) throw ParameterError("task: class_separation must be >= 0");
  }
};

struct Sample {
  Matrix text;   // n x D
  Matrix image;  // T x D
  std::size_t label = 0;
};

using Split = std::vector<Sample>;

struct Dataset {
  Split train, val, test;
};

namespace detail {
inline std::vector<Real> random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0, 1);
  std::vector<Real> v(d);
  Real norm = 0;
  do {
    norm = 0;
    for (auto& x : v) {
      x = static_cast<Real>(nd(rng));
      norm += x * x;
    }
  } while (norm == 0);
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Unit vector along (1 - rho) u + rho w.
inline std::vector<Real> blend(const std::vector<Real>& u, const std::vector<Real>& w, Real rho) {
  std::vector<Real> v(u.size());
  Real norm = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    v[i] = (1 - rho) * u[i] + rho * w[i];
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  if (norm > 0)
    for (auto& x : v) x /= norm;
  return v;
}

struct TaskGeometry {
  std::vector<Real> mean_text, mean_image;  // half-separation offsets for class 1
};

inline Matrix modality_rows(std::size_t rows, const std::vector<Real>& mean, Real sign, const std::vector<Real>& shared,
                            const SyntheticTaskConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0, cfg.noise_std);
  const Real rho = cfg.correlation;
  const Real own = std::sqrt(std::max<Real>(0, 1 - rho * rho));
  Matrix m(rows, mean.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < mean.size(); ++c)
      m(r, c) = sign * mean[c] + rho * shared[c] + own * static_cast<Real>(nd(rng));
  return m;
}

inline Split make_split(std::size_t size, const TaskGeometry& geo, const SyntheticTaskConfig& cfg,
                        std::mt19937_64& rng) {
  std::vector<std::size_t> labels(size);
  for (std::size_t i = 0; i < size; ++i) labels[i] = i % 2;
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> nd(0, cfg.noise_std);
  Split out;
  out.reserve(size);
  for (std::size_t label : labels) {
    const Real sign = label == 1 ? Real(1) : Real(-1);
    std::vector<Real> shared(cfg.dim);
    for (auto& x : shared) x = static_cast<Real>(nd(rng));
    Sample s;
    s.label = label;
    s.text = modality_rows(cfg.seq_text, geo.mean_text, sign, shared, cfg, rng);
    s.image = modality_rows(cfg.seq_image, geo.mean_image, sign, shared, cfg, rng);
    out.push_back(std::move(s));
  }
  return out;
}
}  // namespace detail

/// Two balanced classes. Every row of either modality is
///   sign * mu_mod + rho * h + sqrt(1 - rho^2) * e,
/// with sign = +-1 by class, h ~ N(0, noise^2 I) drawn once per sample and
/// shared by both modalities, e ~ N(0, noise^2 I) per row, and mu_mod of
/// length class_separation * noise / 2 along a blend of a modality direction
/// and a direction common to both modalities.
inline Dataset generate_task(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::vector<Real> u_text = detail::random_unit(cfg.dim, rng);
  const std::vector<Real> u_image = detail::random_unit(cfg.dim, rng);
  const std::vector<Real> u_shared = detail::random_unit(cfg.dim, rng);
  const Real half = cfg.class_separation * cfg.noise_std / 2;
  detail::TaskGeometry geo;
  geo.mean_text = detail::blend(u_text, u_shared, cfg.correlation);
  geo.mean_image = detail::blend(u_image, u_shared, cfg.correlation);
  for (auto& x : geo.mean_text) x *= half;
  for (auto& x : geo.mean_image) x *= half;
  Dataset ds;
  ds.train = detail::make_split(cfg.train_size, geo, cfg, rng);
  ds.val = detail::make_split(cfg.val_size, geo, cfg, rng);
  ds.test = detail::make_split(cfg.test_size, geo, cfg, rng);
  return ds;
}

/// Stratified split of `src`: round(fraction * count) samples of each class
/// go to the second part; order within each part follows `src`.
inline std::pair<Split, Split> stratified_split(const Split& src, Real fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ParameterError("stratified_split: fraction must lie in (0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(2);
  for (std::size_t i = 0; i < src.size(); ++i) by_class.at(src[i].label).push_back(i);
  std::vector<bool> held(src.size(), false);
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<Real>(idx.size())));
    for (std::size_t k = 0; k < take; ++k) held[idx[k]] = true;
  }
  std::pair<Split, Split> out;
  for (std::size_t i = 0; i < src.size(); ++i) (held[i] ? out.second : out.first).push_back(src[i]);
  if (out.first.empty() || out.second.empty()) throw InputError("stratified_split: a part came out empty");
  return out;
}

/// Random orthogonal D x D matrix (Gram-Schmidt on a Gaussian draw), used as a
/// frozen stand-in for a pretrained encoder.
inline Matrix orthogonal_encoder(std::size_t d, std::mt19937_64& rng) {
  Matrix q = normal_matrix(d, d, Real(1), rng);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      Real dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += q(i, j) * q(i, p);
      for (std::size_t i = 0; i < d; ++i) q(i, j) -= dot * q(i, p);
    }
    Real norm = 0;
    for (std::size_t i = 0; i < d; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    if (norm == 0) throw NumericalError("orthogonal_encoder: rank-deficient draw");
    for (std::size_t i = 0; i < d; ++i) q(i, j) /= norm;
  }
  return q;
}

}  // namespace mmfuse

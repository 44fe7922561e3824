#pragma once

#include <cmath>
#include <random>
#include <string>

#include "mmfuse/autodiff.hpp"

namespace mmfuse {

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <class Rng>
Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = static_cast<Real>(dist(rng));
  return m;
}

template <class Rng>
Matrix uniform_matrix(std::size_t rows, std::size_t cols, Real lo, Real hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = static_cast<Real>(dist(rng));
  return m;
}

template <class Rng>
Matrix normal_matrix(std::size_t rows, std::size_t cols, Real stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = static_cast<Real>(dist(rng));
  return m;
}

template <class Rng>
Parameter xavier_param(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Parameter(std::move(name), xavier_uniform(fan_in, fan_out, rng));
}

inline Parameter constant_param(std::string name, std::size_t rows, std::size_t cols, Real v) {
  return Parameter(std::move(name), Matrix(rows, cols, v));
}

}  // namespace mmfuse

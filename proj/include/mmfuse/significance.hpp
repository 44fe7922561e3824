#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "mmfuse/errors.hpp"

namespace mmfuse {

// Right-continuous empirical inverse CDF: order statistic floor(t * n).
inline double empirical_quantile(const std::vector<double>& sorted, double t) {
  const std::size_t n = sorted.size();
  auto k = static_cast<std::size_t>(std::floor(t * static_cast<double>(n)));
  return sorted[std::min(k, n - 1)];
}

/// Share of the squared quantile distance between the two score samples that
/// lies where `a` falls below `b`:
///   int max(Fb^-1(t) - Fa^-1(t), 0)^2 dt / W2(Fa, Fb)^2
/// on a midpoint grid of `grid` quantiles. 0 means a dominates b everywhere;
/// identical empirical distributions return 0.5.
inline double violation_ratio(std::vector<double> a, std::vector<double> b, std::size_t grid = 1000) {
  if (a.empty() || b.empty()) throw InputError("violation_ratio: both score lists must be nonempty");
  if (grid == 0) throw ParameterError("violation_ratio: grid must be >= 1");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double violation = 0, total = 0;
  for (std::size_t k = 0; k < grid; ++k) {
    const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(grid);
    const double d = empirical_quantile(b, t) - empirical_quantile(a, t);
    total += d * d;
    if (d > 0) violation += d * d;
  }
  if (total == 0) return 0.5;
  return violation / total;
}

struct AsoOptions {
  double confidence = 0.95;
  std::size_t bootstrap_iters = 1000;
  std::size_t num_comparisons = 50;
  std::uint64_t seed = 1234;
  std::size_t grid = 1000;
  std::size_t threads = 1;
};

struct AsoResult {
  double eps_min = 0.5;
  double violation_ratio = 0.5;
  double confidence_level = 0.95;
  std::size_t bootstrap_iters = 0;
  std::uint64_t seed = 0;
  bool degenerate = false;
  bool small_sample = false;
};

inline std::string aso_verdict(double eps_min) {
  if (eps_min == 0.0) return "stochastically dominant";
  if (eps_min < 0.5) return "almost stochastically dominant";
  return "no stochastic order";
}

namespace detail {
inline double bootstrap_violation(const std::vector<double>& a, const std::vector<double>& b, std::uint64_t seed,
                                  std::size_t iter, std::size_t grid) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(iter >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick_a(0, a.size() - 1), pick_b(0, b.size() - 1);
  std::vector<double> ra(a.size()), rb(b.size());
  for (auto& v : ra) v = a[pick_a(rng)];
  for (auto& v : rb) v = b[pick_b(rng)];
  return violation_ratio(std::move(ra), std::move(rb), grid);
}
}  // namespace detail

/// Almost-stochastic-order test of `a` over `b` (higher scores are better).
///
/// eps_min is the one-sided upper confidence bound on the violation ratio,
///   vr + z * sigma / sqrt(nm / (n + m)),
/// with sigma estimated from bootstrap resamples and z the normal quantile at
/// the Bonferroni-corrected level 1 - (1 - confidence) / num_comparisons.
/// Each bootstrap iteration draws from its own seed derived from (seed, i),
/// so the result does not depend on `threads`.
inline AsoResult aso(const std::vector<double>& a, const std::vector<double>& b, const AsoOptions& opt = {}) {
  if (a.empty() || b.empty()) throw InputError("aso: both score lists must be nonempty");
  if (!(opt.confidence > 0.0 && opt.confidence < 1.0)) throw ParameterError("aso: confidence must lie in (0, 1)");
  if (opt.bootstrap_iters == 0) throw ParameterError("aso: bootstrap_iters must be >= 1");
  if (opt.num_comparisons == 0) throw ParameterError("aso: num_comparisons must be >= 1");

  AsoResult res;
  res.confidence_level = opt.confidence;
  res.bootstrap_iters = opt.bootstrap_iters;
  res.seed = opt.seed;
  res.small_sample = a.size() < 5 || b.size() < 5;
  res.violation_ratio = violation_ratio(a, b, opt.grid);

  std::vector<double> sa(a), sb(b);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  if (sa == sb) {
    res.degenerate = true;
    res.eps_min = 0.5;
    return res;
  }

  std::vector<double> samples(opt.bootstrap_iters);
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads, opt.bootstrap_iters));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < samples.size(); i += workers)
      samples[i] = detail::bootstrap_violation(a, b, opt.seed, i, opt.grid);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }

  const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
  const double scale = std::sqrt(n * m / (n + m));
  double mean = 0;
  for (double s : samples) mean += scale * (s - res.violation_ratio);
  mean /= static_cast<double>(samples.size());
  double var = 0;
  for (double s : samples) {
    const double d = scale * (s - res.violation_ratio) - mean;
    var += d * d;
  }
  const double sigma = std::sqrt(var / static_cast<double>(samples.size()));

  const double level = 1.0 - (1.0 - opt.confidence) / static_cast<double>(opt.num_comparisons);
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), level);
  res.eps_min = std::clamp(res.violation_ratio + z * sigma / scale, 0.0, 1.0);
  return res;
}

}  // namespace mmfuse

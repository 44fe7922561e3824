#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"

namespace mmfuse {

struct GradCheckEntry {
  std::size_t index = 0;
  Real analytic = 0;
  Real numeric = 0;
  Real rel_error = 0;
};

struct GradCheckReport {
  std::string parameter;
  Real max_rel_error = 0;
  std::vector<GradCheckEntry> entries;
  bool pass = false;
};

struct GradCheckOptions {
  Real eps = Real(1e-5);
  Real tolerance = Real(1e-4);
  // 0 checks every entry; otherwise a seeded random subset of this size.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 7;
};

// Builds the scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Var(Tape&)>;

/// |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
inline Real gradcheck_relative_error(Real analytic, Real numeric) {
  const Real denom = std::max({Real(1), std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {
inline Real eval_loss(const LossFn& loss) {
  Tape tape;
  Var out = loss(tape);
  if (out.value().size() != 1) throw DimensionError("grad_check: loss must be 1x1, got " + out.value().shape());
  return out.value()[0];
}
}  // namespace detail

/// Compares reverse-mode gradients of `loss` against central differences for
/// every parameter in `params`. Parameter values are restored on return.
inline std::vector<GradCheckReport> grad_check(const LossFn& loss, const std::vector<Parameter*>& params,
                                               const GradCheckOptions& opt = {}) {
  if (!(opt.eps > Real(0))) throw ParameterError("grad_check: eps must be positive");

  const Real base = detail::eval_loss(loss);
  if (detail::eval_loss(loss) != base) {
    throw ContractError("grad_check: loss is not deterministic under a fixed seed");
  }

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = loss(tape);
    tape.backward(out);
  }

  std::mt19937_64 rng(opt.sample_seed);
  std::vector<GradCheckReport> reports;
  for (Parameter* p : params) {
    GradCheckReport rep;
    rep.parameter = p->name;
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_entries_per_param != 0 && idx.size() > opt.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t k : idx) {
      const Real orig = p->value[k];
      p->value[k] = orig + opt.eps;
      const Real up = detail::eval_loss(loss);
      p->value[k] = orig - opt.eps;
      const Real down = detail::eval_loss(loss);
      p->value[k] = orig;
      GradCheckEntry e;
      e.index = k;
      e.analytic = p->grad[k];
      e.numeric = (up - down) / (Real(2) * opt.eps);
      e.rel_error = gradcheck_relative_error(e.analytic, e.numeric);
      rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
      rep.entries.push_back(e);
    }
    rep.pass = rep.max_rel_error < opt.tolerance;
    reports.push_back(std::move(rep));
  }
  return reports;
}

inline bool all_pass(const std::vector<GradCheckReport>& reports) {
  return std::all_of(reports.begin(), reports.end(), [](const GradCheckReport& r) { return r.pass; });
}

inline Real max_error(const std::vector<GradCheckReport>& reports) {
  Real m = 0;
  for (const auto& r : reports) m = std::max(m, r.max_rel_error);
  return m;
}

}  // namespace mmfuse

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"

namespace mmfuse {

enum class CostMetric { SquaredEuclidean, Euclidean };

/// Pairwise ground costs between source rows and target rows.
struct CostMatrix {
  Matrix values;
};

/// Transport plan with the marginals it was solved for.
struct Coupling {
  Matrix plan;
  std::vector<Real> row_marginal;
  std::vector<Real> col_marginal;
  Real cost = 0;
  // max(|rowsums - a|_inf, |colsums - b|_inf)
  Real marginal_violation = 0;
  bool converged = true;
  std::size_t iterations = 0;
};

inline std::vector<Real> uniform_marginal(std::size_t n) {
  if (n == 0) throw ParameterError("uniform_marginal: size must be >= 1");
  return std::vector<Real>(n, Real(1) / static_cast<Real>(n));
}

inline CostMatrix cost_matrix(const Matrix& src, const Matrix& tgt, CostMetric metric = CostMetric::SquaredEuclidean) {
  if (src.cols() != tgt.cols()) {
    throw DimensionError("cost_matrix: feature dims differ, " + src.shape() + " vs " + tgt.shape());
  }
  Matrix c(src.rows(), tgt.rows());
  for (std::size_t i = 0; i < src.rows(); ++i) {
    for (std::size_t j = 0; j < tgt.rows(); ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < src.cols(); ++k) {
        const Real d = src(i, k) - tgt(j, k);
        s += d * d;
      }
      c(i, j) = metric == CostMetric::Euclidean ? std::sqrt(s) : s;
    }
  }
  return {std::move(c)};
}

inline Real transport_cost(const Matrix& plan, const Matrix& cost) {
  plan.require_same(cost, "transport_cost");
  Real s = 0;
  for (std::size_t k = 0; k < plan.size(); ++k) s += plan[k] * cost[k];
  return s;
}

inline Real marginal_violation(const Matrix& plan, const std::vector<Real>& a, const std::vector<Real>& b) {
  Real v = 0;
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < plan.cols(); ++j) s += plan(i, j);
    v = std::max(v, std::abs(s - a[i]));
  }
  for (std::size_t j = 0; j < plan.cols(); ++j) {
    Real s = 0;
    for (std::size_t i = 0; i < plan.rows(); ++i) s += plan(i, j);
    v = std::max(v, std::abs(s - b[j]));
  }
  return v;
}

namespace detail {
inline void check_marginal(const std::vector<Real>& m, const char* what, Real tol = Real(1e-9)) {
  if (m.empty()) throw ParameterError(std::string(what) + ": empty marginal");
  Real s = 0;
  for (Real v : m) {
    if (!(v >= Real(0)) || !std::isfinite(v)) throw InputError(std::string(what) + ": marginal entries must be >= 0");
    s += v;
  }
  if (std::abs(s - Real(1)) > tol) {
    throw InputError(std::string(what) + ": marginal sums to " + std::to_string(s) + ", expected 1");
  }
}

inline void check_problem(const std::vector<Real>& a, const std::vector<Real>& b, const CostMatrix& c,
                          const char* what) {
  check_marginal(a, what);
  check_marginal(b, what);
  if (c.values.rows() != a.size() || c.values.cols() != b.size()) {
    throw DimensionError(std::string(what) + ": cost " + c.values.shape() + " does not match marginals " +
                         std::to_string(a.size()) + "/" + std::to_string(b.size()));
  }
  if (!kernel::all_finite(c.values)) throw InputError(std::string(what) + ": non-finite cost entries");
}
}  // namespace detail

/// Exact optimal transport (earth mover's distance) for desk-scale problems.
///
/// Solved as an uncapacitated min-cost flow by successive shortest paths with
/// Johnson potentials; each augmentation runs a dense Dijkstra over the
/// bipartite residual graph.
inline Coupling emd_exact(const std::vector<Real>& a, const std::vector<Real>& b, const CostMatrix& cost) {
  detail::check_problem(a, b, cost, "emd_exact");
  const std::size_t n = a.size(), m = b.size();
  const Matrix& c = cost.values;
  constexpr Real kTiny = Real(1e-15);
  constexpr Real kInf = std::numeric_limits<Real>::infinity();

  std::vector<Real> supply(a), demand(b);
  Matrix flow(n, m);
  // Potentials: [0, n) sources, [n, n+m) sinks.
  std::vector<Real> pot(n + m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    Real mn = kInf;
    for (std::size_t i = 0; i < n; ++i) mn = std::min(mn, c(i, j));
    pot[n + j] = mn;
  }

  std::vector<Real> dist(n + m);
  std::vector<std::ptrdiff_t> prev(n + m);
  std::vector<char> done(n + m);
  std::size_t iterations = 0;
  const std::size_t max_iterations = 64 * (n + m) * (n + m) + 64;

  auto remaining = [](const std::vector<Real>& v) {
    return std::any_of(v.begin(), v.end(), [](Real x) { return x > kTiny; });
  };

  while (remaining(supply) && remaining(demand)) {
    if (++iterations > max_iterations) throw NumericalError("emd_exact: augmentation limit exceeded");
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(prev.begin(), prev.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    for (std::size_t i = 0; i < n; ++i)
      if (supply[i] > kTiny) dist[i] = 0;

    std::ptrdiff_t target = -1;
    for (;;) {
      std::ptrdiff_t u = -1;
      Real best = kInf;
      for (std::size_t v = 0; v < n + m; ++v) {
        if (!done[v] && dist[v] < best) {
          best = dist[v];
          u = static_cast<std::ptrdiff_t>(v);
        }
      }
      if (u < 0) break;
      done[static_cast<std::size_t>(u)] = 1;
      const auto uu = static_cast<std::size_t>(u);
      if (uu >= n && demand[uu - n] > kTiny) {
        target = u;
        break;
      }
      if (uu < n) {
        for (std::size_t j = 0; j < m; ++j) {
          const Real rc = std::max(Real(0), c(uu, j) + pot[uu] - pot[n + j]);
          if (dist[uu] + rc < dist[n + j]) {
            dist[n + j] = dist[uu] + rc;
            prev[n + j] = u;
          }
        }
      } else {
        const std::size_t j = uu - n;
        for (std::size_t i = 0; i < n; ++i) {
          if (flow(i, j) <= kTiny) continue;
          const Real rc = std::max(Real(0), -c(i, j) + pot[n + j] - pot[i]);
          if (dist[uu] + rc < dist[i]) {
            dist[i] = dist[uu] + rc;
            prev[i] = u;
          }
        }
      }
    }
    if (target < 0) throw NumericalError("emd_exact: no augmenting path (infeasible problem)");

    const Real dt = dist[static_cast<std::size_t>(target)];
    for (std::size_t v = 0; v < n + m; ++v) pot[v] += std::min(dist[v], dt);

    // Bottleneck along the path back to a source.
    const std::size_t t = static_cast<std::size_t>(target);
    Real delta = demand[t - n];
    std::size_t v = t;
    while (prev[v] >= 0) {
      const auto u = static_cast<std::size_t>(prev[v]);
      if (u >= n) delta = std::min(delta, flow(v, u - n));  // reverse arc sink u -> source v
      v = u;
    }
    delta = std::min(delta, supply[v]);

    v = t;
    while (prev[v] >= 0) {
      const auto u = static_cast<std::size_t>(prev[v]);
      if (u < n) {
        flow(u, v - n) += delta;
      } else {
        flow(v, u - n) -= delta;
        if (flow(v, u - n) < kTiny) flow(v, u - n) = 0;
      }
      v = u;
    }
    supply[v] -= delta;
    demand[t - n] -= delta;
  }

  Coupling out;
  out.cost = transport_cost(flow, c);
  out.marginal_violation = marginal_violation(flow, a, b);
  out.plan = std::move(flow);
  out.row_marginal = a;
  out.col_marginal = b;
  out.iterations = iterations;
  return out;
}

struct SinkhornOptions {
  Real eps = Real(0.05);
  std::size_t max_iters = 10000;
  Real tol = Real(1e-6);
};

/// Entropy-regularized transport, iterated in the log domain. The result is
/// flagged with converged = false when the marginal violation is still above
/// tol after max_iters iterations.
inline Coupling sinkhorn(const std::vector<Real>& a, const std::vector<Real>& b, const CostMatrix& cost,
                         const SinkhornOptions& opt = {}) {
  detail::check_problem(a, b, cost, "sinkhorn");
  if (!(opt.eps > Real(0))) throw ParameterError("sinkhorn: eps must be positive");
  for (Real v : a)
    if (v <= Real(0)) throw InputError("sinkhorn: marginals must be strictly positive");
  for (Real v : b)
    if (v <= Real(0)) throw InputError("sinkhorn: marginals must be strictly positive");

  const std::size_t n = a.size(), m = b.size();
  const Matrix& c = cost.values;
  std::vector<Real> f(n, 0), g(m, 0), log_a(n), log_b(m), buf(std::max(n, m));
  for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a[i]);
  for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b[j]);

  Coupling out;
  out.plan = Matrix(n, m);
  out.row_marginal = a;
  out.col_marginal = b;
  out.converged = false;
  auto lse = [&](std::size_t len) {
    const Real mx = *std::max_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(len));
    Real s = 0;
    for (std::size_t k = 0; k < len; ++k) s += std::exp(buf[k] - mx);
    return mx + std::log(s);
  };
  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) buf[j] = (g[j] - c(i, j)) / opt.eps;
      f[i] = opt.eps * (log_a[i] - lse(m));
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - c(i, j)) / opt.eps;
      g[j] = opt.eps * (log_b[j] - lse(n));
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out.plan(i, j) = std::exp((f[i] + g[j] - c(i, j)) / opt.eps);
    out.iterations = it;
    out.marginal_violation = marginal_violation(out.plan, a, b);
    if (out.marginal_violation < opt.tol) {
      out.converged = true;
      break;
    }
  }
  out.cost = transport_cost(out.plan, c);
  return out;
}

namespace detail {
inline Matrix barycentric_weights(const Coupling& coupling, std::size_t target_rows) {
  const Matrix& plan = coupling.plan;
  if (plan.cols() != target_rows) {
    throw DimensionError("barycentric_map: plan " + plan.shape() + " does not match " + std::to_string(target_rows) +
                         " target points");
  }
  if (coupling.row_marginal.size() != plan.rows()) {
    throw DimensionError("barycentric_map: row marginal length does not match plan " + plan.shape());
  }
  Matrix w(plan.rows(), plan.cols());
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    const Real ai = coupling.row_marginal[i];
    if (!(ai > Real(0))) throw InputError("barycentric_map: zero row marginal at source " + std::to_string(i));
    for (std::size_t j = 0; j < plan.cols(); ++j) w(i, j) = plan(i, j) / ai;
  }
  return w;
}
}  // namespace detail

/// Source row i -> (1 / a_i) sum_j plan(i, j) * target_j.
inline Matrix barycentric_map(const Coupling& coupling, const Matrix& target_points) {
  return kernel::matmul(detail::barycentric_weights(coupling, target_points.rows()), target_points);
}

// Differentiable in the target points; the plan is held constant.
inline Var barycentric_map(const Coupling& coupling, const Var& target_points) {
  Tape& t = *target_points.tape();
  return matmul(t.constant(detail::barycentric_weights(coupling, target_points.rows())), target_points);
}

/// Uniform-marginal exact transport of `src` onto `tgt`, returned as the
/// barycentric image of each source row in the target's domain.
inline Coupling ot_plan(const Matrix& src, const Matrix& tgt) {
  return emd_exact(uniform_marginal(src.rows()), uniform_marginal(tgt.rows()), cost_matrix(src, tgt));
}

inline Matrix ot_adapt(const Matrix& src, const Matrix& tgt) { return barycentric_map(ot_plan(src, tgt), tgt); }

inline Var ot_adapt(const Var& src, const Var& tgt) {
  return barycentric_map(ot_plan(src.value(), tgt.value()), tgt);
}

// ---------------------------------------------------------------------------
// Optimal-transport kernel embedding.

struct OtkConfig {
  std::size_t reference_count = 0;  // p, equal to the text sequence length n
  Real entropic_eps = Real(1.0);
  std::size_t sinkhorn_iters = 50;
  Real tol = Real(1e-6);
};

struct OtkResult {
  Var embedding;  // p x D
  Matrix plan;    // T x p
  Real marginal_violation = 0;
  bool converged = false;
  std::size_t iterations = 0;
};

/// Squared Euclidean costs between the rows of y and z, differentiable in both.
inline Var sq_cost(const Var& y, const Var& z) {
  if (y.cols() != z.cols()) {
    throw DimensionError("sq_cost: feature dims differ, " + y.value().shape() + " vs " + z.value().shape());
  }
  Tape& t = *y.tape();
  Var ones = t.constant(Matrix(y.cols(), 1, Real(1)));
  Var yy = matmul(elementwise_mul(y, y), ones);             // T x 1
  Var zz = transpose(matmul(elementwise_mul(z, z), ones));  // 1 x p
  Var cross = scale(matmul(y, transpose(z)), Real(-2));
  return add_rowvec(add_colvec(cross, yy), zz);
}

/// Pools the T rows of y against the p reference rows: an entropic plan
/// between uniform masses on y and on the references is computed by unrolled
/// log-domain Sinkhorn, and output row i is p * (plan^T y)_i, the
/// mass-normalized average of the rows of y transported to reference i.
inline OtkResult otk_embed(const Var& y, const Var& references, const OtkConfig& cfg) {
  if (y.rows() == 0) throw InputError("otk_embed: empty input sequence");
  if (references.rows() != cfg.reference_count || references.cols() != y.cols()) {
    throw DimensionError("otk_embed: references " + references.value().shape() + " expected " +
                         std::to_string(cfg.reference_count) + "x" + std::to_string(y.cols()));
  }
  if (!(cfg.entropic_eps > Real(0))) throw ParameterError("otk_embed: entropic_eps must be positive");
  if (cfg.sinkhorn_iters == 0) throw ParameterError("otk_embed: sinkhorn_iters must be >= 1");
  Tape& t = *y.tape();
  const std::size_t n_in = y.rows(), p = cfg.reference_count;
  Var neg = scale(sq_cost(y, references), Real(-1) / cfg.entropic_eps);  // -C / eps, T x p
  Var log_a = t.constant(Matrix(n_in, 1, -std::log(static_cast<Real>(n_in))));
  Var log_b = t.constant(Matrix(p, 1, -std::log(static_cast<Real>(p))));
  // Scaled dual potentials f / eps (T x 1) and g / eps (1 x p).
  Var g = t.constant(Matrix(1, p, Real(0)));
  Var f;
  OtkResult res;
  Matrix plan(n_in, p);
  for (std::size_t it = 1; it <= cfg.sinkhorn_iters; ++it) {
    f = sub(log_a, logsumexp_rows(add_rowvec(neg, g)));
    g = transpose(sub(log_b, logsumexp_rows(transpose(add_colvec(neg, f)))));
    const Matrix& nv = neg.value();
    const Matrix& fv = f.value();
    const Matrix& gv = g.value();
    Real viol = 0;
    for (std::size_t i = 0; i < n_in; ++i) {
      Real s = 0;
      for (std::size_t j = 0; j < p; ++j) {
        plan(i, j) = std::exp(nv(i, j) + fv(i, 0) + gv(0, j));
        s += plan(i, j);
      }
      viol = std::max(viol, std::abs(s - Real(1) / static_cast<Real>(n_in)));
    }
    res.iterations = it;
    res.marginal_violation = viol;
    if (viol < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  Var pi = exp_ew(add_rowvec(add_colvec(neg, f), g));
  res.embedding = scale(matmul(transpose(pi), y), static_cast<Real>(p));
  res.plan = pi.value();
  return res;
}

}  // namespace mmfuse

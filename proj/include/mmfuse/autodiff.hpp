#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/matrix.hpp"

namespace mmfuse {

/// A learnable matrix together with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    grad.fill(0);
  }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records matrix operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a single reverse sweep over the
/// node list visits every node after all of its consumers. A tape is confined
/// to one thread and must outlive every Var it hands out.
class Tape {
 public:
  // Receives the node's output gradient and output value; accumulates into parents.
  using Backward = std::function<void(Tape&, const Matrix& grad, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) {
    nodes_.push_back(Node{std::move(v), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  Var param(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, {}, &p, true});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || nodes_[p.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, const std::vector<Var>& parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || nodes_[p.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  // Gradient after backward(); zero-filled if the node received none.
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  Matrix& grad_accum(const Var& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(const Var& v, const Matrix& g) {
    if (!nodes_[v.id()].needs_grad) return;
    grad_accum(v) += g;
  }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps backwards. Parameter
  // leaves add their gradient into Parameter::grad.
  void backward(const Var& out) {
    check_owned(out);
    if (out.value().size() != 1) {
      throw DimensionError("backward: expected a 1x1 loss, got " + out.value().shape());
    }
    grad_accum(out).fill(1);
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad, n.value);
      if (n.param) {
        if (!n.param->grad.same_shape(n.param->value)) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param;
    bool needs_grad;
  };

  void check_owned(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  }

  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later records
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Differentiable operations.

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* what) { a.value().require_same(b.value(), what); }
inline void same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  return a.tape()->record(kernel::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, kernel::matmul_nt(g, b.value()));
    if (t.needs_grad(b)) t.accumulate(b, kernel::matmul_tn(a.value(), g));
  });
}

inline Var transpose(const Var& a) {
  return a.tape()->record(kernel::transpose(a.value()), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, kernel::transpose(g)); });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  Matrix out = a.value();
  out += b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  Matrix out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= b.value()[k];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, kernel::map(g, [](Real v) { return -v; }));
  });
}

// Elementwise (Hadamard) product.
inline Var elementwise_mul(const Var& a, const Var& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "elementwise_mul");
  Matrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.value()[k] * b.value()[k];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad_accum(a);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * b.value()[k];
    }
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad_accum(b);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * a.value()[k];
    }
  });
}

inline Var scale(const Var& a, Real s) {
  return a.tape()->record(kernel::map(a.value(), [s](Real v) { return v * s; }), {a},
                          [a, s](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix& ga = t.grad_accum(a);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * s;
                          });
}

inline Var add_scalar(const Var& a, Real s) {
  return a.tape()->record(kernel::map(a.value(), [s](Real v) { return v + s; }), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}


inline Var sigmoid(const Var& a) {
  return a.tape()->record(kernel::map(a.value(), [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); }), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix& ga = t.grad_accum(a);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * y[k] * (Real(1) - y[k]);
                          });
}

inline Var tanh_ew(const Var& a) {
  return a.tape()->record(kernel::map(a.value(), [](Real v) { return std::tanh(v); }), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix& ga = t.grad_accum(a);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * (Real(1) - y[k] * y[k]);
                          });
}

inline Var relu(const Var& a) {
  return a.tape()->record(kernel::map(a.value(), [](Real v) { return v > Real(0) ? v : Real(0); }), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix& ga = t.grad_accum(a);
                            const Matrix& x = a.value();
                            for (std::size_t k = 0; k < g.size(); ++k)
                              if (x[k] > Real(0)) ga[k] += g[k];
                          });
}

inline Var exp_ew(const Var& a) {
  return a.tape()->record(kernel::map(a.value(), [](Real v) { return std::exp(v); }), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix& ga = t.grad_accum(a);
                            for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * y[k];
                          });
}

// log(max(a, floor)); entries at or below the floor receive no gradient.
inline Var log_clamped(const Var& a, Real floor = Real(1e-12)) {
  return a.tape()->record(kernel::map(a.value(), [floor](Real v) { return std::log(std::max(v, floor)); }), {a},
                          [a, floor](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix& ga = t.grad_accum(a);
                            const Matrix& x = a.value();
                            for (std::size_t k = 0; k < g.size(); ++k)
                              if (x[k] > floor) ga[k] += g[k] / x[k];
                          });
}

inline Var softmax_rows(const Var& a) {
  return a.tape()->record(kernel::softmax_rows(a.value()), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix& ga = t.grad_accum(a);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// n x m -> n x 1.
inline Var logsumexp_rows(const Var& a) {
  return a.tape()->record(kernel::logsumexp_rows(a.value()), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix& ga = t.grad_accum(a);
    const Matrix& x = a.value();
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) += g(i, 0) * std::exp(x(i, j) - y(i, 0));
  });
}

// Column means: n x d -> 1 x d.
inline Var mean_rows(const Var& a) {
  return a.tape()->record(kernel::mean_rows(a.value()), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& ga = t.grad_accum(a);
    const Real inv = Real(1) / static_cast<Real>(ga.rows());
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
  });
}

inline Var sum_all(const Var& a) {
  Real s = 0;
  for (Real v : a.value().data()) s += v;
  return a.tape()->record(Matrix(1, 1, s), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& ga = t.grad_accum(a);
    for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[0];
  });
}

// 1 x d -> n x d.
inline Var repeat_rows(const Var& row, std::size_t n) {
  return row.tape()->record(kernel::repeat_rows(row.value(), n), {row}, [row](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& gr = t.grad_accum(row);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
  });
}

// out(i, j) = col(i, 0) * a(i, j).
inline Var mul_colvec(const Var& col, const Var& a) {
  detail::same_tape(col, a);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("mul_colvec: column " + col.value().shape() + " does not broadcast over " + a.value().shape());
  }
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = col.value()(i, 0) * a.value()(i, j);
  return a.tape()->record(std::move(out), {col, a}, [col, a](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& c = col.value();
    const Matrix& x = a.value();
    if (t.needs_grad(col)) {
      Matrix& gc = t.grad_accum(col);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) gc(i, 0) += g(i, j) * x(i, j);
    }
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad_accum(a);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) += g(i, j) * c(i, 0);
    }
  });
}

// out(i, j) = a(i, j) + row(0, j).
inline Var add_rowvec(const Var& a, const Var& row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_rowvec: row " + row.value().shape() + " does not broadcast over " + a.value().shape());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += row.value()(0, j);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) {
      Matrix& gr = t.grad_accum(row);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    }
  });
}

// out(i, j) = a(i, j) + col(i, 0).
inline Var add_colvec(const Var& a, const Var& col) {
  detail::same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("add_colvec: column " + col.value().shape() + " does not broadcast over " + a.value().shape());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += col.value()(i, 0);
  return a.tape()->record(std::move(out), {a, col}, [a, col](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_grad(col)) {
      Matrix& gc = t.grad_accum(col);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gc(i, 0) += g(i, j);
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  std::vector<const Matrix*> vals;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    vals.push_back(&p.value());
  }
  return parts.front().tape()->record(kernel::concat_cols(vals), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.cols();
      if (t.needs_grad(p)) {
        Matrix& gp = t.grad_accum(p);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) gp(i, j) += g(i, off + j);
      }
      off += w;
    }
  });
}

inline Var concat_cols(const Var& a, const Var& b) { return concat_cols(std::vector<Var>{a, b}); }

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  std::vector<const Matrix*> vals;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    vals.push_back(&p.value());
  }
  return parts.front().tape()->record(kernel::concat_rows(vals), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t h = p.rows();
      if (t.needs_grad(p)) {
        Matrix& gp = t.grad_accum(p);
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gp(i, j) += g(off + i, j);
      }
      off += h;
    }
  });
}

inline Var concat_rows(const Var& a, const Var& b) { return concat_rows(std::vector<Var>{a, b}); }

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  return a.tape()->record(kernel::slice_cols(a.value(), begin, end), {a},
                          [a, begin](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix& ga = t.grad_accum(a);
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) += g(i, j);
                          });
}

inline constexpr Real kLayerNormEps = Real(1e-5);

/// Per-row normalization to zero mean and unit variance (biased variance plus
/// kLayerNormEps), followed by the affine map x * gain + bias. gain and bias
/// are 1 x d.
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias) {
  detail::same_tape(a, gain);
  detail::same_tape(a, bias);
  const std::size_t n = a.rows(), d = a.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain " + gain.value().shape() + " / bias " + bias.value().shape() +
                         " do not match input " + a.value().shape());
  }
  Matrix xhat(n, d);
  std::vector<Real> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto x = a.value().row(i);
    Real mu = 0;
    for (Real v : x) mu += v;
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (Real v : x) var += (v - mu) * (v - mu);
    var /= static_cast<Real>(d);
    inv_std[i] = Real(1) / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) xhat(i, j) = (x[j] - mu) * inv_std[i];
  }
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = xhat(i, j) * gain.value()(0, j) + bias.value()(0, j);
  return a.tape()->record(
      std::move(out), {a, gain, bias},
      [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Matrix& g, const Matrix&) {
        const std::size_t n = g.rows(), d = g.cols();
        if (t.needs_grad(gain)) {
          Matrix& gg = t.grad_accum(gain);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg(0, j) += g(i, j) * xhat(i, j);
        }
        if (t.needs_grad(bias)) {
          Matrix& gb = t.grad_accum(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb(0, j) += g(i, j);
        }
        if (t.needs_grad(a)) {
          Matrix& ga = t.grad_accum(a);
          std::vector<Real> dxhat(d);
          for (std::size_t i = 0; i < n; ++i) {
            Real mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g(i, j) * gain.value()(0, j);
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat(i, j);
            }
            mean_d /= static_cast<Real>(d);
            mean_dx /= static_cast<Real>(d);
            for (std::size_t j = 0; j < d; ++j) ga(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
          }
        }
      });
}

/// Inverted dropout: in training mode each entry is zeroed with probability
/// `rate` and survivors are scaled by 1 / (1 - rate). Evaluation mode and
/// rate 0 return the input node itself.
template <class Rng>
Var dropout(const Var& a, Real rate, bool training, Rng& rng) {
  if (!(rate >= Real(0) && rate < Real(1))) {
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == Real(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const Real s = Real(1) / (Real(1) - rate);
  Matrix mask(a.rows(), a.cols());
  for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = keep(rng) ? s : Real(0);
  Matrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.value()[k] * mask[k];
  return a.tape()->record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& ga = t.grad_accum(a);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * mask[k];
  });
}

}  // namespace mmfuse

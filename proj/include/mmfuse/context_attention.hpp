#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/init.hpp"

namespace mmfuse {

enum class ContextKind { Global, Deep, DeepGlobal };

inline const char* to_string(ContextKind k) {
  switch (k) {
    case ContextKind::Global: return "global";
    case ContextKind::Deep: return "deep";
    case ContextKind::DeepGlobal: return "deep_global";
  }
  return "?";
}

inline ContextKind parse_context_kind(const std::string& s) {
  if (s == "global") return ContextKind::Global;
  if (s == "deep") return ContextKind::Deep;
  if (s == "deep_global" || s == "deepglobal") return ContextKind::DeepGlobal;
  throw ParameterError("unknown context strategy '" + s + "' (expected global, deep or deep_global)");
}

/// Context construction rule plus the number of stacked layers.
struct ContextStrategy {
  ContextKind kind = ContextKind::Deep;
  std::size_t layers = 3;

  // Global: 1 layer, Deep: 3, DeepGlobal: 2.
  static ContextStrategy defaults(ContextKind k) {
    switch (k) {
      case ContextKind::Global: return {k, 1};
      case ContextKind::Deep: return {k, 3};
      case ContextKind::DeepGlobal: return {k, 2};
    }
    return {k, 1};
  }
};

/// One context-based self-attention layer. V = X; queries and keys of X are
/// mixed with projections of the context C through sigmoid gates.
struct ContextAttentionLayer {
  std::size_t model_dim = 0;    // D
  std::size_t context_dim = 0;  // D_c
  std::size_t key_dim = 0;      // D_q == D_k

  Parameter w_q, w_k;       // D x D_q, D x D_k
  Parameter w_qc, w_kc;     // D_c x D_q, D_c x D_k
  Parameter wg_q, wg_qc;    // D_q x 1
  Parameter wg_k, wg_kc;    // D_k x 1

  ContextAttentionLayer() = default;

  template <class Rng>
  ContextAttentionLayer(std::size_t d, std::size_t d_c, std::size_t d_k, Rng& rng, const std::string& prefix = "ctx")
      : model_dim(d), context_dim(d_c), key_dim(d_k),
        w_q(xavier_param(prefix + ".w_q", d, d_k, rng)),
        w_k(xavier_param(prefix + ".w_k", d, d_k, rng)),
        w_qc(xavier_param(prefix + ".w_qc", d_c, d_k, rng)),
        w_kc(xavier_param(prefix + ".w_kc", d_c, d_k, rng)),
        wg_q(xavier_param(prefix + ".wg_q", d_k, 1, rng)),
        wg_qc(xavier_param(prefix + ".wg_qc", d_k, 1, rng)),
        wg_k(xavier_param(prefix + ".wg_k", d_k, 1, rng)),
        wg_kc(xavier_param(prefix + ".wg_kc", d_k, 1, rng)) {
    if (d == 0 || d_c == 0 || d_k == 0) throw ParameterError("ContextAttentionLayer: dimensions must be positive");
  }

  std::vector<Parameter*> parameters() { return {&w_q, &w_k, &w_qc, &w_kc, &wg_q, &wg_qc, &wg_k, &wg_kc}; }
};

struct GatedSum {
  Var gate;   // n x 1
  Var mixed;  // n x d
};

/// g = sigmoid(A w_a + A_c w_ac); mixed = (1 - g) * A + g * A_c, with g
/// broadcast across columns. `gate_override` replaces g by a constant (test
/// seam and ablation switch).
inline GatedSum gated_sum(const Var& a, const Var& a_c, const Var& w_a, const Var& w_ac,
                          std::optional<Real> gate_override = std::nullopt) {
  a.value().require_same(a_c.value(), "gated_sum");
  if (w_a.rows() != a.cols() || w_a.cols() != 1 || !w_a.value().same_shape(w_ac.value())) {
    throw DimensionError("gated_sum: gate weights " + w_a.value().shape() + " / " + w_ac.value().shape() +
                         " do not fit inputs " + a.value().shape());
  }
  Tape& t = *a.tape();
  Var gate = gate_override ? t.constant(Matrix(a.rows(), 1, *gate_override))
                           : sigmoid(add(matmul(a, w_a), matmul(a_c, w_ac)));
  Var keep = add_scalar(scale(gate, Real(-1)), Real(1));
  Var mixed = add(mul_colvec(keep, a), mul_colvec(gate, a_c));
  return {gate, mixed};
}

/// Every row equals the column mean of X.
inline Var global_context(const Var& x) { return repeat_rows(mean_rows(x), x.rows()); }

/// concat(X^0, ..., X^{l-1}) W, with W of shape (l*D) x D.
inline Var deep_context(const std::vector<Var>& history, const Var& projection) {
  if (history.empty()) throw DimensionError("deep_context: empty history");
  for (const Var& h : history) history.front().value().require_same(h.value(), "deep_context history");
  const std::size_t width = history.size() * history.front().cols();
  if (projection.rows() != width) {
    throw DimensionError("deep_context: projection " + projection.value().shape() + " does not match concat width " +
                         std::to_string(width));
  }
  return matmul(concat_cols(history), projection);
}

/// Pools each history member to its column mean, concatenates to 1 x (l*D),
/// projects to 1 x D and stacks the result to the history's row count.
inline Var deep_global_context(const std::vector<Var>& history, const Var& projection) {
  if (history.empty()) throw DimensionError("deep_global_context: empty history");
  for (const Var& h : history) history.front().value().require_same(h.value(), "deep_global_context history");
  const std::size_t width = history.size() * history.front().cols();
  if (projection.rows() != width) {
    throw DimensionError("deep_global_context: projection " + projection.value().shape() +
                         " does not match pooled width " + std::to_string(width));
  }
  std::vector<Var> pooled;
  pooled.reserve(history.size());
  for (const Var& h : history) pooled.push_back(mean_rows(h));
  return repeat_rows(matmul(concat_cols(pooled), projection), history.front().rows());
}

/// Intermediate quantities of one attention layer, filled on request.
struct AttentionTrace {
  std::vector<Matrix> attention;  // n x n per layer
  std::vector<Matrix> query_gate;
  std::vector<Matrix> key_gate;
};

/// softmax(Q_bar K_bar^T / sqrt(D_k)) X for one layer.
inline Var context_attention_forward(const Var& x, const Var& c, ContextAttentionLayer& layer,
                                     std::optional<Real> gate_override = std::nullopt,
                                     AttentionTrace* trace = nullptr) {
  if (x.rows() != c.rows()) {
    throw DimensionError("context_attention_forward: X " + x.value().shape() + " and C " + c.value().shape() +
                         " differ in row count");
  }
  if (x.cols() != layer.model_dim || c.cols() != layer.context_dim) {
    throw DimensionError("context_attention_forward: X " + x.value().shape() + " / C " + c.value().shape() +
                         " do not match layer dims D=" + std::to_string(layer.model_dim) +
                         " D_c=" + std::to_string(layer.context_dim));
  }
  Tape& t = *x.tape();
  Var q = matmul(x, t.param(layer.w_q));
  Var k = matmul(x, t.param(layer.w_k));
  Var q_c = matmul(c, t.param(layer.w_qc));
  Var k_c = matmul(c, t.param(layer.w_kc));
  GatedSum qs = gated_sum(q, q_c, t.param(layer.wg_q), t.param(layer.wg_qc), gate_override);
  GatedSum ks = gated_sum(k, k_c, t.param(layer.wg_k), t.param(layer.wg_kc), gate_override);
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(layer.key_dim));
  Var scores = scale(matmul(qs.mixed, transpose(ks.mixed)), inv_sqrt);
  Var attn = softmax_rows(scores);
  if (trace) {
    trace->attention.push_back(attn.value());
    trace->query_gate.push_back(qs.gate.value());
    trace->key_gate.push_back(ks.gate.value());
  }
  return matmul(attn, x);
}

/// A stack of context attention layers sharing one context strategy. Deep and
/// DeepGlobal layer j owns a ((j+1) * D) x D projection over [X^0, ..., X^j],
/// where X^0 is the stack input and X^{i+1} the output of layer i.
struct ContextStack {
  ContextStrategy strategy;
  std::vector<ContextAttentionLayer> layers;
  std::vector<Parameter> projections;

  ContextStack() = default;

  template <class Rng>
  ContextStack(ContextStrategy s, std::size_t d, std::size_t d_k, Rng& rng) : strategy(s) {
    if (s.layers == 0) throw ParameterError("ContextStack: layer count must be >= 1");
    layers.reserve(s.layers);
    for (std::size_t j = 0; j < s.layers; ++j) {
      layers.emplace_back(d, d, d_k, rng, "ctx" + std::to_string(j));
      if (s.kind != ContextKind::Global) {
        projections.push_back(xavier_param("ctx" + std::to_string(j) + ".w_c0", (j + 1) * d, d, rng));
      }
    }
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto& l : layers)
      for (Parameter* p : l.parameters()) ps.push_back(p);
    for (auto& p : projections) ps.push_back(&p);
    return ps;
  }
};

inline Var stack_forward(const Var& x, ContextStack& stack, std::optional<Real> gate_override = std::nullopt,
                         AttentionTrace* trace = nullptr) {
  Tape& t = *x.tape();
  std::vector<Var> history{x};
  Var cur = x;
  for (std::size_t j = 0; j < stack.layers.size(); ++j) {
    Var c;
    switch (stack.strategy.kind) {
      case ContextKind::Global: c = global_context(cur); break;
      case ContextKind::Deep: c = deep_context(history, t.param(stack.projections[j])); break;
      case ContextKind::DeepGlobal: c = deep_global_context(history, t.param(stack.projections[j])); break;
    }
    cur = context_attention_forward(cur, c, stack.layers[j], gate_override, trace);
    history.push_back(cur);
  }
  return cur;
}

}  // namespace mmfuse

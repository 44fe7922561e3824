#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/init.hpp"

namespace mmfuse {

/// Self-attention over S whose queries and keys are scaled by learned
/// per-position sigmoid masks.
struct GatedSelfAttentionLayer {
  std::size_t model_dim = 0;  // D
  std::size_t gate_dim = 0;   // d_g
  bool use_bias = false;

  Parameter fc_q;    // D x d_g
  Parameter fc_k;    // D x d_g
  Parameter fc_out;  // d_g x 2
  // Only present when use_bias is set.
  Parameter b_q, b_k, b_out;

  GatedSelfAttentionLayer() = default;

  template <class Rng>
  GatedSelfAttentionLayer(std::size_t d, std::size_t d_g, Rng& rng, bool bias = false)
      : model_dim(d), gate_dim(d_g), use_bias(bias),
        fc_q(xavier_param("gate.fc_q", d, d_g, rng)),
        fc_k(xavier_param("gate.fc_k", d, d_g, rng)),
        fc_out(xavier_param("gate.fc_out", d_g, 2, rng)) {
    if (d == 0 || d_g == 0) throw ParameterError("GatedSelfAttentionLayer: dimensions must be positive");
    if (use_bias) {
      b_q = constant_param("gate.b_q", 1, d_g, 0);
      b_k = constant_param("gate.b_k", 1, d_g, 0);
      b_out = constant_param("gate.b_out", 1, 2, 0);
    }
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&fc_q, &fc_k, &fc_out};
    if (use_bias) ps.insert(ps.end(), {&b_q, &b_k, &b_out});
    return ps;
  }
};

/// M = sigmoid(((Q FC_q) * (K FC_k)) FC), T x 2. Column 0 masks queries,
/// column 1 masks keys.
inline Var gating_masks(const Var& q, const Var& k, GatedSelfAttentionLayer& layer) {
  q.value().require_same(k.value(), "gating_masks");
  if (q.cols() != layer.model_dim) {
    throw DimensionError("gating_masks: input " + q.value().shape() + " does not match D=" +
                         std::to_string(layer.model_dim));
  }
  Tape& t = *q.tape();
  Var pq = matmul(q, t.param(layer.fc_q));
  Var pk = matmul(k, t.param(layer.fc_k));
  if (layer.use_bias) {
    pq = add_rowvec(pq, t.param(layer.b_q));
    pk = add_rowvec(pk, t.param(layer.b_k));
  }
  Var logits = matmul(elementwise_mul(pq, pk), t.param(layer.fc_out));
  if (layer.use_bias) logits = add_rowvec(logits, t.param(layer.b_out));
  return sigmoid(logits);
}

struct GatedAttentionTrace {
  Matrix masks;      // T x 2
  Matrix attention;  // T x T
};

/// H = softmax((S * M_q)(S * M_k)^T / sqrt(D)) S, where each mask column is
/// tiled across the D feature columns. `mask_override` (T x 2) replaces the
/// learned masks.
inline Var gated_attention(const Var& s, GatedSelfAttentionLayer& layer,
                           const std::optional<Matrix>& mask_override = std::nullopt,
                           GatedAttentionTrace* trace = nullptr) {
  Tape& t = *s.tape();
  Var masks;
  if (mask_override) {
    if (mask_override->rows() != s.rows() || mask_override->cols() != 2) {
      throw DimensionError("gated_attention: mask override " + mask_override->shape() + " for input " +
                           s.value().shape());
    }
    masks = t.constant(*mask_override);
  } else {
    masks = gating_masks(s, s, layer);
  }
  Var q = mul_colvec(slice_cols(masks, 0, 1), s);
  Var k = mul_colvec(slice_cols(masks, 1, 2), s);
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(s.cols()));
  Var attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
  if (trace) {
    trace->masks = masks.value();
    trace->attention = attn.value();
  }
  return matmul(attn, s);
}

inline Matrix unit_masks(std::size_t t) { return Matrix(t, 2, Real(1)); }

}  // namespace mmfuse

#pragma once

#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/init.hpp"

namespace mmfuse {

/// Affine layer x W + b with W of shape in x out and b of shape 1 x out.
struct Dense {
  Parameter w, b;

  Dense() = default;
  template <class Rng>
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : w(xavier_param(name + ".w", in, out, rng)), b(constant_param(name + ".b", 1, out, 0)) {}

  Var operator()(const Var& x) {
    Tape& t = *x.tape();
    return add_rowvec(matmul(x, t.param(w)), t.param(b));
  }

  std::vector<Parameter*> parameters() { return {&w, &b}; }
};

/// Text-side C = [F, X'] and image-side S = [H, S'], both n x 2D.
struct FusedInputs {
  Var text;
  Var image;
};

inline FusedInputs build_fused_inputs(const Var& f, const Var& x_t, const Var& h, const Var& s_t) {
  f.value().require_same(x_t.value(), "build_fused_inputs (F, X')");
  h.value().require_same(s_t.value(), "build_fused_inputs (H, S')");
  f.value().require_same(h.value(), "build_fused_inputs (F, H)");
  return {concat_cols(f, x_t), concat_cols(h, s_t)};
}

struct FusionRates {
  Real post_concat = Real(0.5);
  Real post_dense = Real(0.2);
  Real reduction = Real(0.1);
};

// ---------------------------------------------------------------------------

/// Parallel co-attention over the affinity between text and image features.
struct CoAttentionHead {
  std::size_t fused_dim = 0;   // d'
  std::size_t attn_dim = 0;    // k
  std::size_t hidden_dim = 0;  // dense1 width
  FusionRates rates;

  Parameter w_l;         // d' x d'
  Parameter w_s, w_c;    // k x d'
  Parameter w_hs, w_hc;  // k x 1
  Dense dense1;          // 2d' -> hidden
  Dense dense_out;       // hidden -> 2

  CoAttentionHead() = default;

  template <class Rng>
  CoAttentionHead(std::size_t d_fused, std::size_t k, std::size_t hidden, Rng& rng, FusionRates r = {})
      : fused_dim(d_fused), attn_dim(k), hidden_dim(hidden), rates(r),
        w_l(xavier_param("coattn.w_l", d_fused, d_fused, rng)),
        w_s(xavier_param("coattn.w_s", k, d_fused, rng)),
        w_c(xavier_param("coattn.w_c", k, d_fused, rng)),
        w_hs(xavier_param("coattn.w_hs", k, 1, rng)),
        w_hc(xavier_param("coattn.w_hc", k, 1, rng)),
        dense1("coattn.dense1", 2 * d_fused, hidden, rng),
        dense_out("coattn.dense_out", hidden, 2, rng) {}

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&w_l, &w_s, &w_c, &w_hs, &w_hc};
    for (Parameter* p : dense1.parameters()) ps.push_back(p);
    for (Parameter* p : dense_out.parameters()) ps.push_back(p);
    return ps;
  }
};

struct CoAttentionTrace {
  Matrix affinity;  // n x T
  Matrix a_s;       // 1 x T
  Matrix a_c;       // 1 x n
  Matrix s_hat;     // 1 x d'
  Matrix c_hat;     // 1 x d'
};

/// Inputs are stored n x d' and used as d' x n (columns are positions):
///   F   = tanh(C^T W_l S)
///   H^s = tanh(W_s S + (W_c C) F),  H^c = tanh(W_c C + (W_s S) F^T)
///   a^s = softmax(w_hs^T H^s),      a^c = softmax(w_hc^T H^c)
/// and the attended columns [c_hat, s_hat] feed a two-layer classifier.
template <class Rng>
Var co_attention_forward(const FusedInputs& in, CoAttentionHead& head, bool training, Rng& rng,
                         CoAttentionTrace* trace = nullptr) {
  if (in.text.cols() != head.fused_dim || in.image.cols() != head.fused_dim) {
    throw DimensionError("co_attention_forward: inputs " + in.text.value().shape() + " / " +
                         in.image.value().shape() + " do not match d'=" + std::to_string(head.fused_dim));
  }
  Tape& t = *in.text.tape();
  Var c_cols = transpose(in.text);   // d' x n
  Var s_cols = transpose(in.image);  // d' x T
  Var affinity = tanh_ew(matmul(matmul(in.text, t.param(head.w_l)), s_cols));  // n x T
  Var ws_s = matmul(t.param(head.w_s), s_cols);                                // k x T
  Var wc_c = matmul(t.param(head.w_c), c_cols);                                // k x n
  Var h_s = tanh_ew(add(ws_s, matmul(wc_c, affinity)));
  Var h_c = tanh_ew(add(wc_c, matmul(ws_s, transpose(affinity))));
  Var a_s = softmax_rows(matmul(transpose(t.param(head.w_hs)), h_s));  // 1 x T
  Var a_c = softmax_rows(matmul(transpose(t.param(head.w_hc)), h_c));  // 1 x n
  Var s_hat = matmul(a_s, in.image);
  Var c_hat = matmul(a_c, in.text);
  if (trace) {
    trace->affinity = affinity.value();
    trace->a_s = a_s.value();
    trace->a_c = a_c.value();
    trace->s_hat = s_hat.value();
    trace->c_hat = c_hat.value();
  }
  Var p = dropout(concat_cols(c_hat, s_hat), head.rates.post_concat, training, rng);
  Var hidden = dropout(relu(head.dense1(p)), head.rates.post_dense, training, rng);
  return head.dense_out(hidden);
}

// ---------------------------------------------------------------------------

/// FC(hidden) - ReLU - Dropout - FC(1), scoring each row of its input.
struct ReductionMlp {
  Dense fc1, fc2;

  ReductionMlp() = default;
  template <class Rng>
  ReductionMlp(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : fc1(name + ".fc1", in, hidden, rng), fc2(name + ".fc2", hidden, 1, rng) {}

  template <class R>
  Var operator()(const Var& x, Real rate, bool training, R& rng) {
    return fc2(dropout(relu(fc1(x)), rate, training, rng));
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps = fc1.parameters();
    for (Parameter* p : fc2.parameters()) ps.push_back(p);
    return ps;
  }
};

/// Attentional reduction of each modality followed by a layer-normalized
/// linear fusion.
struct AttnFusionHead {
  std::size_t fused_dim = 0;  // d'
  std::size_t out_dim = 0;    // d_z
  FusionRates rates;

  ReductionMlp reduce_text, reduce_image;
  Parameter w_c, w_s;  // d' x d_z
  Parameter ln_gain, ln_bias;
  Dense dense_out;  // d_z -> 2

  AttnFusionHead() = default;

  template <class Rng>
  AttnFusionHead(std::size_t d_fused, std::size_t mlp_hidden, std::size_t d_z, Rng& rng, FusionRates r = {})
      : fused_dim(d_fused), out_dim(d_z), rates(r),
        reduce_text("attnfuse.reduce_text", d_fused, mlp_hidden, rng),
        reduce_image("attnfuse.reduce_image", d_fused, mlp_hidden, rng),
        w_c(xavier_param("attnfuse.w_c", d_fused, d_z, rng)),
        w_s(xavier_param("attnfuse.w_s", d_fused, d_z, rng)),
        ln_gain(constant_param("attnfuse.ln_gain", 1, d_z, 1)),
        ln_bias(constant_param("attnfuse.ln_bias", 1, d_z, 0)),
        dense_out("attnfuse.dense_out", d_z, 2, rng) {}

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps = reduce_text.parameters();
    for (Parameter* p : reduce_image.parameters()) ps.push_back(p);
    ps.insert(ps.end(), {&w_c, &w_s, &ln_gain, &ln_bias});
    for (Parameter* p : dense_out.parameters()) ps.push_back(p);
    return ps;
  }
};

struct AttnFusionTrace {
  Matrix alpha_c;  // 1 x n
  Matrix alpha_s;  // 1 x T
  Matrix c_tilde;  // 1 x d'
  Matrix s_tilde;  // 1 x d'
  Matrix z;        // 1 x d_z
};

template <class Rng>
Var attn_fusion_forward(const FusedInputs& in, AttnFusionHead& head, bool training, Rng& rng,
                        AttnFusionTrace* trace = nullptr) {
  if (in.text.cols() != head.fused_dim || in.image.cols() != head.fused_dim) {
    throw DimensionError("attn_fusion_forward: inputs " + in.text.value().shape() + " / " +
                         in.image.value().shape() + " do not match d'=" + std::to_string(head.fused_dim));
  }
  Tape& t = *in.text.tape();
  Var alpha_c = softmax_rows(transpose(head.reduce_text(in.text, head.rates.reduction, training, rng)));
  Var alpha_s = softmax_rows(transpose(head.reduce_image(in.image, head.rates.reduction, training, rng)));
  Var c_tilde = matmul(alpha_c, in.text);
  Var s_tilde = matmul(alpha_s, in.image);
  Var fused = add(matmul(c_tilde, t.param(head.w_c)), matmul(s_tilde, t.param(head.w_s)));
  Var z = layer_norm(fused, t.param(head.ln_gain), t.param(head.ln_bias));
  if (trace) {
    trace->alpha_c = alpha_c.value();
    trace->alpha_s = alpha_s.value();
    trace->c_tilde = c_tilde.value();
    trace->s_tilde = s_tilde.value();
    trace->z = z.value();
  }
  return head.dense_out(z);
}

}  // namespace mmfuse

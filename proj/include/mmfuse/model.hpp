#pragma once

#include <algorithm>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmfuse/context_attention.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/gated_attention.hpp"
#include "mmfuse/synthetic.hpp"
#include "mmfuse/transport.hpp"

namespace mmfuse {

enum class FusionKind { CoAttention, AttnFusion };

inline const char* to_string(FusionKind f) { return f == FusionKind::CoAttention ? "coattention" : "attnfusion"; }

inline FusionKind parse_fusion_kind(const std::string& s) {
  if (s == "coattention") return FusionKind::CoAttention;
  if (s == "attnfusion") return FusionKind::AttnFusion;
  throw ParameterError("unknown fusion head '" + s + "' (expected coattention or attnfusion)");
}

/// Architecture variants used by the ablation harness.
enum class Variant {
  Full,
  NoContext,     // context gates forced to 0: plain self-attention in every layer
  NoGate,        // image-side masks forced to 1
  NoOt,          // no OTK and no cross-modal transport; requires T == n
  RepeatVector,  // mean of the image rows repeated n times instead of OTK
  NoFusion,      // dense layer over [mean(C), mean(S)]
};

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoContext: return "no_context";
    case Variant::NoGate: return "no_gate";
    case Variant::NoOt: return "no_ot";
    case Variant::RepeatVector: return "repeat_vector";
    case Variant::NoFusion: return "no_fusion";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::NoContext, Variant::NoGate, Variant::NoOt, Variant::RepeatVector,
                    Variant::NoFusion}) {
    if (s == to_string(v)) return v;
  }
  throw ParameterError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  ContextStrategy strategy = ContextStrategy::defaults(ContextKind::Deep);
  FusionKind fusion = FusionKind::CoAttention;
  Variant variant = Variant::Full;
  Real label_smoothing = Real(0.001);
  std::size_t seq_text = 12;   // n
  std::size_t seq_image = 12;  // T
  std::size_t dim = 32;        // D
  std::size_t key_dim = 64;    // D_q = D_k
  std::size_t gate_dim = 64;   // d_g
  bool gate_bias = false;
  std::size_t coattn_k = 40;
  std::size_t coattn_hidden = 128;
  std::size_t mlp_hidden = 128;
  std::size_t fused_out = 128;  // d_z
  FusionRates rates;
  Real otk_eps = 1;
  std::size_t otk_iters = 50;
  Real otk_tol = Real(1e-6);

  void validate() const {
    if (seq_text < 1 || seq_image < 1 || dim < 1) throw ParameterError("model: n, T and D must be >= 1");
    if (strategy.layers < 1) throw ParameterError("model: context layer count must be >= 1");
    if (key_dim < 1 || gate_dim < 1 || coattn_k < 1 || coattn_hidden < 1 || mlp_hidden < 1 || fused_out < 1) {
      throw ParameterError("model: hidden sizes must be >= 1");
    }
    if (!(label_smoothing >= 0 && label_smoothing <= 1)) throw ParameterError("model: label_smoothing must lie in [0, 1]");
    for (Real r : {rates.post_concat, rates.post_dense, rates.reduction}) {
      if (!(r >= 0 && r < 1)) throw ParameterError("model: dropout rates must lie in [0, 1)");
    }
    if (variant == Variant::NoOt && seq_image != seq_text) {
      throw ParameterError("model: variant no_ot needs T == n (got T=" + std::to_string(seq_image) +
                           ", n=" + std::to_string(seq_text) + ")");
    }
    if (!(otk_eps > 0) || otk_iters < 1) throw ParameterError("model: otk_eps must be positive and otk_iters >= 1");
  }

  OtkConfig otk() const { return {seq_text, otk_eps, otk_iters, otk_tol}; }
};

/// Diagnostics from one forward pass.
struct ForwardInfo {
  bool otk_converged = true;
  Real otk_violation = 0;
};

/// Frozen encoders, OTK, the text-side context stack, the image-side gated
/// attention, two-way OT adaptation and the fusion head.
class Model {
 public:
  ModelConfig cfg;
  Matrix enc_text, enc_image;  // frozen D x D
  Parameter references;        // n x D
  ContextStack stack;
  GatedSelfAttentionLayer gate;
  CoAttentionHead coattn;
  AttnFusionHead attnfuse;
  Dense concat_head;  // 4D -> 2

  Model() = default;

  template <class Rng>
  Model(const ModelConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    std::mt19937_64 enc_rng(rng());
    enc_text = orthogonal_encoder(cfg.dim, enc_rng);
    enc_image = orthogonal_encoder(cfg.dim, enc_rng);
    references = Parameter("otk.references", normal_matrix(cfg.seq_text, cfg.dim, Real(1), rng));
    stack = ContextStack(cfg.strategy, cfg.dim, cfg.key_dim, rng);
    gate = GatedSelfAttentionLayer(cfg.dim, cfg.gate_dim, rng, cfg.gate_bias);
    const std::size_t fused = 2 * cfg.dim;
    if (cfg.variant == Variant::NoFusion) {
      concat_head = Dense("concat.dense", 2 * fused, 2, rng);
    } else if (cfg.fusion == FusionKind::CoAttention) {
      coattn = CoAttentionHead(fused, cfg.coattn_k, cfg.coattn_hidden, rng, cfg.rates);
    } else {
      attnfuse = AttnFusionHead(fused, cfg.mlp_hidden, cfg.fused_out, rng, cfg.rates);
    }
  }

  bool uses_otk() const { return cfg.variant != Variant::NoOt && cfg.variant != Variant::RepeatVector; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    if (uses_otk()) ps.push_back(&references);
    for (Parameter* p : stack.parameters()) ps.push_back(p);
    for (Parameter* p : gate.parameters()) ps.push_back(p);
    std::vector<Parameter*> head;
    if (cfg.variant == Variant::NoFusion) {
      head = concat_head.parameters();
    } else if (cfg.fusion == FusionKind::CoAttention) {
      head = coattn.parameters();
    } else {
      head = attnfuse.parameters();
    }
    ps.insert(ps.end(), head.begin(), head.end());
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters()) n += p->value.size();
    return n;
  }

  /// Sets the OTK references to `n` rows drawn without replacement from the
  /// encoded image rows of `samples`.
  template <class Rng>
  void init_references(const std::vector<const Sample*>& samples, Rng& rng) {
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t s = 0; s < samples.size(); ++s)
      for (std::size_t r = 0; r < samples[s]->image.rows(); ++r) pool.emplace_back(s, r);
    if (pool.size() < cfg.seq_text) throw InputError("init_references: fewer image rows than references");
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < cfg.seq_text; ++i) {
      const Matrix enc = kernel::matmul(kernel::slice_rows(samples[pool[i].first]->image, pool[i].second, pool[i].second + 1), enc_image);
      for (std::size_t c = 0; c < cfg.dim; ++c) references.value(i, c) = enc(0, c);
    }
  }

  /// Logits (1 x 2) for one sample.
  template <class Rng>
  Var forward(Tape& t, const Matrix& x_raw, const Matrix& y_raw, bool training, Rng& rng,
              ForwardInfo* info = nullptr) {
    if (x_raw.rows() != cfg.seq_text || x_raw.cols() != cfg.dim || y_raw.cols() != cfg.dim || y_raw.rows() == 0) {
      throw DimensionError("Model::forward: inputs " + x_raw.shape() + " / " + y_raw.shape() + " expected " +
                           std::to_string(cfg.seq_text) + "x" + std::to_string(cfg.dim) + " / Tx" +
                           std::to_string(cfg.dim));
    }
    if (!kernel::all_finite(x_raw) || !kernel::all_finite(y_raw)) throw InputError("Model::forward: non-finite input");
    Var x = t.constant(kernel::matmul(x_raw, enc_text));
    Var y = t.constant(kernel::matmul(y_raw, enc_image));

    Var s;
    switch (cfg.variant) {
      case Variant::NoOt:
        if (y.rows() != cfg.seq_text) throw DimensionError("Model::forward: variant no_ot needs T == n");
        s = y;
        break;
      case Variant::RepeatVector: s = repeat_rows(mean_rows(y), cfg.seq_text); break;
      default: {
        OtkResult o = otk_embed(y, t.param(references), cfg.otk());
        if (info) {
          info->otk_converged = o.converged;
          info->otk_violation = o.marginal_violation;
        }
        s = o.embedding;
      }
    }

    const std::optional<Real> ctx_override =
        cfg.variant == Variant::NoContext ? std::optional<Real>(Real(0)) : std::nullopt;
    Var f = stack_forward(x, stack, ctx_override);
    const std::optional<Matrix> mask_override =
        cfg.variant == Variant::NoGate ? std::optional<Matrix>(unit_masks(s.rows())) : std::nullopt;
    Var h = gated_attention(s, gate, mask_override);

    // Diverged parameters surface here, before the exact OT solver sees them.
    if (!kernel::all_finite(s.value()) || !kernel::all_finite(f.value()) || !kernel::all_finite(h.value())) {
      throw NumericalError("Model::forward: non-finite activations");
    }
    Var x_t = x, s_t = s;
    if (cfg.variant != Variant::NoOt) {
      x_t = ot_adapt(s, x);
      s_t = ot_adapt(x, s);
    }
    FusedInputs fused = build_fused_inputs(f, x_t, h, s_t);
    if (cfg.variant == Variant::NoFusion) return concat_head(concat_cols(mean_rows(fused.text), mean_rows(fused.image)));
    if (cfg.fusion == FusionKind::CoAttention) return co_attention_forward(fused, coattn, training, rng);
    return attn_fusion_forward(fused, attnfuse, training, rng);
  }

  /// Class probabilities in evaluation mode.
  std::vector<Real> predict_proba(const Matrix& x_raw, const Matrix& y_raw) {
    Tape t;
    std::mt19937_64 unused(0);
    Var logits = forward(t, x_raw, y_raw, false, unused);
    const Matrix p = kernel::softmax_rows(logits.value());
    return {p(0, 0), p(0, 1)};
  }
};

}  // namespace mmfuse

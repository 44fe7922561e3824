// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "mmfuse/audio.hpp"
#include "mmfuse/gradcheck.hpp"
#include "mmfuse/init.hpp"
#include "mmfuse/serialize.hpp"
#include "mmfuse/significance.hpp"
#include "oracles.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << v;
  return ss.str();
}

// Collects failed conditions for one criterion; the first few end up in the
// printed line.
struct Check {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

int report(int id, const std::string& title, const std::function<void(Check&)>& body) {
  Check c;
  const auto t0 = Clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.failures.push_back(std::string("exception: ") + e.what());
  }
  const double secs = seconds_since(t0);
  std::ostringstream line;
  line << (c.failures.empty() ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " [" << num(secs, 3)
       << "s]";
  for (const auto& n : c.notes) line << "; " << n;
  for (std::size_t i = 0; i < std::min<std::size_t>(c.failures.size(), 5); ++i) line << "; failed: " << c.failures[i];
  if (c.failures.size() > 5) line << "; (" << c.failures.size() - 5 << " more failures)";
  std::cout << line.str() << std::endl;
  return c.failures.empty() ? 0 : 1;
}

std::vector<Real> random_simplex(std::size_t n, std::mt19937_64& g, bool allow_zero = false) {
  std::uniform_real_distribution<Real> u(0.05, 1.0);
  std::bernoulli_distribution zero(0.2);
  std::vector<Real> v(n);
  for (auto& x : v) x = allow_zero && zero(g) ? Real(0) : u(g);
  if (std::all_of(v.begin(), v.end(), [](Real x) { return x == 0; })) v[0] = 1;
  const Real s = std::accumulate(v.begin(), v.end(), Real(0));
  for (auto& x : v) x /= s;
  return v;
}

bool inside_column_hull(const Matrix& out, const Matrix& pts, Real slack) {
  for (std::size_t k = 0; k < pts.cols(); ++k) {
    Real lo = pts(0, k), hi = pts(0, k);
    for (std::size_t j = 1; j < pts.rows(); ++j) {
      lo = std::min(lo, pts(j, k));
      hi = std::max(hi, pts(j, k));
    }
    for (std::size_t i = 0; i < out.rows(); ++i)
      if (out(i, k) < lo - slack || out(i, k) > hi + slack) return false;
  }
  return true;
}

Matrix vanilla_self_attention(const Matrix& s) {
  Matrix sc = kernel::matmul(s, kernel::transpose(s));
  const Real inv = Real(1) / std::sqrt(static_cast<Real>(s.cols()));
  for (auto& v : sc.data()) v *= inv;
  return kernel::matmul(kernel::softmax_rows(sc), s);
}

void perturb_layer_norm(AttnFusionHead& h, std::mt19937_64& g) {
  h.ln_gain.value = normal_matrix(1, h.out_dim, 0.5, g);
  for (auto& v : h.ln_gain.value.data()) v += 1;
  h.ln_bias.value = normal_matrix(1, h.out_dim, 0.5, g);
}

// Runs grad_check and records the worst relative error under `name`.
void grad_case(Check& c, const std::string& name, const LossFn& loss, const std::vector<Parameter*>& params,
               Real tol, Real& worst) {
  const auto reports = grad_check(loss, params);
  Real m = 0;
  for (const auto& r : reports) {
    m = std::max(m, r.max_rel_error);
    c.expect(r.max_rel_error < tol, name + "/" + r.parameter + " rel " + num(r.max_rel_error));
  }
  c.expect(!reports.empty(), name + ": no parameters checked");
  worst = std::max(worst, m);
}

// ---------------------------------------------------------------------------

void criterion_gradients(Check& c) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(101);
  Real layer_worst = 0, e2e_worst = 0;

  for (ContextKind kind : {ContextKind::Global, ContextKind::Deep, ContextKind::DeepGlobal}) {
    ContextStack st(ContextStrategy::defaults(kind), 4, 3, g);
    const Matrix x = normal_matrix(5, 4, 1.0, g), w = normal_matrix(5, 4, 1.0, g);
    grad_case(
        c, std::string("context_") + to_string(kind),
        [&](Tape& t) { return sum_all(elementwise_mul(stack_forward(t.constant(x), st), t.constant(w))); },
        st.parameters(), 1e-4, layer_worst);
  }

  for (bool bias : {false, true}) {
    GatedSelfAttentionLayer l(5, 4, g, bias);
    if (bias)
      for (Parameter* p : {&l.b_q, &l.b_k, &l.b_out}) p->value = normal_matrix(1, p->value.cols(), 0.5, g);
    Parameter s("s", normal_matrix(4, 5, 1.0, g));
    const Matrix w = normal_matrix(4, 5, 1.0, g);
    std::vector<Parameter*> ps = l.parameters();
    ps.push_back(&s);
    grad_case(
        c, bias ? "gated_bias" : "gated",
        [&](Tape& t) { return sum_all(elementwise_mul(gated_attention(t.param(s), l), t.constant(w))); }, ps, 1e-4,
        layer_worst);
  }

  {
    CoAttentionHead h(4, 3, 5, g);
    Parameter cp("c", normal_matrix(3, 4, 1.0, g)), sp("s", normal_matrix(3, 4, 1.0, g));
    std::vector<Parameter*> ps = h.parameters();
    ps.push_back(&cp);
    ps.push_back(&sp);
    std::mt19937_64 unused(0);
    grad_case(
        c, "coattention",
        [&](Tape& t) {
          return ls_cross_entropy(softmax_rows(co_attention_forward({t.param(cp), t.param(sp)}, h, false, unused)),
                                  {0.3, 0.7});
        },
        ps, 1e-4, layer_worst);
  }
  {
    AttnFusionHead h(4, 5, 3, g);
    perturb_layer_norm(h, g);
    Parameter cp("c", normal_matrix(3, 4, 1.0, g)), sp("s", normal_matrix(3, 4, 1.0, g));
    std::vector<Parameter*> ps = h.parameters();
    ps.push_back(&cp);
    ps.push_back(&sp);
    std::mt19937_64 unused(0);
    grad_case(
        c, "attnfusion",
        [&](Tape& t) {
          return ls_cross_entropy(softmax_rows(attn_fusion_forward({t.param(cp), t.param(sp)}, h, false, unused)),
                                  {0.3, 0.7});
        },
        ps, 1e-4, layer_worst);
  }
  {
    Parameter a("a", normal_matrix(3, 6, 1.0, g)), gain("gain", normal_matrix(1, 6, 1.0, g)),
        bias("bias", normal_matrix(1, 6, 1.0, g));
    const Matrix w = normal_matrix(3, 6, 1.0, g);
    grad_case(
        c, "layer_norm",
        [&](Tape& t) {
          return sum_all(elementwise_mul(layer_norm(t.param(a), t.param(gain), t.param(bias)), t.constant(w)));
        },
        {&a, &gain, &bias}, 1e-4, layer_worst);
  }
  for (Real alpha : {0.0, 0.001, 0.1}) {
    Parameter z("z", normal_matrix(1, 2, 1.0, g));
    const auto targets = smooth_targets(1, {alpha, 2});
    grad_case(
        c, "smoothed_ce_alpha=" + num(alpha),
        [&](Tape& t) { return ls_cross_entropy(softmax_rows(t.param(z)), targets); }, {&z}, 1e-4, layer_worst);
  }

  for (std::size_t iters : {1u, 10u, 50u}) {
    Parameter y("y", normal_matrix(6, 3, 1.0, g)), z("z", normal_matrix(4, 3, 1.0, g));
    const Matrix w = normal_matrix(4, 3, 1.0, g);
    const OtkConfig cfg{4, 1.0, iters, 0.0};
    grad_case(
        c, "otk_iters=" + std::to_string(iters),
        [&](Tape& t) {
          return sum_all(elementwise_mul(otk_embed(t.param(y), t.param(z), cfg).embedding, t.constant(w)));
        },
        {&y, &z}, 1e-3, e2e_worst);
  }

  for (FusionKind f : {FusionKind::CoAttention, FusionKind::AttnFusion}) {
    ModelConfig mc;
    mc.fusion = f;
    mc.seq_text = 3;
    mc.seq_image = 4;
    mc.dim = 3;
    mc.key_dim = 3;
    mc.gate_dim = 3;
    mc.coattn_k = 3;
    mc.coattn_hidden = 4;
    mc.mlp_hidden = 4;
    mc.fused_out = 4;
    mc.otk_tol = 0;
    mc.strategy = ContextStrategy::defaults(ContextKind::Deep);
    mc.strategy.layers = 2;
    std::mt19937_64 mg(11);
    Model m(mc, mg);
    if (f == FusionKind::AttnFusion) perturb_layer_norm(m.attnfuse, mg);
    const Sample s{normal_matrix(3, 3, 1.0, mg), normal_matrix(4, 3, 1.0, mg), 1};
    std::mt19937_64 unused(0);
    grad_case(
        c, std::string("model_") + to_string(f), [&](Tape& t) { return sample_loss(m, t, s, false, unused); },
        m.parameters(), 1e-3, e2e_worst);
  }

  const double secs = seconds_since(t0);
  c.expect(secs < 120, "runtime " + num(secs) + "s >= 120s");
  c.note("max rel error layers " + num(layer_worst) + " (< 1e-4), end-to-end/OTK " + num(e2e_worst) + " (< 1e-3)");
}

void criterion_transport(Check& c) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(202);
  std::uniform_int_distribution<std::size_t> size(1, 4);
  std::uniform_real_distribution<Real> cu(0.0, 5.0);
  std::size_t instances = 0;
  Real worst_violation = 0, worst_gap = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = size(g), m = size(g);
    const auto a = random_simplex(n, g, trial % 3 == 0), b = random_simplex(m, g, trial % 5 == 0);
    Matrix cost(n, m);
    for (auto& v : cost.data()) v = trial % 2 ? cu(g) : std::round(cu(g));
    const Coupling res = emd_exact(a, b, CostMatrix{cost});
    worst_violation = std::max(worst_violation, res.marginal_violation);
    c.expect(res.marginal_violation < 1e-9, "emd violation " + num(res.marginal_violation));
    const Real brute = oracle::brute_force_emd(a, b, cost);
    const Real gap = std::abs(res.cost - brute);
    worst_gap = std::max(worst_gap, gap);
    c.expect(gap <= 1e-10 * std::max<Real>(1, brute), "emd vs brute force gap " + num(gap));
    ++instances;
  }
  c.expect(instances >= 200, "only " + std::to_string(instances) + " brute-force instances");

  for (std::size_t n : {1u, 5u, 17u}) {
    const Matrix x = normal_matrix(n, 4, 1.0, g);
    const Coupling id = ot_plan(x, x);
    c.expect(id.cost == 0, "identity cost " + num(id.cost));
    c.expect(ot_adapt(x, x) == x, "identity barycentric map not exact for n=" + std::to_string(n));
  }

  std::size_t sinkhorn_instances = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 6, m = 1 + (trial / 6) % 5;
    const Matrix x = normal_matrix(n, 3, 1.0, g), y = normal_matrix(m, 3, 1.0, g);
    const auto a = random_simplex(n, g), b = random_simplex(m, g);
    const CostMatrix cm = cost_matrix(x, y);
    const Coupling s = sinkhorn(a, b, cm, {0.1, 100000, 1e-13});
    const Real exact = emd_exact(a, b, cm).cost;
    c.expect(s.cost >= exact - 1e-9, "sinkhorn " + num(s.cost, 12) + " below exact " + num(exact, 12));
    // An entropic plan meets its row marginals only to the solver tolerance,
    // so its barycentric weights sum to 1 within that error.
    Real weight_error = 0, scale = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Real row = 0;
      for (std::size_t j = 0; j < m; ++j) row += s.plan(i, j);
      weight_error = std::max(weight_error, std::abs(row / a[i] - 1));
    }
    for (Real v : y.data()) scale = std::max(scale, std::abs(v));
    c.expect(inside_column_hull(barycentric_map(s, y), y, (weight_error + 1e-14 * static_cast<Real>(m)) * scale),
             "sinkhorn barycentric output outside hull");
    c.expect(inside_column_hull(ot_adapt(x, y), y, 1e-12), "emd barycentric output outside hull");
    ++sinkhorn_instances;
  }

  const double secs = seconds_since(t0);
  c.expect(secs < 60, "runtime " + num(secs) + "s >= 60s");
  c.note(std::to_string(instances) + " brute-force instances, max violation " + num(worst_violation) +
         ", max cost gap " + num(worst_gap) + ", " + std::to_string(sinkhorn_instances) + " sinkhorn/hull instances");
}

PredictionSet binary_set(const std::vector<Real>& p1, const std::vector<std::size_t>& labels) {
  PredictionSet ps;
  ps.probs = Matrix(p1.size(), 2);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    ps.probs(i, 1) = p1[i];
    ps.probs(i, 0) = 1 - p1[i];
  }
  ps.labels = labels;
  return ps;
}

PredictionSet random_set(std::size_t n, std::size_t k, bool snap, std::mt19937_64& g) {
  std::gamma_distribution<Real> gam(1.0, 1.0);
  std::uniform_int_distribution<std::size_t> lab(0, k - 1);
  PredictionSet ps;
  ps.probs = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Real> row(k);
    Real s = 0;
    for (auto& x : row) s += (x = gam(g) + 1e-6);
    for (auto& x : row) x /= s;
    if (snap) {
      // coarse grid so ties and bin edges occur
      for (std::size_t j = 0; j + 1 < k; ++j) row[j] = std::round(row[j] * 10) / 10;
      Real rest = 1;
      for (std::size_t j = 0; j + 1 < k; ++j) {
        row[j] = std::min(row[j], rest);
        rest -= row[j];
      }
      row[k - 1] = rest;
    }
    for (std::size_t j = 0; j < k; ++j) ps.probs(i, j) = row[j];
    ps.labels.push_back(lab(g));
  }
  return ps;
}

void criterion_calibration(Check& c) {
  const auto t = smooth_targets(0, {0.001, 2});
  c.expect(t.size() == 2 && t[0] == 0.9995 && t[1] == 0.0005,
           "smooth_targets(0.001, 2) = (" + num(t[0], 17) + ", " + num(t[1], 17) + ")");

  std::mt19937_64 g(303);
  std::uniform_int_distribution<std::size_t> size(1, 200);
  std::size_t sets = 0;
  for (int trial = 0; trial < 600; ++trial) {
    const std::size_t k = 2 + trial % 2, n = size(g), bins = 1 + trial % 15;
    const std::size_t ranges = std::min<std::size_t>(n, 1 + trial % 12);
    const PredictionSet ps = random_set(n, k, trial % 3 == 0, g);
    const Real e = ece(ps, bins).value, eo = oracle::ece(ps.probs, ps.labels, bins);
    const Real a = ace(ps, ranges).value, ao = oracle::ace(ps.probs, ps.labels, ranges);
    c.expect(e == eo, "ECE trial " + std::to_string(trial) + " " + num(e, 17) + " vs " + num(eo, 17));
    c.expect(a == ao, "ACE trial " + std::to_string(trial) + " " + num(a, 17) + " vs " + num(ao, 17));
    ++sets;
  }
  c.expect(sets >= 500, "only " + std::to_string(sets) + " random sets");

  const PredictionSet perfect = binary_set({1.0, 0.0, 1.0, 0.0}, {1, 0, 1, 0});
  c.expect(ece(perfect, 10).value == 0, "perfect set ECE " + num(ece(perfect, 10).value));
  c.expect(ace(perfect, 2).value == 0, "perfect set ACE " + num(ace(perfect, 2).value));
  const Real half = ece(binary_set({1.0, 1.0, 0.0, 0.0}, {1, 0, 0, 1}), 10).value;
  c.expect(half == 0.5, "confidence-1 half-correct ECE " + num(half));
  c.note(std::to_string(sets) + " random sets matched oracles exactly; half-correct ECE " + num(half));
}

std::vector<double> normal_sample(std::size_t n, double mean, std::mt19937_64& g) {
  std::normal_distribution<double> d(mean, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

void criterion_aso(Check& c) {
  std::mt19937_64 g(404);
  Real worst_shift = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto b = normal_sample(10, 0.0, g);
    std::vector<double> a(b);
    for (auto& x : a) x += 10;
    AsoOptions o;
    o.seed = seed;
    const Real e = aso(a, b, o).eps_min;
    worst_shift = std::max(worst_shift, e);
    c.expect(e < 0.05, "shifted samples eps_min " + num(e));
  }
  const Real constant = aso({0.7, 0.7, 0.7, 0.7, 0.7}, {0.7, 0.7, 0.7, 0.7, 0.7}).eps_min;
  c.expect(constant == 0.5, "identical constant samples eps_min " + num(constant));

  const auto a = normal_sample(12, 0.8, g), b = normal_sample(15, 0.0, g);
  AsoOptions o;
  o.seed = 77;
  const Real first = aso(a, b, o).eps_min;
  c.expect(aso(a, b, o).eps_min == first, "same seed gave a different eps_min");
  o.threads = 3;
  c.expect(aso(a, b, o).eps_min == first, "thread count changed eps_min");

  std::uniform_real_distribution<double> scale(0.01, 100.0), shift(-50.0, 50.0);
  Real worst_affine = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto x = normal_sample(6 + trial % 5, 0.0, g), y = normal_sample(8 + trial % 3, 0.2, g);
    const Real base = violation_ratio(x, y);
    const double s = scale(g), off = shift(g);
    for (auto& v : x) v = s * v + off;
    for (auto& v : y) v = s * v + off;
    worst_affine = std::max(worst_affine, std::abs(violation_ratio(x, y) - base));
  }
  c.expect(worst_affine <= 1e-6, "affine map moved violation_ratio by " + num(worst_affine));
  c.note("max shifted eps_min " + num(worst_shift) + ", constant " + num(constant) + ", affine drift " +
         num(worst_affine));
}

ExperimentConfig learning_config(FusionKind f) {
  ExperimentConfig c;  // defaults: n = T = 12, D = 32, 200/60/60, 5 runs, 100 epochs
  c.label = std::string("separable/") + to_string(f);
  c.task.class_separation = 3;
  c.task.correlation = 0.5;
  c.model.fusion = f;
  c.model.strategy = ContextStrategy::defaults(ContextKind::Deep);
  return c;
}

void criterion_learning(Check& c) {
  constexpr std::size_t kAcc = 3;
  for (FusionKind f : {FusionKind::CoAttention, FusionKind::AttnFusion}) {
    const ExperimentConfig cfg = learning_config(f);
    const auto t0 = Clock::now();
    const RunReport r = run_experiment(cfg);
    const double secs = seconds_since(t0);
    c.expect(r.runs.size() == 5, std::string(to_string(f)) + ": " + std::to_string(r.runs.size()) + " of 5 runs");
    c.expect(r.mean[kAcc] >= 0.9, std::string(to_string(f)) + " mean accuracy " + num(r.mean[kAcc]));
    c.expect(secs < 300, std::string(to_string(f)) + " runtime " + num(secs) + "s");
    std::size_t max_epochs = 0;
    for (const auto& run : r.runs) max_epochs = std::max(max_epochs, run.epochs_run);
    c.expect(max_epochs <= 100, std::string(to_string(f)) + " ran " + std::to_string(max_epochs) + " epochs");
    c.note(std::string(to_string(f)) + " acc " + num(r.mean[kAcc]) + " +- " + num(r.stddev[kAcc]) + " in " +
           num(secs, 3) + "s");
  }
  ExperimentConfig chance = learning_config(FusionKind::CoAttention);
  chance.label = "chance";
  chance.task.class_separation = 0;
  chance.task.correlation = 0;
  const auto t0 = Clock::now();
  const RunReport r = run_experiment(chance);
  const double secs = seconds_since(t0);
  c.expect(r.mean[kAcc] >= 0.35 && r.mean[kAcc] <= 0.65, "chance task accuracy " + num(r.mean[kAcc]));
  c.expect(secs < 300, "chance runtime " + num(secs) + "s");
  c.note("chance acc " + num(r.mean[kAcc]) + " in " + num(secs, 3) + "s");
}

void criterion_smoothing(Check& c) {
  constexpr std::size_t kEce = 5;
  ExperimentConfig base = learning_config(FusionKind::CoAttention);
  base.task.class_separation = 1.5;
  ExperimentConfig smooth = base, plain = base;
  smooth.label = "noisy/alpha=0.001";
  smooth.model.label_smoothing = 0.001;
  plain.label = "noisy/alpha=0";
  plain.model.label_smoothing = 0;
  const RunReport rs = run_experiment(smooth), rp = run_experiment(plain);
  c.expect(rs.runs.size() == 5 && rp.runs.size() == 5, "not all five runs completed");
  std::vector<Real> neg_s = rs.column(kEce), neg_p = rp.column(kEce);
  for (auto& v : neg_s) v = -v;
  for (auto& v : neg_p) v = -v;
  const Real eps = aso(neg_s, neg_p).eps_min;
  const bool mean_ok = rs.mean[kEce] <= rp.mean[kEce];
  c.expect(mean_ok || eps <= 0.5, "mean ECE smoothed " + num(rs.mean[kEce]) + " > plain " + num(rp.mean[kEce]) +
                                      " and eps_min " + num(eps) + " > 0.5");
  c.note("mean ECE alpha=0.001 " + num(rs.mean[kEce]) + " vs alpha=0 " + num(rp.mean[kEce]) +
         ", eps_min(smoothed over plain) " + num(eps));
}

void criterion_ablation(Check& c) {
  ExperimentConfig base;
  base.label = "ablation";
  base.task.seq_text = 6;
  base.task.seq_image = 6;
  base.task.dim = 8;
  base.task.train_size = 60;
  base.task.val_size = 20;
  base.task.test_size = 20;
  base.model.key_dim = 8;
  base.model.gate_dim = 8;
  base.model.coattn_k = 8;
  base.model.coattn_hidden = 16;
  base.model.otk_iters = 20;
  base.train.runs = 2;
  base.train.max_epochs = 5;

  // Mask override of ones against plain self-attention, on the no_gate
  // model's own gate layer before any training.
  ExperimentConfig ng = base;
  ng.model.variant = Variant::NoGate;
  std::mt19937_64 init = detail::stream(1, 0);
  Model m(ng.model_config(), init);
  std::mt19937_64 g(707);
  for (std::size_t rows : {1u, 3u, 6u}) {
    const Matrix s = normal_matrix(rows, ng.task.dim, 1.0, g);
    Tape t;
    c.expect(gated_attention(t.constant(s), m.gate, unit_masks(rows)).value() == vanilla_self_attention(s),
             "unit-mask gated attention differs from vanilla for " + std::to_string(rows) + " rows");
  }

  std::size_t reports = 0;
  for (AblationAxis axis : kAblationAxes) {
    const auto reps = ablation_harness(base, axis);
    c.expect(reps.size() == (axis == AblationAxis::Layers ? kMaxSweepLayers : 1u),
             std::string(to_string(axis)) + ": " + std::to_string(reps.size()) + " reports");
    for (const RunReport& r : reps) {
      c.expect(r.runs.size() == base.train.runs, r.label + ": " + std::to_string(r.runs.size()) + " runs");
      c.expect(r.warnings.empty(), r.label + ": warnings");
      const auto back = report_from_json(nlohmann::json::parse(reports_json_text({r}))[0]);
      c.expect(back.label == r.label && back.runs.size() == r.runs.size(), r.label + ": report round trip");
      c.expect(reports_csv({r}).find(r.label) != std::string::npos, r.label + ": missing from CSV");
      ++reports;
    }
  }
  c.note(std::to_string(reports) + " ablation reports over " + std::to_string(kAblationAxes.size()) +
         " axes; unit-mask override bit-identical");
}

double sine_peak_checks(Check& c) {
  constexpr double kPi = std::numbers::pi;
  const double sr = 16000;
  const std::size_t n = 2048, hop = 1024, len = 32000;
  std::size_t frames = 0;
  for (std::size_t bin : {20u, 150u, 511u}) {
    audio::Waveform w;
    w.sample_rate = sr;
    w.samples.resize(len);
    for (std::size_t i = 0; i < len; ++i)
      w.samples[i] = std::sin(2 * kPi * static_cast<double>(bin) * static_cast<double>(i) / static_cast<double>(n));
    const Matrix mag = audio::stft(w, n, hop).magnitude();
    for (std::size_t f = 0; f < mag.cols(); ++f) {
      if (f * hop < n / 2 || f * hop + n / 2 > len) continue;  // window touches the mirrored padding
      std::size_t best = 0;
      for (std::size_t r = 1; r < mag.rows(); ++r)
        if (mag(r, f) > mag(best, f)) best = r;
      c.expect(best == bin, "sine at bin " + std::to_string(bin) + " peaked at " + std::to_string(best) +
                                " in frame " + std::to_string(f));
      ++frames;
    }
  }
  return static_cast<double>(frames);
}

void criterion_audio(Check& c) {
  const double frames = sine_peak_checks(c);

  for (double v : {0.0, -37.25, 1e6}) {
    const Matrix d = audio::delta(Matrix(5, 30, v), 9);
    c.expect(std::all_of(d.data().begin(), d.data().end(), [](Real x) { return x == 0; }),
             "delta of constant " + num(v) + " not exactly zero");
  }

  std::mt19937_64 g(808);
  std::normal_distribution<double> d(0, 0.3);
  for (std::size_t len : {4096u, 22050u, 50000u}) {
    audio::Waveform w;
    w.sample_rate = 16000;
    w.samples.resize(len);
    for (auto& v : w.samples) v = d(g);
    const audio::SpectrogramImage a = audio::to_image(w), b = audio::to_image(w);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      c.expect(a.channels[ch].rows() == 224 && a.channels[ch].cols() == 224,
               "channel shape " + a.channels[ch].shape());
      c.expect(a.channels[ch] == b.channels[ch], "to_image not bit-identical on rerun");
    }
  }
  c.note(num(frames) + " interior frames peaked at the exact bin; output 3x224x224");
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MMFUSE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void criterion_reproducibility(Check& c) {
  const fs::path dir = fs::temp_directory_path() / ("mmfuse_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "repro.cfg";
  {
    ExperimentConfig e;
    e.label = "repro";
    e.task.seq_text = 8;
    e.task.seq_image = 8;
    e.task.dim = 16;
    e.task.train_size = 80;
    e.task.val_size = 24;
    e.task.test_size = 24;
    e.model.key_dim = 16;
    e.model.gate_dim = 16;
    e.model.coattn_k = 16;
    e.model.coattn_hidden = 32;
    e.train.runs = 3;
    e.train.max_epochs = 6;
    std::ofstream(cfg) << config_text(e);
  }
  const fs::path log = dir / "log.txt";
  struct Job {
    std::string name, args;
  };
  const std::vector<Job> jobs = {
      {"train", "train -c " + cfg.string()},
      {"train_attnfusion", "train -c " + cfg.string() + " --set model.fusion=attnfusion"},
      {"ablate", "ablate -c " + cfg.string() + " --axis all --set train.runs=1 --set train.max_epochs=2"},
  };
  for (const Job& j : jobs) {
    std::string first;
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = dir / (j.name + "_" + std::to_string(rep) + ".json");
      const int code = run_cli(j.args + " -o " + out.string(), log);
      c.expect(code == 0, j.name + " exit " + std::to_string(code) + ": " + slurp(log));
      const std::string bytes = slurp(out);
      c.expect(!bytes.empty(), j.name + " wrote an empty report");
      if (rep == 0) first = bytes;
      else c.expect(bytes == first, j.name + " reports differ between reruns");
    }
  }
  fs::remove_all(dir);
  c.note(std::to_string(jobs.size()) + " CLI experiments rerun with byte-identical reports");
}

}  // namespace

int main() {
  std::cout << std::unitbuf;
  int failed = 0;
  failed += report(1, "gradient suite", criterion_gradients);
  failed += report(2, "optimal transport suite", criterion_transport);
  failed += report(3, "calibration suite", criterion_calibration);
  failed += report(4, "ASO suite", criterion_aso);
  failed += report(5, "end-to-end learning", criterion_learning);
  failed += report(6, "label smoothing lowers ECE", criterion_smoothing);
  failed += report(7, "ablation harness", criterion_ablation);
  failed += report(8, "audio features", criterion_audio);
  failed += report(9, "CLI reproducibility", criterion_reproducibility);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}

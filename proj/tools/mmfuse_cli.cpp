// mmfuse command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
// 3 I/O or malformed input data.

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/audio.hpp"
#include "mmfuse/gradcheck.hpp"
#include "mmfuse/serialize.hpp"
#include "mmfuse/significance.hpp"

using namespace mmfuse;
using detail::fmt_real;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitIo = 3;

// ---------------------------------------------------------------------------
// Small text helpers.

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::trim(item));
  return out;
}

bool parse_double(const std::string& s, double& out) {
  auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

// Numeric CSV with an optional header line; '#' starts a comment.
std::vector<std::vector<double>> read_numeric_csv(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::vector<double> row;
    bool numeric = true;
    for (const std::string& f : split_fields(line)) {
      double v = 0;
      if (!parse_double(f, v)) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (rows.empty() && lineno == 1) continue;  // header
      throw InputError(path + ":" + std::to_string(lineno) + ": non-numeric field");
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InputError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(rows.front().size()) +
                       " fields, got " + std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(path + ": no data rows");
  return rows;
}

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

// Whitespace-, comma- or newline-separated numbers.
std::vector<double> read_scores(const std::string& path) {
  std::string text = read_text_file(path);
  for (char& c : text)
    if (c == ',' || c == ';') c = ' ';
  std::istringstream in(text);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    double v = 0;
    if (!parse_double(tok, v)) throw InputError(path + ": not a number: '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InputError(path + ": no scores");
  return out;
}

std::string matrix_csv(const Matrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? "," : "") + fmt_real(m(i, j));
    out += "\n";
  }
  return out;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_text_file(path, text);
  }
}

// Config file plus --set key=value overrides, applied in order.
ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  ExperimentConfig c = path.empty() ? ExperimentConfig{} : load_config(path);
  std::string extra;
  for (const auto& s : sets) {
    if (s.find('=') == std::string::npos) throw ParameterError("--set expects key=value, got '" + s + "'");
    extra += s + "\n";
  }
  if (!extra.empty()) c = parse_config_text(config_text(c) + extra);
  c.validate();
  return c;
}

std::string metrics_csv(const Evaluation& ev) {
  std::string out;
  for (std::size_t k = 0; k < kScoreColumns.size(); ++k) out += std::string(k ? "," : "") + kScoreColumns[k];
  out += ",loss\n";
  const auto& m = ev.metrics;
  for (Real v : {m.precision, m.recall, m.f1, m.accuracy, m.specificity, ev.ece, ev.ace})
    out += fmt_real(v) + ",";
  out += fmt_real(ev.loss) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands.

struct TrainArgs {
  std::string config, out, model;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  const ExperimentConfig c = load_with_overrides(a.config, a.sets);
  bool saved = false;
  const RunReport rep = run_experiment(c, [&](std::uint64_t, Model& m) {
    if (!a.model.empty() && !saved) {
      save_model(a.model, c, m);
      saved = true;
    }
  });
  emit(a.out, reports_json_text({rep}));
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  if (!a.out.empty() && a.out != "-") std::cout << reports_csv({rep});
  return kExitOk;
}

struct EvalArgs {
  std::string model, split = "test", out, predictions;
};

int cmd_eval(const EvalArgs& a) {
  LoadedModel lm = load_model(a.model);
  const Dataset ds = generate_task(lm.config.task);
  const Split* s = a.split == "train" ? &ds.train : a.split == "val" ? &ds.val : &ds.test;
  if (s->empty()) throw InputError("eval: the " + a.split + " split is empty");
  const Evaluation ev = evaluate(lm.model, *s);
  emit(a.out, metrics_csv(ev));
  if (!a.predictions.empty()) {
    std::string text = "p0,p1,label\n";
    for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
      text += fmt_real(ev.predictions.probs(i, 0)) + "," + fmt_real(ev.predictions.probs(i, 1)) + "," +
              std::to_string(ev.predictions.labels[i]) + "\n";
    }
    write_text_file(a.predictions, text);
  }
  return kExitOk;
}

struct AblateArgs {
  std::string config, axis = "all", out;
  std::vector<std::string> sets;
};

int cmd_ablate(const AblateArgs& a) {
  const ExperimentConfig c = load_with_overrides(a.config, a.sets);
  std::vector<AblationAxis> axes;
  if (a.axis == "all") {
    axes.assign(kAblationAxes.begin(), kAblationAxes.end());
  } else {
    axes.push_back(parse_ablation_axis(a.axis));
  }
  // no_ot needs T == n; validate every expansion before any training starts.
  for (AblationAxis ax : axes)
    for (const auto& v : ablation_configs(c, ax)) v.validate();
  std::vector<RunReport> reps;
  for (AblationAxis ax : axes)
    for (auto& r : ablation_harness(c, ax)) reps.push_back(std::move(r));
  emit(a.out, reports_json_text(reps));
  if (!a.out.empty() && a.out != "-") std::cout << reports_csv(reps);
  return kExitOk;
}

struct GradArgs {
  std::string config;
  std::vector<std::string> sets;
  std::size_t max_entries = 8;
  double tolerance = 1e-3;
  double eps = 1e-5;
};

int cmd_gradcheck(const GradArgs& a) {
  ExperimentConfig c = load_with_overrides(a.config, a.sets);
  // A fixed Sinkhorn iteration count keeps the loss smooth in the references.
  c.model.otk_tol = 0;
  SyntheticTaskConfig task = c.task;
  task.train_size = std::max<std::size_t>(task.train_size, 2);
  const Dataset ds = generate_task(task);
  std::mt19937_64 init = detail::stream(c.train.seed, 0);
  Model m(c.model_config(), init);
  GradCheckOptions opt;
  opt.eps = a.eps;
  opt.tolerance = a.tolerance;
  opt.max_entries_per_param = a.max_entries;
  std::mt19937_64 unused(0);
  const Sample& s = ds.train.front();
  const auto reports = grad_check([&](Tape& t) { return sample_loss(m, t, s, false, unused); }, m.parameters(), opt);
  bool ok = true;
  std::cout << "parameter,entries,max_rel_error,status\n";
  for (const auto& r : reports) {
    ok = ok && r.pass;
    std::cout << r.parameter << "," << r.entries.size() << "," << fmt_real(r.max_rel_error) << ","
              << (r.pass ? "PASS" : "FAIL") << "\n";
  }
  return ok ? kExitOk : kExitNumerical;
}

struct OtArgs {
  std::string source, target, method = "emd", metric = "sqeuclidean", plan;
  double eps = 0.05;
  std::size_t max_iters = 10000;
  double tol = 1e-9;
};

int cmd_ot(const OtArgs& a) {
  const Matrix src = to_matrix(read_numeric_csv(a.source)), tgt = to_matrix(read_numeric_csv(a.target));
  const CostMatrix cost =
      cost_matrix(src, tgt, a.metric == "euclidean" ? CostMetric::Euclidean : CostMetric::SquaredEuclidean);
  const auto pa = uniform_marginal(src.rows()), pb = uniform_marginal(tgt.rows());
  Coupling cp;
  if (a.method == "emd") {
    cp = emd_exact(pa, pb, cost);
  } else {
    cp = sinkhorn(pa, pb, cost, SinkhornOptions{a.eps, a.max_iters, a.tol});
  }
  std::cout << "method,cost,marginal_violation,converged,iterations\n"
            << a.method << "," << fmt_real(cp.cost) << "," << fmt_real(cp.marginal_violation) << ","
            << (cp.converged ? "true" : "false") << "," << cp.iterations << "\n";
  if (!a.plan.empty()) write_text_file(a.plan, matrix_csv(cp.plan));
  if (!cp.converged) std::cerr << "warning: sinkhorn did not reach tol " << a.tol << "\n";
  return kExitOk;
}

struct CalibArgs {
  std::string input, format = "csv", out;
  std::size_t bins = 10, ranges = 10;
  double threshold = 0;
};

std::string bins_csv(const char* name, const ReliabilityBins& rb) {
  std::string out;
  for (const auto& b : rb.bins) {
    out += std::string(name) + "," + std::to_string(b.class_index) + "," + fmt_real(b.lower) + "," + fmt_real(b.upper) +
           "," + std::to_string(b.count) + "," + fmt_real(b.accuracy) + "," + fmt_real(b.confidence) + "\n";
  }
  return out;
}

nlohmann::json bins_json(const ReliabilityBins& rb) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : rb.bins) {
    arr.push_back({{"class", b.class_index},
                   {"lower", b.lower},
                   {"upper", b.upper},
                   {"count", b.count},
                   {"accuracy", b.accuracy},
                   {"confidence", b.confidence}});
  }
  return arr;
}

// Input rows: p_0, ..., p_{K-1}, label.
int cmd_calib(const CalibArgs& a) {
  const auto rows = read_numeric_csv(a.input);
  if (rows.front().size() < 3) throw InputError(a.input + ": need at least two probability columns and a label");
  const std::size_t k = rows.front().size() - 1;
  PredictionSet ps;
  ps.probs = Matrix(rows.size(), k);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) ps.probs(i, j) = rows[i][j];
    const double lab = rows[i][k];
    if (!(lab >= 0) || lab != std::floor(lab)) throw InputError(a.input + ": label must be a nonnegative integer");
    ps.labels.push_back(static_cast<std::size_t>(lab));
  }
  const CalibrationResult e = ece(ps, a.bins), c = ace(ps, std::min(a.ranges, ps.size()), a.threshold);
  std::cout << "ECE," << fmt_real(e.value) << "\nACE," << fmt_real(c.value) << "\n";
  if (!a.out.empty()) {
    if (a.format == "json") {
      const nlohmann::json j = {{"ece", e.value}, {"ace", c.value}, {"ece_bins", bins_json(e.bins)},
                                {"ace_ranges", bins_json(c.bins)}};
      write_text_file(a.out, j.dump(2) + "\n");
    } else {
      write_text_file(a.out, "metric,class,lower,upper,count,accuracy,confidence\n" + bins_csv("ece", e.bins) +
                                 bins_csv("ace", c.bins));
    }
  }
  return kExitOk;
}

struct AsoArgs {
  std::string a, b, column;
  AsoOptions opt;
};

std::vector<double> scores_from(const std::string& path, const std::string& column) {
  if (column.empty()) return read_scores(path);
  for (std::size_t k = 0; k < kScoreColumns.size(); ++k) {
    if (column == kScoreColumns[k]) {
      const auto reps = load_reports(path);
      if (reps.empty() || reps.front().runs.empty()) throw InputError(path + ": no runs");
      return reps.front().column(k);
    }
  }
  throw ParameterError("unknown score column '" + column + "'");
}

int cmd_aso(const AsoArgs& a) {
  const AsoResult r = aso(scores_from(a.a, a.column), scores_from(a.b, a.column), a.opt);
  std::cout << "eps_min," << fmt_real(r.eps_min) << "\nviolation_ratio," << fmt_real(r.violation_ratio)
            << "\nverdict," << aso_verdict(r.eps_min) << "\n";
  if (r.degenerate) std::cerr << "note: identical samples; eps_min fixed at 0.5\n";
  if (r.small_sample) std::cerr << "warning: fewer than five scores in a sample; the bound is unreliable\n";
  return kExitOk;
}

struct FeatureArgs {
  std::string input, out, format = "tensor";
  audio::FeatureParams p;
};

int cmd_features(const FeatureArgs& a) {
  const audio::Waveform w = audio::read_wav(a.input);
  const audio::SpectrogramImage img = audio::to_image(w, a.p);
  if (a.format == "tensor") {
    audio::write_tensor(a.out, img);
    return kExitOk;
  }
  std::string prefix = a.out;
  if (prefix.size() > 4 && prefix.compare(prefix.size() - 4, 4, ".csv") == 0) prefix.resize(prefix.size() - 4);
  const char* names[3] = {"log_mel", "delta", "delta2"};
  for (std::size_t c = 0; c < 3; ++c) write_text_file(prefix + "_" + names[c] + ".csv", matrix_csv(img.channels[c]));
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::vector<RunReport> all;
  for (const auto& path : a.inputs)
    for (auto& r : load_reports(path)) all.push_back(std::move(r));
  emit(a.out, reports_csv(all));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware multimodal fusion: training, ablations and analysis tools"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mmfuse 0.1.0");

  TrainArgs train_a;
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate `train.runs` seeded models");
  train_cmd->add_option("-c,--config", train_a.config, "key = value config file");
  train_cmd->add_option("--set", train_a.sets, "Override a config key (key=value), repeatable");
  train_cmd->add_option("-o,--out", train_a.out, "Report JSON path (default stdout)");
  train_cmd->add_option("--model", train_a.model, "Save the model of the lowest seed here");

  EvalArgs eval_a;
  auto* eval_cmd = app.add_subcommand("eval", "Score a saved model on a split of its task");
  eval_cmd->add_option("-m,--model", eval_a.model, "Model JSON written by train --model")->required();
  eval_cmd->add_option("--split", eval_a.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("-o,--out", eval_a.out, "Metrics CSV path (default stdout)");
  eval_cmd->add_option("--predictions", eval_a.predictions, "Write p0,p1,label rows here");

  AblateArgs ablate_a;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run one ablation axis or all of them");
  ablate_cmd->add_option("-c,--config", ablate_a.config, "key = value config file");
  ablate_cmd->add_option("--set", ablate_a.sets, "Override a config key (key=value), repeatable");
  ablate_cmd->add_option("--axis", ablate_a.axis,
                         "no_context, no_gate, no_ot, repeat_vector, no_fusion, layers or all");
  ablate_cmd->add_option("-o,--out", ablate_a.out, "Reports JSON path (default stdout)");

  GradArgs grad_a;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the assembled model");
  grad_cmd->add_option("-c,--config", grad_a.config, "key = value config file");
  grad_cmd->add_option("--set", grad_a.sets, "Override a config key (key=value), repeatable");
  grad_cmd->add_option("--max-entries", grad_a.max_entries, "Entries sampled per parameter, 0 for all");
  grad_cmd->add_option("--tolerance", grad_a.tolerance, "Largest accepted relative error");
  grad_cmd->add_option("--eps", grad_a.eps, "Central-difference step");

  OtArgs ot_a;
  auto* ot_cmd = app.add_subcommand("ot", "Transport between two point clouds with uniform weights");
  ot_cmd->add_option("--source", ot_a.source, "CSV, one point per row")->required();
  ot_cmd->add_option("--target", ot_a.target, "CSV, one point per row")->required();
  ot_cmd->add_option("--method", ot_a.method, "emd or sinkhorn")->check(CLI::IsMember({"emd", "sinkhorn"}));
  ot_cmd->add_option("--metric", ot_a.metric, "sqeuclidean or euclidean")
      ->check(CLI::IsMember({"sqeuclidean", "euclidean"}));
  ot_cmd->add_option("--eps", ot_a.eps, "Sinkhorn regularization");
  ot_cmd->add_option("--max-iters", ot_a.max_iters, "Sinkhorn iteration cap");
  ot_cmd->add_option("--tol", ot_a.tol, "Sinkhorn marginal tolerance");
  ot_cmd->add_option("--plan", ot_a.plan, "Write the coupling as CSV");

  CalibArgs calib_a;
  auto* calib_cmd = app.add_subcommand("calib", "ECE and ACE of a prediction file");
  calib_cmd->add_option("-i,--input", calib_a.input, "CSV rows p_0,...,p_{K-1},label")->required();
  calib_cmd->add_option("--bins", calib_a.bins, "ECE bins");
  calib_cmd->add_option("--ranges", calib_a.ranges, "ACE ranges per class");
  calib_cmd->add_option("--threshold", calib_a.threshold, "ACE confidence threshold");
  calib_cmd->add_option("--format", calib_a.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  calib_cmd->add_option("-o,--out", calib_a.out, "Write the reliability bins here");

  AsoArgs aso_a;
  auto* aso_cmd = app.add_subcommand("aso", "Almost stochastic order test of A over B");
  aso_cmd->add_option("-a", aso_a.a, "Scores of A (numbers, or a report JSON with --column)")->required();
  aso_cmd->add_option("-b", aso_a.b, "Scores of B")->required();
  aso_cmd->add_option("--column", aso_a.column, "Read per-run scores of this column from report files");
  aso_cmd->add_option("--confidence", aso_a.opt.confidence, "Confidence level");
  aso_cmd->add_option("--iters", aso_a.opt.bootstrap_iters, "Bootstrap iterations");
  aso_cmd->add_option("--comparisons", aso_a.opt.num_comparisons, "Comparisons for the Bonferroni correction");
  aso_cmd->add_option("--seed", aso_a.opt.seed, "Bootstrap seed");
  aso_cmd->add_option("--threads", aso_a.opt.threads, "Bootstrap worker threads");

  FeatureArgs feat_a;
  auto* feat_cmd = app.add_subcommand("features", "Three-channel spectrogram image of a WAV file");
  feat_cmd->add_option("-i,--input", feat_a.input, "PCM16 or float32 WAV")->required();
  feat_cmd->add_option("-o,--out", feat_a.out, "Tensor file, or CSV prefix with --format csv")->required();
  feat_cmd->add_option("--format", feat_a.format, "tensor or csv")->check(CLI::IsMember({"tensor", "csv"}));
  feat_cmd->add_option("--n-fft", feat_a.p.n_fft, "FFT size");
  feat_cmd->add_option("--hop", feat_a.p.hop, "Hop length");
  feat_cmd->add_option("--n-mels", feat_a.p.n_mels, "Mel bands");
  feat_cmd->add_option("--delta-width", feat_a.p.delta_width, "Delta regression width (odd)");
  feat_cmd->add_option("--image-size", feat_a.p.image_size, "Output side length");

  ReportArgs report_a;
  auto* report_cmd = app.add_subcommand("report", "Render report JSON files as a CSV table");
  report_cmd->add_option("inputs", report_a.inputs, "Report JSON files")->required();
  report_cmd->add_option("-o,--out", report_a.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_a);
    if (*eval_cmd) return cmd_eval(eval_a);
    if (*ablate_cmd) return cmd_ablate(ablate_a);
    if (*grad_cmd) return cmd_gradcheck(grad_a);
    if (*ot_cmd) return cmd_ot(ot_a);
    if (*calib_cmd) return cmd_calib(calib_a);
    if (*aso_cmd) return cmd_aso(aso_a);
    if (*feat_cmd) return cmd_features(feat_a);
    if (*report_cmd) return cmd_report(report_a);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const InputError& e) {
    std::cerr << "bad input: " << e.what() << "\n";
    return kExitIo;
  } catch (const DimensionError& e) {
    std::cerr << "bad input: " << e.what() << "\n";
    return kExitIo;
  } catch (const ContractError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}

#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/experiment.hpp"

namespace mmfuse {

using nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(std::vector<Real>(m.row(i).begin(), m.row(i).end()));
  return rows;
}

inline Matrix matrix_from_json(const json& j, std::size_t rows, std::size_t cols, const std::string& what) {
  if (!j.is_array() || j.size() != rows) throw InputError("model file: " + what + " has the wrong row count");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) throw InputError("model file: " + what + " has the wrong column count");
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = j[i][c].get<Real>();
  }
  return m;
}

// ---------------------------------------------------------------------------

inline json report_to_json(const RunReport& r) {
  json cfg = json::array();
  for (const auto& [k, v] : r.config) cfg.push_back({k, v});
  json runs = json::array();
  for (const auto& run : r.runs) {
    json scores = json::object();
    for (std::size_t k = 0; k < kScoreColumns.size(); ++k) scores[kScoreColumns[k]] = run.scores[k];
    runs.push_back({{"seed", run.seed},
                    {"scores", scores},
                    {"epochs_run", run.epochs_run},
                    {"best_epoch", run.best_epoch},
                    {"best_val_loss", run.best_val_loss},
                    {"undefined", run.undefined}});
  }
  json mean = json::object(), sd = json::object();
  for (std::size_t k = 0; k < kScoreColumns.size(); ++k) {
    mean[kScoreColumns[k]] = r.mean[k];
    sd[kScoreColumns[k]] = r.stddev[k];
  }
  return {{"label", r.label}, {"fingerprint", r.fingerprint}, {"config", cfg}, {"seeds", r.seeds},
          {"runs", runs},     {"mean", mean},                 {"std", sd},     {"warnings", r.warnings}};
}

inline RunReport report_from_json(const json& j) {
  try {
    RunReport r;
    r.label = j.at("label").get<std::string>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    for (const auto& kv : j.at("config")) r.config.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& run : j.at("runs")) {
      RunRecord rec;
      rec.seed = run.at("seed").get<std::uint64_t>();
      for (std::size_t k = 0; k < kScoreColumns.size(); ++k) rec.scores[k] = run.at("scores").at(kScoreColumns[k]).get<Real>();
      rec.epochs_run = run.at("epochs_run").get<std::size_t>();
      rec.best_epoch = run.at("best_epoch").get<std::size_t>();
      rec.best_val_loss = run.at("best_val_loss").get<Real>();
      rec.undefined = run.at("undefined").get<std::vector<std::string>>();
      r.runs.push_back(std::move(rec));
    }
    for (std::size_t k = 0; k < kScoreColumns.size(); ++k) {
      r.mean[k] = j.at("mean").at(kScoreColumns[k]).get<Real>();
      r.stddev[k] = j.at("std").at(kScoreColumns[k]).get<Real>();
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
}

/// A report file holds a JSON array of reports.
inline std::string reports_json_text(const std::vector<RunReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(report_to_json(r));
  return arr.dump(2) + "\n";
}

inline std::vector<RunReport> load_reports(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw InputError("cannot parse " + path + ": " + e.what());
  }
  std::vector<RunReport> out;
  if (j.is_array()) {
    for (const auto& r : j) out.push_back(report_from_json(r));
  } else {
    out.push_back(report_from_json(j));
  }
  return out;
}

/// One row per report, "mean ± std" cells in the order of kScoreColumns.
inline std::string reports_csv(const std::vector<RunReport>& reports) {
  std::string out = "config";
  for (const char* c : kScoreColumns) out += std::string(",") + c;
  out += "\n";
  for (const auto& r : reports) {
    std::string label = r.label;
    if (label.find_first_of(",\"") != std::string::npos) {
      std::string quoted = "\"";
      for (char ch : label) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      label = quoted + "\"";
    }
    out += label;
    for (std::size_t k = 0; k < kScoreColumns.size(); ++k) {
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%.4f \xC2\xB1 %.4f", static_cast<double>(r.mean[k]), static_cast<double>(r.stddev[k]));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

inline json model_to_json(const ExperimentConfig& cfg, Model& model) {
  json params = json::object();
  for (Parameter* p : model.parameters()) params[p->name] = matrix_to_json(p->value);
  json kv = json::array();
  for (const auto& [k, v] : to_key_values(cfg)) kv.push_back({k, v});
  return {{"config", kv},
          {"encoder_text", matrix_to_json(model.enc_text)},
          {"encoder_image", matrix_to_json(model.enc_image)},
          {"parameters", params}};
}

struct LoadedModel {
  ExperimentConfig config;
  Model model;
};

inline LoadedModel model_from_json(const json& j) {
  try {
    LoadedModel out;
    for (const auto& kv : j.at("config")) {
      const auto key = kv.at(0).get<std::string>();
      if (key != "model.layers") apply_key(out.config, key, kv.at(1).get<std::string>());
    }
    for (const auto& kv : j.at("config"))
      if (kv.at(0).get<std::string>() == "model.layers") apply_key(out.config, "model.layers", kv.at(1).get<std::string>());
    const ModelConfig mc = out.config.model_config();
    std::mt19937_64 rng(0);
    out.model = Model(mc, rng);
    out.model.enc_text = matrix_from_json(j.at("encoder_text"), mc.dim, mc.dim, "encoder_text");
    out.model.enc_image = matrix_from_json(j.at("encoder_image"), mc.dim, mc.dim, "encoder_image");
    const json& params = j.at("parameters");
    std::vector<Parameter*> ps = out.model.parameters();
    if (params.size() != ps.size()) throw InputError("model file: parameter count mismatch");
    for (Parameter* p : ps) {
      if (!params.contains(p->name)) throw InputError("model file: missing parameter " + p->name);
      p->value = matrix_from_json(params.at(p->name), p->value.rows(), p->value.cols(), p->name);
    }
    return out;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed model file: ") + e.what());
  }
}

inline void save_model(const std::string& path, const ExperimentConfig& cfg, Model& model) {
  write_text_file(path, model_to_json(cfg, model).dump() + "\n");
}

inline LoadedModel load_model(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw InputError("cannot parse " + path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace mmfuse

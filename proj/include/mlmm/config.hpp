#pragma once

// Study configuration: a flat key-value file ("key = value ..." with '#'
// comments). Unknown keys are rejected; serialization round-trips losslessly.

#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmm/stats.hpp"
#include "mlmm/study.hpp"

namespace mlmm {

struct StudyConfig {
  GridSpec grid;
  int reps = 100;
  std::uint64_t seed = 1;
  std::vector<Estimator> estimators = {Estimator::unadjusted, Estimator::adjusted,
                                       Estimator::interacted};
  std::string out_dir = "results";
  std::vector<std::string> metrics = {"power", "false_positive", "bias",
                                      "sq_error", "se_est", "coverage"};
  std::vector<int> presets = {1, 2, 3, 4};
  std::string weights = "none";
  std::string bootstrap_level = "condition";
  int bootstrap_B = 200;
};

namespace configdetail {

inline std::vector<std::string> tokens(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline std::vector<double> to_doubles(const std::string& key, const std::vector<std::string>& toks) {
  std::vector<double> out;
  for (const auto& t : toks) {
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      out.push_back(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: key '" + key + "' has non-numeric value '" + t + "'");
    }
  }
  return out;
}

}  // namespace configdetail

inline StudyConfig parse_study_config(const std::string& text) {
  StudyConfig cfg;
  cfg.estimators.clear();
  cfg.metrics.clear();
  cfg.presets.clear();
  bool saw_estimators = false, saw_metrics = false, saw_presets = false;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto toks_all = configdetail::tokens(line);
    if (toks_all.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto keytoks = configdetail::tokens(line.substr(0, eq));
    if (keytoks.size() != 1) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": malformed key");
    }
    const std::string key = keytoks[0];
    const auto vals = configdetail::tokens(line.substr(eq + 1));
    if (vals.empty()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": key '" + key +
                                  "' has no value");
    }
    auto one = [&]() -> const std::string& {
      if (vals.size() != 1) {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": key '" + key +
                                    "' takes a single value");
      }
      return vals[0];
    };

    if (key == "n") cfg.grid.n = configdetail::to_doubles(key, vals);
    else if (key == "b1") cfg.grid.b1 = configdetail::to_doubles(key, vals);
    else if (key == "prop_treated") cfg.grid.prop_treated = configdetail::to_doubles(key, vals);
    else if (key == "b2") cfg.grid.b2 = configdetail::to_doubles(key, vals);
    else if (key == "b3") cfg.grid.b3 = configdetail::to_doubles(key, vals);
    else if (key == "reps") cfg.reps = static_cast<int>(configdetail::to_doubles(key, {one()})[0]);
    else if (key == "seed") cfg.seed = std::stoull(one());
    else if (key == "estimators") {
      for (const auto& v : vals) cfg.estimators.push_back(estimator_from_string(v));
      saw_estimators = true;
    } else if (key == "out") cfg.out_dir = one();
    else if (key == "metrics") {
      cfg.metrics = vals;
      saw_metrics = true;
    } else if (key == "presets") {
      for (double v : configdetail::to_doubles(key, vals)) cfg.presets.push_back(static_cast<int>(v));
      saw_presets = true;
    } else if (key == "weights") cfg.weights = one();
    else if (key == "bootstrap_level") cfg.bootstrap_level = one();
    else if (key == "bootstrap_B") cfg.bootstrap_B = static_cast<int>(configdetail::to_doubles(key, {one()})[0]);
    else {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key +
                                  "'");
    }
  }

  if (!saw_estimators) {
    cfg.estimators = {Estimator::unadjusted, Estimator::adjusted, Estimator::interacted};
  }
  if (!saw_metrics) {
    cfg.metrics = {"power", "false_positive", "bias", "sq_error", "se_est", "coverage"};
  }
  if (!saw_presets) cfg.presets = {1, 2, 3, 4};
  if (cfg.reps < 1) throw std::invalid_argument("config: reps must be >= 1");
  return cfg;
}

inline std::string serialize_study_config(const StudyConfig& cfg) {
  std::ostringstream out;
  auto list = [&](const char* key, const std::vector<double>& vals) {
    out << key << " =";
    for (double v : vals) out << " " << format_g12(v);
    out << "\n";
  };
  list("n", cfg.grid.n);
  list("b1", cfg.grid.b1);
  list("prop_treated", cfg.grid.prop_treated);
  list("b2", cfg.grid.b2);
  list("b3", cfg.grid.b3);
  out << "reps = " << cfg.reps << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "estimators =";
  for (Estimator e : cfg.estimators) out << " " << to_string(e);
  out << "\n";
  out << "out = " << cfg.out_dir << "\n";
  out << "metrics =";
  for (const auto& m : cfg.metrics) out << " " << m;
  out << "\n";
  out << "presets =";
  for (int p : cfg.presets) out << " " << p;
  out << "\n";
  out << "weights = " << cfg.weights << "\n";
  out << "bootstrap_level = " << cfg.bootstrap_level << "\n";
  out << "bootstrap_B = " << cfg.bootstrap_B << "\n";
  return out.str();
}

inline std::string config_hash(const StudyConfig& cfg) {
  return to_hex(fnv1a64(serialize_study_config(cfg)));
}

}  // namespace mlmm

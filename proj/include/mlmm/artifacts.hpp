#pragma once

// Artifact serialization: the CSV schemas, fit documents (JSON), the run
// manifest, and the report outputs. Column sets and order are fixed.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlmm/bootstrap.hpp"
#include "mlmm/config.hpp"
#include "mlmm/csv.hpp"
#include "mlmm/metamodel.hpp"
#include "mlmm/study.hpp"

namespace mlmm {

// ---------------------------------------------------------------------------
// estimates.csv

inline const std::vector<std::string>& estimates_columns() {
  static const std::vector<std::string> cols = {
      "condition_id", "dataset_id", "estimator", "n",        "b1",     "prop_treated", "b2",
      "b3",           "ate_hat",    "se_hat",    "p_value",  "ci_lo",  "ci_hi",        "error",
      "sq_error",     "reject",     "covered",   "flag"};
  return cols;
}

inline std::string estimates_to_csv(const EstimateTable& table) {
  std::string out = join_csv(estimates_columns());
  for (const auto& r : table.records) {
    const SimCondition& c = table.condition(r.condition_id);
    out += join_csv({std::to_string(r.condition_id), std::to_string(r.dataset_id),
                     to_string(r.estimator), std::to_string(c.n), format_g12(c.b1),
                     format_g12(c.prop_treated), format_g12(c.b2), format_g12(c.b3),
                     format_g12(r.ate_hat), format_g12(r.se_hat), format_g12(r.p_value),
                     format_g12(r.ci_lo), format_g12(r.ci_hi), format_g12(r.error),
                     format_g12(r.sq_error), std::to_string(r.reject), std::to_string(r.covered),
                     std::to_string(r.flag)});
  }
  return out;
}

inline EstimateTable estimates_from_csv(const CsvTable& csv, int reps_hint = 0) {
  EstimateTable table;
  const int c_cond = csv.col("condition_id"), c_ds = csv.col("dataset_id"),
            c_est = csv.col("estimator"), c_n = csv.col("n"), c_b1 = csv.col("b1"),
            c_prop = csv.col("prop_treated"), c_b2 = csv.col("b2"), c_b3 = csv.col("b3"),
            c_ate = csv.col("ate_hat"), c_se = csv.col("se_hat"), c_p = csv.col("p_value"),
            c_lo = csv.col("ci_lo"), c_hi = csv.col("ci_hi"), c_err = csv.col("error"),
            c_sq = csv.col("sq_error"), c_rej = csv.col("reject"), c_cov = csv.col("covered"),
            c_flag = csv.col("flag");

  std::map<int, SimCondition> conds;
  std::map<int, int> reps_per_cond;
  std::vector<Estimator> est_seen;
  for (std::size_t i = 0; i < csv.rows.size(); ++i) {
    EstimateRecord r;
    r.condition_id = static_cast<int>(csv.num(i, c_cond));
    r.dataset_id = static_cast<int>(csv.num(i, c_ds));
    r.estimator = estimator_from_string(csv.rows[i][static_cast<std::size_t>(c_est)]);
    r.ate_hat = csv.num(i, c_ate);
    r.se_hat = csv.num(i, c_se);
    r.p_value = csv.num(i, c_p);
    r.ci_lo = csv.num(i, c_lo);
    r.ci_hi = csv.num(i, c_hi);
    r.error = csv.num(i, c_err);
    r.sq_error = csv.num(i, c_sq);
    r.reject = static_cast<int>(csv.num(i, c_rej));
    r.covered = static_cast<int>(csv.num(i, c_cov));
    r.flag = static_cast<int>(csv.num(i, c_flag));
    table.records.push_back(r);

    if (conds.find(r.condition_id) == conds.end()) {
      SimCondition c;
      c.condition_id = r.condition_id;
      c.n = static_cast<int>(csv.num(i, c_n));
      c.b1 = csv.num(i, c_b1);
      c.prop_treated = csv.num(i, c_prop);
      c.b2 = csv.num(i, c_b2);
      c.b3 = csv.num(i, c_b3);
      conds[r.condition_id] = c;
    }
    if (std::find(est_seen.begin(), est_seen.end(), r.estimator) == est_seen.end()) {
      est_seen.push_back(r.estimator);
    }
  }
  if (conds.empty()) throw std::runtime_error("estimates table is empty");
  int expect = 0;
  for (const auto& [id, c] : conds) {
    if (id != expect++) throw std::runtime_error("estimates table: condition ids are not dense");
    table.conditions.push_back(c);
  }
  std::map<int, std::set<int>> ds_of_cond;
  for (const auto& r : table.records) ds_of_cond[r.condition_id].insert(r.dataset_id);
  std::size_t max_reps = 0;
  for (const auto& [k, s] : ds_of_cond) max_reps = std::max(max_reps, s.size());
  table.reps = reps_hint > 0 ? reps_hint : static_cast<int>(max_reps);
  table.estimators = est_seen;
  return table;
}

// ---------------------------------------------------------------------------
// aggregates.csv

inline const std::vector<std::string>& aggregates_columns() {
  static const std::vector<std::string> cols = {
      "condition_id", "estimator", "n",          "b1",          "prop_treated",
      "b2",           "b3",        "reps",       "bias",        "sq_error",
      "se_est",       "reject_pct", "coverage_pct", "true_se",  "se_calibration",
      "mc_bias",      "mc_sq_error", "mc_se_est", "mc_reject",  "mc_coverage"};
  return cols;
}

inline std::string aggregates_to_csv(const AggregateTable& agg) {
  std::string out = join_csv(aggregates_columns());
  for (const auto& r : agg.rows) {
    const SimCondition& c = agg.condition(r.condition_id);
    out += join_csv({std::to_string(r.condition_id), to_string(r.estimator), std::to_string(c.n),
                     format_g12(c.b1), format_g12(c.prop_treated), format_g12(c.b2),
                     format_g12(c.b3), std::to_string(r.reps), format_g12(r.bias),
                     format_g12(r.sq_error), format_g12(r.se_est), format_g12(r.reject_pct),
                     format_g12(r.coverage_pct), format_g12(r.true_se),
                     format_g12(r.se_calibration), format_g12(r.mc_bias), format_g12(r.mc_sq_error),
                     format_g12(r.mc_se_est), format_g12(r.mc_reject), format_g12(r.mc_coverage)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// fit documents

inline nlohmann::json fit_document_to_json(const FitDocument& doc) {
  nlohmann::json j;
  j["kind"] = doc.kind;
  j["metric"] = doc.metric;
  j["preset"] = doc.preset;
  j["level"] = doc.level;
  j["weights"] = doc.weights;
  j["family"] = doc.family;
  j["subset"] = doc.subset;
  j["n_obs"] = doc.n_obs;
  j["groups"] = doc.groups;
  if (doc.n_clusters > 0) j["n_clusters"] = doc.n_clusters;

  nlohmann::json coefs = nlohmann::json::array();
  for (const auto& c : doc.coefficients) {
    nlohmann::json row;
    row["term"] = c.term;
    row["estimate"] = c.estimate;
    row["se"] = c.se;
    row["z"] = c.z;
    row["p"] = c.p;
    if (std::isfinite(c.classical_se)) row["classical_se"] = c.classical_se;
    coefs.push_back(row);
  }
  j["coefficients"] = coefs;

  nlohmann::json vcov = nlohmann::json::array();
  for (Eigen::Index r = 0; r < doc.vcov.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < doc.vcov.cols(); ++c) row.push_back(doc.vcov(r, c));
    vcov.push_back(row);
  }
  j["vcov"] = vcov;

  nlohmann::json vcs = nlohmann::json::array();
  for (const auto& v : doc.varcomps) {
    nlohmann::json vj;
    vj["factor"] = v.factor;
    vj["terms"] = v.terms;
    nlohmann::json cov = nlohmann::json::array();
    nlohmann::json corr = nlohmann::json::array();
    for (Eigen::Index r = 0; r < v.cov.rows(); ++r) {
      nlohmann::json covr = nlohmann::json::array();
      nlohmann::json corrr = nlohmann::json::array();
      for (Eigen::Index c = 0; c < v.cov.cols(); ++c) {
        covr.push_back(v.cov(r, c));
        corrr.push_back(v.corr(r, c));
      }
      cov.push_back(covr);
      corr.push_back(corrr);
    }
    vj["cov"] = cov;
    vj["corr"] = corr;
    vj["psi2"] = v.psi2;
    vj["boundary"] = v.boundary;
    vcs.push_back(vj);
  }
  j["varcomps"] = vcs;

  if (std::isfinite(doc.sigma2)) j["sigma2"] = doc.sigma2;
  if (std::isfinite(doc.deviance)) j["reml_deviance"] = doc.deviance;
  j["convergence"] = {{"converged", doc.converged}, {"boundary", doc.boundary}, {"evals", doc.evals}};
  if (std::isfinite(doc.r2)) {
    j["r2"] = doc.r2;
    j["adj_r2"] = doc.adj_r2;
    j["rmse"] = doc.rmse;
  }

  nlohmann::json eb = nlohmann::json::array();
  for (const auto& r : doc.eb) {
    eb.push_back({{"condition_id", std::stoi(r.group_label)},
                  {"effect", r.effect},
                  {"deviation", r.deviation},
                  {"composed", r.composed},
                  {"cond_sd", r.cond_sd},
                  {"reliability", r.reliability}});
  }
  j["eb"] = eb;
  j["avg_reliability"] = doc.avg_reliability;

  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : doc.conditions) {
    nlohmann::json cj = c.levels;
    cj["condition_id"] = c.condition_id;
    conds.push_back(cj);
  }
  j["conditions"] = conds;

  std::vector<double> theta(doc.theta.data(), doc.theta.data() + doc.theta.size());
  j["theta"] = theta;
  return j;
}

inline FitDocument fit_document_from_json(const nlohmann::json& j) {
  FitDocument doc;
  doc.kind = j.at("kind");
  doc.metric = j.at("metric");
  doc.preset = j.at("preset");
  doc.level = j.at("level");
  doc.weights = j.at("weights");
  doc.family = j.at("family");
  doc.subset = j.at("subset");
  doc.n_obs = j.at("n_obs");
  if (j.contains("groups")) {
    for (auto it = j["groups"].begin(); it != j["groups"].end(); ++it) {
      doc.groups[it.key()] = it.value();
    }
  }
  doc.n_clusters = j.value("n_clusters", 0);
  for (const auto& row : j.at("coefficients")) {
    CoefRow c;
    c.term = row.at("term");
    c.estimate = row.at("estimate");
    c.se = row.at("se");
    c.z = row.at("z");
    c.p = row.at("p");
    c.classical_se = row.value("classical_se", std::numeric_limits<double>::quiet_NaN());
    doc.coefficients.push_back(c);
  }
  const auto& vcov = j.at("vcov");
  const auto p = static_cast<Eigen::Index>(vcov.size());
  doc.vcov.resize(p, p);
  for (Eigen::Index r = 0; r < p; ++r) {
    for (Eigen::Index c = 0; c < p; ++c) doc.vcov(r, c) = vcov[r][c];
  }
  for (const auto& vj : j.at("varcomps")) {
    VarComp v;
    v.factor = vj.at("factor");
    v.terms = vj.at("terms").get<std::vector<std::string>>();
    const auto t = static_cast<Eigen::Index>(v.terms.size());
    v.cov.resize(t, t);
    v.corr.resize(t, t);
    for (Eigen::Index r = 0; r < t; ++r) {
      for (Eigen::Index c = 0; c < t; ++c) {
        v.cov(r, c) = vj.at("cov")[r][c];
        v.corr(r, c) = vj.at("corr")[r][c];
      }
    }
    v.psi2 = vj.at("psi2").get<std::vector<double>>();
    v.boundary = vj.at("boundary").get<std::vector<bool>>();
    doc.varcomps.push_back(v);
  }
  doc.sigma2 = j.value("sigma2", std::numeric_limits<double>::quiet_NaN());
  doc.deviance = j.value("reml_deviance", std::numeric_limits<double>::quiet_NaN());
  doc.converged = j.at("convergence").at("converged");
  doc.boundary = j.at("convergence").at("boundary");
  doc.evals = j.at("convergence").at("evals");
  doc.r2 = j.value("r2", std::numeric_limits<double>::quiet_NaN());
  doc.adj_r2 = j.value("adj_r2", std::numeric_limits<double>::quiet_NaN());
  doc.rmse = j.value("rmse", std::numeric_limits<double>::quiet_NaN());
  for (const auto& r : j.at("eb")) {
    EbRecord rec;
    rec.factor = "condition";
    rec.group_label = std::to_string(static_cast<int>(r.at("condition_id")));
    rec.effect = r.at("effect");
    rec.deviation = r.at("deviation");
    rec.composed = r.at("composed");
    rec.cond_sd = r.at("cond_sd");
    rec.reliability = r.at("reliability");
    doc.eb.push_back(rec);
  }
  if (j.contains("avg_reliability")) {
    for (auto it = j["avg_reliability"].begin(); it != j["avg_reliability"].end(); ++it) {
      doc.avg_reliability[it.key()] = it.value();
    }
  }
  for (const auto& cj : j.at("conditions")) {
    ConditionLevels cl;
    cl.condition_id = cj.at("condition_id");
    for (auto it = cj.begin(); it != cj.end(); ++it) {
      if (it.key() != "condition_id") cl.levels[it.key()] = it.value();
    }
    doc.conditions.push_back(cl);
  }
  if (j.contains("theta")) {
    const auto th = j["theta"].get<std::vector<double>>();
    doc.theta = Eigen::Map<const Eigen::VectorXd>(th.data(), static_cast<Eigen::Index>(th.size()));
  }
  return doc;
}

// ---------------------------------------------------------------------------
// eb.csv / conjoint.csv / bootstrap.csv

inline std::string eb_to_csv(const FitDocument& doc) {
  std::string out = join_csv({"condition_id", "effect", "deviation", "composed", "cond_sd",
                              "reliability"});
  for (const auto& r : doc.eb) {
    out += join_csv({r.group_label, r.effect, format_g12(r.deviation), format_g12(r.composed),
                     format_g12(r.cond_sd), format_g12(r.reliability)});
  }
  return out;
}

inline std::string conjoint_to_csv(const std::vector<std::pair<std::string, ConjointRow>>& rows) {
  std::string out =
      join_csv({"metric", "estimator", "factor", "level", "effect", "ci_lo", "ci_hi", "eb_lo",
                "eb_hi"});
  for (const auto& [metric, r] : rows) {
    out += join_csv({metric, r.estimator, r.factor, r.level, format_g12(r.effect),
                     format_g12(r.ci_lo), format_g12(r.ci_hi), format_g12(r.eb_lo),
                     format_g12(r.eb_hi)});
  }
  return out;
}

inline std::string bootstrap_to_csv(const std::vector<BootstrapReport>& reports) {
  std::string out = join_csv(
      {"level", "B", "model", "term", "boot_sd", "model_se", "ratio", "flagged", "failed"});
  for (const auto& rep : reports) {
    for (std::size_t j = 0; j < rep.terms.size(); ++j) {
      const double ratio = rep.boot_sd[j] / rep.model_se[j];
      const bool flagged = !(ratio >= 0.8 && ratio <= 1.25);
      out += join_csv({to_string(rep.level), std::to_string(rep.B), rep.model_kind, rep.terms[j],
                       format_g12(rep.boot_sd[j]), format_g12(rep.model_se[j]), format_g12(ratio),
                       flagged ? "1" : "0", std::to_string(rep.n_failed)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// manifest.json

struct Manifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  int reps = 0;
  std::string version = "0.1.0";
  std::map<std::string, std::string> file_hashes;
  std::map<std::string, long> counts;
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json j;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["reps"] = m.reps;
  j["version"] = m.version;
  j["files"] = m.file_hashes;
  j["counts"] = m.counts;
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.config_hash = j.value("config_hash", "");
  m.seed = j.value("seed", 0ull);
  m.reps = j.value("reps", 0);
  m.version = j.value("version", "");
  if (j.contains("files")) {
    for (auto it = j["files"].begin(); it != j["files"].end(); ++it) {
      m.file_hashes[it.key()] = it.value();
    }
  }
  if (j.contains("counts")) {
    for (auto it = j["counts"].begin(); it != j["counts"].end(); ++it) {
      m.counts[it.key()] = it.value();
    }
  }
  return m;
}

}  // namespace mlmm

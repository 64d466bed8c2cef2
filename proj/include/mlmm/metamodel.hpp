#pragma once

// Metamodels over the estimate table: metric definitions, aggregation to
// (condition, estimator) cells, the four analysis presets, prediction
// intervals, EB inner ranges, and conjoint tables.
//
// Presets:
//   1  individual data, main effects,            3-level random slopes
//   2  individual data, + estimator two-ways,    3-level random slopes
//   3  aggregated data, + estimator two-ways,    OLS, cluster-robust by condition
//   4  aggregated data, + estimator two-ways,    2-level random intercepts

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmm/design.hpp"
#include "mlmm/glmm.hpp"
#include "mlmm/lmm.hpp"
#include "mlmm/regression.hpp"
#include "mlmm/study.hpp"

namespace mlmm {

// ---------------------------------------------------------------------------
// Metrics

enum class Metric { power, false_positive, bias, sq_error, se_est, coverage, true_se, se_calibration };

struct MetricInfo {
  Metric metric;
  const char* name;
  bool binary;           // scaled x100 at analysis time
  bool aggregated_only;  // not expressible as a per-estimate average
  const char* default_subset;
};

inline const MetricInfo& metric_info(Metric m) {
  static const MetricInfo table[] = {
      {Metric::power, "power", true, false, "b1>0"},
      {Metric::false_positive, "false_positive", true, false, "b1=0"},
      {Metric::bias, "bias", false, false, ""},
      {Metric::sq_error, "sq_error", false, false, ""},
      {Metric::se_est, "se_est", false, false, ""},
      {Metric::coverage, "coverage", true, false, ""},
      {Metric::true_se, "true_se", false, true, ""},
      {Metric::se_calibration, "se_calibration", false, true, ""},
  };
  for (const auto& info : table) {
    if (info.metric == m) return info;
  }
  throw std::logic_error("metric_info: unknown metric");
}

inline Metric metric_from_string(const std::string& s) {
  for (Metric m : {Metric::power, Metric::false_positive, Metric::bias, Metric::sq_error,
                   Metric::se_est, Metric::coverage, Metric::true_se, Metric::se_calibration}) {
    if (s == metric_info(m).name) return m;
  }
  throw std::invalid_argument("unknown metric '" + s + "'");
}

// ---------------------------------------------------------------------------
// Condition subsets ("b1>0", "b1=0", "none")

struct SubsetRule {
  std::string factor;
  enum class Op { none, eq, ne, gt, lt, ge, le } op = Op::none;
  double value = 0.0;

  bool matches(const SimCondition& c) const {
    if (op == Op::none) return true;
    double v = 0.0;
    if (factor == "n") v = c.n;
    else if (factor == "b1") v = c.b1;
    else if (factor == "prop_treated") v = c.prop_treated;
    else if (factor == "b2") v = c.b2;
    else if (factor == "b3") v = c.b3;
    else throw std::invalid_argument("subset: unknown factor '" + factor + "'");
    switch (op) {
      case Op::eq: return v == value;
      case Op::ne: return v != value;
      case Op::gt: return v > value;
      case Op::lt: return v < value;
      case Op::ge: return v >= value;
      case Op::le: return v <= value;
      case Op::none: return true;
    }
    return true;
  }

  std::string str() const {
    if (op == Op::none) return "none";
    const char* ops[] = {"", "=", "!=", ">", "<", ">=", "<="};
    return factor + ops[static_cast<int>(op)] + format_g12(value);
  }
};

inline SubsetRule parse_subset(const std::string& s) {
  SubsetRule r;
  if (s.empty() || s == "none") return r;
  const char* two_ops[] = {">=", "<=", "!=", "=="};
  const SubsetRule::Op two_vals[] = {SubsetRule::Op::ge, SubsetRule::Op::le, SubsetRule::Op::ne,
                                     SubsetRule::Op::eq};
  for (int i = 0; i < 4; ++i) {
    const auto pos = s.find(two_ops[i]);
    if (pos != std::string::npos) {
      r.factor = s.substr(0, pos);
      r.op = two_vals[i];
      r.value = std::stod(s.substr(pos + 2));
      return r;
    }
  }
  const char one_ops[] = {'>', '<', '='};
  const SubsetRule::Op one_vals[] = {SubsetRule::Op::gt, SubsetRule::Op::lt, SubsetRule::Op::eq};
  for (int i = 0; i < 3; ++i) {
    const auto pos = s.find(one_ops[i]);
    if (pos != std::string::npos) {
      r.factor = s.substr(0, pos);
      r.op = one_vals[i];
      r.value = std::stod(s.substr(pos + 1));
      return r;
    }
  }
  throw std::invalid_argument("cannot parse subset expression '" + s + "'");
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  int condition_id = -1;
  Estimator estimator = Estimator::unadjusted;
  int reps = 0;  // valid (unflagged) records in the cell
  double bias = 0.0;
  double sq_error = 0.0;
  double se_est = 0.0;
  double reject_pct = 0.0;    // power when b1 > 0, false-positive rate when b1 = 0
  double coverage_pct = 0.0;
  double true_se = 0.0;       // SD of ate_hat over replications
  double se_calibration = 0.0;  // mean(se_hat) / true_se
  double mc_bias = 0.0;
  double mc_sq_error = 0.0;
  double mc_se_est = 0.0;
  double mc_reject = 0.0;
  double mc_coverage = 0.0;
};

struct AggregateTable {
  std::vector<SimCondition> conditions;
  std::vector<Estimator> estimators;
  int reps = 0;
  std::vector<AggregateRow> rows;

  const SimCondition& condition(int id) const { return conditions[static_cast<std::size_t>(id)]; }
};

// One row per (condition, estimator); binary metrics scaled x100 here, with
// Monte Carlo SE sqrt(p(1-p)/R) x100 for proportions and sd/sqrt(R) for
// means. Throws if any cell has no valid records.
inline AggregateTable aggregate_results(const EstimateTable& table) {
  AggregateTable agg;
  agg.conditions = table.conditions;
  agg.estimators = table.estimators;
  agg.reps = table.reps;
  const std::size_t n_est = table.estimators.size();
  const std::size_t n_cells = table.conditions.size() * n_est;

  struct Cell {
    std::vector<double> ate, se, err, sq, rej, cov;
  };
  std::vector<Cell> cells(n_cells);
  auto est_index = [&](Estimator e) {
    for (std::size_t i = 0; i < n_est; ++i) {
      if (table.estimators[i] == e) return i;
    }
    throw std::logic_error("aggregate_results: estimator not in table");
  };
  for (const auto& rec : table.records) {
    if (rec.flag != 0) continue;
    Cell& c = cells[static_cast<std::size_t>(rec.condition_id) * n_est + est_index(rec.estimator)];
    c.ate.push_back(rec.ate_hat);
    c.se.push_back(rec.se_hat);
    c.err.push_back(rec.error);
    c.sq.push_back(rec.sq_error);
    c.rej.push_back(rec.reject);
    c.cov.push_back(rec.covered);
  }

  std::string missing;
  for (std::size_t k = 0; k < table.conditions.size(); ++k) {
    for (std::size_t e = 0; e < n_est; ++e) {
      const Cell& c = cells[k * n_est + e];
      if (c.ate.empty()) {
        missing += " (" + std::to_string(table.conditions[k].condition_id) + "," +
                   to_string(table.estimators[e]) + ")";
        continue;
      }
      AggregateRow row;
      row.condition_id = table.conditions[k].condition_id;
      row.estimator = table.estimators[e];
      row.reps = static_cast<int>(c.ate.size());
      const double r = static_cast<double>(row.reps);
      row.bias = mean_of(c.err);
      row.sq_error = mean_of(c.sq);
      row.se_est = mean_of(c.se);
      const double p_rej = mean_of(c.rej);
      const double p_cov = mean_of(c.cov);
      row.reject_pct = 100.0 * p_rej;
      row.coverage_pct = 100.0 * p_cov;
      row.true_se = sd_of(c.ate);
      row.se_calibration =
          row.true_se > 0.0 ? row.se_est / row.true_se : std::numeric_limits<double>::quiet_NaN();
      row.mc_bias = sd_of(c.err) / std::sqrt(r);
      row.mc_sq_error = sd_of(c.sq) / std::sqrt(r);
      row.mc_se_est = sd_of(c.se) / std::sqrt(r);
      row.mc_reject = 100.0 * std::sqrt(p_rej * (1.0 - p_rej) / r);
      row.mc_coverage = 100.0 * std::sqrt(p_cov * (1.0 - p_cov) / r);
      agg.rows.push_back(row);
    }
  }
  if (!missing.empty()) {
    throw std::runtime_error("aggregate_results: no valid records for cells:" + missing);
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Metamodel data

struct MetamodelData {
  bool aggregated = false;
  FactorFrame frame;  // estimator + the five condition factors
  Eigen::VectorXd y;
  std::vector<int> condition_code;          // per row, dense
  std::vector<int> dataset_code;            // per row, dense (individual level only)
  std::vector<int> condition_ids;           // per condition code, original id
  std::vector<SimCondition> condition_meta; // per condition code
  int n_conditions = 0;
  int n_datasets = 0;
  Eigen::VectorXd sqrt_n_weights;  // per row
  Eigen::VectorXd mc_var;          // per row; aggregated level only
};

namespace mmdetail {

struct ConditionIndex {
  std::vector<int> ids;  // sorted original condition ids in the subset
  int code(int id) const {
    const auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) throw std::logic_error("condition id not in subset");
    return static_cast<int>(it - ids.begin());
  }
};

inline ConditionIndex subset_conditions(const std::vector<SimCondition>& conds,
                                        const SubsetRule& subset) {
  ConditionIndex idx;
  for (const auto& c : conds) {
    if (subset.matches(c)) idx.ids.push_back(c.condition_id);
  }
  std::sort(idx.ids.begin(), idx.ids.end());
  if (idx.ids.size() < 2) {
    throw std::invalid_argument("subset '" + subset.str() + "' leaves fewer than 2 conditions");
  }
  return idx;
}

inline void add_condition_factors(MetamodelData& d, const std::vector<std::string>& est_values,
                                  const std::vector<Estimator>& est_set,
                                  const std::vector<double>& n, const std::vector<double>& b1,
                                  const std::vector<double>& prop, const std::vector<double>& b2,
                                  const std::vector<double>& b3) {
  std::vector<std::string> est_levels;
  for (Estimator e : est_set) est_levels.push_back(to_string(e));
  d.frame.add(make_factor("estimator", est_values, est_levels));
  d.frame.add(make_factor("n", n));
  d.frame.add(make_factor("b1", b1));
  d.frame.add(make_factor("prop_treated", prop));
  d.frame.add(make_factor("b2", b2));
  d.frame.add(make_factor("b3", b3));
}

}  // namespace mmdetail

inline double metric_value(Metric m, const EstimateRecord& rec) {
  switch (m) {
    case Metric::power:
    case Metric::false_positive: return 100.0 * rec.reject;
    case Metric::bias: return rec.error;
    case Metric::sq_error: return rec.sq_error;
    case Metric::se_est: return rec.se_hat;
    case Metric::coverage: return 100.0 * rec.covered;
    default: throw std::invalid_argument(std::string("metric ") + metric_info(m).name +
                                         " is aggregated-only");
  }
}

inline double metric_value(Metric m, const AggregateRow& row) {
  switch (m) {
    case Metric::power:
    case Metric::false_positive: return row.reject_pct;
    case Metric::bias: return row.bias;
    case Metric::sq_error: return row.sq_error;
    case Metric::se_est: return row.se_est;
    case Metric::coverage: return row.coverage_pct;
    case Metric::true_se: return row.true_se;
    case Metric::se_calibration: return row.se_calibration;
  }
  throw std::logic_error("metric_value: unknown metric");
}

inline double metric_mc_se(Metric m, const AggregateRow& row) {
  switch (m) {
    case Metric::power:
    case Metric::false_positive: return row.mc_reject;
    case Metric::bias: return row.mc_bias;
    case Metric::sq_error: return row.mc_sq_error;
    case Metric::se_est: return row.mc_se_est;
    case Metric::coverage: return row.mc_coverage;
    default: return std::numeric_limits<double>::quiet_NaN();
  }
}

// Long-format rows of one estimate-level metric, subset applied.
inline MetamodelData build_individual_data(const EstimateTable& table, Metric metric,
                                           const SubsetRule& subset) {
  if (metric_info(metric).aggregated_only) {
    throw std::invalid_argument(std::string("metric ") + metric_info(metric).name +
                                " cannot be analyzed at the individual level");
  }
  MetamodelData d;
  d.aggregated = false;
  const auto idx = mmdetail::subset_conditions(table.conditions, subset);
  d.condition_ids = idx.ids;
  for (int id : idx.ids) d.condition_meta.push_back(table.condition(id));
  d.n_conditions = static_cast<int>(idx.ids.size());

  std::vector<double> yv, nv, b1v, propv, b2v, b3v, sqw;
  std::vector<std::string> estv;
  std::vector<int> dataset_raw;
  for (const auto& rec : table.records) {
    const SimCondition& c = table.condition(rec.condition_id);
    if (!subset.matches(c) || rec.flag != 0) continue;
    yv.push_back(metric_value(metric, rec));
    estv.push_back(to_string(rec.estimator));
    nv.push_back(c.n);
    b1v.push_back(c.b1);
    propv.push_back(c.prop_treated);
    b2v.push_back(c.b2);
    b3v.push_back(c.b3);
    sqw.push_back(std::sqrt(static_cast<double>(c.n)));
    d.condition_code.push_back(idx.code(rec.condition_id));
    dataset_raw.push_back(rec.dataset_id);
  }
  if (yv.empty()) throw std::invalid_argument("no records after subset '" + subset.str() + "'");

  std::vector<int> uniq(dataset_raw);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  d.n_datasets = static_cast<int>(uniq.size());
  d.dataset_code.reserve(dataset_raw.size());
  for (int id : dataset_raw) {
    d.dataset_code.push_back(
        static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), id) - uniq.begin()));
  }

  mmdetail::add_condition_factors(d, estv, table.estimators, nv, b1v, propv, b2v, b3v);
  d.y = Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
  d.sqrt_n_weights = Eigen::Map<Eigen::VectorXd>(sqw.data(), static_cast<Eigen::Index>(sqw.size()));
  return d;
}

inline MetamodelData build_aggregated_data(const AggregateTable& agg, Metric metric,
                                           const SubsetRule& subset) {
  MetamodelData d;
  d.aggregated = true;
  const auto idx = mmdetail::subset_conditions(agg.conditions, subset);
  d.condition_ids = idx.ids;
  for (int id : idx.ids) d.condition_meta.push_back(agg.condition(id));
  d.n_conditions = static_cast<int>(idx.ids.size());

  std::vector<double> yv, nv, b1v, propv, b2v, b3v, sqw, mcv;
  std::vector<std::string> estv;
  for (const auto& row : agg.rows) {
    const SimCondition& c = agg.condition(row.condition_id);
    if (!subset.matches(c)) continue;
    const double y = metric_value(metric, row);
    if (!std::isfinite(y)) {
      throw std::runtime_error(std::string("metric ") + metric_info(metric).name +
                               " undefined for condition " + std::to_string(row.condition_id));
    }
    yv.push_back(y);
    estv.push_back(to_string(row.estimator));
    nv.push_back(c.n);
    b1v.push_back(c.b1);
    propv.push_back(c.prop_treated);
    b2v.push_back(c.b2);
    b3v.push_back(c.b3);
    sqw.push_back(std::sqrt(static_cast<double>(c.n)));
    const double mc = metric_mc_se(metric, row);
    mcv.push_back(mc * mc);
    d.condition_code.push_back(idx.code(row.condition_id));
  }
  d.n_datasets = 0;
  mmdetail::add_condition_factors(d, estv, agg.estimators, nv, b1v, propv, b2v, b3v);
  d.y = Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
  d.sqrt_n_weights = Eigen::Map<Eigen::VectorXd>(sqw.data(), static_cast<Eigen::Index>(sqw.size()));
  d.mc_var = Eigen::Map<Eigen::VectorXd>(mcv.data(), static_cast<Eigen::Index>(mcv.size()));
  return d;
}

// ---------------------------------------------------------------------------
// Metamodel specification and fitting

struct MetamodelSpec {
  Metric metric = Metric::power;
  int preset = 1;
  bool aggregated = false;
  bool interactions = false;
  enum class Random {
    none_cluster_robust,
    ri_condition,          // condition intercepts (aggregated two-level)
    ri_dataset_condition,  // dataset + condition intercepts (three-level RI)
    rs_condition           // dataset intercepts + estimator slopes by condition
  } random = Random::rs_condition;
  enum class Weights { none, sqrt_n, inv_mc_var } weights = Weights::none;
  enum class Family { identity, sqrt_link } family = Family::identity;
  SubsetRule subset;
};

inline MetamodelSpec::Weights weights_from_string(const std::string& s) {
  if (s == "none") return MetamodelSpec::Weights::none;
  if (s == "sqrt_n") return MetamodelSpec::Weights::sqrt_n;
  if (s == "inv_mc_var") return MetamodelSpec::Weights::inv_mc_var;
  throw std::invalid_argument("unknown weights option '" + s + "'");
}

inline const char* to_string(MetamodelSpec::Weights w) {
  switch (w) {
    case MetamodelSpec::Weights::none: return "none";
    case MetamodelSpec::Weights::sqrt_n: return "sqrt_n";
    case MetamodelSpec::Weights::inv_mc_var: return "inv_mc_var";
  }
  return "?";
}

// preset -> specification; family "auto" resolves to sqrt for individual-level
// squared error (the nonlinear analysis the reporter transforms back to the
// RMSE scale) and identity otherwise.
inline MetamodelSpec make_preset_spec(int preset, Metric metric,
                                      MetamodelSpec::Weights weights = MetamodelSpec::Weights::none,
                                      const std::optional<SubsetRule>& subset = std::nullopt,
                                      const std::optional<MetamodelSpec::Family>& family = std::nullopt) {
  if (preset < 1 || preset > 4) throw std::invalid_argument("preset must be 1..4");
  MetamodelSpec spec;
  spec.metric = metric;
  spec.preset = preset;
  spec.aggregated = preset >= 3;
  spec.interactions = preset >= 2;
  spec.random = preset <= 2 ? MetamodelSpec::Random::rs_condition
                : preset == 3 ? MetamodelSpec::Random::none_cluster_robust
                              : MetamodelSpec::Random::ri_condition;
  spec.weights = weights;
  spec.subset = subset.value_or(parse_subset(metric_info(metric).default_subset));
  if (metric_info(metric).aggregated_only && !spec.aggregated) {
    throw std::invalid_argument(std::string("metric ") + metric_info(metric).name +
                                " requires an aggregated preset (3 or 4)");
  }
  if (family.has_value()) {
    spec.family = *family;
  } else {
    spec.family = (!spec.aggregated && metric == Metric::sq_error) ? MetamodelSpec::Family::sqrt_link
                                                                   : MetamodelSpec::Family::identity;
  }
  if (spec.family == MetamodelSpec::Family::sqrt_link &&
      (metric != Metric::sq_error || spec.aggregated)) {
    throw std::invalid_argument("sqrt link is only supported for individual-level sq_error");
  }
  if (spec.weights == MetamodelSpec::Weights::inv_mc_var && !spec.aggregated) {
    throw std::invalid_argument("inv_mc_var weights require an aggregated preset");
  }
  return spec;
}

inline void validate_metric_subset(const MetamodelSpec& spec, const MetamodelData& data) {
  if (spec.metric == Metric::power) {
    for (const auto& c : data.condition_meta) {
      if (c.b1 == 0.0) {
        throw std::invalid_argument("power metamodel requires a subset excluding b1=0 conditions");
      }
    }
  }
  if (spec.metric == Metric::false_positive) {
    for (const auto& c : data.condition_meta) {
      if (c.b1 != 0.0) {
        throw std::invalid_argument("false_positive metamodel requires the b1=0 subset");
      }
    }
  }
}

struct CoefRow {
  std::string term;
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
  double classical_se = std::numeric_limits<double>::quiet_NaN();  // OLS preset only
};

struct ConditionLevels {
  int condition_id = -1;
  std::map<std::string, std::string> levels;  // factor -> level label
};

struct FitDocument {
  std::string kind;  // "ols_cluster_robust" | "lmm" | "glmm_sqrt"
  std::string metric;
  int preset = 0;
  std::string level;  // "individual" | "aggregated"
  std::string weights = "none";
  std::string family = "identity";
  std::string subset = "none";
  long n_obs = 0;
  std::map<std::string, int> groups;
  int n_clusters = 0;
  std::vector<CoefRow> coefficients;
  Eigen::MatrixXd vcov;  // covariance used for inference
  std::vector<VarComp> varcomps;
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  double deviance = std::numeric_limits<double>::quiet_NaN();
  bool converged = true;
  bool boundary = false;
  int evals = 0;
  double r2 = std::numeric_limits<double>::quiet_NaN();
  double adj_r2 = std::numeric_limits<double>::quiet_NaN();
  double rmse = std::numeric_limits<double>::quiet_NaN();
  std::vector<EbRecord> eb;  // group_label = original condition id
  std::map<std::string, double> avg_reliability;
  std::vector<ConditionLevels> conditions;
  Eigen::VectorXd theta;  // covariance parameters at the optimum (warm starts)

  int term_index(const std::string& label) const {
    for (std::size_t j = 0; j < coefficients.size(); ++j) {
      if (coefficients[j].term == label) return static_cast<int>(j);
    }
    return -1;
  }

  const CoefRow& coef(const std::string& label) const {
    const int j = term_index(label);
    if (j < 0) throw std::invalid_argument("no coefficient named '" + label + "'");
    return coefficients[static_cast<std::size_t>(j)];
  }

  const VarComp* varcomp(const std::string& factor) const {
    for (const auto& v : varcomps) {
      if (v.factor == factor) return &v;
    }
    return nullptr;
  }
};

struct FitOptions {
  LmmOptions lmm;
  GlmmOptions glmm;
  bool compute_eb = true;
  std::optional<Eigen::VectorXd> start_theta;
};

namespace mmdetail {

inline DesignMatrix metamodel_design(const MetamodelData& data, bool interactions) {
  const std::vector<std::string> mains = {"estimator", "n", "prop_treated", "b1", "b2", "b3"};
  std::vector<std::pair<std::string, std::string>> inters;
  if (interactions) {
    for (const auto& f : {"n", "prop_treated", "b1", "b2", "b3"}) {
      inters.emplace_back("estimator", f);
    }
  }
  return build_design(data.frame, mains, inters);
}

inline RandomSpec metamodel_random(const MetamodelData& data, const DesignMatrix& design,
                                   MetamodelSpec::Random random, bool track_eb) {
  RandomSpec spec;
  if (random == MetamodelSpec::Random::none_cluster_robust) return spec;

  if (random == MetamodelSpec::Random::rs_condition ||
      random == MetamodelSpec::Random::ri_dataset_condition) {
    RandomFactor ds;
    ds.name = "dataset";
    ds.group = data.dataset_code;
    ds.n_groups = data.n_datasets;
    ds.term_names = {"intercept"};
    ds.terms = Eigen::MatrixXd::Ones(data.y.size(), 1);
    ds.full_cov = true;
    spec.factors.push_back(std::move(ds));
  }

  RandomFactor cond;
  cond.name = "condition";
  cond.group = data.condition_code;
  cond.n_groups = data.n_conditions;
  for (int id : data.condition_ids) cond.group_labels.push_back(std::to_string(id));
  cond.track_eb = track_eb;
  cond.full_cov = true;
  if (random == MetamodelSpec::Random::rs_condition) {
    const CatColumn& est = data.frame.at("estimator");
    const int t = static_cast<int>(est.levels.size());
    cond.term_names.push_back("intercept");
    cond.terms = Eigen::MatrixXd::Zero(data.y.size(), t);
    cond.terms.col(0).setOnes();
    for (int l = 1; l < t; ++l) {
      cond.term_names.push_back(level_label(est, l));
      for (Eigen::Index i = 0; i < cond.terms.rows(); ++i) {
        cond.terms(i, l) = est.code[static_cast<std::size_t>(i)] == l ? 1.0 : 0.0;
      }
    }
  } else {
    cond.term_names = {"intercept"};
    cond.terms = Eigen::MatrixXd::Ones(data.y.size(), 1);
  }
  spec.factors.push_back(std::move(cond));
  return spec;
}

inline Eigen::VectorXd* spec_weights(const MetamodelSpec& spec, const MetamodelData& data,
                                     Eigen::VectorXd& storage) {
  switch (spec.weights) {
    case MetamodelSpec::Weights::none: return nullptr;
    case MetamodelSpec::Weights::sqrt_n:
      storage = data.sqrt_n_weights;
      return &storage;
    case MetamodelSpec::Weights::inv_mc_var: {
      if (data.mc_var.size() == 0) {
        throw std::invalid_argument("inv_mc_var weights need aggregated data");
      }
      double floor = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < data.mc_var.size(); ++i) {
        if (data.mc_var(i) > 0.0) floor = std::min(floor, data.mc_var(i));
      }
      if (!std::isfinite(floor)) {
        throw std::invalid_argument("inv_mc_var weights: all Monte Carlo variances are zero");
      }
      storage = data.mc_var.array().max(floor).inverse();
      return &storage;
    }
  }
  return nullptr;
}

}  // namespace mmdetail

// Fits a metamodel spec to prepared data. The heavy lifting dispatches to the
// regression core (preset 3) or the mixed-model engine (presets 1, 2, 4).
inline FitDocument fit_metamodel(const MetamodelSpec& spec, const MetamodelData& data,
                                 const FitOptions& opt = {}) {
  if (spec.aggregated != data.aggregated) {
    throw std::invalid_argument("metamodel data level does not match the preset");
  }
  validate_metric_subset(spec, data);
  const DesignMatrix design = mmdetail::metamodel_design(data, spec.interactions);
  Eigen::VectorXd wstore;
  Eigen::VectorXd* weights = mmdetail::spec_weights(spec, data, wstore);

  FitDocument doc;
  doc.metric = metric_info(spec.metric).name;
  doc.preset = spec.preset;
  doc.level = spec.aggregated ? "aggregated" : "individual";
  doc.weights = to_string(spec.weights);
  doc.family = spec.family == MetamodelSpec::Family::sqrt_link ? "sqrt" : "identity";
  doc.subset = spec.subset.str();
  doc.n_obs = static_cast<long>(data.y.size());
  for (const auto& c : data.condition_meta) {
    ConditionLevels cl;
    cl.condition_id = c.condition_id;
    cl.levels["n"] = format_g12(c.n);
    cl.levels["b1"] = format_g12(c.b1);
    cl.levels["prop_treated"] = format_g12(c.prop_treated);
    cl.levels["b2"] = format_g12(c.b2);
    cl.levels["b3"] = format_g12(c.b3);
    doc.conditions.push_back(std::move(cl));
  }

  if (spec.random == MetamodelSpec::Random::none_cluster_robust) {
    std::vector<long> clusters;
    clusters.reserve(data.condition_code.size());
    for (int c : data.condition_code) clusters.push_back(c);
    const RegressionFit fit = ols_fit(design.X, data.y, design.labels(), weights);
    const Eigen::MatrixXd robust = cluster_robust_vcov(fit, design.X, clusters, weights);
    doc.kind = "ols_cluster_robust";
    doc.n_clusters = data.n_conditions;
    doc.vcov = robust;
    for (std::size_t j = 0; j < design.terms.size(); ++j) {
      CoefRow row;
      row.term = design.terms[j].label;
      row.estimate = fit.beta(static_cast<Eigen::Index>(j));
      row.se = std::sqrt(robust(j, j));
      row.z = row.estimate / row.se;
      row.p = two_sided_p_normal(row.z);
      row.classical_se = fit.se(static_cast<int>(j));
      doc.coefficients.push_back(row);
    }
    doc.sigma2 = fit.sigma2;
    const double tss = (data.y.array() - data.y.mean()).square().sum();
    const double rss = fit.residuals.squaredNorm();
    doc.r2 = 1.0 - rss / tss;
    const double n = static_cast<double>(data.y.size());
    const double p = static_cast<double>(design.X.cols());
    doc.adj_r2 = 1.0 - (1.0 - doc.r2) * (n - 1.0) / (n - p);
    doc.rmse = std::sqrt(fit.sigma2);
    return doc;
  }

  const RandomSpec rspec = mmdetail::metamodel_random(data, design, spec.random, opt.compute_eb);
  MixedFit fit;
  if (spec.family == MetamodelSpec::Family::sqrt_link) {
    GlmmOptions gopt = opt.glmm;
    if (opt.start_theta.has_value()) gopt.inner.start_theta = opt.start_theta;
    fit = fit_glmm_sqrt(design.X, design.labels(), rspec, data.y, gopt);
    doc.kind = "glmm_sqrt";
  } else {
    LmmOptions lopt = opt.lmm;
    if (opt.start_theta.has_value()) lopt.start_theta = opt.start_theta;
    fit = fit_lmm(design.X, design.labels(), rspec, data.y, weights, lopt);
    doc.kind = "lmm";
  }

  doc.vcov = fit.cov;
  doc.varcomps = fit.varcomps;
  doc.sigma2 = fit.sigma2;
  doc.deviance = fit.deviance;
  doc.converged = fit.converged;
  doc.boundary = fit.boundary;
  doc.evals = fit.evals;
  doc.groups = fit.group_counts;
  for (std::size_t j = 0; j < fit.names.size(); ++j) {
    CoefRow row;
    row.term = fit.names[j];
    row.estimate = fit.beta(static_cast<Eigen::Index>(j));
    row.se = fit.se(static_cast<Eigen::Index>(j));
    row.z = fit.z(static_cast<Eigen::Index>(j));
    row.p = fit.p(static_cast<Eigen::Index>(j));
    doc.coefficients.push_back(row);
  }
  doc.eb = fit.eb;
  if (!fit.eb.empty()) {
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& rec : fit.eb) {
      auto& [sum, count] = acc[rec.effect];
      sum += rec.reliability;
      ++count;
    }
    for (const auto& [effect, sc] : acc) {
      doc.avg_reliability[effect] = sc.first / static_cast<double>(sc.second);
    }
  }
  doc.theta = fit.theta;
  return doc;
}

// Builds the data for a preset and fits it.
inline FitDocument build_preset(int preset, Metric metric, const EstimateTable& table,
                                MetamodelSpec::Weights weights = MetamodelSpec::Weights::none,
                                const std::optional<SubsetRule>& subset = std::nullopt,
                                const std::optional<MetamodelSpec::Family>& family = std::nullopt,
                                const FitOptions& opt = {}) {
  const MetamodelSpec spec = make_preset_spec(preset, metric, weights, subset, family);
  if (spec.aggregated) {
    const AggregateTable agg = aggregate_results(table);
    return fit_metamodel(spec, build_aggregated_data(agg, metric, spec.subset), opt);
  }
  return fit_metamodel(spec, build_individual_data(table, metric, spec.subset), opt);
}

// ---------------------------------------------------------------------------
// Prediction intervals, EB ranges, conjoint tables

// 95% prediction interval for a condition-level effect: effect +/- 1.96 *
// sqrt(psi2 + var_effect).
inline std::pair<double, double> prediction_interval(double effect, double var_effect, double psi2) {
  if (var_effect < 0.0 || psi2 < 0.0) {
    throw std::domain_error("prediction_interval: variances must be nonnegative");
  }
  const double half = 1.96 * std::sqrt(psi2 + var_effect);
  return {effect - half, effect + half};
}

// Inner coverage range (type-7 quantiles) of composed per-condition effects:
// fixed_part + EB deviation, over the EB records matching `effect` whose
// condition passes `keep`.
inline std::pair<double, double> eb_inner_range(
    const std::vector<EbRecord>& eb, const std::string& effect, double fixed_part,
    const std::function<bool(const EbRecord&)>& keep = nullptr, double coverage = 0.95) {
  std::vector<double> values;
  for (const auto& rec : eb) {
    if (rec.effect != effect) continue;
    if (keep && !keep(rec)) continue;
    values.push_back(fixed_part + rec.deviation);
  }
  if (values.size() < 2) {
    throw std::invalid_argument("eb_inner_range: fewer than 2 EB records after filtering");
  }
  const double tail = (1.0 - coverage) / 2.0;
  return {quantile_type7(values, tail), quantile_type7(values, 1.0 - tail)};
}

struct ConjointRow {
  std::string estimator;  // non-reference estimator level
  std::string factor;
  std::string level;
  double effect = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double eb_lo = std::numeric_limits<double>::quiet_NaN();
  double eb_hi = std::numeric_limits<double>::quiet_NaN();
};

// Per (estimator, facet level): the estimator effect with other factors at
// reference (main effect + the facet's interaction term when present), a
// delta-method 95% CI, and the EB inner range over the facet's conditions.
inline std::vector<ConjointRow> conjoint_table(const FitDocument& doc,
                                               const std::vector<std::string>& facets = {
                                                   "n", "prop_treated", "b1", "b2", "b3"}) {
  std::vector<std::string> estimators;
  std::set<std::string> seen;
  for (const auto& c : doc.coefficients) {
    if (c.term.rfind("estimator=", 0) == 0 && c.term.find(':') == std::string::npos) {
      estimators.push_back(c.term);
    }
  }
  if (estimators.empty()) throw std::invalid_argument("conjoint_table: no estimator terms in fit");

  // facet levels from the condition table
  std::vector<ConjointRow> rows;
  for (const auto& est_term : estimators) {
    const int main_idx = doc.term_index(est_term);
    for (const auto& facet : facets) {
      std::vector<std::string> levels;
      for (const auto& c : doc.conditions) {
        const auto it = c.levels.find(facet);
        if (it == c.levels.end()) throw std::invalid_argument("facet '" + facet + "' unknown");
        if (std::find(levels.begin(), levels.end(), it->second) == levels.end()) {
          levels.push_back(it->second);
        }
      }
      std::sort(levels.begin(), levels.end(), [](const std::string& a, const std::string& b) {
        return std::stod(a) < std::stod(b);
      });
      for (const auto& level : levels) {
        ConjointRow row;
        row.estimator = est_term.substr(std::string("estimator=").size());
        row.factor = facet;
        row.level = level;
        const std::string inter = est_term + ":" + facet + "=" + level;
        const int inter_idx = doc.term_index(inter);
        double effect = doc.coefficients[static_cast<std::size_t>(main_idx)].estimate;
        double var = doc.vcov(main_idx, main_idx);
        if (inter_idx >= 0) {
          effect += doc.coefficients[static_cast<std::size_t>(inter_idx)].estimate;
          var += doc.vcov(inter_idx, inter_idx) + 2.0 * doc.vcov(main_idx, inter_idx);
        }
        row.effect = effect;
        const double half = 1.96 * std::sqrt(std::max(var, 0.0));
        row.ci_lo = effect - half;
        row.ci_hi = effect + half;

        if (!doc.eb.empty()) {
          std::set<std::string> facet_conditions;
          for (const auto& c : doc.conditions) {
            if (c.levels.at(facet) == level) facet_conditions.insert(std::to_string(c.condition_id));
          }
          auto keep = [&facet_conditions](const EbRecord& rec) {
            return facet_conditions.count(rec.group_label) > 0;
          };
          const auto [lo, hi] = eb_inner_range(doc.eb, est_term, effect, keep);
          row.eb_lo = lo;
          row.eb_hi = hi;
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

}  // namespace mlmm

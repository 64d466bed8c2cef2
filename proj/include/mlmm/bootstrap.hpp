#pragma once

// Nonparametric bootstrap of metamodel coefficient SEs at three resampling
// levels: individual records, dataset blocks (drawn within their condition),
// and condition blocks (drawn with replacement, each draw receiving a fresh
// group id so random-effect grouping stays well defined).

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmm/metamodel.hpp"
#include "mlmm/prng.hpp"

namespace mlmm {

enum class BootstrapLevel { record, dataset, condition };

inline const char* to_string(BootstrapLevel l) {
  switch (l) {
    case BootstrapLevel::record: return "record";
    case BootstrapLevel::dataset: return "dataset";
    case BootstrapLevel::condition: return "condition";
  }
  return "?";
}

inline BootstrapLevel bootstrap_level_from_string(const std::string& s) {
  if (s == "record") return BootstrapLevel::record;
  if (s == "dataset") return BootstrapLevel::dataset;
  if (s == "condition") return BootstrapLevel::condition;
  throw std::invalid_argument("unknown bootstrap level '" + s + "'");
}

struct Resample {
  std::vector<long> rows;            // source row indices, in output order
  std::vector<int> condition_code;   // fresh dense codes per output row
  std::vector<int> dataset_code;
  std::vector<int> source_condition; // per fresh condition code, source code
  int n_conditions = 0;
  int n_datasets = 0;
};

inline Resample identity_resample(const MetamodelData& data) {
  Resample r;
  const long n = static_cast<long>(data.y.size());
  r.rows.resize(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) r.rows[static_cast<std::size_t>(i)] = i;
  r.condition_code = data.condition_code;
  r.dataset_code = data.dataset_code;
  r.n_conditions = data.n_conditions;
  r.n_datasets = data.n_datasets;
  r.source_condition.resize(static_cast<std::size_t>(data.n_conditions));
  for (int k = 0; k < data.n_conditions; ++k) r.source_condition[static_cast<std::size_t>(k)] = k;
  return r;
}

// Draws one bootstrap resample. Dataset blocks are resampled within their
// condition, so per-condition row counts are preserved exactly; condition
// blocks are resampled across the whole subset.
inline Resample draw_resample(const MetamodelData& data, BootstrapLevel level, RngStream& rng) {
  Resample out;
  const long n = static_cast<long>(data.y.size());

  if (level == BootstrapLevel::record) {
    out.rows.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
      out.rows.push_back(static_cast<long>(rng.uniform() * static_cast<double>(n)));
    }
    out.condition_code.reserve(out.rows.size());
    for (long r : out.rows) out.condition_code.push_back(data.condition_code[static_cast<std::size_t>(r)]);
    out.n_conditions = data.n_conditions;
    out.n_datasets = 0;
    out.source_condition.resize(static_cast<std::size_t>(data.n_conditions));
    for (int k = 0; k < data.n_conditions; ++k) out.source_condition[static_cast<std::size_t>(k)] = k;
    return out;
  }

  if (level == BootstrapLevel::dataset) {
    if (data.dataset_code.empty()) {
      throw std::invalid_argument("dataset-level bootstrap needs individual-level data");
    }
    // rows grouped by dataset, datasets grouped by condition
    std::vector<std::vector<long>> rows_of_dataset(static_cast<std::size_t>(data.n_datasets));
    std::vector<int> condition_of_dataset(static_cast<std::size_t>(data.n_datasets), -1);
    for (long i = 0; i < n; ++i) {
      const int d = data.dataset_code[static_cast<std::size_t>(i)];
      rows_of_dataset[static_cast<std::size_t>(d)].push_back(i);
      condition_of_dataset[static_cast<std::size_t>(d)] = data.condition_code[static_cast<std::size_t>(i)];
    }
    std::vector<std::vector<int>> datasets_of_condition(static_cast<std::size_t>(data.n_conditions));
    for (int d = 0; d < data.n_datasets; ++d) {
      datasets_of_condition[static_cast<std::size_t>(condition_of_dataset[static_cast<std::size_t>(d)])]
          .push_back(d);
    }
    int fresh_dataset = 0;
    for (int k = 0; k < data.n_conditions; ++k) {
      const auto& pool = datasets_of_condition[static_cast<std::size_t>(k)];
      const auto m = static_cast<double>(pool.size());
      for (std::size_t j = 0; j < pool.size(); ++j) {
        const int pick = pool[static_cast<std::size_t>(rng.uniform() * m)];
        for (long row : rows_of_dataset[static_cast<std::size_t>(pick)]) {
          out.rows.push_back(row);
          out.condition_code.push_back(k);
          out.dataset_code.push_back(fresh_dataset);
        }
        ++fresh_dataset;
      }
    }
    out.n_conditions = data.n_conditions;
    out.n_datasets = fresh_dataset;
    out.source_condition.resize(static_cast<std::size_t>(data.n_conditions));
    for (int k = 0; k < data.n_conditions; ++k) out.source_condition[static_cast<std::size_t>(k)] = k;
    return out;
  }

  // condition level
  std::vector<std::vector<long>> rows_of_condition(static_cast<std::size_t>(data.n_conditions));
  for (long i = 0; i < n; ++i) {
    rows_of_condition[static_cast<std::size_t>(data.condition_code[static_cast<std::size_t>(i)])]
        .push_back(i);
  }
  const bool has_datasets = !data.dataset_code.empty();
  int fresh_dataset = 0;
  for (int k = 0; k < data.n_conditions; ++k) {
    const int pick = static_cast<int>(rng.uniform() * static_cast<double>(data.n_conditions));
    out.source_condition.push_back(pick);
    std::map<int, int> fresh_ds_of_source;
    for (long row : rows_of_condition[static_cast<std::size_t>(pick)]) {
      out.rows.push_back(row);
      out.condition_code.push_back(k);  // fresh id for this draw
      if (has_datasets) {
        const int sd = data.dataset_code[static_cast<std::size_t>(row)];
        auto [it, inserted] = fresh_ds_of_source.try_emplace(sd, fresh_dataset);
        if (inserted) ++fresh_dataset;
        out.dataset_code.push_back(it->second);
      }
    }
  }
  out.n_conditions = data.n_conditions;
  out.n_datasets = fresh_dataset;
  return out;
}

inline MetamodelData apply_resample(const MetamodelData& data, const Resample& rs) {
  MetamodelData out;
  out.aggregated = data.aggregated;
  out.condition_code = rs.condition_code;
  out.dataset_code = rs.dataset_code;
  out.n_conditions = rs.n_conditions;
  out.n_datasets = rs.n_datasets;
  for (int src : rs.source_condition) {
    out.condition_ids.push_back(data.condition_ids[static_cast<std::size_t>(src)]);
    out.condition_meta.push_back(data.condition_meta[static_cast<std::size_t>(src)]);
  }
  const auto m = static_cast<Eigen::Index>(rs.rows.size());
  out.y.resize(m);
  out.sqrt_n_weights.resize(m);
  if (data.mc_var.size() > 0) out.mc_var.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const long src = rs.rows[static_cast<std::size_t>(i)];
    out.y(i) = data.y(src);
    out.sqrt_n_weights(i) = data.sqrt_n_weights(src);
    if (data.mc_var.size() > 0) out.mc_var(i) = data.mc_var(src);
  }
  out.frame.n_rows = static_cast<std::size_t>(m);
  for (const auto& col : data.frame.cols) {
    CatColumn c;
    c.name = col.name;
    c.levels = col.levels;
    c.code.reserve(rs.rows.size());
    for (long src : rs.rows) c.code.push_back(col.code[static_cast<std::size_t>(src)]);
    out.frame.cols.push_back(std::move(c));
  }
  return out;
}

struct BootstrapReport {
  BootstrapLevel level = BootstrapLevel::record;
  int B = 0;
  std::string model_kind;  // the matched model whose SEs are compared
  std::vector<std::string> terms;
  std::vector<double> boot_sd;
  std::vector<double> model_se;  // filled by the caller from the matched fit
  int n_failed = 0;
};

// Refits `spec` on each resample and reports the per-coefficient SD across
// converged replicates. Replicates whose refit fails are dropped and counted.
inline BootstrapReport bootstrap_metamodel_with(const MetamodelData& data, const MetamodelSpec& spec,
                                                const std::vector<Resample>& resamples,
                                                BootstrapLevel level, const FitOptions& opt = {}) {
  if (resamples.size() < 2) throw std::invalid_argument("bootstrap: need B >= 2");
  if (level == BootstrapLevel::record && spec.random != MetamodelSpec::Random::none_cluster_robust) {
    throw std::invalid_argument(
        "record-level bootstrap of a mixed-model spec violates the independence the resampling "
        "assumes; use dataset or condition blocks");
  }

  FitOptions ropt = opt;
  ropt.compute_eb = false;
  std::vector<std::string> terms;
  std::vector<std::vector<double>> draws;
  int failed = 0;
  for (const auto& rs : resamples) {
    try {
      const MetamodelData rd = apply_resample(data, rs);
      const FitDocument doc = fit_metamodel(spec, rd, ropt);
      if (!doc.converged) {
        ++failed;
        continue;
      }
      if (terms.empty()) {
        for (const auto& c : doc.coefficients) terms.push_back(c.term);
        draws.resize(terms.size());
      }
      if (doc.coefficients.size() != terms.size()) {
        ++failed;
        continue;
      }
      for (std::size_t j = 0; j < terms.size(); ++j) {
        draws[j].push_back(doc.coefficients[j].estimate);
      }
    } catch (const std::exception&) {
      ++failed;
    }
  }
  if (terms.empty()) throw std::runtime_error("bootstrap: every replicate failed to refit");

  BootstrapReport rep;
  rep.level = level;
  rep.B = static_cast<int>(resamples.size());
  rep.terms = terms;
  rep.n_failed = failed;
  for (const auto& d : draws) rep.boot_sd.push_back(sd_of(d));
  rep.model_se.assign(terms.size(), std::numeric_limits<double>::quiet_NaN());
  return rep;
}

inline BootstrapReport bootstrap_metamodel(const MetamodelData& data, const MetamodelSpec& spec,
                                           BootstrapLevel level, int B, std::uint64_t seed,
                                           const FitOptions& opt = {}) {
  if (B < 2) throw std::invalid_argument("bootstrap: need B >= 2");
  std::vector<Resample> rs;
  rs.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    RngStream rng(seed, 0xB0000000u + static_cast<std::uint32_t>(level),
                  static_cast<std::uint32_t>(b));
    rs.push_back(draw_resample(data, level, rng));
  }
  return bootstrap_metamodel_with(data, spec, rs, level, opt);
}

struct CalibrationRow {
  std::string level;
  std::string term;
  double boot_sd = 0.0;
  double model_se = 0.0;
  double ratio = 0.0;
  bool flagged = false;  // ratio outside [0.8, 1.25]
};

inline std::vector<CalibrationRow> calibration_summary(const std::vector<BootstrapReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("calibration_summary: no reports");
  std::vector<CalibrationRow> rows;
  for (const auto& rep : reports) {
    for (std::size_t j = 0; j < rep.terms.size(); ++j) {
      CalibrationRow row;
      row.level = to_string(rep.level);
      row.term = rep.terms[j];
      row.boot_sd = rep.boot_sd[j];
      row.model_se = rep.model_se[j];
      row.ratio = row.boot_sd / row.model_se;
      row.flagged = !(row.ratio >= 0.8 && row.ratio <= 1.25);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace mlmm

// Command-line pipeline over the study and metamodel library. Subcommands
// consume prior artifacts by path so partial reruns are cheap:
//
//   mlmm run       --config study.cfg [--out DIR] [--seed S] [--reps R]
//   mlmm aggregate --estimates estimates.csv
//   mlmm fit       --estimates estimates.csv --preset 1 --metric power
//   mlmm eb        --fit fit_1_power.json
//   mlmm bootstrap --estimates estimates.csv --bootstrap-level condition --B 200
//   mlmm report    --fit fit_2_power.json [--fit ...]

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <thread>

#include <json.hpp>

#include "mlmm/artifacts.hpp"
#include "mlmm/bootstrap.hpp"
#include "mlmm/config.hpp"
#include "mlmm/csv.hpp"
#include "mlmm/metamodel.hpp"
#include "mlmm/study.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void update_manifest(const std::string& dir, const std::function<void(mlmm::Manifest&)>& edit) {
  const std::string path = (fs::path(dir) / "manifest.json").string();
  mlmm::Manifest m;
  if (fs::exists(path)) m = mlmm::manifest_from_json(json::parse(mlmm::read_text(path)));
  edit(m);
  mlmm::write_text_atomic(path, mlmm::manifest_to_json(m).dump(2) + "\n");
}

// An estimates file must match the hash its manifest recorded, unless --force.
void check_manifest(const std::string& estimates_path, bool force) {
  const fs::path dir = fs::path(estimates_path).parent_path();
  const std::string manifest_path = (dir / "manifest.json").string();
  if (!fs::exists(manifest_path)) return;
  const mlmm::Manifest m = mlmm::manifest_from_json(json::parse(mlmm::read_text(manifest_path)));
  const std::string name = fs::path(estimates_path).filename().string();
  const auto it = m.file_hashes.find(name);
  if (it == m.file_hashes.end()) return;
  const std::string actual = mlmm::file_hash(estimates_path);
  if (actual != it->second) {
    if (force) {
      std::cerr << "warning: " << name << " does not match its manifest hash (continuing, --force)\n";
    } else {
      throw std::runtime_error(name + " does not match the manifest hash that produced it (" +
                               actual + " != " + it->second + "); rerun or pass --force");
    }
  }
}

mlmm::EstimateTable load_estimates(const std::string& path, bool force) {
  check_manifest(path, force);
  return mlmm::estimates_from_csv(mlmm::read_csv(path));
}

std::string out_or_sibling(const std::string& out, const std::string& anchor_path) {
  if (!out.empty()) return out;
  const auto parent = fs::path(anchor_path).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

void print_coefficients(const mlmm::FitDocument& doc) {
  std::printf("%-40s %12s %10s %8s %10s\n", "term", "estimate", "se", "z", "p");
  for (const auto& c : doc.coefficients) {
    std::printf("%-40s %12.4f %10.4f %8.2f %10.2e\n", c.term.c_str(), c.estimate, c.se, c.z, c.p);
  }
  for (const auto& v : doc.varcomps) {
    for (std::size_t j = 0; j < v.psi2.size(); ++j) {
      std::printf("var: %-35s %12.4f\n", (v.factor + " " + v.terms[j]).c_str(), v.psi2[j]);
    }
  }
  if (std::isfinite(doc.sigma2)) std::printf("var: %-35s %12.4f\n", "residual", doc.sigma2);
  if (doc.n_clusters > 0) std::printf("clusters: %d\n", doc.n_clusters);
  std::printf("n: %ld", doc.n_obs);
  for (const auto& [f, g] : doc.groups) std::printf("  groups(%s): %d", f.c_str(), g);
  std::printf("\n");
}

int cmd_run(const std::string& config_path, std::string out, std::uint64_t seed_override,
            int reps_override, int threads) {
  mlmm::StudyConfig cfg = mlmm::parse_study_config(mlmm::read_text(config_path));
  if (seed_override != 0) cfg.seed = seed_override;
  if (reps_override > 0) cfg.reps = reps_override;
  if (!out.empty()) cfg.out_dir = out;

  const auto conditions = mlmm::expand_grid(cfg.grid);
  mlmm::StudyRunSpec spec;
  spec.seed = cfg.seed;
  spec.reps = cfg.reps;
  spec.estimators = cfg.estimators;
  const mlmm::EstimateTable table = mlmm::run_study(conditions, spec, threads);

  const std::string est_path = (fs::path(cfg.out_dir) / "estimates.csv").string();
  mlmm::write_text_atomic(est_path, mlmm::estimates_to_csv(table));
  update_manifest(cfg.out_dir, [&](mlmm::Manifest& m) {
    m.config_hash = mlmm::config_hash(cfg);
    m.seed = cfg.seed;
    m.reps = cfg.reps;
    m.file_hashes["estimates.csv"] = mlmm::file_hash(est_path);
    m.counts["conditions"] = static_cast<long>(conditions.size());
    m.counts["datasets"] = static_cast<long>(conditions.size()) * cfg.reps;
    m.counts["records"] = static_cast<long>(table.records.size());
  });
  std::printf("wrote %s (%zu records, %zu conditions, seed %llu)\n", est_path.c_str(),
              table.records.size(), conditions.size(),
              static_cast<unsigned long long>(cfg.seed));
  return 0;
}

int cmd_aggregate(const std::string& estimates_path, std::string out, bool force) {
  const mlmm::EstimateTable table = load_estimates(estimates_path, force);
  const mlmm::AggregateTable agg = mlmm::aggregate_results(table);
  const std::string dir = out_or_sibling(out, estimates_path);
  const std::string path = (fs::path(dir) / "aggregates.csv").string();
  mlmm::write_text_atomic(path, mlmm::aggregates_to_csv(agg));
  update_manifest(dir, [&](mlmm::Manifest& m) {
    m.file_hashes["aggregates.csv"] = mlmm::file_hash(path);
    m.counts["aggregate_rows"] = static_cast<long>(agg.rows.size());
  });
  std::printf("wrote %s (%zu rows)\n", path.c_str(), agg.rows.size());
  return 0;
}

int cmd_fit(const std::string& estimates_path, int preset, const std::string& metric_name,
            const std::string& weights_name, const std::string& subset_expr,
            const std::string& family_name, std::string out, bool force) {
  const mlmm::EstimateTable table = load_estimates(estimates_path, force);
  const mlmm::Metric metric = mlmm::metric_from_string(metric_name);
  const auto weights = mlmm::weights_from_string(weights_name);
  std::optional<mlmm::SubsetRule> subset;
  if (!subset_expr.empty()) subset = mlmm::parse_subset(subset_expr);
  std::optional<mlmm::MetamodelSpec::Family> family;
  if (family_name == "identity") family = mlmm::MetamodelSpec::Family::identity;
  else if (family_name == "sqrt") family = mlmm::MetamodelSpec::Family::sqrt_link;
  else if (family_name != "auto") throw std::invalid_argument("unknown family '" + family_name + "'");

  const mlmm::FitDocument doc = mlmm::build_preset(preset, metric, table, weights, subset, family);
  json j = mlmm::fit_document_to_json(doc);

  // sqrt-link fits also report facet effects on the RMSE scale (the linear
  // predictor is sqrt(E[squared error]), so differences are RMSE-scale)
  if (doc.family == "sqrt") {
    json effects = json::array();
    for (const auto& row : mlmm::conjoint_table(doc)) {
      effects.push_back({{"estimator", row.estimator},
                         {"factor", row.factor},
                         {"level", row.level},
                         {"effect", row.effect},
                         {"se", (row.ci_hi - row.effect) / 1.96},
                         {"eb_lo", row.eb_lo},
                         {"eb_hi", row.eb_hi}});
    }
    j["rmse_scale_effects"] = effects;
  }

  const std::string dir = out_or_sibling(out, estimates_path);
  const std::string name = "fit_" + std::to_string(preset) + "_" + metric_name + ".json";
  const std::string path = (fs::path(dir) / name).string();
  mlmm::write_text_atomic(path, j.dump(2) + "\n");
  update_manifest(dir, [&](mlmm::Manifest& m) { m.file_hashes[name] = mlmm::file_hash(path); });
  print_coefficients(doc);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_eb(const std::string& fit_path, std::string out) {
  const mlmm::FitDocument doc =
      mlmm::fit_document_from_json(json::parse(mlmm::read_text(fit_path)));
  if (doc.eb.empty()) {
    throw std::runtime_error("fit document has no EB records (aggregated OLS preset?)");
  }
  const std::string dir = out_or_sibling(out, fit_path);
  const std::string path = (fs::path(dir) / "eb.csv").string();
  mlmm::write_text_atomic(path, mlmm::eb_to_csv(doc));
  update_manifest(dir, [&](mlmm::Manifest& m) { m.file_hashes["eb.csv"] = mlmm::file_hash(path); });
  for (const auto& [effect, rel] : doc.avg_reliability) {
    std::printf("average reliability %-30s %.3f\n", effect.c_str(), rel);
  }
  std::printf("wrote %s (%zu records)\n", path.c_str(), doc.eb.size());
  return 0;
}

int cmd_bootstrap(const std::string& estimates_path, const std::string& level_name, int B,
                  const std::string& metric_name, std::uint64_t seed, std::string out, bool force) {
  const mlmm::EstimateTable table = load_estimates(estimates_path, force);
  const mlmm::Metric metric = mlmm::metric_from_string(metric_name);
  const mlmm::BootstrapLevel level = mlmm::bootstrap_level_from_string(level_name);
  const mlmm::SubsetRule subset = mlmm::parse_subset(mlmm::metric_info(metric).default_subset);
  const mlmm::MetamodelData data = mlmm::build_individual_data(table, metric, subset);

  // Replicates refit the main-effects OLS metamodel (its point estimates
  // coincide with the mixed-model fixed effects on balanced data); the
  // matched model supplies the SEs being calibrated.
  mlmm::MetamodelSpec ols_spec;
  ols_spec.metric = metric;
  ols_spec.aggregated = false;
  ols_spec.interactions = false;
  ols_spec.random = mlmm::MetamodelSpec::Random::none_cluster_robust;
  ols_spec.subset = subset;

  mlmm::BootstrapReport rep = mlmm::bootstrap_metamodel(data, ols_spec, level, B, seed);

  mlmm::MetamodelSpec matched = ols_spec;
  switch (level) {
    case mlmm::BootstrapLevel::record:
      rep.model_kind = "ols";
      break;
    case mlmm::BootstrapLevel::dataset:
      matched.random = mlmm::MetamodelSpec::Random::ri_dataset_condition;
      rep.model_kind = "ri_mlmm";
      break;
    case mlmm::BootstrapLevel::condition:
      matched.random = mlmm::MetamodelSpec::Random::rs_condition;
      rep.model_kind = "rs_mlmm";
      break;
  }
  mlmm::FitOptions fopt;
  fopt.compute_eb = false;
  const mlmm::FitDocument matched_fit = mlmm::fit_metamodel(matched, data, fopt);
  for (std::size_t j = 0; j < rep.terms.size(); ++j) {
    const auto& coef = matched_fit.coef(rep.terms[j]);
    rep.model_se[j] = (level == mlmm::BootstrapLevel::record && std::isfinite(coef.classical_se))
                          ? coef.classical_se
                          : coef.se;
  }

  const std::string dir = out_or_sibling(out, estimates_path);
  const std::string path = (fs::path(dir) / "bootstrap.csv").string();
  mlmm::write_text_atomic(path, mlmm::bootstrap_to_csv({rep}));
  update_manifest(dir, [&](mlmm::Manifest& m) {
    m.file_hashes["bootstrap.csv"] = mlmm::file_hash(path);
  });
  for (const auto& row : mlmm::calibration_summary({rep})) {
    std::printf("%-10s %-35s boot %.4f model %.4f ratio %.3f%s\n", row.level.c_str(),
                row.term.c_str(), row.boot_sd, row.model_se, row.ratio,
                row.flagged ? "  [outside 0.8-1.25]" : "");
  }
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& fit_paths, std::string out) {
  std::vector<mlmm::FitDocument> docs;
  for (const auto& p : fit_paths) {
    docs.push_back(mlmm::fit_document_from_json(json::parse(mlmm::read_text(p))));
  }

  std::vector<std::pair<std::string, mlmm::ConjointRow>> all_rows;
  std::string summary = "# Metamodel summary\n";
  for (const auto& doc : docs) {
    summary += "\n## " + doc.metric + " (preset " + std::to_string(doc.preset) + ", " + doc.kind +
               ")\n\n";
    std::vector<mlmm::ConjointRow> rows;
    try {
      rows = mlmm::conjoint_table(doc);
    } catch (const std::exception& e) {
      summary += "conjoint table unavailable: " + std::string(e.what()) + "\n";
      continue;
    }
    for (const auto& r : rows) all_rows.emplace_back(doc.metric, r);

    for (const auto& c : doc.coefficients) {
      if (c.term.rfind("estimator=", 0) == 0 && c.term.find(':') == std::string::npos) {
        const std::string est = c.term.substr(std::string("estimator=").size());
        summary += "- average effect of " + est + ": " + mlmm::format_g12(c.estimate) + " (SE " +
                   mlmm::format_g12(c.se) + ")";
        const mlmm::VarComp* vc = doc.varcomp("condition");
        if (vc != nullptr) {
          for (std::size_t t = 0; t < vc->terms.size(); ++t) {
            if (vc->terms[t] == c.term) {
              const auto [lo, hi] =
                  mlmm::prediction_interval(c.estimate, c.se * c.se, vc->psi2[t]);
              summary += "; 95% PI (" + mlmm::format_g12(lo) + ", " + mlmm::format_g12(hi) +
                         "), width " + mlmm::format_g12(hi - lo);
            }
          }
        }
        if (!doc.eb.empty()) {
          const auto [lo, hi] = mlmm::eb_inner_range(doc.eb, c.term, c.estimate);
          summary += "; EB inner 95% (" + mlmm::format_g12(lo) + ", " + mlmm::format_g12(hi) + ")";
        }
        const auto rel = doc.avg_reliability.find(c.term);
        if (rel != doc.avg_reliability.end()) {
          summary += "; avg reliability " + mlmm::format_g12(rel->second);
        }
        summary += "\n";
      }
    }
  }

  const std::string dir = out_or_sibling(out, fit_paths.front());
  const std::string conjoint_path = (fs::path(dir) / "conjoint.csv").string();
  const std::string summary_path = (fs::path(dir) / "summary.md").string();
  mlmm::write_text_atomic(conjoint_path, mlmm::conjoint_to_csv(all_rows));
  mlmm::write_text_atomic(summary_path, summary);
  update_manifest(dir, [&](mlmm::Manifest& m) {
    m.file_hashes["conjoint.csv"] = mlmm::file_hash(conjoint_path);
    m.file_hashes["summary.md"] = mlmm::file_hash(summary_path);
  });
  std::printf("wrote %s and %s\n", conjoint_path.c_str(), summary_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo simulation studies with multilevel metamodels"};
  app.require_subcommand(1);

  std::string config_path, estimates_path, fit_path, out, metric = "power", weights = "none";
  std::string subset_expr, family = "auto", level = "condition";
  std::vector<std::string> fit_paths;
  std::uint64_t seed = 0;
  int reps = 0, preset = 1, B = 200;
  int threads = static_cast<int>(std::min(4u, std::max(1u, std::thread::hardware_concurrency())));
  bool force = false;

  auto* run = app.add_subcommand("run", "run a simulation study from a config file");
  run->add_option("--config", config_path, "study config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory (overrides config)");
  run->add_option("--seed", seed, "seed override");
  run->add_option("--reps", reps, "replication override");
  run->add_option("--threads", threads, "worker threads");

  auto* agg = app.add_subcommand("aggregate", "aggregate estimates to condition x estimator cells");
  agg->add_option("--estimates", estimates_path, "estimates.csv")->required()->check(CLI::ExistingFile);
  agg->add_option("--out", out, "output directory");
  agg->add_flag("--force", force, "skip manifest verification");

  auto* fit = app.add_subcommand("fit", "fit a metamodel preset to the estimates");
  fit->add_option("--estimates", estimates_path, "estimates.csv")->required()->check(CLI::ExistingFile);
  fit->add_option("--preset", preset, "1=RS mains, 2=RS interactions, 3=cluster-robust OLS, 4=RI")
      ->required()
      ->check(CLI::Range(1, 4));
  fit->add_option("--metric", metric, "performance metric")->required();
  fit->add_option("--weights", weights, "none | sqrt_n | inv_mc_var");
  fit->add_option("--subset", subset_expr, "condition subset, e.g. 'b1>0'");
  fit->add_option("--family", family, "auto | identity | sqrt");
  fit->add_option("--out", out, "output directory");
  fit->add_flag("--force", force, "skip manifest verification");

  auto* eb = app.add_subcommand("eb", "extract empirical Bayes records from a fit document");
  eb->add_option("--fit", fit_path, "fit_*.json")->required()->check(CLI::ExistingFile);
  eb->add_option("--out", out, "output directory");

  auto* boot = app.add_subcommand("bootstrap", "bootstrap metamodel SEs at a resampling level");
  boot->add_option("--estimates", estimates_path, "estimates.csv")->required()->check(CLI::ExistingFile);
  boot->add_option("--bootstrap-level", level, "record | dataset | condition");
  boot->add_option("--B", B, "bootstrap replicates");
  boot->add_option("--metric", metric, "metric to bootstrap");
  boot->add_option("--seed", seed, "bootstrap seed");
  boot->add_option("--out", out, "output directory");
  boot->add_flag("--force", force, "skip manifest verification");

  auto* rep = app.add_subcommand("report", "conjoint table and summary across fitted metrics");
  rep->add_option("--fit", fit_paths, "fit document(s)")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, out, seed, reps, threads);
    if (agg->parsed()) return cmd_aggregate(estimates_path, out, force);
    if (fit->parsed()) return cmd_fit(estimates_path, preset, metric, weights, subset_expr, family,
                                      out, force);
    if (eb->parsed()) return cmd_eb(fit_path, out);
    if (boot->parsed()) return cmd_bootstrap(estimates_path, level, B, metric, seed, out, force);
    if (rep->parsed()) return cmd_report(fit_paths, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

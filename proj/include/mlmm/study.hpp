#pragma once

// The built-in simulation study: a factorial grid of RCT data-generating
// conditions, three treatment-effect estimators fit to every simulated
// dataset, and the long-format estimate table the metamodels consume.
//
// Data-generating process for one dataset:
//   x ~ N(0,1),  t ~ Bernoulli(prop_treated),
//   y = b1*t + b2*x + b3*t*x + e,  e ~ N(0, 1 - b2^2),
// so the control-arm outcome has unit variance and b2 is exactly the
// control-group covariate-outcome correlation.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "mlmm/prng.hpp"
#include "mlmm/regression.hpp"
#include "mlmm/stats.hpp"

namespace mlmm {

struct SimCondition {
  int condition_id = -1;
  int n = 0;
  double b1 = 0.0;            // true ATE, outcome-SD units
  double prop_treated = 0.5;  // fraction assigned to treatment
  double b2 = 0.0;            // control-group covariate-outcome correlation
  double b3 = 0.0;            // treatment x covariate interaction

  void validate() const {
    if (n < 4) throw std::invalid_argument("condition: n must be >= 4, got " + std::to_string(n));
    if (!(prop_treated > 0.0 && prop_treated < 1.0)) {
      throw std::invalid_argument("condition: prop_treated must lie in (0,1), got " +
                                  format_g12(prop_treated));
    }
    if (!(b2 * b2 < 1.0)) {
      throw std::invalid_argument("condition: b2 must satisfy b2^2 < 1, got " + format_g12(b2));
    }
  }
};

struct GridSpec {
  std::vector<double> n;
  std::vector<double> b1;
  std::vector<double> prop_treated;
  std::vector<double> b2;
  std::vector<double> b3;
};

// Full Cartesian product in row-major order of the declared factor order
// (n, b1, prop_treated, b2, b3); the last factor varies fastest.
inline std::vector<SimCondition> expand_grid(const GridSpec& g) {
  const struct {
    const char* name;
    const std::vector<double>* values;
  } factors[] = {{"n", &g.n},
                 {"b1", &g.b1},
                 {"prop_treated", &g.prop_treated},
                 {"b2", &g.b2},
                 {"b3", &g.b3}};
  for (const auto& f : factors) {
    if (f.values->empty()) {
      throw std::invalid_argument(std::string("expand_grid: factor ") + f.name + " has no values");
    }
  }
  std::vector<SimCondition> out;
  int id = 0;
  for (double n : g.n) {
    for (double b1 : g.b1) {
      for (double p : g.prop_treated) {
        for (double b2 : g.b2) {
          for (double b3 : g.b3) {
            SimCondition c;
            c.condition_id = id++;
            c.n = static_cast<int>(std::llround(n));
            c.b1 = b1;
            c.prop_treated = p;
            c.b2 = b2;
            c.b3 = b3;
            try {
              c.validate();
            } catch (const std::invalid_argument& e) {
              throw std::invalid_argument(std::string("expand_grid: ") + e.what());
            }
            out.push_back(c);
          }
        }
      }
    }
  }
  return out;
}

struct Dataset {
  int condition_id = -1;
  int replication_id = -1;
  Eigen::VectorXd y;
  Eigen::VectorXd x;
  Eigen::VectorXd t;  // 0/1
};

// Deterministic given (seed, condition_id, replication_id). Draw order is
// fixed: all covariates, then treatment assignments (redrawn wholesale while
// an arm is empty, at most 100 attempts), then residuals.
inline Dataset generate_dataset(const SimCondition& cond, std::uint64_t seed, int replication_id) {
  cond.validate();
  RngStream rng(seed, static_cast<std::uint32_t>(cond.condition_id),
                static_cast<std::uint32_t>(replication_id));
  const int n = cond.n;
  Dataset d;
  d.condition_id = cond.condition_id;
  d.replication_id = replication_id;
  d.x.resize(n);
  d.t.resize(n);
  d.y.resize(n);

  for (int i = 0; i < n; ++i) d.x(i) = rng.normal();

  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    int treated = 0;
    for (int i = 0; i < n; ++i) {
      d.t(i) = rng.bernoulli(cond.prop_treated) ? 1.0 : 0.0;
      treated += static_cast<int>(d.t(i));
    }
    ok = treated > 0 && treated < n;
  }
  if (!ok) {
    throw std::runtime_error("generate_dataset: could not draw a nonempty assignment in 100 "
                             "attempts (condition " +
                             std::to_string(cond.condition_id) + ")");
  }

  const double resid_sd = std::sqrt(1.0 - cond.b2 * cond.b2);
  for (int i = 0; i < n; ++i) {
    const double e = resid_sd * rng.normal();
    d.y(i) = cond.b1 * d.t(i) + cond.b2 * d.x(i) + cond.b3 * d.t(i) * d.x(i) + e;
  }
  return d;
}

enum class Estimator { unadjusted, adjusted, interacted };

inline const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::unadjusted: return "unadjusted";
    case Estimator::adjusted: return "adjusted";
    case Estimator::interacted: return "interacted";
  }
  return "?";
}

inline Estimator estimator_from_string(const std::string& s) {
  if (s == "unadjusted") return Estimator::unadjusted;
  if (s == "adjusted") return Estimator::adjusted;
  if (s == "interacted") return Estimator::interacted;
  throw std::invalid_argument("unknown estimator '" + s + "'");
}

struct EstimateRecord {
  int condition_id = -1;
  int dataset_id = -1;
  Estimator estimator = Estimator::unadjusted;
  double ate_hat = 0.0;
  double se_hat = 0.0;
  double p_value = 1.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double error = 0.0;
  double sq_error = 0.0;
  int reject = 0;
  int covered = 0;
  int flag = 0;  // 1 = estimation failed; metric fields are not meaningful
};

class estimation_error : public std::runtime_error {
 public:
  estimation_error(const std::string& msg, int condition_id, int replication_id)
      : std::runtime_error(msg), condition_id(condition_id), replication_id(replication_id) {}
  int condition_id;
  int replication_id;
};

// OLS fit of one estimator; ate_hat is the treatment coefficient, inference
// from the t distribution with residual df. The p-value is the upper-tail
// probability for the directional null (rejection counts evidence that the
// ATE is positive); the CI is the usual two-sided 95% interval. The
// interacted design centers x at its sample mean so the treatment
// coefficient is the ATE.
inline EstimateRecord fit_estimator(const Dataset& d, Estimator kind) {
  const Eigen::Index n = d.y.size();
  if ((d.t.array() > 0.5).count() == 0 || (d.t.array() < 0.5).count() == 0) {
    throw estimation_error("fit_estimator: an arm is empty", d.condition_id, d.replication_id);
  }

  Eigen::MatrixXd X;
  std::vector<std::string> names;
  switch (kind) {
    case Estimator::unadjusted:
      X.resize(n, 2);
      X.col(0).setOnes();
      X.col(1) = d.t;
      names = {"intercept", "t"};
      break;
    case Estimator::adjusted:
      X.resize(n, 3);
      X.col(0).setOnes();
      X.col(1) = d.t;
      X.col(2) = d.x;
      names = {"intercept", "t", "x"};
      break;
    case Estimator::interacted: {
      const double xbar = d.x.mean();
      X.resize(n, 4);
      X.col(0).setOnes();
      X.col(1) = d.t;
      X.col(2) = d.x.array() - xbar;
      X.col(3) = d.t.array() * (d.x.array() - xbar);
      names = {"intercept", "t", "xc", "t:xc"};
      break;
    }
  }

  RegressionFit fit;
  try {
    fit = ols_fit(X, d.y, names);
  } catch (const rank_deficient_error& e) {
    throw estimation_error(std::string("fit_estimator: ") + e.what(), d.condition_id,
                           d.replication_id);
  }

  EstimateRecord rec;
  rec.condition_id = d.condition_id;
  rec.estimator = kind;
  rec.ate_hat = fit.beta(1);
  rec.se_hat = fit.se(1);
  const double tstat = rec.ate_hat / rec.se_hat;
  rec.p_value = upper_tail_p_t(tstat, fit.df);
  const double crit = t_critical(fit.df, 0.975);
  rec.ci_lo = rec.ate_hat - crit * rec.se_hat;
  rec.ci_hi = rec.ate_hat + crit * rec.se_hat;
  return rec;
}

// Fills the estimate-level metric fields from the record and the truth.
// Binary metrics are stored 0/1; the x100 scaling happens at analysis time.
inline EstimateRecord compute_metrics(EstimateRecord rec, const SimCondition& cond) {
  rec.error = rec.ate_hat - cond.b1;
  rec.sq_error = rec.error * rec.error;
  rec.reject = rec.p_value < 0.05 ? 1 : 0;
  rec.covered = (rec.ci_lo <= cond.b1 && cond.b1 <= rec.ci_hi) ? 1 : 0;
  return rec;
}

struct EstimateTable {
  std::vector<SimCondition> conditions;
  int reps = 0;
  std::uint64_t seed = 0;
  std::vector<Estimator> estimators;
  std::vector<EstimateRecord> records;  // sorted by (condition, dataset, estimator)

  const SimCondition& condition(int id) const { return conditions[static_cast<std::size_t>(id)]; }
};

struct StudyRunSpec {
  uint64_t seed = 1;
  int reps = 1;
  std::vector<Estimator> estimators = {Estimator::unadjusted, Estimator::adjusted,
                                       Estimator::interacted};
};

// Runs reps datasets per condition and every estimator on each. Each
// (condition, replication) task owns its RNG substream and its output slots,
// so the result is a pure function of (grid, spec) regardless of the worker
// count. dataset_id = condition_id * reps + replication.
inline EstimateTable run_study(const std::vector<SimCondition>& conditions, const StudyRunSpec& spec,
                               int threads = 1) {
  if (spec.reps < 1) throw std::invalid_argument("run_study: reps must be >= 1");
  if (spec.estimators.empty()) throw std::invalid_argument("run_study: no estimators");
  if (conditions.empty()) throw std::invalid_argument("run_study: no conditions");

  EstimateTable table;
  table.conditions = conditions;
  table.reps = spec.reps;
  table.seed = spec.seed;
  table.estimators = spec.estimators;
  const std::size_t n_est = spec.estimators.size();
  const std::size_t n_tasks = conditions.size() * static_cast<std::size_t>(spec.reps);
  table.records.resize(n_tasks * n_est);

  auto run_task = [&](std::size_t task) {
    const std::size_t k = task / static_cast<std::size_t>(spec.reps);
    const int rep = static_cast<int>(task % static_cast<std::size_t>(spec.reps));
    const SimCondition& cond = conditions[k];
    const Dataset d = generate_dataset(cond, spec.seed, rep);
    const int dataset_id = cond.condition_id * spec.reps + rep;
    for (std::size_t e = 0; e < n_est; ++e) {
      EstimateRecord rec;
      try {
        rec = compute_metrics(fit_estimator(d, spec.estimators[e]), cond);
      } catch (const estimation_error&) {
        rec.condition_id = cond.condition_id;
        rec.estimator = spec.estimators[e];
        rec.flag = 1;
        rec.ate_hat = rec.se_hat = rec.p_value = rec.ci_lo = rec.ci_hi = rec.error = rec.sq_error =
            std::numeric_limits<double>::quiet_NaN();
      }
      rec.dataset_id = dataset_id;
      table.records[task * n_est + e] = rec;
    }
  };

  if (threads <= 1) {
    for (std::size_t task = 0; task < n_tasks; ++task) run_task(task);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t task = next.fetch_add(1); task < n_tasks; task = next.fetch_add(1)) {
          run_task(task);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  return table;
}

}  // namespace mlmm

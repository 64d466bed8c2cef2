#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <numeric>

#include "mlmm/lmm.hpp"
#include "mlmm/prng.hpp"
#include "mlmm/regression.hpp"

using namespace mlmm;

namespace {

// Independent dense-matrix REML oracle:
//   V = Z Sigma_rel Z' + diag(1/w),
//   -2 l_R = log|V| + log|X'V^-1 X| + (n-p)(1 + log(2 pi r2/(n-p)))
// with r2 the GLS residual quadratic form. Everything is built with dense
// inverses, nothing shared with the engine's penalized least squares path.
double dense_reml_deviance(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z,
                           const Eigen::MatrixXd& sigma_rel, const Eigen::VectorXd& y,
                           const Eigen::VectorXd* w = nullptr) {
  const auto n = X.rows();
  const auto p = X.cols();
  Eigen::MatrixXd V = Z * sigma_rel * Z.transpose();
  for (Eigen::Index i = 0; i < n; ++i) V(i, i) += w ? 1.0 / (*w)(i) : 1.0;
  const Eigen::MatrixXd Vinv = V.inverse();
  const Eigen::MatrixXd xtvx = X.transpose() * Vinv * X;
  const Eigen::VectorXd beta = xtvx.inverse() * (X.transpose() * Vinv * y);
  const Eigen::VectorXd r = y - X * beta;
  const double r2 = r.transpose() * Vinv * r;
  const double df = static_cast<double>(n - p);
  const double logdet_v = std::log(V.determinant());
  const double logdet_x = std::log(xtvx.determinant());
  return logdet_v + logdet_x + df * (1.0 + std::log(2.0 * M_PI * r2 / df));
}

// Dense Z for a RandomSpec, mirroring the declared structure.
Eigen::MatrixXd dense_z(const RandomSpec& spec, Eigen::Index n) {
  long q = 0;
  for (const auto& f : spec.factors) q += static_cast<long>(f.n_groups) * f.n_terms();
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, q);
  long offset = 0;
  for (const auto& f : spec.factors) {
    const int t = f.n_terms();
    for (Eigen::Index i = 0; i < n; ++i) {
      const long base = offset + static_cast<long>(f.group[static_cast<std::size_t>(i)]) * t;
      for (int j = 0; j < t; ++j) Z(i, base + j) = f.terms(i, j);
    }
    offset += static_cast<long>(f.n_groups) * t;
  }
  return Z;
}

// Block-diagonal relative covariance from theta, built independently.
Eigen::MatrixXd dense_sigma_rel(const RandomSpec& spec, const Eigen::VectorXd& theta) {
  long q = 0;
  for (const auto& f : spec.factors) q += static_cast<long>(f.n_groups) * f.n_terms();
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(q, q);
  long offset = 0;
  int idx = 0;
  for (const auto& f : spec.factors) {
    const int t = f.n_terms();
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(t, t);
    if (f.full_cov) {
      for (int j = 0; j < t; ++j) {
        T(j, j) = std::exp(theta(idx++));
        for (int i = j + 1; i < t; ++i) T(i, j) = theta(idx++);
      }
    } else {
      for (int j = 0; j < t; ++j) T(j, j) = std::exp(theta(idx++));
    }
    const Eigen::MatrixXd block = T * T.transpose();
    for (int g = 0; g < f.n_groups; ++g) {
      S.block(offset + static_cast<long>(g) * t, offset + static_cast<long>(g) * t, t, t) = block;
    }
    offset += static_cast<long>(f.n_groups) * t;
  }
  return S;
}

RandomSpec one_way_spec(const std::vector<int>& groups, int n_groups) {
  RandomFactor f;
  f.name = "group";
  f.group = groups;
  f.n_groups = n_groups;
  f.term_names = {"intercept"};
  f.terms = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(groups.size()), 1);
  f.track_eb = true;
  for (int g = 0; g < n_groups; ++g) f.group_labels.push_back(std::to_string(g));
  RandomSpec spec;
  spec.factors.push_back(std::move(f));
  return spec;
}

struct OneWayData {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  RandomSpec spec;
};

OneWayData balanced_one_way() {
  OneWayData d;
  d.X = Eigen::MatrixXd::Ones(6, 1);
  d.y.resize(6);
  d.y << 1, 2, 3, 2, 3, 4;
  d.spec = one_way_spec({0, 0, 0, 1, 1, 1}, 2);
  return d;
}

// Nested two-factor layout on 24 rows: 4 conditions x 3 datasets x 2 rows,
// dataset random intercept plus a 2-term full-covariance condition factor.
struct NestedData {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  RandomSpec spec;
};

NestedData nested_synthetic(std::uint64_t seed) {
  const int K = 4, J = 3, m = 2;
  const int n = K * J * m;
  RngStream rng(seed, 0, 0);
  NestedData d;
  d.X.resize(n, 2);
  d.y.resize(n);
  std::vector<int> ds_group, cond_group;
  Eigen::MatrixXd cond_terms(n, 2);
  int row = 0;
  for (int k = 0; k < K; ++k) {
    for (int j = 0; j < J; ++j) {
      for (int i = 0; i < m; ++i) {
        const double dummy = i;  // one row per level within dataset
        d.X(row, 0) = 1.0;
        d.X(row, 1) = dummy;
        cond_terms(row, 0) = 1.0;
        cond_terms(row, 1) = dummy;
        ds_group.push_back(k * J + j);
        cond_group.push_back(k);
        d.y(row) = 0.4 * dummy + rng.normal();
        ++row;
      }
    }
  }

  RandomFactor ds;
  ds.name = "dataset";
  ds.group = ds_group;
  ds.n_groups = K * J;
  ds.term_names = {"intercept"};
  ds.terms = Eigen::MatrixXd::Ones(n, 1);

  RandomFactor cond;
  cond.name = "condition";
  cond.group = cond_group;
  cond.n_groups = K;
  cond.term_names = {"intercept", "d"};
  cond.terms = cond_terms;
  cond.full_cov = true;
  for (int g = 0; g < K; ++g) cond.group_labels.push_back(std::to_string(g));

  d.spec.factors.push_back(std::move(ds));
  d.spec.factors.push_back(std::move(cond));
  return d;
}

}  // namespace

TEST(RemlDeviance, MatchesDenseOracleOneWay) {
  const OneWayData d = balanced_one_way();
  LmmProblem problem(d.X, {"intercept"}, d.spec, d.y);
  const Eigen::MatrixXd Z = dense_z(d.spec, d.y.size());

  const double analytic = std::log(std::sqrt(1.0 / 6.0));
  for (double th : {analytic, 0.0, -1.0, 0.7}) {
    Eigen::VectorXd theta(1);
    theta << th;
    const double engine = profiled_reml_deviance(problem, theta);
    const double oracle = dense_reml_deviance(d.X, Z, dense_sigma_rel(d.spec, theta), d.y);
    EXPECT_NEAR(engine, oracle, 1e-8) << "theta=" << th;
  }
}

TEST(RemlDeviance, MatchesDenseOracleNestedFullCovariance) {
  const NestedData d = nested_synthetic(17ull);
  LmmProblem problem(d.X, {"intercept", "d"}, d.spec, d.y);
  const Eigen::MatrixXd Z = dense_z(d.spec, d.y.size());

  const std::vector<Eigen::Vector4d> thetas = {
      {0.0, 0.0, 0.0, 0.0}, {-0.5, 0.3, 0.2, -0.9}, {0.4, -0.2, -0.6, 0.1}};
  for (const auto& t4 : thetas) {
    const Eigen::VectorXd theta = t4;
    const double engine = profiled_reml_deviance(problem, theta);
    const double oracle = dense_reml_deviance(d.X, Z, dense_sigma_rel(d.spec, theta), d.y);
    EXPECT_NEAR(engine, oracle, 1e-8);
  }
}

TEST(RemlDeviance, MatchesDenseOracleWithWeights) {
  const OneWayData d = balanced_one_way();
  Eigen::VectorXd w(6);
  w << 0.5, 1.0, 2.0, 1.5, 0.8, 1.2;
  LmmProblem problem(d.X, {"intercept"}, d.spec, d.y, &w);
  const Eigen::MatrixXd Z = dense_z(d.spec, d.y.size());
  Eigen::VectorXd theta(1);
  theta << -0.3;
  const double engine = profiled_reml_deviance(problem, theta);
  const double oracle = dense_reml_deviance(d.X, Z, dense_sigma_rel(d.spec, theta), d.y, &w);
  // engine subtracts sum(log w) (weighted Gaussian density), the oracle folds
  // the weights into V, so the criteria agree as stated
  EXPECT_NEAR(engine, oracle, 1e-8);
}

TEST(RemlDeviance, VanishingVarianceApproachesOlsCriterion) {
  const NestedData d = nested_synthetic(23ull);
  LmmProblem problem(d.X, {"intercept", "d"}, d.spec, d.y);
  Eigen::VectorXd theta(4);
  theta << -20.0, -20.0, 0.0, -20.0;

  const RegressionFit ols = ols_fit(d.X, d.y);
  const double df = static_cast<double>(d.y.size() - 2);
  const double rss = ols.residuals.squaredNorm();
  const double ols_criterion = std::log((d.X.transpose() * d.X).determinant()) +
                               df * (1.0 + std::log(2.0 * M_PI * rss / df));
  EXPECT_NEAR(profiled_reml_deviance(problem, theta), ols_criterion, 1e-6);
}

TEST(RemlDeviance, RowPermutationInvariant) {
  const NestedData d = nested_synthetic(29ull);
  const auto n = d.y.size();
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng(5ull, 0, 0);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform() * i)]);
  }
  NestedData shuffled = d;
  for (Eigen::Index i = 0; i < n; ++i) {
    shuffled.X.row(i) = d.X.row(perm[static_cast<std::size_t>(i)]);
    shuffled.y(i) = d.y(perm[static_cast<std::size_t>(i)]);
    for (std::size_t fi = 0; fi < d.spec.factors.size(); ++fi) {
      shuffled.spec.factors[fi].group[static_cast<std::size_t>(i)] =
          d.spec.factors[fi].group[perm[static_cast<std::size_t>(i)]];
      shuffled.spec.factors[fi].terms.row(i) =
          d.spec.factors[fi].terms.row(perm[static_cast<std::size_t>(i)]);
    }
  }
  LmmProblem a(d.X, {"intercept", "d"}, d.spec, d.y);
  LmmProblem b(shuffled.X, {"intercept", "d"}, shuffled.spec, shuffled.y);
  Eigen::VectorXd theta(4);
  theta << -0.2, 0.1, -0.4, 0.05;
  EXPECT_NEAR(a.deviance(theta), b.deviance(theta), 1e-8);
}

TEST(RemlDeviance, NonFiniteThetaIsDomainError) {
  const OneWayData d = balanced_one_way();
  LmmProblem problem(d.X, {"intercept"}, d.spec, d.y);
  Eigen::VectorXd theta(1);
  theta << std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(problem.deviance(theta), std::domain_error);
}

TEST(FitLmm, BalancedOneWayClosedForm) {
  const OneWayData d = balanced_one_way();
  const MixedFit fit = fit_lmm(d.X, {"intercept"}, d.spec, d.y);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.beta(0), 2.5, 1e-8);
  EXPECT_NEAR(fit.sigma2, 1.0, 1e-6);
  ASSERT_EQ(fit.varcomps.size(), 1u);
  EXPECT_NEAR(fit.varcomps[0].psi2[0], 1.0 / 6.0, 1e-6);
}

TEST(FitLmm, OptimumBeatsReferenceThetas) {
  const NestedData d = nested_synthetic(31ull);
  const MixedFit fit = fit_lmm(d.X, {"intercept", "d"}, d.spec, d.y);
  LmmProblem problem(d.X, {"intercept", "d"}, d.spec, d.y);
  const double at_identity = problem.deviance(Eigen::VectorXd::Zero(4));
  Eigen::VectorXd near_zero(4);
  near_zero << -20.0, -20.0, 0.0, -20.0;
  EXPECT_LE(fit.deviance, at_identity + 1e-9);
  EXPECT_LE(fit.deviance, problem.deviance(near_zero) + 1e-9);
}

TEST(FitLmm, FiniteDifferenceGradientSmallAtOptimum) {
  const OneWayData d = balanced_one_way();
  const MixedFit fit = fit_lmm(d.X, {"intercept"}, d.spec, d.y);
  LmmProblem problem(d.X, {"intercept"}, d.spec, d.y);
  const double h = 1e-5;
  for (int j = 0; j < fit.theta.size(); ++j) {
    Eigen::VectorXd tp = fit.theta, tm = fit.theta;
    tp(j) += h;
    tm(j) -= h;
    const double g = (problem.deviance(tp) - problem.deviance(tm)) / (2.0 * h);
    EXPECT_LT(std::fabs(g), 1e-3);
  }
}

TEST(FitLmm, IdenticalGroupMeansHitBoundary) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(6, 1);
  Eigen::VectorXd y(6);
  y << 1, 2, 3, 1, 2, 3;
  const RandomSpec spec = one_way_spec({0, 0, 0, 1, 1, 1}, 2);
  const MixedFit fit = fit_lmm(X, {"intercept"}, spec, y);
  EXPECT_TRUE(fit.boundary);
  EXPECT_DOUBLE_EQ(fit.varcomps[0].psi2[0], 0.0);
  const RegressionFit ols = ols_fit(X, y);
  EXPECT_NEAR(fit.beta(0), ols.beta(0), 1e-8);
  EXPECT_NEAR(fit.se(0), std::sqrt(ols.cov(0, 0)), 1e-8);
}

TEST(FitLmm, FixedZeroVarianceReproducesOls) {
  const NestedData d = nested_synthetic(37ull);
  LmmOptions opt;
  opt.optimize = false;
  Eigen::VectorXd theta(4);
  theta << -20.0, -20.0, 0.0, -20.0;
  opt.start_theta = theta;
  const MixedFit fit = fit_lmm(d.X, {"intercept", "d"}, d.spec, d.y, nullptr, opt);
  const RegressionFit ols = ols_fit(d.X, d.y);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(fit.beta(j), ols.beta(j), 1e-8);
    EXPECT_NEAR(fit.se(j), std::sqrt(ols.cov(j, j)), 1e-8);
  }
}

TEST(FitLmm, VarianceDecompositionOnBalancedTwoLevel) {
  const int K = 30, m = 10;
  const int n = K * m;
  RngStream rng(41ull, 0, 0);
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd y(n);
  std::vector<int> groups;
  int row = 0;
  for (int k = 0; k < K; ++k) {
    const double u = rng.normal();  // psi = 1
    for (int i = 0; i < m; ++i) {
      const double dummy = i < m / 2 ? 0.0 : 1.0;  // balanced within group
      X(row, 0) = 1.0;
      X(row, 1) = dummy;
      y(row) = 0.5 * dummy + u + rng.normal();
      groups.push_back(k);
      ++row;
    }
  }
  const RegressionFit ols = ols_fit(X, y);
  const MixedFit ri = fit_lmm(X, {"intercept", "d"}, one_way_spec(groups, K), y);
  const double total = ri.sigma2 + ri.varcomps[0].psi2[0];
  EXPECT_LT(std::fabs(ols.sigma2 - total) / ols.sigma2, 0.02);
  EXPECT_LE(ri.se(1), std::sqrt(ols.cov(1, 1)) + 1e-8);
}

TEST(Blup, ClosedFormShrinkageAtAnalyticTheta) {
  const OneWayData d = balanced_one_way();
  LmmOptions opt;
  opt.optimize = false;
  Eigen::VectorXd theta(1);
  theta << std::log(std::sqrt(1.0 / 6.0));
  opt.start_theta = theta;
  const MixedFit fit = fit_lmm(d.X, {"intercept"}, d.spec, d.y, nullptr, opt);
  const auto eb = blup_estimates(fit);
  ASSERT_EQ(eb.size(), 2u);
  // raw deviations -0.5, +0.5 shrunk by psi^2/(psi^2 + sigma^2/3) = 1/3
  EXPECT_NEAR(eb[0].deviation, -1.0 / 6.0, 1e-10);
  EXPECT_NEAR(eb[1].deviation, 1.0 / 6.0, 1e-10);
  // conditional variance (1/psi^2 + m/sigma^2)^-1 = 1/9
  EXPECT_NEAR(eb[0].cond_sd, std::sqrt(1.0 / 9.0), 1e-10);
  // reliability psi^2/(condvar + psi^2) = (1/6)/(1/9 + 1/6) = 0.6
  EXPECT_NEAR(eb[0].reliability, 0.6, 1e-10);
  EXPECT_NEAR(eb[0].composed, 2.5 - 1.0 / 6.0, 1e-8);
}

TEST(Blup, FittedOneWayShrinkage) {
  const OneWayData d = balanced_one_way();
  const MixedFit fit = fit_lmm(d.X, {"intercept"}, d.spec, d.y);
  const auto eb = blup_estimates(fit);
  ASSERT_EQ(eb.size(), 2u);
  EXPECT_NEAR(eb[0].deviation, -1.0 / 6.0, 1e-6);
  EXPECT_NEAR(eb[1].deviation, 1.0 / 6.0, 1e-6);
}

TEST(Blup, BoundaryVarianceGivesZeroDeviationsAndReliability) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(6, 1);
  Eigen::VectorXd y(6);
  y << 1, 2, 3, 1, 2, 3;
  const MixedFit fit = fit_lmm(X, {"intercept"}, one_way_spec({0, 0, 0, 1, 1, 1}, 2), y);
  for (const auto& rec : blup_estimates(fit)) {
    EXPECT_DOUBLE_EQ(rec.deviation, 0.0);
    EXPECT_DOUBLE_EQ(rec.reliability, 0.0);
  }
}

TEST(Blup, ShrinkageAndDispersionProperties) {
  const int K = 12, m = 5;
  RngStream rng(43ull, 0, 0);
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(K * m, 1);
  Eigen::VectorXd y(K * m);
  std::vector<int> groups;
  std::vector<double> group_means(K, 0.0);
  int row = 0;
  for (int k = 0; k < K; ++k) {
    const double u = 0.8 * rng.normal();
    for (int i = 0; i < m; ++i) {
      y(row) = u + rng.normal();
      group_means[static_cast<std::size_t>(k)] += y(row);
      groups.push_back(k);
      ++row;
    }
  }
  for (auto& g : group_means) g /= m;
  const double grand = y.mean();
  const MixedFit fit = fit_lmm(X, {"intercept"}, one_way_spec(groups, K), y);
  const auto eb = blup_estimates(fit);
  ASSERT_EQ(eb.size(), static_cast<std::size_t>(K));
  double mean_dev = 0.0, var_dev = 0.0;
  for (int k = 0; k < K; ++k) {
    const double raw = group_means[static_cast<std::size_t>(k)] - grand;
    EXPECT_LE(std::fabs(eb[static_cast<std::size_t>(k)].deviation), std::fabs(raw) + 1e-12);
    EXPECT_GE(eb[static_cast<std::size_t>(k)].reliability, 0.0);
    EXPECT_LE(eb[static_cast<std::size_t>(k)].reliability, 1.0);
    mean_dev += eb[static_cast<std::size_t>(k)].deviation;
  }
  mean_dev /= K;
  for (int k = 0; k < K; ++k) {
    const double c = eb[static_cast<std::size_t>(k)].deviation - mean_dev;
    var_dev += c * c;
  }
  var_dev /= (K - 1);
  EXPECT_LE(var_dev, fit.varcomps[0].psi2[0] + 1e-12);
  // EB deviations center on zero when the fixed intercept is in the model
  double sd_dev = std::sqrt(var_dev);
  EXPECT_LT(std::fabs(mean_dev), 1e-6 * std::max(sd_dev, 1e-12));
}

TEST(FitLmm, EstimatesPermutationInvariant) {
  const NestedData d = nested_synthetic(47ull);
  const MixedFit a = fit_lmm(d.X, {"intercept", "d"}, d.spec, d.y);

  const auto n = d.y.size();
  NestedData rev = d;
  for (Eigen::Index i = 0; i < n; ++i) {
    rev.X.row(i) = d.X.row(n - 1 - i);
    rev.y(i) = d.y(n - 1 - i);
    for (std::size_t fi = 0; fi < d.spec.factors.size(); ++fi) {
      rev.spec.factors[fi].group[static_cast<std::size_t>(i)] =
          d.spec.factors[fi].group[static_cast<std::size_t>(n - 1 - i)];
      rev.spec.factors[fi].terms.row(i) = d.spec.factors[fi].terms.row(n - 1 - i);
    }
  }
  const MixedFit b = fit_lmm(rev.X, {"intercept", "d"}, rev.spec, rev.y);
  EXPECT_LT((a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(a.sigma2, b.sigma2, 1e-6);
  for (std::size_t fi = 0; fi < a.varcomps.size(); ++fi) {
    for (std::size_t j = 0; j < a.varcomps[fi].psi2.size(); ++j) {
      EXPECT_NEAR(a.varcomps[fi].psi2[j], b.varcomps[fi].psi2[j], 1e-5);
    }
  }
}

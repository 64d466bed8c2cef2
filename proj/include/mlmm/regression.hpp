#pragma once

// Dense least squares shared by the within-dataset estimators and the
// aggregated metamodels: OLS/WLS via column-pivoted QR, plus CR1
// cluster-robust covariance.

#include <Eigen/Dense>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlmm {

class rank_deficient_error : public std::runtime_error {
 public:
  rank_deficient_error(const std::string& msg, std::vector<std::string> columns)
      : std::runtime_error(msg), dependent_columns(std::move(columns)) {}
  std::vector<std::string> dependent_columns;
};

struct RegressionFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;  // classical sigma^2 (X'WX)^-1
  Eigen::VectorXd residuals;
  double sigma2 = 0.0;
  double df = 0.0;  // residual degrees of freedom

  double se(int j) const { return std::sqrt(cov(j, j)); }
};

// Weighted least squares; weights are precisions (unit weights = OLS).
// Throws rank_deficient_error naming the dependent columns.
inline RegressionFit ols_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             const std::vector<std::string>& names = {},
                             const Eigen::VectorXd* weights = nullptr) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  if (y.size() != n) throw std::invalid_argument("ols_fit: y length mismatch");
  if (n <= p) throw std::invalid_argument("ols_fit: need more rows than columns");

  Eigen::VectorXd sw;
  Eigen::MatrixXd Xw = X;
  Eigen::VectorXd yw = y;
  if (weights != nullptr) {
    if (weights->size() != n) throw std::invalid_argument("ols_fit: weight length mismatch");
    if ((weights->array() <= 0.0).any()) throw std::invalid_argument("ols_fit: weights must be positive");
    sw = weights->array().sqrt();
    Xw.array().colwise() *= sw.array();
    yw.array() *= sw.array();
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    std::vector<std::string> dep;
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < p; ++k) {
      const Eigen::Index col = perm(k);
      dep.push_back(col < static_cast<Eigen::Index>(names.size())
                        ? names[static_cast<std::size_t>(col)]
                        : "column " + std::to_string(col));
    }
    std::string msg = "ols_fit: rank-deficient design; dependent columns:";
    for (const auto& s : dep) msg += " " + s;
    throw rank_deficient_error(msg, std::move(dep));
  }

  RegressionFit fit;
  fit.names = names;
  if (fit.names.empty()) {
    for (Eigen::Index j = 0; j < p; ++j) fit.names.push_back("column " + std::to_string(j));
  }
  fit.beta = qr.solve(yw);
  fit.residuals = y - X * fit.beta;
  fit.df = static_cast<double>(n - p);

  double wrss = 0.0;
  if (weights != nullptr) {
    wrss = (weights->array() * fit.residuals.array().square()).sum();
  } else {
    wrss = fit.residuals.squaredNorm();
  }
  fit.sigma2 = wrss / fit.df;

  // (X'WX)^-1 from the triangular factor.
  Eigen::MatrixXd Rinv =
      qr.matrixR().topLeftCorner(p, p).template triangularView<Eigen::Upper>().solve(
          Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd XtXinv = Rinv * Rinv.transpose();
  const auto P = qr.colsPermutation();
  fit.cov = fit.sigma2 * (P * XtXinv * P.transpose());
  return fit;
}

// CR1 cluster-robust covariance (lm_robust's "stata" flavor):
//   G/(G-1) * (n-1)/(n-p) * (X'WX)^-1 [sum_g s_g s_g'] (X'WX)^-1,
// where s_g = X_g' W_g e_g. With every row its own cluster this reduces to
// HC1.
inline Eigen::MatrixXd cluster_robust_vcov(const RegressionFit& fit, const Eigen::MatrixXd& X,
                                           const std::vector<long>& cluster_ids,
                                           const Eigen::VectorXd* weights = nullptr) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  if (cluster_ids.empty()) throw std::invalid_argument("cluster_robust_vcov: empty cluster ids");
  if (static_cast<Eigen::Index>(cluster_ids.size()) != n) {
    throw std::invalid_argument("cluster_robust_vcov: cluster ids not aligned with rows");
  }

  std::map<long, Eigen::VectorXd> scores;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [it, inserted] = scores.try_emplace(cluster_ids[static_cast<std::size_t>(i)],
                                             Eigen::VectorXd::Zero(p));
    const double w = (weights != nullptr) ? (*weights)(i) : 1.0;
    it->second += X.row(i).transpose() * (w * fit.residuals(i));
  }
  const auto G = static_cast<double>(scores.size());
  if (G < 2.0) throw std::invalid_argument("cluster_robust_vcov: need at least 2 clusters");

  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (const auto& [id, s] : scores) meat += s * s.transpose();

  const Eigen::MatrixXd bread = fit.cov / fit.sigma2;  // (X'WX)^-1
  const double nn = static_cast<double>(n);
  const double scale = G / (G - 1.0) * (nn - 1.0) / (nn - static_cast<double>(p));
  Eigen::MatrixXd V = scale * bread * meat * bread;
  return 0.5 * (V + V.transpose());
}

}  // namespace mlmm

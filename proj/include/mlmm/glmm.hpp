#pragma once

// Gaussian GLMM with a square-root link for nonnegative responses (squared
// errors), fitted by penalized iteratively reweighted least squares: each
// outer iteration linearizes the link around the current eta and REML-fits
// the resulting weighted LMM, warm-starting theta from the previous round.

#include <Eigen/Dense>
#include <stdexcept>

#include "mlmm/lmm.hpp"

namespace mlmm {

struct GlmmOptions {
  double eta_tol = 1e-6;
  int max_outer = 200;
  double eta_floor = 1e-6;
  LmmOptions inner;        // budget for the first (cold) inner REML fit
  int inner_evals_after_first = 400;  // warm-started inner fits need far less
};

inline MixedFit fit_glmm_sqrt(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                              const RandomSpec& spec, const Eigen::VectorXd& y,
                              const GlmmOptions& opt = {}) {
  const Eigen::Index n = y.size();
  if ((y.array() < 0.0).any()) {
    throw std::invalid_argument("fit_glmm_sqrt: responses must be nonnegative");
  }

  const double ybar = std::max(y.mean(), opt.eta_floor * opt.eta_floor);
  Eigen::VectorXd eta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    eta(i) = std::sqrt(std::max(0.5 * (y(i) + ybar), opt.eta_floor * opt.eta_floor));
  }

  MixedFit fit;
  Eigen::VectorXd theta;
  bool have_theta = false;
  bool outer_converged = false;
  int outer = 0;

  for (outer = 0; outer < opt.max_outer; ++outer) {
    const Eigen::VectorXd z =
        eta.array() + (y.array() - eta.array().square()) / (2.0 * eta.array());
    const Eigen::VectorXd w = 4.0 * eta.array().square();

    LmmProblem problem(X, names, spec, z, &w);
    Eigen::VectorXd new_theta;
    NelderMeadResult nm;
    if (problem.theta_dim() == 0) {
      new_theta.resize(0);
      nm.converged = true;
    } else {
      const Eigen::VectorXd start = have_theta ? theta : Eigen::VectorXd::Zero(problem.theta_dim());
      const double step = have_theta ? 0.05 : 0.5;
      const int evals = have_theta ? opt.inner_evals_after_first : opt.inner.max_evals;
      const double tol = have_theta ? 1e-7 : opt.inner.rel_tol;
      auto objective = [&problem](const Eigen::VectorXd& th) {
        try {
          return problem.deviance(th);
        } catch (const std::runtime_error&) {
          return 1e300;
        }
      };
      nm = nelder_mead(objective, start, step, tol, evals);
      new_theta = nm.x;
    }
    const LmmProblem::Solution sol = problem.solve(new_theta);
    theta = new_theta;
    have_theta = true;

    Eigen::VectorXd eta_prop = X * sol.beta;
    if (problem.q() > 0) eta_prop += problem.fitted_random(sol);

    // Damp the update if it would carry eta below the floor.
    if (eta_prop.minCoeff() < opt.eta_floor) {
      double lambda = 1.0;
      Eigen::VectorXd step_vec = eta_prop - eta;
      while (lambda > 1e-4 && (eta + lambda * step_vec).minCoeff() < opt.eta_floor) lambda *= 0.5;
      eta_prop = eta + lambda * step_vec;
      eta_prop = eta_prop.array().max(opt.eta_floor);
    }

    const double rel = (eta_prop - eta).norm() / std::max(eta.norm(), 1e-12);
    eta = eta_prop;
    fit.evals += nm.evals;
    fit.iterations = outer + 1;
    if (rel < opt.eta_tol) {
      outer_converged = nm.converged || problem.theta_dim() == 0;
      LmmProblem::Solution final_sol = sol;
      if (problem.theta_dim() > 0) {
        auto objective = [&problem](const Eigen::VectorXd& th) { return problem.deviance(th); };
        const NelderMeadResult polished = quadratic_polish(objective, theta, sol.deviance, 4);
        fit.evals += polished.evals;
        theta = polished.x;
        final_sol = problem.solve(theta);
      }
      lmmdetail::fill_fit_from_solution(fit, problem, theta, final_sol);
      break;
    }
    if (outer == opt.max_outer - 1) {
      lmmdetail::fill_fit_from_solution(fit, problem, theta, sol);
    }
  }

  fit.converged = outer_converged;
  fit.family = "gaussian_sqrt";
  return fit;
}

}  // namespace mlmm

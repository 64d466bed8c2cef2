#pragma once

// Derivative-free simplex minimizer used for the REML criterion. Standard
// Nelder-Mead moves (reflect 1, expand 2, contract 1/2, shrink 1/2) with a
// relative function-value stopping rule.

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <vector>

namespace mlmm {

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = 0.0;
  int evals = 0;
  int iterations = 0;
  bool converged = false;
};

inline NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& fn,
                                    const Eigen::VectorXd& x0, double step, double rel_tol,
                                    int max_evals) {
  const int n = static_cast<int>(x0.size());
  NelderMeadResult res;
  if (n == 0) {
    res.x = x0;
    res.f = fn(x0);
    res.evals = 1;
    res.converged = true;
    return res;
  }

  struct Vertex {
    Eigen::VectorXd x;
    double f;
  };
  std::vector<Vertex> simplex;
  simplex.reserve(static_cast<std::size_t>(n) + 1);
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evals;
    return fn(x);
  };

  simplex.push_back({x0, eval(x0)});
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xi = x0;
    xi(i) += step;
    simplex.push_back({xi, eval(xi)});
  }
  auto by_f = [](const Vertex& a, const Vertex& b) { return a.f < b.f; };
  std::sort(simplex.begin(), simplex.end(), by_f);

  int iterations = 0;
  bool converged = false;
  while (evals < max_evals) {
    ++iterations;
    const double fbest = simplex.front().f;
    const double fworst = simplex.back().f;
    if (fworst - fbest <= rel_tol * (std::abs(fbest) + rel_tol)) {
      converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) centroid += simplex[static_cast<std::size_t>(i)].x;
    centroid /= static_cast<double>(n);

    const Vertex& worst = simplex.back();
    Eigen::VectorXd xr = centroid + (centroid - worst.x);
    const double fr = eval(xr);

    if (fr < simplex.front().f) {
      Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst.x);
      const double fe = eval(xe);
      simplex.back() = (fe < fr) ? Vertex{xe, fe} : Vertex{xr, fr};
    } else if (fr < simplex[static_cast<std::size_t>(n) - 1].f) {
      simplex.back() = {xr, fr};
    } else {
      const bool outside = fr < worst.f;
      Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                   : Eigen::VectorXd(centroid - 0.5 * (centroid - worst.x));
      const double fc = eval(xc);
      if (fc < std::min(fr, worst.f)) {
        simplex.back() = {xc, fc};
      } else {
        for (std::size_t i = 1; i < simplex.size(); ++i) {
          simplex[i].x = simplex[0].x + 0.5 * (simplex[i].x - simplex[0].x);
          simplex[i].f = eval(simplex[i].x);
        }
      }
    }
    std::sort(simplex.begin(), simplex.end(), by_f);
  }

  res.x = simplex.front().x;
  res.f = simplex.front().f;
  res.evals = evals;
  res.iterations = iterations;
  res.converged = converged;
  return res;
}

// Coordinate-wise parabolic refinement of a simplex solution. Near the
// optimum the criterion is locally quadratic, so a few sweeps of vertex
// steps sharpen the solution well past the simplex stopping rule.
inline NelderMeadResult quadratic_polish(const std::function<double(const Eigen::VectorXd&)>& fn,
                                         Eigen::VectorXd x, double fx, int max_sweeps = 8) {
  const int n = static_cast<int>(x.size());
  NelderMeadResult res;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double h = sweep < 2 ? 1e-4 : 1e-5;
    bool improved = false;
    double max_step = 0.0;
    for (int j = 0; j < n; ++j) {
      Eigen::VectorXd xp = x, xm = x;
      xp(j) += h;
      xm(j) -= h;
      const double fp = fn(xp);
      const double fm = fn(xm);
      res.evals += 2;
      const double g = (fp - fm) / (2.0 * h);
      const double c = (fp - 2.0 * fx + fm) / (h * h);
      double delta = c > 1e-12 ? -g / c : (g > 0.0 ? -1.0 : 1.0) * 10.0 * h;
      delta = std::clamp(delta, -0.5, 0.5);
      Eigen::VectorXd trial = x;
      trial(j) += delta;
      const double ft = fn(trial);
      ++res.evals;
      if (ft < fx) {
        x = trial;
        fx = ft;
        improved = true;
        max_step = std::max(max_step, std::abs(delta));
      }
    }
    if (!improved || max_step < 1e-8) break;
  }
  res.x = x;
  res.f = fx;
  res.converged = true;
  return res;
}

}  // namespace mlmm

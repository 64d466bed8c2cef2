#pragma once

// Linear mixed models by REML with a profiled deviance over the relative
// covariance parameters, solved through sparse penalized least squares.
//
// Model: y = X beta + Z b + e, e ~ N(0, sigma^2 W^-1), b ~ N(0, sigma^2
// Lambda Lambda'). Lambda is block diagonal: one lower-triangular template
// per grouping factor, repeated over its groups. theta holds the templates
// in log-Cholesky form (diagonal entries logged, off-diagonals free), so any
// finite theta yields a PSD covariance.
//
// For a given theta the penalized least squares system
//   [ A      L'Z'WX ] [u]   [L'Z'Wy]      A = L'Z'WZ L + I
//   [ X'WZL  X'WX   ] [b] = [X'Wy  ]
// is solved through a sparse Cholesky factorization of A whose symbolic
// analysis is computed once per problem structure. Per-iteration work is
// kept to a numeric refresh: A is assembled in place from a precomputed
// fan-out of Z'WZ entries through the covariance templates, and the
// fixed-effect block is formed from forward-substitution Gram products.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmm/nelder_mead.hpp"
#include "mlmm/stats.hpp"

namespace mlmm {

struct RandomFactor {
  std::string name;
  std::vector<int> group;                // per-row group code in [0, n_groups)
  std::vector<std::string> group_labels; // one per group
  int n_groups = 0;
  std::vector<std::string> term_names;   // e.g. {"intercept", "estimator=adjusted", ...}
  Eigen::MatrixXd terms;                 // n x t covariate values of the random terms
  bool full_cov = true;                  // full covariance vs diagonal
  bool track_eb = false;                 // emit per-group EB records for this factor

  int n_terms() const { return static_cast<int>(terms.cols()); }
  int n_params() const {
    const int t = n_terms();
    return full_cov ? t * (t + 1) / 2 : t;
  }
};

struct RandomSpec {
  std::vector<RandomFactor> factors;

  int n_params() const {
    int p = 0;
    for (const auto& f : factors) p += f.n_params();
    return p;
  }
};

struct EbRecord {
  std::string factor;
  int group = -1;
  std::string group_label;
  std::string effect;
  double deviation = 0.0;   // EB mode of the random deviation
  double composed = 0.0;    // fixed part + deviation
  double cond_sd = 0.0;     // conditional SD of the deviation given the data
  double reliability = 0.0; // psi^2 / (cond_sd^2 + psi^2)
};

struct VarComp {
  std::string factor;
  std::vector<std::string> terms;
  Eigen::MatrixXd cov;       // estimated covariance (boundary variances zeroed)
  std::vector<double> psi2;  // diagonal of cov
  Eigen::MatrixXd corr;
  std::vector<bool> boundary;
};

struct MixedFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  Eigen::VectorXd z;
  Eigen::VectorXd p;
  Eigen::MatrixXd cov;
  double sigma2 = 0.0;
  std::vector<VarComp> varcomps;
  double deviance = 0.0;  // REML criterion at the optimum
  bool converged = false;
  bool boundary = false;
  int evals = 0;
  int iterations = 0;
  Eigen::VectorXd theta;
  long n_obs = 0;
  std::map<std::string, int> group_counts;
  std::vector<EbRecord> eb;
  std::string family = "gaussian_identity";

  const VarComp* varcomp(const std::string& factor) const {
    for (const auto& v : varcomps) {
      if (v.factor == factor) return &v;
    }
    return nullptr;
  }
};

class LmmProblem {
 public:
  LmmProblem(const Eigen::MatrixXd& X, std::vector<std::string> names, RandomSpec spec,
             const Eigen::VectorXd& y, const Eigen::VectorXd* weights = nullptr)
      : names_(std::move(names)), spec_(std::move(spec)) {
    n_ = X.rows();
    p_ = X.cols();
    if (y.size() != n_) throw std::invalid_argument("lmm: y length mismatch");
    if (static_cast<Eigen::Index>(names_.size()) != p_) {
      throw std::invalid_argument("lmm: coefficient name count mismatch");
    }
    w_ = (weights != nullptr) ? *weights : Eigen::VectorXd::Ones(n_);
    if (w_.size() != n_) throw std::invalid_argument("lmm: weight length mismatch");
    if ((w_.array() <= 0.0).any()) throw std::invalid_argument("lmm: weights must be positive");
    X_ = X;
    y_ = y;
    sum_log_w_ = w_.array().log().sum();

    q_ = 0;
    for (auto& f : spec_.factors) {
      if (f.n_groups < 2) {
        throw std::invalid_argument("lmm: factor " + f.name + " needs at least 2 groups");
      }
      if (static_cast<Eigen::Index>(f.group.size()) != n_ || f.terms.rows() != n_) {
        throw std::invalid_argument("lmm: factor " + f.name + " row count mismatch");
      }
      offsets_.push_back(q_);
      q_ += static_cast<long>(f.n_groups) * f.n_terms();
    }
    theta_dim_ = spec_.n_params();

    if (q_ > 0) {
      build_z();
      precompute();
      build_assembly();
    } else {
      XtWX_ = X_.transpose() * w_.asDiagonal() * X_;
      XtWy_ = X_.transpose() * (w_.array() * y_.array()).matrix();
      ytWy_ = (w_.array() * y_.array().square()).sum();
    }
  }

  long n() const { return n_; }
  long p() const { return p_; }
  long q() const { return q_; }
  int theta_dim() const { return theta_dim_; }
  const std::vector<std::string>& names() const { return names_; }
  const RandomSpec& spec() const { return spec_; }
  const Eigen::MatrixXd& X() const { return X_; }
  const Eigen::VectorXd& y() const { return y_; }

  // Lower-triangular covariance-factor template for one factor at theta.
  Eigen::MatrixXd lambda_block(const Eigen::VectorXd& theta, std::size_t factor) const {
    const RandomFactor& f = spec_.factors[factor];
    const int t = f.n_terms();
    int idx = 0;
    for (std::size_t g = 0; g < factor; ++g) idx += spec_.factors[g].n_params();
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(t, t);
    if (f.full_cov) {
      for (int j = 0; j < t; ++j) {
        T(j, j) = std::exp(clamp_log(theta(idx++)));
        for (int i = j + 1; i < t; ++i) T(i, j) = theta(idx++);
      }
    } else {
      for (int j = 0; j < t; ++j) T(j, j) = std::exp(clamp_log(theta(idx++)));
    }
    return T;
  }

  struct Solution {
    Eigen::VectorXd beta;
    Eigen::VectorXd u;       // spherical random effects (full solve only)
    Eigen::VectorXd b;       // Lambda u, the deviations on the data scale
    Eigen::MatrixXd xtvix;   // X' V^-1 X (inverse of the unscaled beta covariance)
    double pwrss = 0.0;      // penalized weighted RSS
    double sigma2 = 0.0;
    double deviance = 0.0;
  };

  Solution solve(const Eigen::VectorXd& theta) { return solve_impl(theta, true); }

  // The REML criterion with beta and sigma^2 profiled out.
  double deviance(const Eigen::VectorXd& theta) { return solve_impl(theta, false).deviance; }

  // Z b: the random-effect contribution to the fitted values.
  Eigen::VectorXd fitted_random(const Solution& s) const {
    if (q_ == 0) return Eigen::VectorXd::Zero(n_);
    return Z_ * s.b;
  }

  // Conditional covariance of the random deviations of one group given the
  // data: sigma^2 T (A^-1)[block] T'. Valid after solve() at the same theta.
  Eigen::MatrixXd conditional_cov(const Eigen::VectorXd& theta, std::size_t factor, int group,
                                  double sigma2) {
    const RandomFactor& f = spec_.factors[factor];
    const int t = f.n_terms();
    const long base = offsets_[factor] + static_cast<long>(group) * t;
    Eigen::MatrixXd E = Eigen::MatrixXd::Zero(q_, t);
    for (int j = 0; j < t; ++j) E(base + j, j) = 1.0;
    const Eigen::MatrixXd AiE = solver_.solve(E);
    const Eigen::MatrixXd T = lambda_block(theta, factor);
    Eigen::MatrixXd block = AiE.middleRows(base, t);
    Eigen::MatrixXd C = sigma2 * T * block * T.transpose();
    return 0.5 * (C + C.transpose());
  }

  long group_block_offset(std::size_t factor, int group) const {
    return offsets_[factor] + static_cast<long>(group) * spec_.factors[factor].n_terms();
  }

 private:
  static double clamp_log(double v) { return std::min(std::max(v, -20.0), 20.0); }

  struct SpdFactor {
    Eigen::LDLT<Eigen::MatrixXd> ldlt;
    double logdet = 0.0;
  };

  static SpdFactor factor_spd(const Eigen::MatrixXd& A) {
    SpdFactor f{Eigen::LDLT<Eigen::MatrixXd>(A), 0.0};
    if (f.ldlt.info() != Eigen::Success) {
      throw std::runtime_error("lmm: fixed-effect system factorization failed");
    }
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      const double d = f.ldlt.vectorD()(i);
      if (!(d > 0.0) || !std::isfinite(d)) {
        throw std::runtime_error(
            "lmm: fixed-effect system not positive definite (rank-deficient X or extreme theta); "
            "min pivot " +
            format_g12(d));
      }
      f.logdet += std::log(d);
    }
    return f;
  }

  void build_z() {
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t fi = 0; fi < spec_.factors.size(); ++fi) {
      const RandomFactor& f = spec_.factors[fi];
      const int t = f.n_terms();
      for (Eigen::Index i = 0; i < n_; ++i) {
        const long base = offsets_[fi] + static_cast<long>(f.group[static_cast<std::size_t>(i)]) * t;
        for (int j = 0; j < t; ++j) trips.emplace_back(i, base + j, f.terms(i, j));
      }
    }
    Z_.resize(n_, q_);
    Z_.setFromTriplets(trips.begin(), trips.end());
    Z_.makeCompressed();
  }

  void precompute() {
    const Eigen::VectorXd wy = w_.array() * y_.array();
    XtWX_ = X_.transpose() * w_.asDiagonal() * X_;
    XtWy_ = X_.transpose() * wy;
    ytWy_ = (w_.array() * y_.array() * y_.array()).sum();
    const Eigen::SparseMatrix<double> Zt = Z_.transpose();
    M_ = (Zt * w_.asDiagonal() * Z_).eval();
    M_.makeCompressed();
    N_ = Zt * (w_.asDiagonal() * X_);
    h_ = Zt * wy;
  }

  // index decode: owning factor, group, term of a random-effect column
  void decode(long col, int& factor, long& group, int& term) const {
    factor = static_cast<int>(offsets_.size()) - 1;
    for (std::size_t fi = 1; fi < offsets_.size(); ++fi) {
      if (col < offsets_[fi]) {
        factor = static_cast<int>(fi) - 1;
        break;
      }
    }
    const int t = spec_.factors[static_cast<std::size_t>(factor)].n_terms();
    const long rel = col - offsets_[static_cast<std::size_t>(factor)];
    group = rel / t;
    term = static_cast<int>(rel % t);
  }

  // Structural template entries (ta >= ra; diagonal-only unless full_cov).
  std::vector<std::pair<int, int>> template_entries(const RandomFactor& f) const {
    std::vector<std::pair<int, int>> out;
    const int t = f.n_terms();
    for (int ta = 0; ta < t; ++ta) {
      if (f.full_cov) {
        for (int ra = 0; ra <= ta; ++ra) out.emplace_back(ta, ra);
      } else {
        out.emplace_back(ta, ta);
      }
    }
    return out;
  }

  // Builds the fixed sparsity pattern of A = L'ML + I and the fan-out list
  // that refreshes its values for a new theta in one pass over M.
  void build_assembly() {
    t_offset_.clear();
    int toff = 0;
    for (const auto& f : spec_.factors) {
      t_offset_.push_back(toff);
      toff += f.n_terms() * f.n_terms();
    }
    t_values_.assign(static_cast<std::size_t>(toff), 0.0);

    // pattern of A
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(M_.nonZeros()) * 4);
    for (long col = 0; col < q_; ++col) {
      trips.emplace_back(col, col, 0.0);  // the +I ridge keeps the diagonal structural
    }
    for (int outer = 0; outer < M_.outerSize(); ++outer) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(M_, outer); it; ++it) {
        int fa, fb, ta, tb;
        long ga, gb;
        decode(it.row(), fa, ga, ta);
        decode(it.col(), fb, gb, tb);
        const auto& ea = template_entries(spec_.factors[static_cast<std::size_t>(fa)]);
        const auto& eb = template_entries(spec_.factors[static_cast<std::size_t>(fb)]);
        const int tta = spec_.factors[static_cast<std::size_t>(fa)].n_terms();
        const int ttb = spec_.factors[static_cast<std::size_t>(fb)].n_terms();
        for (const auto& [ta2, ra] : ea) {
          if (ta2 != ta) continue;
          for (const auto& [tb2, rb] : eb) {
            if (tb2 != tb) continue;
            const long r = offsets_[static_cast<std::size_t>(fa)] + ga * tta + ra;
            const long c = offsets_[static_cast<std::size_t>(fb)] + gb * ttb + rb;
            trips.emplace_back(r, c, 0.0);
          }
        }
      }
    }
    A_.resize(q_, q_);
    A_.setFromTriplets(trips.begin(), trips.end());
    A_.makeCompressed();

    // value-slot lookup
    auto slot = [this](long r, long c) {
      const auto* outer = A_.outerIndexPtr();
      const auto* inner = A_.innerIndexPtr();
      for (auto k = outer[c]; k < outer[c + 1]; ++k) {
        if (inner[k] == r) return static_cast<long>(k);
      }
      throw std::logic_error("lmm: missing slot in A pattern");
    };
    diag_slots_.clear();
    for (long col = 0; col < q_; ++col) diag_slots_.push_back(slot(col, col));

    fanout_.clear();
    const auto* m_outer = M_.outerIndexPtr();
    const auto* m_inner = M_.innerIndexPtr();
    for (long col = 0; col < q_; ++col) {
      for (auto k = m_outer[col]; k < m_outer[col + 1]; ++k) {
        const long row = m_inner[k];
        int fa, fb, ta, tb;
        long ga, gb;
        decode(row, fa, ga, ta);
        decode(col, fb, gb, tb);
        const auto& ea = template_entries(spec_.factors[static_cast<std::size_t>(fa)]);
        const auto& eb = template_entries(spec_.factors[static_cast<std::size_t>(fb)]);
        const int tta = spec_.factors[static_cast<std::size_t>(fa)].n_terms();
        const int ttb = spec_.factors[static_cast<std::size_t>(fb)].n_terms();
        for (const auto& [ta2, ra] : ea) {
          if (ta2 != ta) continue;
          for (const auto& [tb2, rb] : eb) {
            if (tb2 != tb) continue;
            const long r = offsets_[static_cast<std::size_t>(fa)] + ga * tta + ra;
            const long c = offsets_[static_cast<std::size_t>(fb)] + gb * ttb + rb;
            FanOut f;
            f.a_slot = slot(r, c);
            f.m_slot = static_cast<long>(k);
            f.ta_slot = t_offset_[static_cast<std::size_t>(fa)] + ta * tta + ra;
            f.tb_slot = t_offset_[static_cast<std::size_t>(fb)] + tb * ttb + rb;
            fanout_.push_back(f);
          }
        }
      }
    }
  }

  void refresh_templates(const Eigen::VectorXd& theta) {
    for (std::size_t fi = 0; fi < spec_.factors.size(); ++fi) {
      const Eigen::MatrixXd T = lambda_block(theta, fi);
      const int t = spec_.factors[fi].n_terms();
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
          t_values_[static_cast<std::size_t>(t_offset_[fi] + i * t + j)] = T(i, j);
        }
      }
    }
  }

  void assemble_A() {
    double* av = A_.valuePtr();
    std::fill(av, av + A_.nonZeros(), 0.0);
    const double* mv = M_.valuePtr();
    const double* tv = t_values_.data();
    for (const FanOut& f : fanout_) {
      av[f.a_slot] += tv[f.ta_slot] * mv[f.m_slot] * tv[f.tb_slot];
    }
    for (long col = 0; col < q_; ++col) av[diag_slots_[static_cast<std::size_t>(col)]] += 1.0;
  }

  // Lt * dense: scale the rows of a (q x k) matrix by the transposed
  // covariance templates, block by block.
  void apply_lambda_t(Eigen::MatrixXd& out, const Eigen::MatrixXd& in) const {
    out.resizeLike(in);
    for (std::size_t fi = 0; fi < spec_.factors.size(); ++fi) {
      const RandomFactor& f = spec_.factors[fi];
      const int t = f.n_terms();
      Eigen::MatrixXd T(t, t);
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
          T(i, j) = t_values_[static_cast<std::size_t>(t_offset_[fi] + i * t + j)];
        }
      }
      for (int g = 0; g < f.n_groups; ++g) {
        const long base = offsets_[fi] + static_cast<long>(g) * t;
        if (t == 1) {
          out.row(base) = T(0, 0) * in.row(base);
        } else {
          out.middleRows(base, t).noalias() = T.transpose() * in.middleRows(base, t);
        }
      }
    }
  }

  // Lambda * dense vector (for b = Lambda u).
  Eigen::VectorXd apply_lambda(const Eigen::VectorXd& u) const {
    Eigen::VectorXd out(q_);
    for (std::size_t fi = 0; fi < spec_.factors.size(); ++fi) {
      const RandomFactor& f = spec_.factors[fi];
      const int t = f.n_terms();
      Eigen::MatrixXd T(t, t);
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
          T(i, j) = t_values_[static_cast<std::size_t>(t_offset_[fi] + i * t + j)];
        }
      }
      for (int g = 0; g < f.n_groups; ++g) {
        const long base = offsets_[fi] + static_cast<long>(g) * t;
        if (t == 1) {
          out(base) = T(0, 0) * u(base);
        } else {
          out.segment(base, t).noalias() = T * u.segment(base, t);
        }
      }
    }
    return out;
  }

  Solution solve_impl(const Eigen::VectorXd& theta, bool full) {
    if (theta.size() != theta_dim_) throw std::invalid_argument("lmm: theta dimension mismatch");
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (!std::isfinite(theta(i))) throw std::domain_error("lmm: non-finite theta");
    }

    Solution s;
    const double df = static_cast<double>(n_ - p_);
    if (q_ == 0) {
      const SpdFactor f = factor_spd(XtWX_);
      s.beta = f.ldlt.solve(XtWy_);
      s.u.resize(0);
      s.b.resize(0);
      s.xtvix = XtWX_;
      const Eigen::VectorXd r = y_ - X_ * s.beta;
      s.pwrss = (w_.array() * r.array().square()).sum();
      s.sigma2 = s.pwrss / df;
      s.deviance = f.logdet + df * (1.0 + std::log(2.0 * M_PI * s.pwrss / df)) - sum_log_w_;
      return s;
    }

    refresh_templates(theta);
    assemble_A();
    if (!analyzed_) {
      solver_.analyzePattern(A_);
      analyzed_ = true;
    }
    solver_.factorize(A_);
    if (solver_.info() != Eigen::Success) {
      throw std::runtime_error("lmm: sparse factorization failed (theta out of range?)");
    }
    const Eigen::ArrayXd D = solver_.vectorD().array();
    if ((D <= 0.0).any() || !D.isFinite().all()) {
      throw std::runtime_error("lmm: penalized system lost positive definiteness");
    }
    const double logdet_A = D.log().sum();

    // G = D^-1/2 L^-1 P [L' Z'WX | L' Z'Wy]; the Gram products of G give the
    // profiled fixed-effect system without backward substitutions.
    Eigen::MatrixXd NtH(q_, p_ + 1);
    {
      Eigen::MatrixXd src(q_, p_ + 1);
      src.leftCols(p_) = N_;
      src.col(p_) = h_;
      Eigen::MatrixXd scaled;
      apply_lambda_t(scaled, src);
      NtH = solver_.permutationP() * scaled;
      solver_.matrixL().solveInPlace(NtH);
      NtH.array().colwise() *= D.inverse().sqrt();
    }
    const auto G = NtH.leftCols(p_);
    const Eigen::VectorXd g_h = NtH.col(p_);

    Eigen::MatrixXd xtvix = XtWX_;
    xtvix.selfadjointView<Eigen::Lower>().rankUpdate(G.transpose(), -1.0);
    xtvix.triangularView<Eigen::StrictlyUpper>() =
        xtvix.triangularView<Eigen::StrictlyLower>().transpose();

    const SpdFactor fx = factor_spd(xtvix);
    s.beta = fx.ldlt.solve(XtWy_ - G.transpose() * g_h);
    s.xtvix = xtvix;

    // pwrss via the penalized normal equations: y'Wy - u'(L'Z'Wy) - beta'X'Wy
    const double ut_ht = (g_h - G * s.beta).dot(g_h);
    s.pwrss = ytWy_ - ut_ht - s.beta.dot(XtWy_);
    if (!(s.pwrss > 0.0)) {
      s.pwrss = std::max(s.pwrss, 1e-300);
    }
    s.sigma2 = s.pwrss / df;
    s.deviance =
        logdet_A + fx.logdet + df * (1.0 + std::log(2.0 * M_PI * s.pwrss / df)) - sum_log_w_;

    if (full) {
      Eigen::MatrixXd rhs(q_, 1);
      Eigen::MatrixXd scaled;
      {
        Eigen::MatrixXd src(q_, 1);
        src.col(0) = h_ - N_ * s.beta;
        apply_lambda_t(scaled, src);
      }
      s.u = solver_.solve(Eigen::VectorXd(scaled.col(0)));
      s.b = apply_lambda(s.u);
    }
    return s;
  }

  std::vector<std::string> names_;
  RandomSpec spec_;
  Eigen::Index n_ = 0;
  Eigen::Index p_ = 0;
  long q_ = 0;
  int theta_dim_ = 0;
  std::vector<long> offsets_;
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  Eigen::VectorXd w_;
  double sum_log_w_ = 0.0;
  double ytWy_ = 0.0;

  Eigen::SparseMatrix<double> Z_;
  Eigen::SparseMatrix<double> M_;  // Z' W Z
  Eigen::MatrixXd N_;              // Z' W X
  Eigen::VectorXd h_;              // Z' W y
  Eigen::MatrixXd XtWX_;
  Eigen::VectorXd XtWy_;

  struct FanOut {
    long a_slot;
    long m_slot;
    int ta_slot;
    int tb_slot;
  };
  Eigen::SparseMatrix<double> A_;
  std::vector<FanOut> fanout_;
  std::vector<long> diag_slots_;
  std::vector<int> t_offset_;
  std::vector<double> t_values_;

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver_;
  bool analyzed_ = false;
};

// The REML criterion with beta and sigma^2 profiled out.
inline double profiled_reml_deviance(LmmProblem& problem, const Eigen::VectorXd& theta) {
  return problem.deviance(theta);
}

struct LmmOptions {
  double rel_tol = 1e-8;
  int max_evals = 5000;
  bool optimize = true;  // false: evaluate at start_theta without optimizing
  std::optional<Eigen::VectorXd> start_theta;
  double boundary_frac = 1e-8;  // variance below boundary_frac * sigma2 reported as 0
};

namespace lmmdetail {

inline void fill_fit_from_solution(MixedFit& fit, LmmProblem& problem, const Eigen::VectorXd& theta,
                                   const LmmProblem::Solution& sol) {
  fit.names = problem.names();
  fit.beta = sol.beta;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sol.xtvix);
  fit.cov = sol.sigma2 *
            ldlt.solve(Eigen::MatrixXd::Identity(problem.p(), problem.p()));
  fit.cov = 0.5 * (fit.cov + fit.cov.transpose()).eval();
  const auto p = problem.p();
  fit.se.resize(p);
  fit.z.resize(p);
  fit.p.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    fit.se(j) = std::sqrt(fit.cov(j, j));
    fit.z(j) = fit.beta(j) / fit.se(j);
    fit.p(j) = two_sided_p_normal(fit.z(j));
  }
  fit.sigma2 = sol.sigma2;
  fit.deviance = sol.deviance;
  fit.theta = theta;
  fit.n_obs = problem.n();

  const double floor = 1e-8 * sol.sigma2;
  for (std::size_t fi = 0; fi < problem.spec().factors.size(); ++fi) {
    const RandomFactor& f = problem.spec().factors[fi];
    fit.group_counts[f.name] = f.n_groups;
    const Eigen::MatrixXd T = problem.lambda_block(theta, fi);
    Eigen::MatrixXd cov = sol.sigma2 * T * T.transpose();
    const int t = f.n_terms();
    VarComp vc;
    vc.factor = f.name;
    vc.terms = f.term_names;
    vc.boundary.resize(static_cast<std::size_t>(t));
    for (int j = 0; j < t; ++j) {
      const bool at_zero = cov(j, j) < floor;
      vc.boundary[static_cast<std::size_t>(j)] = at_zero;
      if (at_zero) {
        fit.boundary = true;
        for (int i = 0; i < t; ++i) {
          cov(i, j) = 0.0;
          cov(j, i) = 0.0;
        }
      }
    }
    vc.cov = cov;
    vc.corr = Eigen::MatrixXd::Identity(t, t);
    for (int j = 0; j < t; ++j) {
      vc.psi2.push_back(cov(j, j));
      for (int i = 0; i < t; ++i) {
        if (i != j && cov(i, i) > 0.0 && cov(j, j) > 0.0) {
          vc.corr(i, j) = cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
        } else if (i != j) {
          vc.corr(i, j) = 0.0;
        }
      }
    }
    fit.varcomps.push_back(std::move(vc));
  }

  // EB records for tracked factors.
  for (std::size_t fi = 0; fi < problem.spec().factors.size(); ++fi) {
    const RandomFactor& f = problem.spec().factors[fi];
    if (!f.track_eb) continue;
    const VarComp& vc = fit.varcomps[fi];
    const int t = f.n_terms();
    for (int g = 0; g < f.n_groups; ++g) {
      const Eigen::MatrixXd C = problem.conditional_cov(theta, fi, g, sol.sigma2);
      const long base = problem.group_block_offset(fi, g);
      for (int j = 0; j < t; ++j) {
        EbRecord rec;
        rec.factor = f.name;
        rec.group = g;
        rec.group_label = f.group_labels.empty() ? std::to_string(g)
                                                 : f.group_labels[static_cast<std::size_t>(g)];
        rec.effect = f.term_names[static_cast<std::size_t>(j)];
        const bool at_zero = vc.boundary[static_cast<std::size_t>(j)];
        rec.deviation = at_zero ? 0.0 : sol.b(base + j);
        rec.cond_sd = std::sqrt(std::max(C(j, j), 0.0));
        const double psi2 = vc.psi2[static_cast<std::size_t>(j)];
        rec.reliability = at_zero ? 0.0 : psi2 / (C(j, j) + psi2);
        double fixed_part = 0.0;
        for (std::size_t c = 0; c < fit.names.size(); ++c) {
          if (fit.names[c] == rec.effect) {
            fixed_part = fit.beta(static_cast<Eigen::Index>(c));
            break;
          }
        }
        rec.composed = fixed_part + rec.deviation;
        fit.eb.push_back(std::move(rec));
      }
    }
  }
}

}  // namespace lmmdetail

// REML fit: Nelder-Mead over theta starting at the identity template (unit
// relative SDs, zero correlations), one restart from the incumbent, then a
// coordinate-parabola polish.
inline MixedFit fit_lmm(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                        const RandomSpec& spec, const Eigen::VectorXd& y,
                        const Eigen::VectorXd* weights = nullptr, const LmmOptions& opt = {}) {
  LmmProblem problem(X, names, spec, y, weights);
  Eigen::VectorXd theta0 = opt.start_theta.value_or(Eigen::VectorXd::Zero(problem.theta_dim()));
  if (theta0.size() != problem.theta_dim()) {
    throw std::invalid_argument("fit_lmm: start theta dimension mismatch");
  }

  MixedFit fit;
  Eigen::VectorXd theta = theta0;
  if (!opt.optimize || problem.theta_dim() == 0) {
    fit.converged = true;
  } else {
    // factorization failures at extreme theta act as a barrier
    auto objective = [&problem](const Eigen::VectorXd& th) {
      try {
        return problem.deviance(th);
      } catch (const std::runtime_error&) {
        return 1e300;
      }
    };
    NelderMeadResult first = nelder_mead(objective, theta0, 0.5, opt.rel_tol, opt.max_evals);
    const int remaining = opt.max_evals - first.evals;
    NelderMeadResult second =
        remaining > problem.theta_dim() + 1
            ? nelder_mead(objective, first.x, 0.1, opt.rel_tol, remaining)
            : first;
    const NelderMeadResult& best = second.f <= first.f ? second : first;
    const NelderMeadResult polished = quadratic_polish(objective, best.x, best.f);
    theta = polished.x;
    fit.converged = second.converged;
    fit.evals = first.evals + polished.evals +
                (remaining > problem.theta_dim() + 1 ? second.evals : 0);
    fit.iterations = first.iterations + second.iterations;
  }

  const LmmProblem::Solution sol = problem.solve(theta);
  lmmdetail::fill_fit_from_solution(fit, problem, theta, sol);
  return fit;
}

// The EB records of a converged fit (computed during fitting for the tracked
// grouping factors).
inline std::vector<EbRecord> blup_estimates(const MixedFit& fit) { return fit.eb; }

}  // namespace mlmm

#pragma once

// Dummy-coded design matrices for categorical metamodel predictors.
// Every factor is categorical; the first level is the reference and is
// dropped. Column order is deterministic: intercept, then main effects in
// declaration order (levels ascending), then interaction products.

#include <Eigen/Dense>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlmm/stats.hpp"

namespace mlmm {

struct CatColumn {
  std::string name;
  std::vector<int> code;            // per-row index into levels
  std::vector<std::string> levels;  // levels[0] is the reference
};

// Numeric factor: levels are the sorted distinct values, labelled at 12
// significant digits, reference = smallest value.
inline CatColumn make_factor(const std::string& name, const std::vector<double>& values) {
  std::vector<double> lv(values);
  std::sort(lv.begin(), lv.end());
  lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
  CatColumn col;
  col.name = name;
  for (double v : lv) col.levels.push_back(format_g12(v));
  col.code.reserve(values.size());
  for (double v : values) {
    const auto it = std::lower_bound(lv.begin(), lv.end(), v);
    col.code.push_back(static_cast<int>(it - lv.begin()));
  }
  return col;
}

// String factor with an explicit level order (first = reference).
inline CatColumn make_factor(const std::string& name, const std::vector<std::string>& values,
                             const std::vector<std::string>& level_order) {
  CatColumn col;
  col.name = name;
  col.levels = level_order;
  col.code.reserve(values.size());
  for (const auto& v : values) {
    int idx = -1;
    for (std::size_t i = 0; i < level_order.size(); ++i) {
      if (level_order[i] == v) {
        idx = static_cast<int>(i);
        break;
      }
    }
    if (idx < 0) throw std::invalid_argument("factor " + name + ": unseen level '" + v + "'");
    col.code.push_back(idx);
  }
  return col;
}

struct FactorFrame {
  std::size_t n_rows = 0;
  std::vector<CatColumn> cols;

  const CatColumn& at(const std::string& name) const {
    for (const auto& c : cols) {
      if (c.name == name) return c;
    }
    throw std::invalid_argument("no factor named '" + name + "'");
  }

  void add(CatColumn col) {
    if (cols.empty()) {
      n_rows = col.code.size();
    } else if (col.code.size() != n_rows) {
      throw std::invalid_argument("factor " + col.name + ": row count mismatch");
    }
    cols.push_back(std::move(col));
  }
};

struct TermInfo {
  std::string label;
  std::string factor_a;  // empty for the intercept
  int level_a = -1;
  std::string factor_b;  // empty unless an interaction column
  int level_b = -1;
};

struct DesignMatrix {
  Eigen::MatrixXd X;
  std::vector<TermInfo> terms;
  std::vector<std::string> warnings;

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    out.reserve(terms.size());
    for (const auto& t : terms) out.push_back(t.label);
    return out;
  }

  int column_of(const std::string& label) const {
    for (std::size_t j = 0; j < terms.size(); ++j) {
      if (terms[j].label == label) return static_cast<int>(j);
    }
    return -1;
  }
};

inline std::string level_label(const CatColumn& c, int level) {
  return c.name + "=" + c.levels[static_cast<std::size_t>(level)];
}

// mains: factor names contributing dummy main effects.
// interactions: (A, B) pairs contributing products of non-reference dummies.
inline DesignMatrix build_design(const FactorFrame& frame, const std::vector<std::string>& mains,
                                 const std::vector<std::pair<std::string, std::string>>& interactions = {}) {
  const auto n = static_cast<Eigen::Index>(frame.n_rows);
  DesignMatrix d;
  d.terms.push_back({"intercept", "", -1, "", -1});

  struct Col {
    TermInfo info;
    const CatColumn* fa;
    int la;
    const CatColumn* fb;
    int lb;
  };
  std::vector<Col> cols;

  for (const auto& name : mains) {
    const CatColumn& c = frame.at(name);
    if (c.levels.size() < 2) {
      d.warnings.push_back("factor " + name + " has a single level and contributes no columns");
      continue;
    }
    for (int l = 1; l < static_cast<int>(c.levels.size()); ++l) {
      cols.push_back({{level_label(c, l), c.name, l, "", -1}, &c, l, nullptr, -1});
    }
  }
  for (const auto& [na, nb] : interactions) {
    const CatColumn& a = frame.at(na);
    const CatColumn& b = frame.at(nb);
    for (int la = 1; la < static_cast<int>(a.levels.size()); ++la) {
      for (int lb = 1; lb < static_cast<int>(b.levels.size()); ++lb) {
        cols.push_back({{level_label(a, la) + ":" + level_label(b, lb), a.name, la, b.name, lb},
                        &a, la, &b, lb});
      }
    }
  }

  d.X.resize(n, 1 + static_cast<Eigen::Index>(cols.size()));
  d.X.col(0).setOnes();
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const Col& c = cols[j];
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = (c.fa->code[static_cast<std::size_t>(i)] == c.la) ? 1.0 : 0.0;
      if (c.fb != nullptr && v != 0.0) {
        v = (c.fb->code[static_cast<std::size_t>(i)] == c.lb) ? 1.0 : 0.0;
      }
      d.X(i, static_cast<Eigen::Index>(j) + 1) = v;
    }
    d.terms.push_back(c.info);
  }
  return d;
}

}  // namespace mlmm

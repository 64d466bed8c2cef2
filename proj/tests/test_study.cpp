#include <gtest/gtest.h>

#include <map>

#include "mlmm/artifacts.hpp"
#include "mlmm/study.hpp"

using namespace mlmm;

namespace {

GridSpec reference_grid() {
  GridSpec g;
  g.n = {100, 300, 500};
  g.b1 = {0, 0.2, 0.4};
  g.prop_treated = {0.5, 0.7, 0.9};
  g.b2 = {0.3, 0.5, 0.7};
  g.b3 = {0, 0.25, 0.5};
  return g;
}

}  // namespace

TEST(ExpandGrid, ReferenceGridHas243Conditions) {
  const auto conds = expand_grid(reference_grid());
  ASSERT_EQ(conds.size(), 243u);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    EXPECT_EQ(conds[i].condition_id, static_cast<int>(i));
  }
  // row-major with the declared order: last factor (b3) varies fastest
  EXPECT_EQ(conds[0].n, 100);
  EXPECT_DOUBLE_EQ(conds[0].b3, 0.0);
  EXPECT_DOUBLE_EQ(conds[1].b3, 0.25);
  EXPECT_DOUBLE_EQ(conds[3].b2, 0.5);
  EXPECT_EQ(conds[81].n, 300);
}

TEST(ExpandGrid, SingletonGrid) {
  GridSpec g;
  g.n = {100};
  g.b1 = {0.2};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  const auto conds = expand_grid(g);
  ASSERT_EQ(conds.size(), 1u);
  EXPECT_EQ(conds[0].condition_id, 0);
}

TEST(ExpandGrid, TwoByThreeMatchesCountingOracle) {
  GridSpec g;
  g.n = {100, 300};
  g.b1 = {0, 0.2, 0.4};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  const auto conds = expand_grid(g);
  ASSERT_EQ(conds.size(), 6u);
  // independent counting: each n value appears 3 times, each b1 value twice
  std::map<int, int> n_count;
  std::map<double, int> b1_count;
  for (const auto& c : conds) {
    ++n_count[c.n];
    ++b1_count[c.b1];
  }
  EXPECT_EQ(n_count[100], 3);
  EXPECT_EQ(n_count[300], 3);
  EXPECT_EQ(b1_count[0.0], 2);
  EXPECT_EQ(b1_count[0.2], 2);
  EXPECT_EQ(b1_count[0.4], 2);
}

TEST(ExpandGrid, EmptyFactorRejected) {
  GridSpec g = reference_grid();
  g.b2.clear();
  EXPECT_THROW(expand_grid(g), std::invalid_argument);
}

TEST(ExpandGrid, InvalidValueNamesFactor) {
  GridSpec g = reference_grid();
  g.prop_treated = {0.5, 1.5};
  try {
    expand_grid(g);
    FAIL() << "expected validation error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("prop_treated"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("1.5"), std::string::npos);
  }
}

TEST(GenerateDataset, LargeSampleControlArmCorrelation) {
  SimCondition c;
  c.condition_id = 0;
  c.n = 1000000;
  c.b1 = 0.2;
  c.prop_treated = 0.5;
  c.b2 = 0.7;
  c.b3 = 0.0;
  const Dataset d = generate_dataset(c, 7ull, 0);
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  long m = 0;
  for (int i = 0; i < c.n; ++i) {
    if (d.t(i) > 0.5) continue;
    ++m;
    sx += d.x(i);
    sy += d.y(i);
    sxx += d.x(i) * d.x(i);
    syy += d.y(i) * d.y(i);
    sxy += d.x(i) * d.y(i);
  }
  const double mx = sx / m, my = sy / m;
  const double corr = (sxy / m - mx * my) /
                      std::sqrt((sxx / m - mx * mx) * (syy / m - my * my));
  EXPECT_NEAR(corr, 0.7, 0.01);
}

TEST(GenerateDataset, NullConditionHasUnitVariance) {
  SimCondition c;
  c.condition_id = 3;
  c.n = 1000000;
  c.b1 = 0.0;
  c.prop_treated = 0.5;
  c.b2 = 0.0;
  c.b3 = 0.0;
  const Dataset d = generate_dataset(c, 7ull, 1);
  const double mean = d.y.mean();
  const double var = (d.y.array() - mean).square().sum() / (c.n - 1);
  EXPECT_NEAR(var, 1.0, 0.01);
}

TEST(GenerateDataset, BitIdenticalRegeneration) {
  SimCondition c;
  c.condition_id = 11;
  c.n = 500;
  c.b1 = 0.4;
  c.prop_treated = 0.9;
  c.b2 = 0.5;
  c.b3 = 0.25;
  const Dataset a = generate_dataset(c, 42ull, 3);
  const Dataset b = generate_dataset(c, 42ull, 3);
  ASSERT_EQ(a.y.size(), b.y.size());
  EXPECT_EQ(0, std::memcmp(a.y.data(), b.y.data(), sizeof(double) * a.y.size()));
  EXPECT_EQ(0, std::memcmp(a.x.data(), b.x.data(), sizeof(double) * a.x.size()));
  EXPECT_EQ(0, std::memcmp(a.t.data(), b.t.data(), sizeof(double) * a.t.size()));
}

TEST(GenerateDataset, ArmsAlwaysNonempty) {
  SimCondition c;
  c.condition_id = 0;
  c.n = 10;
  c.b1 = 0.0;
  c.prop_treated = 0.9;
  c.b2 = 0.3;
  c.b3 = 0.0;
  for (int rep = 0; rep < 500; ++rep) {
    const Dataset d = generate_dataset(c, 13ull, rep);
    const double treated = d.t.sum();
    ASSERT_GT(treated, 0.5);
    ASSERT_LT(treated, 9.5);
  }
}

TEST(FitEstimator, HandComputedTwoByTwo) {
  Dataset d;
  d.condition_id = 0;
  d.replication_id = 0;
  d.y.resize(4);
  d.y << 1, 2, 3, 4;
  d.t.resize(4);
  d.t << 0, 0, 1, 1;
  d.x.resize(4);
  d.x << 0.1, -0.2, 0.3, 0.0;
  const EstimateRecord rec = fit_estimator(d, Estimator::unadjusted);
  EXPECT_NEAR(rec.ate_hat, 2.0, 1e-12);
  // pooled variance 0.5 per arm -> SE = sqrt(0.5 * (1/2 + 1/2)) = sqrt(0.5)
  EXPECT_NEAR(rec.se_hat, std::sqrt(0.5), 1e-12);
  EXPECT_LE(rec.ci_lo, rec.ate_hat);
  EXPECT_GE(rec.ci_hi, rec.ate_hat);
}

TEST(FitEstimator, ConstantCovariateIsRankDeficient) {
  Dataset d;
  d.condition_id = 5;
  d.replication_id = 2;
  d.y.resize(6);
  d.y << 1, 2, 3, 4, 5, 6;
  d.t.resize(6);
  d.t << 0, 0, 0, 1, 1, 1;
  d.x = Eigen::VectorXd::Ones(6);
  try {
    fit_estimator(d, Estimator::adjusted);
    FAIL() << "expected estimation_error";
  } catch (const estimation_error& e) {
    EXPECT_EQ(e.condition_id, 5);
    EXPECT_EQ(e.replication_id, 2);
  }
}

TEST(FitEstimator, UnadjustedEqualsMeanDifference) {
  SimCondition c;
  c.condition_id = 0;
  c.n = 80;
  c.b1 = 0.3;
  c.prop_treated = 0.7;
  c.b2 = 0.5;
  c.b3 = 0.25;
  for (int rep = 0; rep < 20; ++rep) {
    const Dataset d = generate_dataset(c, 101ull, rep);
    const EstimateRecord rec = fit_estimator(d, Estimator::unadjusted);
    double s1 = 0, s0 = 0;
    int n1 = 0, n0 = 0;
    for (int i = 0; i < c.n; ++i) {
      if (d.t(i) > 0.5) {
        s1 += d.y(i);
        ++n1;
      } else {
        s0 += d.y(i);
        ++n0;
      }
    }
    EXPECT_NEAR(rec.ate_hat, s1 / n1 - s0 / n0, 1e-10);
  }
}

TEST(ComputeMetrics, Arithmetic) {
  SimCondition c;
  c.b1 = 0.2;
  EstimateRecord rec;
  rec.ate_hat = 0.5;
  rec.p_value = 0.2;
  rec.ci_lo = 0.1;
  rec.ci_hi = 0.4;
  rec = compute_metrics(rec, c);
  EXPECT_NEAR(rec.error, 0.3, 1e-15);
  EXPECT_NEAR(rec.sq_error, 0.09, 1e-15);
  EXPECT_EQ(rec.covered, 1);
  EXPECT_EQ(rec.reject, 0);

  SimCondition c2;
  c2.b1 = 0.4;
  EstimateRecord rec2;
  rec2.ate_hat = 0.4;
  rec2.p_value = 0.03;
  rec2.ci_lo = 0.05;
  rec2.ci_hi = 0.75;
  rec2 = compute_metrics(rec2, c2);
  EXPECT_EQ(rec2.reject, 1);
  EXPECT_EQ(rec2.covered, 1);
}

TEST(RunStudy, OneConditionOneRep) {
  GridSpec g;
  g.n = {50};
  g.b1 = {0.2};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  StudyRunSpec spec;
  spec.seed = 5;
  spec.reps = 1;
  const EstimateTable t = run_study(expand_grid(g), spec);
  ASSERT_EQ(t.records.size(), 3u);
  EXPECT_EQ(t.records[0].dataset_id, 0);
  EXPECT_EQ(to_string(t.records[0].estimator), std::string("unadjusted"));
}

TEST(RunStudy, ThreadCountDoesNotChangeOutput) {
  GridSpec g;
  g.n = {60, 120};
  g.b1 = {0, 0.3};
  g.prop_treated = {0.6};
  g.b2 = {0.4};
  g.b3 = {0.25};
  StudyRunSpec spec;
  spec.seed = 99;
  spec.reps = 15;
  const EstimateTable a = run_study(expand_grid(g), spec, 1);
  const EstimateTable b = run_study(expand_grid(g), spec, 4);
  EXPECT_EQ(estimates_to_csv(a), estimates_to_csv(b));
}

TEST(RunStudy, EstimatorsAreUnbiasedUnderNull) {
  GridSpec g;
  g.n = {100};
  g.b1 = {0};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  StudyRunSpec spec;
  spec.seed = 2718;
  spec.reps = 400;
  const EstimateTable t = run_study(expand_grid(g), spec, 2);
  for (Estimator e : t.estimators) {
    std::vector<double> errors;
    for (const auto& rec : t.records) {
      if (rec.estimator == e) errors.push_back(rec.error);
    }
    const double m = mean_of(errors);
    const double mc_se = sd_of(errors) / std::sqrt(static_cast<double>(errors.size()));
    EXPECT_LT(std::fabs(m), 4.0 * mc_se) << to_string(e);
  }
}

TEST(RunStudy, TripletsShareKeys) {
  GridSpec g;
  g.n = {40};
  g.b1 = {0.2};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  StudyRunSpec spec;
  spec.seed = 7;
  spec.reps = 10;
  const EstimateTable t = run_study(expand_grid(g), spec);
  for (std::size_t i = 0; i < t.records.size(); i += 3) {
    EXPECT_EQ(t.records[i].dataset_id, t.records[i + 1].dataset_id);
    EXPECT_EQ(t.records[i].dataset_id, t.records[i + 2].dataset_id);
    EXPECT_EQ(t.records[i].condition_id, t.records[i + 2].condition_id);
  }
}

TEST(Artifacts, EstimatesCsvRoundTrip) {
  GridSpec g;
  g.n = {40, 80};
  g.b1 = {0, 0.2};
  g.prop_treated = {0.5};
  g.b2 = {0.3};
  g.b3 = {0};
  StudyRunSpec spec;
  spec.seed = 31;
  spec.reps = 4;
  const EstimateTable t = run_study(expand_grid(g), spec);
  const std::string csv = estimates_to_csv(t);
  const std::string path = testing::TempDir() + "estimates_roundtrip.csv";
  write_text_atomic(path, csv);
  const EstimateTable back = estimates_from_csv(read_csv(path));
  ASSERT_EQ(back.records.size(), t.records.size());
  ASSERT_EQ(back.conditions.size(), t.conditions.size());
  EXPECT_EQ(back.reps, t.reps);
  for (std::size_t i = 0; i < t.records.size(); i += 7) {
    EXPECT_EQ(back.records[i].condition_id, t.records[i].condition_id);
    EXPECT_EQ(back.records[i].dataset_id, t.records[i].dataset_id);
    EXPECT_NEAR(back.records[i].ate_hat, t.records[i].ate_hat, 1e-11);
    EXPECT_EQ(back.records[i].reject, t.records[i].reject);
  }
  EXPECT_EQ(estimates_to_csv(back), csv);
}

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "pixproto/pseudo.hpp"

using namespace pixproto;

TEST(StaticLabels, KeepsMostConfidentHalfPerClass) {
  // 4 pixels predicted class 0 with confidences .9 .6 .8 .7, one pixel class 1
  ProbMap pm(1, 5, 2);
  pm.data = {0.9, 0.1, 0.6, 0.4, 0.8, 0.2, 0.7, 0.3, 0.2, 0.8};
  const LabelMap y = static_labels(pm, StaticLabelConfig{0.5, 10});
  EXPECT_EQ(y[0], 0);
  EXPECT_FALSE(y.labeled(1));
  EXPECT_EQ(y[2], 0);
  EXPECT_FALSE(y.labeled(3));
  EXPECT_EQ(y[4], 1);  // ceil(0.5 * 1) = 1
}

TEST(StaticLabels, FractionExtremes) {
  std::mt19937_64 rng(31);
  const ProbMap pm = oracle::random_probs(rng, 5, 5, 3);
  EXPECT_EQ(static_labels(pm, {0.0, 1}).labeled_count(), 0u);
  EXPECT_EQ(static_labels(pm, {1.0, 1}).labeled_count(), 25u);
}

TEST(StaticLabels, TiesKeepLowerIndex) {
  ProbMap pm(1, 4, 2);
  pm.data = {0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.7, 0.3};
  const LabelMap y = static_labels(pm, {0.5, 1});
  EXPECT_TRUE(y.labeled(0));
  EXPECT_TRUE(y.labeled(1));
  EXPECT_FALSE(y.labeled(2));
  EXPECT_FALSE(y.labeled(3));
}

TEST(StaticLabels, MatchesSortAndCutOracle) {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<int> side(1, 8), cls(2, 5);
  const double fractions[] = {0.0, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.75, 1.0};
  for (int t = 0; t < 200; ++t) {
    const ProbMap pm = oracle::random_probs(rng, side(rng), side(rng), cls(rng));
    const double q = fractions[t % 7];
    EXPECT_EQ(static_labels(pm, {q, 1}), oracle::ref_static(pm, q)) << "q=" << q;
  }
}

TEST(StaticLabels, DensityNeverBelowFraction) {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 50; ++t) {
    const ProbMap pm = oracle::random_probs(rng, 6, 6, 4);
    const double q = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto n = static_labels(pm, {q, 1}).labeled_count();
    EXPECT_GE(static_cast<double>(n) + 1e-9, q * 36.0);
    EXPECT_LE(static_cast<double>(n), q * 36.0 + 4.0);  // at most one extra per class
  }
}

TEST(StaticLabelConfig, RejectsBadValues) {
  EXPECT_THROW((StaticLabelConfig{1.5, 1}.validate()), ConfigError);
  EXPECT_THROW((StaticLabelConfig{0.5, 0}.validate()), ConfigError);
}

TEST(DynamicLabels, ThresholdAndArgmax) {
  FeatureMap f(1, 3, 2);
  f.data = {1, 0, 0.6, 0.8, -1, 0};
  PrototypeSet p;
  p.dim = 2;
  p.entries[0] = Prototype{{1, 0}, 1};
  p.entries[2] = Prototype{{0, 1}, 1};
  const auto r = dynamic_labels(f, p, 0.75, 3);
  EXPECT_EQ(r.status, PairStatus::kOk);
  EXPECT_EQ(r.labels[0], 0);
  EXPECT_EQ(r.labels[1], 2);  // cos 0.8 > 0.75
  EXPECT_FALSE(r.labels.labeled(2));
}

TEST(DynamicLabels, ThresholdIsStrict) {
  FeatureMap f(1, 1, 2);
  f.data = {0.6, 0.8};
  PrototypeSet p;
  p.dim = 2;
  p.entries[1] = Prototype{{0, 1}, 1};
  // cos = 0.8 exactly
  EXPECT_FALSE(dynamic_labels(f, p, 0.8, 2).labels.labeled(0));
  EXPECT_TRUE(dynamic_labels(f, p, 0.79, 2).labels.labeled(0));
}

TEST(DynamicLabels, TiesGoToLowestClass) {
  FeatureMap f(1, 1, 2);
  f.data = {1, 1};
  PrototypeSet p;
  p.dim = 2;
  p.entries[3] = Prototype{{1, 1}, 1};
  p.entries[1] = Prototype{{2, 2}, 1};
  EXPECT_EQ(dynamic_labels(f, p, 0.5, 4).labels[0], 1);
}

TEST(DynamicLabels, EmptyPrototypeSetGivesNoPairs) {
  PrototypeSet p;
  p.dim = 2;
  const auto r = dynamic_labels(FeatureMap(2, 2, 2), p, 0.5, 3);
  EXPECT_EQ(r.status, PairStatus::kNoPairs);
  EXPECT_EQ(r.labels.labeled_count(), 0u);
}

TEST(DynamicLabels, ThresholdRange) {
  PrototypeSet p;
  p.dim = 1;
  EXPECT_THROW(dynamic_labels(FeatureMap(1, 1, 1), p, 1.0, 2), ConfigError);
  EXPECT_THROW(dynamic_labels(FeatureMap(1, 1, 1), p, -1.0, 2), ConfigError);
}

TEST(DynamicLabels, MatchesArgmaxOracle) {
  std::mt19937_64 rng(34);
  std::uniform_int_distribution<int> side(1, 8), dim(1, 8), cls(2, 5);
  for (int t = 0; t < 200; ++t) {
    const int d = dim(rng), c = cls(rng);
    const FeatureMap f = oracle::random_features(rng, side(rng), side(rng), d);
    std::map<int, std::vector<double>> protos;
    for (int k = 0; k < c; ++k) {
      if (std::bernoulli_distribution(0.7)(rng)) protos[k] = oracle::random_features(rng, 1, 1, d).data;
    }
    const double thr = std::uniform_real_distribution<double>(-0.5, 0.9)(rng);
    EXPECT_EQ(dynamic_labels(f, oracle::to_set(protos, d), thr, c).labels, oracle::ref_dynamic(f, protos, thr, c));
  }
}

TEST(DynamicLabels, DensityNonIncreasingInThreshold) {
  std::mt19937_64 rng(35);
  for (int t = 0; t < 30; ++t) {
    const FeatureMap f = oracle::random_features(rng, 6, 6, 4);
    const PrototypeSet p = masked_average_pool(f, oracle::random_labels(rng, 6, 6, 4));
    std::size_t prev = f.pixels() + 1;
    for (double thr = -0.9; thr < 1.0; thr += 0.1) {
      const auto n = dynamic_labels(f, p, thr, 4).labels.labeled_count();
      EXPECT_LE(n, prev);
      prev = n;
    }
  }
}

TEST(HybridFuse, TruthTableOverAllNineCases) {
  // dynamic state x static state: U (unlabeled), A (class 0), B (class 1).
  // Agreement is covered by (A, A); disagreement by (A, B) and (B, A).
  const int U = -1;
  const int states[] = {U, 0, 1};
  LabelMap dyn(3, 3, 2), fix(3, 3, 2);
  std::vector<int> expected;
  std::size_t p = 0;
  for (int d : states) {
    for (int s : states) {
      if (d != U) dyn.set(p, d);
      if (s != U) fix.set(p, s);
      expected.push_back(d != U ? d : s);
      ++p;
    }
  }
  const LabelMap out = hybrid_fuse(dyn, fix);
  for (std::size_t i = 0; i < 9; ++i) {
    if (expected[i] == U) {
      EXPECT_FALSE(out.labeled(i)) << "case " << i;
    } else {
      EXPECT_EQ(out[i], expected[i]) << "case " << i;
    }
  }
}

TEST(HybridFuse, DensityBounds) {
  std::mt19937_64 rng(36);
  for (int t = 0; t < 100; ++t) {
    const LabelMap d = oracle::random_labels(rng, 5, 5, 3, 0.6), s = oracle::random_labels(rng, 5, 5, 3, 0.6);
    const auto n = hybrid_fuse(d, s).labeled_count();
    EXPECT_GE(n, std::max(d.labeled_count(), s.labeled_count()));
    EXPECT_LE(n, std::min<std::size_t>(25, d.labeled_count() + s.labeled_count()));
  }
}

TEST(HybridFuse, ShapeMismatchThrows) {
  EXPECT_THROW(hybrid_fuse(LabelMap(2, 2, 2), LabelMap(2, 3, 2)), ContractViolation);
}

TEST(LabelMetrics, DensityAndAccuracy) {
  LabelMap y(1, 4, 3), gt(1, 4, 3);
  for (std::size_t p = 0; p < 4; ++p) gt.set(p, 1);
  y.set(0, 1);
  y.set(1, 2);
  const PseudoLabelReport r = label_metrics(y, gt);
  EXPECT_DOUBLE_EQ(r.density, 0.5);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_FALSE(r.no_labels);
  EXPECT_DOUBLE_EQ(r.class_density[2], 0.25);
  const PseudoLabelReport none = label_metrics(LabelMap(1, 4, 3), gt);
  EXPECT_TRUE(none.no_labels);
  EXPECT_EQ(none.density, 0.0);
}

TEST(LabelMetrics, MergePoolsCounts) {
  LabelMap gt(1, 2, 2);
  gt.set(0, 0);
  gt.set(1, 0);
  LabelMap a(1, 2, 2), b(1, 2, 2);
  a.set(0, 0);
  b.set(0, 1);
  b.set(1, 0);
  const std::vector<PseudoLabelReport> rs{label_metrics(a, gt), label_metrics(b, gt)};
  const PseudoLabelReport m = merge_reports(rs);
  EXPECT_DOUBLE_EQ(m.density, 3.0 / 4.0);
  EXPECT_DOUBLE_EQ(m.accuracy, 2.0 / 3.0);
}

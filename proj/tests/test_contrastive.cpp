#include <gtest/gtest.h>

#include "oracle.hpp"
#include "pixproto/contrastive.hpp"

using namespace pixproto;

namespace {

// Random (features, labels, prototypes) instance; prototypes cover a random
// subset of the classes.
struct Instance {
  FeatureMap f;
  LabelMap y;
  PrototypeSet protos;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> side(1, 8), dim(1, 8), cls(2, 5);
  const int h = side(rng), w = side(rng), d = dim(rng), c = cls(rng);
  Instance in{oracle::random_features(rng, h, w, d), oracle::random_labels(rng, h, w, c), {}};
  in.protos.dim = d;
  std::bernoulli_distribution keep(0.75);
  for (int k = 0; k < c; ++k) {
    if (keep(rng)) in.protos.entries[k] = Prototype{oracle::random_features(rng, 1, 1, d).data, 1};
  }
  return in;
}

}  // namespace

TEST(PixelPrototypeContrast, MatchesBruteForce) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 300; ++t) {
    const Instance in = random_instance(rng);
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const auto [ref, n] = oracle::ref_contrast(in.f, in.y, oracle::to_map(in.protos), tau);
    const ContrastiveResult r = pixel_prototype_contrast(in.f, in.y, in.protos, tau);
    EXPECT_EQ(r.contributing, n);
    EXPECT_EQ(r.status, n > 0 ? PairStatus::kOk : PairStatus::kNoPairs);
    EXPECT_NEAR(r.loss, ref, 1e-10);
  }
}

TEST(PixelPrototypeContrast, SingleClassGivesZeroLoss) {
  FeatureMap f(1, 2, 2);
  f.data = {1, 0, 0, 1};
  LabelMap y(1, 2, 3);
  y.set(0, 1);
  y.set(1, 1);
  PrototypeSet p;
  p.dim = 2;
  p.entries[1] = Prototype{{1, 1}, 1};
  const auto r = pixel_prototype_contrast(f, y, p, 0.1);
  EXPECT_NEAR(r.loss, 0.0, 1e-15);
  for (double g : r.grad_features.data) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(PixelPrototypeContrast, SkipsPixelsWithoutPrototype) {
  FeatureMap f(1, 3, 2);
  f.data = {1, 0, 0, 1, 1, 1};
  LabelMap y(1, 3, 3);
  y.set(0, 0);
  y.set(1, 2);
  PrototypeSet p;
  p.dim = 2;
  p.entries[0] = Prototype{{1, 0}, 1};
  p.entries[1] = Prototype{{0, 1}, 1};
  const auto r = pixel_prototype_contrast(f, y, p, 0.5);
  EXPECT_EQ(r.contributing, 1u);
  EXPECT_EQ(r.skipped, 1u);
}

TEST(PixelPrototypeContrast, NoPairsIsReportedNotThrown) {
  const FeatureMap f(2, 2, 3);
  const LabelMap y(2, 2, 3);
  PrototypeSet empty;
  empty.dim = 3;
  const auto r = pixel_prototype_contrast(f, y, empty, 0.1);
  EXPECT_EQ(r.status, PairStatus::kNoPairs);
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad_features.data) EXPECT_EQ(g, 0.0);
}

TEST(PixelPrototypeContrast, RejectsNonPositiveTemperature) {
  const FeatureMap f(1, 1, 1);
  const LabelMap y(1, 1, 2);
  EXPECT_THROW(pixel_prototype_contrast(f, y, PrototypeSet{}, 0.0), ConfigError);
}

TEST(PixelPrototypeContrast, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(22);
  for (int t = 0; t < 30; ++t) {
    Instance in = random_instance(rng);
    const double tau = 0.3;
    const ContrastiveResult r = pixel_prototype_contrast(in.f, in.y, in.protos, tau);
    auto loss = [&] { return pixel_prototype_contrast(in.f, in.y, in.protos, tau).loss; };
    for (std::size_t i = 0; i < in.f.data.size(); ++i) {
      const double fd = oracle::central_difference(in.f.data, i, 1e-5, loss);
      EXPECT_LE(oracle::rel_err(r.grad_features.data[i], fd, 1e-4), 1e-4) << "feature " << i;
    }
    for (auto& [c, proto] : in.protos.entries) {
      for (std::size_t k = 0; k < proto.vec.size(); ++k) {
        const double fd = oracle::central_difference(proto.vec, k, 1e-5, loss);
        EXPECT_LE(oracle::rel_err(r.grad_protos.at(c)[k], fd, 1e-4), 1e-4) << "prototype " << c;
      }
    }
  }
}

TEST(PixelPrototypeContrast, FallbackPrototypesAddNegativesWithoutGradient) {
  std::mt19937_64 rng(23);
  const FeatureMap f = oracle::random_features(rng, 2, 2, 3);
  LabelMap y(2, 2, 3);
  for (std::size_t p = 0; p < 4; ++p) y.set(p, 0);
  PrototypeSet protos, fallback;
  protos.dim = fallback.dim = 3;
  protos.entries[0] = Prototype{{1, 0, 0}, 1};
  fallback.entries[0] = Prototype{{5, 5, 5}, 1};  // shadowed by protos
  fallback.entries[2] = Prototype{{0, 0, 1}, 1};
  const auto r = pixel_prototype_contrast(f, y, protos, 0.2, &fallback);
  std::map<int, std::vector<double>> all{{0, {1, 0, 0}}, {2, {0, 0, 1}}};
  EXPECT_NEAR(r.loss, oracle::ref_contrast(f, y, all, 0.2).first, 1e-12);
  EXPECT_EQ(r.grad_protos.count(2), 0u);
  EXPECT_EQ(r.grad_protos.count(0), 1u);
}

TEST(ForwardBackwardContrast, FclAndBclMatchBruteForce) {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 150; ++t) {
    std::uniform_int_distribution<int> side(1, 8), dim(1, 8), cls(2, 5);
    const int h = side(rng), w = side(rng), d = dim(rng), c = cls(rng);
    const FeatureMap fs = oracle::random_features(rng, h, w, d), ft = oracle::random_features(rng, h, w, d);
    const LabelMap ys = oracle::random_labels(rng, h, w, c), yt = oracle::random_labels(rng, h, w, c, 0.5);
    const PrototypeSet rs = masked_average_pool(fs, ys), rt = masked_average_pool(ft, yt);
    const auto fc = fcl(ft, yt, rs, 0.1);
    const auto bc = bcl(fs, ys, rt, 0.1);
    EXPECT_NEAR(fc.loss, oracle::ref_contrast(ft, yt, oracle::ref_pool(fs, ys).vec, 0.1).first, 1e-10);
    EXPECT_NEAR(bc.loss, oracle::ref_contrast(fs, ys, oracle::ref_pool(ft, yt).vec, 0.1).first, 1e-10);
  }
}

TEST(ForwardBackwardContrast, InvariantToPositiveRescaling) {
  std::mt19937_64 rng(25);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int t = 0; t < 100; ++t) {
    const FeatureMap fs = oracle::random_features(rng, 4, 4, 6), ft = oracle::random_features(rng, 4, 4, 6);
    const LabelMap ys = oracle::random_labels(rng, 4, 4, 4), yt = oracle::random_labels(rng, 4, 4, 4);
    FeatureMap fs2 = fs, ft2 = ft;
    const double a = scale(rng), b = scale(rng);
    for (double& v : fs2.data) v *= a;
    for (double& v : ft2.data) v *= b;
    const double fc1 = fcl(ft, yt, masked_average_pool(fs, ys), 0.1).loss;
    const double fc2 = fcl(ft2, yt, masked_average_pool(fs2, ys), 0.1).loss;
    const double bc1 = bcl(fs, ys, masked_average_pool(ft, yt), 0.1).loss;
    const double bc2 = bcl(fs2, ys, masked_average_pool(ft2, yt), 0.1).loss;
    EXPECT_NEAR(fc1, fc2, 1e-9);
    EXPECT_NEAR(bc1, bc2, 1e-9);
  }
}

TEST(ForwardBackwardContrast, LowerTemperatureSharpensCorrectMatches) {
  // pixels aligned with their own prototype: loss falls as tau shrinks
  FeatureMap f(1, 2, 2);
  f.data = {1, 0.1, 0.1, 1};
  LabelMap y(1, 2, 2);
  y.set(0, 0);
  y.set(1, 1);
  PrototypeSet p;
  p.dim = 2;
  p.entries[0] = Prototype{{1, 0}, 1};
  p.entries[1] = Prototype{{0, 1}, 1};
  EXPECT_LT(fcl(f, y, p, 0.05).loss, fcl(f, y, p, 0.5).loss);
}

TEST(SegmentationLoss, ValueAndGradient) {
  ProbMap pm(1, 2, 2);
  pm.data = {0.8, 0.2, 0.3, 0.7};
  LabelMap y(1, 2, 2);
  y.set(0, 0);
  const auto r = segmentation_loss(pm, y);
  EXPECT_NEAR(r.loss, -std::log(0.8), 1e-15);
  EXPECT_EQ(r.contributing, 1u);
  EXPECT_NEAR(r.grad_logits.data[0], 0.8 - 1.0, 1e-15);
  EXPECT_NEAR(r.grad_logits.data[1], 0.2, 1e-15);
  EXPECT_EQ(r.grad_logits.data[2], 0.0);
  EXPECT_EQ(segmentation_loss(pm, LabelMap(1, 2, 2)).status, PairStatus::kNoPairs);
}

TEST(SegmentationAndEntropy, LogitGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(26);
  std::normal_distribution<double> n(0, 2);
  for (int t = 0; t < 25; ++t) {
    const int h = 2, w = 3, c = 4;
    std::vector<double> logits(h * w * c);
    for (auto& v : logits) v = n(rng);
    const LabelMap y = oracle::random_labels(rng, h, w, c, 0.3);
    auto probs_of = [&] {
      ProbMap pm(h, w, c);
      for (int p = 0; p < h * w; ++p) {
        stable_softmax(std::span<const double>(logits.data() + p * c, c), pm.pixel(p));
      }
      return pm;
    };
    const ProbMap pm = probs_of();
    const auto seg = segmentation_loss(pm, y);
    const auto ent = entropy_loss(pm);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double fd_seg = oracle::central_difference(logits, i, 1e-5, [&] { return segmentation_loss(probs_of(), y).loss; });
      const double fd_ent = oracle::central_difference(logits, i, 1e-5, [&] { return entropy_loss(probs_of()).loss; });
      if (seg.status == PairStatus::kOk) EXPECT_LE(oracle::rel_err(seg.grad_logits.data[i], fd_seg, 1e-4), 1e-4);
      EXPECT_LE(oracle::rel_err(ent.grad_logits.data[i], fd_ent, 1e-4), 1e-4);
    }
  }
}

TEST(EntropyLoss, UniformPredictionIsLogC) {
  ProbMap pm(2, 2, 5);
  for (double& v : pm.data) v = 0.2;
  const auto r = entropy_loss(pm);
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-14);
  for (double g : r.grad_logits.data) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(TotalLoss, RecomposesFromWeightedParts) {
  std::mt19937_64 rng(27);
  std::uniform_real_distribution<double> u(0, 3);
  for (int t = 0; t < 100; ++t) {
    LossParts p{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    LossWeights w;
    w.seg_source = u(rng);
    w.seg_target = u(rng);
    w.ent_source = u(rng);
    w.ent_target = u(rng);
    w.fcl = u(rng);
    w.bcl = u(rng);
    const LossBreakdown b = total_loss(p, w);
    const double base = w.seg_source * p.seg_source + w.seg_target * p.seg_target + w.ent_source * p.ent_source +
                        w.ent_target * p.ent_target;
    EXPECT_NEAR(b.base, base, 1e-12);
    EXPECT_NEAR(b.total, base + w.fcl * p.fcl + w.bcl * p.bcl, 1e-12);
  }
}

TEST(TotalLoss, ZeroContrastiveWeightsGiveBaseOnly) {
  LossWeights w;
  w.fcl = w.bcl = 0.0;
  const LossBreakdown b = total_loss(LossParts{1, 2, 3, 4, 5, 6}, w);
  EXPECT_EQ(b.total, b.base);
}

TEST(LossWeights, ValidateRejectsBadValues) {
  LossWeights w;
  w.tau = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.fcl = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

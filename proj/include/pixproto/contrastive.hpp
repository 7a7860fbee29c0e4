#pragma once

// Pixel-prototype contrastive losses in both directions, segmentation
// cross-entropy, prediction entropy, and the weighted total, each with
// analytical gradients.

#include <cstddef>
#include <string>

#include "pixproto/core.hpp"
#include "pixproto/prototypes.hpp"

namespace pixproto {

/// kNoPairs: the term had nothing to compare (no prototypes, no labeled
/// pixels); it contributes zero loss and zero gradient.
enum class PairStatus { kOk, kNoPairs };

/// Which prototype classes form the softmax denominator.
enum class NegativeSet {
  kPresentClasses,           ///< only classes present in the prototype set
  kAllClassesBankFallback,   ///< absent classes filled from a constant fallback set
};

/// d(loss)/d(logits), shaped like a ProbMap.
using LogitGrad = ProbMap;

struct ContrastiveResult {
  double loss = 0.0;
  FeatureGrad grad_features;
  PrototypeGrad grad_protos;   ///< only for classes of the differentiable set
  std::size_t contributing = 0;
  std::size_t skipped = 0;     ///< labeled pixels whose class had no prototype
  PairStatus status = PairStatus::kNoPairs;
};

/// Mean over labeled pixels p of
///   -log softmax_c(s(f(p), rho(c)) / tau) at c = label(p),
/// with the softmax over the classes of `protos` (plus `fallback` classes
/// missing from `protos`, which are treated as constants).
ContrastiveResult pixel_prototype_contrast(const FeatureMap& pixels, const LabelMap& labels,
                                           const PrototypeSet& protos, double tau,
                                           const PrototypeSet* fallback = nullptr);

/// Forward term: target pixels against source prototypes.
ContrastiveResult fcl(const FeatureMap& features_t, const LabelMap& labels_t, const PrototypeSet& protos_s,
                      double tau, const PrototypeSet* fallback = nullptr);

/// Backward term: source pixels against target prototypes.
ContrastiveResult bcl(const FeatureMap& features_s, const LabelMap& labels_s, const PrototypeSet& protos_t,
                      double tau, const PrototypeSet* fallback = nullptr);

struct PixelLossResult {
  double loss = 0.0;
  LogitGrad grad_logits;
  std::size_t contributing = 0;
  PairStatus status = PairStatus::kNoPairs;
};

/// Mean cross-entropy over labeled pixels; gradient is (p - onehot) / N.
PixelLossResult segmentation_loss(const ProbMap& probs, const LabelMap& labels);

/// Mean per-pixel Shannon entropy; gradient w.r.t. logits is -p (log p + H) / N.
PixelLossResult entropy_loss(const ProbMap& probs);

struct LossWeights {
  double seg_source = 1.0;
  double seg_target = 1.0;
  double ent_source = 0.0;
  double ent_target = 0.01;
  double fcl = 0.1;
  double bcl = 0.1;
  double tau = 0.1;

  /// Throws ConfigError for tau <= 0 or any negative weight.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Unweighted term values of one step.
struct LossParts {
  double seg_source = 0.0;
  double seg_target = 0.0;
  double ent_source = 0.0;
  double ent_target = 0.0;
  double fcl = 0.0;
  double bcl = 0.0;
};

struct LossBreakdown {
  LossParts parts;
  double base = 0.0;
  double total = 0.0;
  std::size_t n_seg_source = 0;
  std::size_t n_seg_target = 0;
  std::size_t n_ent_source = 0;
  std::size_t n_ent_target = 0;
  std::size_t n_fcl = 0;
  std::size_t n_bcl = 0;
};

/// base = w_segS L_segS + w_segT L_segT + w_entS L_entS + w_entT L_entT;
/// total = base + w_FC L_FC + w_BC L_BC.
LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace pixproto

#pragma once

// Target pseudo labels: class-balanced confident predictions (static),
// nonparametric pixel-to-prototype transfer (dynamic), their fusion, and
// density/accuracy bookkeeping.

#include <span>
#include <vector>

#include "pixproto/contrastive.hpp"
#include "pixproto/core.hpp"
#include "pixproto/prototypes.hpp"

namespace pixproto {

struct StaticLabelConfig {
  double fraction = 0.5;      ///< per-class fraction q of argmax pixels kept
  int refresh_interval = 500; ///< iterations between refreshes

  void validate() const;
  bool operator==(const StaticLabelConfig&) const = default;
};

/// For each class c, keep the ceil(q |S_c|) most confident pixels of
/// S_c = {p : argmax p(p) = c}. Confidence ties keep the lower pixel index.
LabelMap static_labels(const ProbMap& probs, const StaticLabelConfig& cfg);

struct DynamicLabelResult {
  LabelMap labels;
  PairStatus status = PairStatus::kNoPairs;
};

/// c' = argmax_c s(f(p), rho(c)) over classes in `calibrated` (lowest index
/// on ties); label p with c' iff that similarity exceeds `threshold`.
DynamicLabelResult dynamic_labels(const FeatureMap& features_t, const PrototypeSet& calibrated, double threshold,
                                  int classes);

/// Dynamic label where present, else static label, else unlabeled.
LabelMap hybrid_fuse(const LabelMap& dynamic, const LabelMap& fixed);

struct PseudoLabelReport {
  double density = 0.0;
  double accuracy = 1.0;
  bool no_labels = true;  ///< accuracy is vacuous (zero labeled pixels)
  std::size_t labeled = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<double> class_density;  ///< labeled-as-c pixels / total pixels
};

PseudoLabelReport label_metrics(const LabelMap& labels, const LabelMap& ground_truth);

/// Pools counts of several reports (pixel-weighted aggregate).
PseudoLabelReport merge_reports(std::span<const PseudoLabelReport> reports);

}  // namespace pixproto

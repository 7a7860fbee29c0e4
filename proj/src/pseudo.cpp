#include "pixproto/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pixproto {

void StaticLabelConfig::validate() const {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("static labels: fraction must lie in [0, 1], got " + std::to_string(fraction));
  }
  if (refresh_interval < 1) throw ConfigError("static labels: refresh_interval must be >= 1");
}

LabelMap static_labels(const ProbMap& probs, const StaticLabelConfig& cfg) {
  cfg.validate();
  LabelMap out(probs.height, probs.width, probs.classes);
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(probs.classes));
  for (std::size_t p = 0; p < probs.pixels(); ++p) members[probs.argmax(p)].push_back(p);

  for (int c = 0; c < probs.classes; ++c) {
    auto& set = members[c];
    if (set.empty()) continue;
    // the relative slack absorbs products like 0.1 * 10 = 1.0000000000000002
    const auto keep = static_cast<std::size_t>(std::ceil(cfg.fraction * static_cast<double>(set.size()) * (1.0 - 1e-12)));
    if (keep == 0) continue;
    std::stable_sort(set.begin(), set.end(), [&](std::size_t a, std::size_t b) {
      return probs.pixel(a)[c] > probs.pixel(b)[c];
    });
    for (std::size_t i = 0; i < keep; ++i) out.set(set[i], c);
  }
  return out;
}

DynamicLabelResult dynamic_labels(const FeatureMap& features_t, const PrototypeSet& calibrated, double threshold,
                                  int classes) {
  if (!(threshold > -1.0 && threshold < 1.0)) throw ConfigError("dynamic labels: threshold must lie in (-1, 1)");
  DynamicLabelResult res{LabelMap(features_t.height, features_t.width, classes), PairStatus::kNoPairs};
  if (calibrated.empty()) return res;
  res.status = PairStatus::kOk;
  for (std::size_t p = 0; p < features_t.pixels(); ++p) {
    auto f = features_t.pixel(p);
    int best = -1;
    double best_sim = -INFINITY;
    // entries iterate in ascending class order; strict > keeps the lowest index
    for (const auto& [c, proto] : calibrated.entries) {
      const double s = cosine_similarity(f, proto.vec);
      if (s > best_sim) {
        best_sim = s;
        best = c;
      }
    }
    if (best_sim > threshold) res.labels.set(p, best);
  }
  return res;
}

LabelMap hybrid_fuse(const LabelMap& dynamic, const LabelMap& fixed) {
  if (dynamic.height != fixed.height || dynamic.width != fixed.width || dynamic.classes != fixed.classes) {
    throw ContractViolation("hybrid_fuse: label maps differ in shape");
  }
  LabelMap out = fixed;
  for (std::size_t p = 0; p < out.pixels(); ++p) {
    if (dynamic.labeled(p)) out.data[p] = dynamic.data[p];
  }
  return out;
}

PseudoLabelReport label_metrics(const LabelMap& labels, const LabelMap& ground_truth) {
  if (labels.height != ground_truth.height || labels.width != ground_truth.width) {
    throw ContractViolation("label_metrics: shape mismatch");
  }
  PseudoLabelReport r;
  r.total = labels.pixels();
  std::vector<std::size_t> per_class(static_cast<std::size_t>(labels.classes), 0);
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    if (!labels.labeled(p)) continue;
    ++r.labeled;
    ++per_class[labels[p]];
    if (labels[p] == ground_truth[p]) ++r.correct;
  }
  r.no_labels = r.labeled == 0;
  r.density = static_cast<double>(r.labeled) / static_cast<double>(r.total);
  r.accuracy = r.no_labels ? 1.0 : static_cast<double>(r.correct) / static_cast<double>(r.labeled);
  r.class_density.resize(per_class.size());
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    r.class_density[c] = static_cast<double>(per_class[c]) / static_cast<double>(r.total);
  }
  return r;
}

PseudoLabelReport merge_reports(std::span<const PseudoLabelReport> reports) {
  PseudoLabelReport r;
  std::vector<double> class_pixels;
  for (const auto& x : reports) {
    r.labeled += x.labeled;
    r.correct += x.correct;
    r.total += x.total;
    if (class_pixels.size() < x.class_density.size()) class_pixels.resize(x.class_density.size(), 0.0);
    for (std::size_t c = 0; c < x.class_density.size(); ++c) {
      class_pixels[c] += x.class_density[c] * static_cast<double>(x.total);
    }
  }
  r.no_labels = r.labeled == 0;
  if (r.total > 0) r.density = static_cast<double>(r.labeled) / static_cast<double>(r.total);
  r.accuracy = r.no_labels ? 1.0 : static_cast<double>(r.correct) / static_cast<double>(r.labeled);
  r.class_density.resize(class_pixels.size());
  for (std::size_t c = 0; c < class_pixels.size(); ++c) {
    r.class_density[c] = r.total > 0 ? class_pixels[c] / static_cast<double>(r.total) : 0.0;
  }
  return r;
}

}  // namespace pixproto

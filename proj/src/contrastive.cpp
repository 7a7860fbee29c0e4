#include "pixproto/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace pixproto {

namespace {

struct Candidate {
  int cls;
  const std::vector<double>* vec;
  double norm;         // max(|rho|, eps)
  bool raw_above_eps;  // |rho| > eps, i.e. the norm is differentiable
  bool trainable;
};

}  // namespace

ContrastiveResult pixel_prototype_contrast(const FeatureMap& pixels, const LabelMap& labels,
                                           const PrototypeSet& protos, double tau,
                                           const PrototypeSet* fallback) {
  if (!(tau > 0.0)) throw ConfigError("contrastive loss: temperature must be > 0");
  if (pixels.height != labels.height || pixels.width != labels.width) {
    throw ContractViolation("contrastive loss: feature/label spatial shape mismatch");
  }
  const int dim = pixels.dim;
  ContrastiveResult res;
  res.grad_features = FeatureGrad(pixels.height, pixels.width, dim);

  std::vector<Candidate> cands;
  std::vector<int> slot_of(static_cast<std::size_t>(labels.classes), -1);
  auto add = [&](int c, const Prototype& proto, bool trainable) {
    if (static_cast<int>(proto.vec.size()) != dim) throw ContractViolation("contrastive loss: prototype dim mismatch");
    if (c < 0 || c >= labels.classes) throw ContractViolation("contrastive loss: prototype class out of range");
    const double n = norm(proto.vec);
    slot_of[c] = static_cast<int>(cands.size());
    cands.push_back({c, &proto.vec, std::max(n, kCosineEps), n > kCosineEps, trainable});
  };
  for (const auto& [c, proto] : protos.entries) add(c, proto, true);
  if (fallback != nullptr) {
    for (const auto& [c, proto] : fallback->entries) {
      if (!protos.contains(c)) add(c, proto, false);
    }
  }
  // candidates must be in class order so the softmax layout is canonical
  if (fallback != nullptr) {
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.cls < b.cls; });
    for (std::size_t k = 0; k < cands.size(); ++k) slot_of[cands[k].cls] = static_cast<int>(k);
  }

  const std::size_t n_cand = cands.size();
  std::vector<std::vector<double>> proto_grad(n_cand, std::vector<double>(dim, 0.0));
  std::vector<double> sims(n_cand), probs(n_cand), coef(n_cand);

  double loss_sum = 0.0;
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    const std::uint8_t y = labels[p];
    if (y == kUnlabeled) continue;
    if (y >= labels.classes || slot_of[y] < 0) {
      ++res.skipped;
      continue;
    }
    const int pos = slot_of[y];
    auto f = pixels.pixel(p);
    const double f_raw = norm(f);
    const double nf = std::max(f_raw, kCosineEps);

    double zmax = -INFINITY;
    for (std::size_t k = 0; k < n_cand; ++k) {
      sims[k] = std::clamp(dot(f, *cands[k].vec) / (nf * cands[k].norm), -1.0, 1.0);
      zmax = std::max(zmax, sims[k] / tau);
    }
    double z_sum = 0.0;
    for (std::size_t k = 0; k < n_cand; ++k) {
      probs[k] = std::exp(sims[k] / tau - zmax);
      z_sum += probs[k];
    }
    for (double& v : probs) v /= z_sum;
    loss_sum += -(sims[pos] / tau - zmax - std::log(z_sum));
    ++res.contributing;

    // dl/ds_k = (p_k - [k == pos]) / tau
    for (std::size_t k = 0; k < n_cand; ++k) {
      coef[k] = (probs[k] - (static_cast<int>(k) == pos ? 1.0 : 0.0)) / tau;
    }
    auto gf = res.grad_features.pixel(p);
    for (std::size_t k = 0; k < n_cand; ++k) {
      const auto& rho = *cands[k].vec;
      const double inv = 1.0 / (nf * cands[k].norm);
      // ds/df = rho / (|f||rho|) - s f / |f|^2
      const double f_term = f_raw > kCosineEps ? sims[k] / (nf * nf) : 0.0;
      for (int d = 0; d < dim; ++d) gf[d] += coef[k] * (rho[d] * inv - f_term * f[d]);
      if (cands[k].trainable) {
        const double r_term = cands[k].raw_above_eps ? sims[k] / (cands[k].norm * cands[k].norm) : 0.0;
        auto& gr = proto_grad[k];
        for (int d = 0; d < dim; ++d) gr[d] += coef[k] * (f[d] * inv - r_term * rho[d]);
      }
    }
  }

  if (res.contributing == 0) {
    res.status = PairStatus::kNoPairs;
    std::fill(res.grad_features.data.begin(), res.grad_features.data.end(), 0.0);
    return res;
  }
  res.status = PairStatus::kOk;
  const double inv_n = 1.0 / static_cast<double>(res.contributing);
  res.loss = loss_sum * inv_n;
  for (double& v : res.grad_features.data) v *= inv_n;
  for (std::size_t k = 0; k < n_cand; ++k) {
    if (!cands[k].trainable) continue;
    for (double& v : proto_grad[k]) v *= inv_n;
    res.grad_protos.emplace(cands[k].cls, std::move(proto_grad[k]));
  }
  return res;
}

ContrastiveResult fcl(const FeatureMap& features_t, const LabelMap& labels_t, const PrototypeSet& protos_s,
                      double tau, const PrototypeSet* fallback) {
  return pixel_prototype_contrast(features_t, labels_t, protos_s, tau, fallback);
}

ContrastiveResult bcl(const FeatureMap& features_s, const LabelMap& labels_s, const PrototypeSet& protos_t,
                      double tau, const PrototypeSet* fallback) {
  return pixel_prototype_contrast(features_s, labels_s, protos_t, tau, fallback);
}

PixelLossResult segmentation_loss(const ProbMap& probs, const LabelMap& labels) {
  if (probs.height != labels.height || probs.width != labels.width || probs.classes != labels.classes) {
    throw ContractViolation("segmentation_loss: shape mismatch");
  }
  PixelLossResult res;
  res.grad_logits = LogitGrad(probs.height, probs.width, probs.classes);
  double sum = 0.0;
  for (std::size_t p = 0; p < probs.pixels(); ++p) {
    const std::uint8_t y = labels[p];
    if (y == kUnlabeled) continue;
    auto pr = probs.pixel(p);
    // floor keeps a saturated wrong prediction finite
    sum -= std::log(std::max(pr[y], 1e-300));
    auto g = res.grad_logits.pixel(p);
    for (int c = 0; c < probs.classes; ++c) g[c] = pr[c] - (c == y ? 1.0 : 0.0);
    ++res.contributing;
  }
  if (res.contributing == 0) return res;
  res.status = PairStatus::kOk;
  const double inv_n = 1.0 / static_cast<double>(res.contributing);
  res.loss = sum * inv_n;
  for (double& v : res.grad_logits.data) v *= inv_n;
  return res;
}

PixelLossResult entropy_loss(const ProbMap& probs) {
  PixelLossResult res;
  res.grad_logits = LogitGrad(probs.height, probs.width, probs.classes);
  const std::size_t n = probs.pixels();
  const double inv_n = 1.0 / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    auto pr = probs.pixel(p);
    const double h = shannon_entropy(pr);
    sum += h;
    auto g = res.grad_logits.pixel(p);
    for (int c = 0; c < probs.classes; ++c) {
      g[c] = pr[c] > 0.0 ? -pr[c] * (std::log(pr[c]) + h) * inv_n : 0.0;
    }
  }
  res.contributing = n;
  res.status = PairStatus::kOk;
  res.loss = sum * inv_n;
  return res;
}

void LossWeights::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss weights: tau must be a finite value > 0");
  for (double w : {seg_source, seg_target, ent_source, ent_target, fcl, bcl}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights: every weight must be finite and >= 0");
  }
}

LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights) {
  weights.validate();
  LossBreakdown out;
  out.parts = parts;
  out.base = weights.seg_source * parts.seg_source + weights.seg_target * parts.seg_target +
             weights.ent_source * parts.ent_source + weights.ent_target * parts.ent_target;
  out.total = out.base + weights.fcl * parts.fcl + weights.bcl * parts.bcl;
  return out;
}

}  // namespace pixproto

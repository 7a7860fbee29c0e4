#include "pixproto/prototypes.hpp"

#include <string>

namespace pixproto {

std::vector<int> PrototypeSet::classes() const {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& [c, _] : entries) out.push_back(c);
  return out;
}

PrototypeSet masked_average_pool(std::span<const FeatureMap> features, std::span<const LabelMap> labels) {
  if (features.size() != labels.size() || features.empty()) {
    throw ContractViolation("masked_average_pool: need matching, non-empty feature/label lists");
  }
  const int dim = features[0].dim;
  const int classes = labels[0].classes;
  std::vector<std::vector<double>> sums(static_cast<std::size_t>(classes), std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);

  for (std::size_t i = 0; i < features.size(); ++i) {
    const FeatureMap& f = features[i];
    const LabelMap& y = labels[i];
    if (f.height != y.height || f.width != y.width) {
      throw ContractViolation("masked_average_pool: feature/label spatial shape mismatch");
    }
    if (f.dim != dim || y.classes != classes) throw ContractViolation("masked_average_pool: inconsistent batch");
    for (std::size_t p = 0; p < f.pixels(); ++p) {
      const std::uint8_t c = y[p];
      if (c == kUnlabeled) continue;
      if (c >= classes) throw ContractViolation("masked_average_pool: label out of range");
      auto fp = f.pixel(p);
      auto& s = sums[c];
      for (int d = 0; d < dim; ++d) s[d] += fp[d];
      ++counts[c];
    }
  }

  PrototypeSet out;
  out.dim = dim;
  for (int c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    Prototype proto{std::move(sums[c]), counts[c]};
    const double inv = 1.0 / static_cast<double>(counts[c]);
    for (double& v : proto.vec) v *= inv;
    out.entries.emplace(c, std::move(proto));
  }
  return out;
}

PrototypeSet masked_average_pool(const FeatureMap& features, const LabelMap& labels) {
  return masked_average_pool(std::span<const FeatureMap>(&features, 1), std::span<const LabelMap>(&labels, 1));
}

void masked_average_pool_backward(const PrototypeGrad& grad, const PrototypeSet& protos, const LabelMap& labels,
                                  FeatureGrad& out) {
  if (out.height != labels.height || out.width != labels.width) {
    throw ContractViolation("masked_average_pool_backward: shape mismatch");
  }
  if (grad.empty()) return;
  // per-class scaled gradient, indexed by class for the pixel loop
  std::vector<const double*> scaled_ptr(static_cast<std::size_t>(labels.classes), nullptr);
  std::map<int, std::vector<double>> scaled;
  for (const auto& [c, g] : grad) {
    const auto& proto = protos.at(c);
    if (static_cast<int>(g.size()) != out.dim) throw ContractViolation("masked_average_pool_backward: dim mismatch");
    std::vector<double> s(g);
    for (double& v : s) v /= static_cast<double>(proto.pixel_count);
    scaled_ptr[c] = scaled.emplace(c, std::move(s)).first->second.data();
  }
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    const std::uint8_t c = labels[p];
    if (c == kUnlabeled || scaled_ptr[c] == nullptr) continue;
    auto op = out.pixel(p);
    for (int d = 0; d < out.dim; ++d) op[d] += scaled_ptr[c][d];
  }
}

PrototypeBank::PrototypeBank(int classes, int dim, double momentum)
    : classes_(classes), dim_(dim), momentum_(momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw ConfigError("PrototypeBank: momentum must lie in [0, 1], got " + std::to_string(momentum));
  }
  if (classes < 1 || dim < 1) throw ConfigError("PrototypeBank: classes and dim must be >= 1");
  mu_.assign(static_cast<std::size_t>(classes), std::vector<double>(dim, 0.0));
  initialized_.assign(static_cast<std::size_t>(classes), false);
}

std::optional<std::span<const double>> PrototypeBank::read(int c) const {
  if (c < 0 || c >= classes_) throw ContractViolation("PrototypeBank::read: class out of range");
  if (!initialized_[c]) return std::nullopt;
  return std::span<const double>(mu_[c]);
}

void PrototypeBank::update(const PrototypeSet& fresh) {
  if (!fresh.empty() && fresh.dim != dim_) throw ContractViolation("PrototypeBank::update: dim mismatch");
  for (const auto& [c, proto] : fresh.entries) {
    if (c < 0 || c >= classes_) throw ContractViolation("PrototypeBank::update: class out of range");
    auto& mu = mu_[c];
    if (!initialized_[c]) {
      mu = proto.vec;
      initialized_[c] = true;
      continue;
    }
    for (int d = 0; d < dim_; ++d) mu[d] = momentum_ * mu[d] + (1.0 - momentum_) * proto.vec[d];
  }
}

void PrototypeBank::restore(int c, std::span<const double> mu, bool initialized) {
  if (static_cast<int>(mu.size()) != dim_) throw ContractViolation("PrototypeBank::restore: dim mismatch");
  mu_.at(static_cast<std::size_t>(c)).assign(mu.begin(), mu.end());
  initialized_.at(static_cast<std::size_t>(c)) = initialized;
}

std::span<const double> PrototypeBank::raw(int c) const { return mu_.at(static_cast<std::size_t>(c)); }

PrototypeBank ema_update(PrototypeBank bank, const PrototypeSet& fresh) {
  bank.update(fresh);
  return bank;
}

BiasMap BiasMap::zero(int classes, int dim) {
  return BiasMap{dim, std::vector<std::vector<double>>(static_cast<std::size_t>(classes), std::vector<double>(dim, 0.0))};
}

BiasMap BiasMap::negated() const {
  BiasMap out = *this;
  for (auto& v : out.xi) {
    for (double& x : v) x = -x;
  }
  return out;
}

BiasMap domain_bias(const PrototypeBank& source_bank, const PrototypeBank& target_bank) {
  if (source_bank.dim() != target_bank.dim() || source_bank.classes() != target_bank.classes()) {
    throw ContractViolation("domain_bias: banks disagree on shape");
  }
  BiasMap out = BiasMap::zero(source_bank.classes(), source_bank.dim());
  for (int c = 0; c < source_bank.classes(); ++c) {
    auto mu_s = source_bank.read(c);
    auto mu_t = target_bank.read(c);
    if (!mu_s || !mu_t) continue;
    for (int d = 0; d < out.dim; ++d) out.xi[c][d] = (*mu_t)[d] - (*mu_s)[d];
  }
  return out;
}

PrototypeSet calibrate(const PrototypeSet& instance, const BiasMap& bias) {
  PrototypeSet out = instance;
  if (instance.empty()) return out;
  if (bias.dim != instance.dim) throw ContractViolation("calibrate: dim mismatch");
  for (auto& [c, proto] : out.entries) {
    if (c >= static_cast<int>(bias.xi.size())) throw ContractViolation("calibrate: class outside bias map");
    const auto& xi = bias.xi[c];
    for (int d = 0; d < out.dim; ++d) proto.vec[d] += xi[d];
  }
  return out;
}

}  // namespace pixproto

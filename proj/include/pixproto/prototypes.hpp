#pragma once

// Class prototypes: masked average pooling, EMA prototype banks per domain,
// class-wise domain bias between the banks, and bias-calibrated prototypes.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "pixproto/core.hpp"

namespace pixproto {

struct Prototype {
  std::vector<double> vec;
  std::size_t pixel_count = 0;
};

/// Partial map class -> prototype. A class is present iff at least one pixel
/// carried its label.
struct PrototypeSet {
  int dim = 0;
  std::map<int, Prototype> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
  bool contains(int c) const { return entries.count(c) != 0; }
  const Prototype& at(int c) const { return entries.at(c); }
  std::vector<int> classes() const;
};

/// Per-class gradient w.r.t. prototype vectors, keyed like PrototypeSet.
using PrototypeGrad = std::map<int, std::vector<double>>;

/// rho(c) = sum_p f(p) y(p,c) / sum_p y(p,c) over classes with >= 1 pixel.
PrototypeSet masked_average_pool(const FeatureMap& features, const LabelMap& labels);

/// Single pooled MAP over every (features, labels) pair, as if the maps were
/// concatenated.
PrototypeSet masked_average_pool(std::span<const FeatureMap> features, std::span<const LabelMap> labels);

/// Chain rule through masked_average_pool: adds grad(c) / count(c) to every
/// pixel labeled c. `protos` must be the pooled result for these labels.
void masked_average_pool_backward(const PrototypeGrad& grad, const PrototypeSet& protos, const LabelMap& labels,
                                  FeatureGrad& out);

/// Exponential moving average store, one vector per class with an
/// initialization flag. Uninitialized classes are never read as vectors.
class PrototypeBank {
 public:
  PrototypeBank(int classes, int dim, double momentum);

  int classes() const { return classes_; }
  int dim() const { return dim_; }
  double momentum() const { return momentum_; }

  bool initialized(int c) const { return initialized_.at(static_cast<std::size_t>(c)); }
  /// nullopt for classes never observed.
  std::optional<std::span<const double>> read(int c) const;

  /// First observation copies rho; later ones blend mu <- l*mu + (1-l)*rho.
  void update(const PrototypeSet& fresh);

  /// Raw restore for checkpoint loading.
  void restore(int c, std::span<const double> mu, bool initialized);
  std::span<const double> raw(int c) const;

  bool operator==(const PrototypeBank&) const = default;

 private:
  int classes_;
  int dim_;
  double momentum_;
  std::vector<std::vector<double>> mu_;
  std::vector<bool> initialized_;
};

PrototypeBank ema_update(PrototypeBank bank, const PrototypeSet& fresh);

/// xi(c) = mu_T(c) - mu_S(c); zero where either bank lacks c.
struct BiasMap {
  int dim = 0;
  std::vector<std::vector<double>> xi;

  BiasMap negated() const;
  static BiasMap zero(int classes, int dim);
};

BiasMap domain_bias(const PrototypeBank& source_bank, const PrototypeBank& target_bank);

/// rho_{S->T}(c) = rho_S(c) + xi(c), pixel counts preserved.
PrototypeSet calibrate(const PrototypeSet& instance, const BiasMap& bias);

}  // namespace pixproto

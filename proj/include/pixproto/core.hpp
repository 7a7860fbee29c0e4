#pragma once

// Domain types and small deterministic numerics shared by every module.
//
// Pixel indexing is row-major throughout: p = y * width + x.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pixproto {

/// Label value for "no class assigned". Also the reserved value in label PNGs.
inline constexpr std::uint8_t kUnlabeled = 255;

/// Largest class count representable next to the unlabeled sentinel.
inline constexpr int kMaxClasses = 255;

/// Raised when a caller breaks a documented precondition (shape mismatch,
/// out-of-range class, sealed data access).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for invalid hyperparameters or configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a loss or gradient becomes NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense H x W x D per-pixel embedding grid.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int d);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::span<double> pixel(std::size_t p) { return {data.data() + p * dim, static_cast<std::size_t>(dim)}; }
  std::span<const double> pixel(std::size_t p) const {
    return {data.data() + p * dim, static_cast<std::size_t>(dim)};
  }
  bool same_shape(const FeatureMap& o) const {
    return height == o.height && width == o.width && dim == o.dim;
  }
  bool all_finite() const;
};

/// Gradient carrier with the shape of a FeatureMap.
using FeatureGrad = FeatureMap;

/// Per-pixel class index or kUnlabeled. Equivalent to a one-hot-or-empty
/// H x W x C assignment.
struct LabelMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  /// All pixels start unlabeled.
  LabelMap(int h, int w, int c);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::uint8_t operator[](std::size_t p) const { return data[p]; }
  bool labeled(std::size_t p) const { return data[p] != kUnlabeled; }
  /// y(p, c) in the one-hot view.
  int one_hot(std::size_t p, int c) const { return data[p] == c ? 1 : 0; }
  void set(std::size_t p, int c);
  void clear(std::size_t p) { data[p] = kUnlabeled; }
  std::size_t labeled_count() const;
  /// Throws ContractViolation if any stored index is >= classes.
  void validate() const;

  bool operator==(const LabelMap&) const = default;
};

/// Per-pixel probability simplex over C classes (softmax of the segmentation head).
struct ProbMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> data;

  ProbMap() = default;
  ProbMap(int h, int w, int c);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::span<double> pixel(std::size_t p) { return {data.data() + p * classes, static_cast<std::size_t>(classes)}; }
  std::span<const double> pixel(std::size_t p) const {
    return {data.data() + p * classes, static_cast<std::size_t>(classes)};
  }
  int argmax(std::size_t p) const;
  /// Throws ContractViolation unless every pixel is a simplex within `tol`.
  void validate(double tol = 1e-6) const;
};

struct ClassSet {
  int count = 0;
  std::vector<std::string> names;

  explicit ClassSet(int c, std::vector<std::string> n = {});
  std::string name(int c) const;
};

/// Cosine norm floor so zero vectors produce 0 similarity instead of NaN.
inline constexpr double kCosineEps = 1e-8;

/// a.b / (max(|a|, eps) * max(|b|, eps)), clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// exp(v - max) / sum. Throws ContractViolation on an empty input.
std::vector<double> stable_softmax(std::span<const double> logits);

/// In-place variant writing into `out` (same length as `logits`).
void stable_softmax(std::span<const double> logits, std::span<double> out);

/// -sum p log p with 0 log 0 = 0.
double shannon_entropy(std::span<const double> p);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// Nearest-neighbour resampling of a label map to a new spatial size.
/// Source pixel for output (y, x) is (floor(y * H / h), floor(x * W / w)).
LabelMap resample_nearest(const LabelMap& labels, int height, int width);

/// Stacks maps vertically (all must share width and channel count). Used to
/// treat a batch as one tall map for pooled statistics.
FeatureMap stack_rows(std::span<const FeatureMap> maps);
LabelMap stack_rows(std::span<const LabelMap> maps);

/// SplitMix64 finalizer chained over the key parts.
std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts);

/// Independent, reproducible stream for (seed, index, purpose, ...).
inline std::mt19937_64 keyed_rng(std::initializer_list<std::uint64_t> parts) { return std::mt19937_64(mix_key(parts)); }

}  // namespace pixproto

#pragma once

// Procedural two-domain segmentation scenes. Layout (sky band, road band,
// background, elliptical blobs) depends only on (seed, index); a DomainShift
// changes appearance after layout, so both domains share class geometry.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pixproto/core.hpp"
#include "pixproto/encoder.hpp"

namespace pixproto {

using Color = std::array<double, 3>;

enum class Domain { kSource, kTarget };

/// Default class layout indices.
namespace scene_class {
inline constexpr int kBackground = 0;
inline constexpr int kRoad = 1;
inline constexpr int kSky = 2;
inline constexpr int kBlobA = 3;
inline constexpr int kBlobB = 4;
}  // namespace scene_class

struct SceneSpec {
  int height = 64;
  int width = 64;
  std::vector<std::string> class_names{"background", "road", "sky", "blob-a", "blob-b"};
  std::vector<Color> colors{
      Color{0.50, 0.50, 0.50},  // background
      Color{0.28, 0.30, 0.36},  // road
      Color{0.55, 0.72, 0.90},  // sky
      Color{0.78, 0.32, 0.25},  // blob-a
      Color{0.82, 0.78, 0.22},  // blob-b
  };
  int min_blobs = 1;
  int max_blobs = 4;
  double rare_probability = 0.3;  ///< share of scenes containing blob-b
  double texture = 0.06;          ///< amplitude of the iid per-pixel source texture
  std::uint64_t seed = 1;

  int classes() const { return static_cast<int>(colors.size()); }
  /// Throws ConfigError; requires 5 classes with colors pairwise >= 0.1 apart (max-norm).
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

struct DomainShift {
  Color global_offset{0.0, 0.0, 0.0};
  std::vector<Color> class_offsets;  ///< empty or one per class
  double noise_sigma = 0.0;          ///< additive Gaussian noise
  double texture_jitter = 0.0;       ///< amplitude of an oriented stripe texture

  /// Componentwise multiple of this shift.
  DomainShift scaled(double factor) const;
  double magnitude() const;
  bool is_zero() const { return magnitude() == 0.0; }
  bool operator==(const DomainShift&) const = default;

  /// The benchmark's default source -> target gap.
  static DomainShift benchmark_default();
};

struct LabeledScene {
  Image image;
  LabelMap ground_truth;
  Domain domain = Domain::kSource;
  int index = 0;
};

/// Deterministic in (spec.seed, index, shift, domain). Source scenes ignore `shift`.
LabeledScene generate(const SceneSpec& spec, const DomainShift& shift, int index, Domain domain);

/// Same as generate, without clamping to [0, 1] (used to check offsets exactly).
Image generate_unclamped(const SceneSpec& spec, const DomainShift& shift, int index, Domain domain);

/// Index bases that keep the three scene pools disjoint.
inline constexpr int kTargetIndexBase = 1'000'000;
inline constexpr int kEvalIndexBase = 2'000'000;

/// Target scene as seen by training code: image only.
class TargetView {
 public:
  explicit TargetView(const LabeledScene& scene) : scene_(&scene) {}
  const Image& image() const { return scene_->image; }
  int index() const { return scene_->index; }
  /// Always throws ContractViolation ("sealed"): target labels are not
  /// available to training code.
  [[noreturn]] const LabelMap& ground_truth() const;

 private:
  const LabeledScene* scene_;
};

class SceneDataset;

/// The only accessor of target ground truth; handed to metrics code.
class EvalHandle {
 public:
  const LabelMap& train_target_truth(int i) const;
  int eval_size() const;
  const LabeledScene& eval_scene(int i) const;

 private:
  friend class SceneDataset;
  explicit EvalHandle(const SceneDataset& ds) : ds_(&ds) {}
  const SceneDataset* ds_;
};

/// Source scenes with labels, target scenes behind TargetView, and a held-out
/// target evaluation pool reachable only through EvalHandle.
class SceneDataset {
 public:
  SceneDataset(SceneSpec spec, DomainShift shift, int n_source, int n_target, int n_eval);

  const SceneSpec& spec() const { return spec_; }
  const DomainShift& shift() const { return shift_; }
  int source_size() const { return static_cast<int>(source_.size()); }
  int target_size() const { return static_cast<int>(target_.size()); }

  const LabeledScene& source(int i) const { return source_.at(static_cast<std::size_t>(i)); }
  TargetView target(int i) const { return TargetView(target_.at(static_cast<std::size_t>(i))); }
  EvalHandle evaluation() const { return EvalHandle(*this); }

  /// Source indices whose ground truth contains the rare blob class.
  const std::vector<int>& rare_source_indices() const { return rare_source_; }

  /// Test levers: rewrite target training ground truth or images in place.
  void mutate_target_truth(const std::function<void(LabelMap&, int)>& fn);
  void mutate_target_images(const std::function<void(Image&, int)>& fn);

 private:
  friend class EvalHandle;
  SceneSpec spec_;
  DomainShift shift_;
  std::vector<LabeledScene> source_;
  std::vector<LabeledScene> target_;
  std::vector<LabeledScene> eval_;
  std::vector<int> rare_source_;
};

}  // namespace pixproto

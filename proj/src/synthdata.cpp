#include "pixproto/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace pixproto {

namespace {

enum Purpose : std::uint64_t { kLayout = 1, kTexture = 2, kTargetNoise = 3, kStripe = 4 };

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

LabelMap layout(const SceneSpec& spec, int index) {
  auto rng = keyed_rng({spec.seed, static_cast<std::uint64_t>(index), kLayout});
  const int h = spec.height;
  const int w = spec.width;
  LabelMap gt(h, w, spec.classes());

  const double sky_h = uniform(rng, 0.15, 0.35) * h;
  const double road_h = uniform(rng, 0.20, 0.40) * h;
  const double wave_amp = uniform(rng, 0.0, 0.04) * h;
  const double wave_freq = uniform(rng, 1.0, 3.0);
  const double wave_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (int x = 0; x < w; ++x) {
    const double wave = wave_amp * std::sin(2.0 * std::numbers::pi * wave_freq * x / w + wave_phase);
    for (int y = 0; y < h; ++y) {
      int c = scene_class::kBackground;
      if (y < sky_h + wave) {
        c = scene_class::kSky;
      } else if (y >= h - road_h - wave) {
        c = scene_class::kRoad;
      }
      gt.set(static_cast<std::size_t>(y) * w + x, c);
    }
  }

  const int n_blobs = uniform_int(rng, spec.min_blobs, spec.max_blobs);
  const bool has_rare = uniform(rng, 0.0, 1.0) < spec.rare_probability;
  for (int b = 0; b < n_blobs; ++b) {
    const double coin = uniform(rng, 0.0, 1.0);
    const int cls = has_rare && (b == 0 || coin < 0.5) ? scene_class::kBlobB : scene_class::kBlobA;
    const double cy = uniform(rng, 0.2, 0.9) * h;
    const double cx = uniform(rng, 0.0, 1.0) * w;
    const double ry = uniform(rng, 1.0 / 12.0, 1.0 / 5.0) * h;
    const double rx = uniform(rng, 1.0 / 12.0, 1.0 / 5.0) * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dy = (y + 0.5 - cy) / ry;
        const double dx = (x + 0.5 - cx) / rx;
        if (dy * dy + dx * dx <= 1.0) gt.set(static_cast<std::size_t>(y) * w + x, cls);
      }
    }
  }
  return gt;
}

Image paint(const SceneSpec& spec, const DomainShift& shift, const LabelMap& gt, int index, Domain domain) {
  const int h = spec.height;
  const int w = spec.width;
  Image img(h, w, 3);
  auto tex_rng = keyed_rng({spec.seed, static_cast<std::uint64_t>(index), kTexture});
  std::uniform_real_distribution<double> tex(-1.0, 1.0);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    const Color& base = spec.colors[gt[p]];
    auto px = img.pixel(p);
    for (int ch = 0; ch < 3; ++ch) px[ch] = base[ch] + spec.texture * tex(tex_rng);
  }
  if (domain == Domain::kSource || shift.is_zero()) return img;

  auto noise_rng = keyed_rng({spec.seed, static_cast<std::uint64_t>(index), kTargetNoise});
  std::normal_distribution<double> noise(0.0, 1.0);
  auto stripe_rng = keyed_rng({spec.seed, static_cast<std::uint64_t>(index), kStripe});
  const double theta = uniform(stripe_rng, 0.0, std::numbers::pi);
  const double period = uniform(stripe_rng, 4.0, 8.0);
  const double phase = uniform(stripe_rng, 0.0, 2.0 * std::numbers::pi);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const int c = gt[p];
      const double stripe =
          shift.texture_jitter *
          std::sin(2.0 * std::numbers::pi * (x * std::cos(theta) + y * std::sin(theta)) / period + phase);
      auto px = img.pixel(p);
      for (int ch = 0; ch < 3; ++ch) {
        double v = px[ch] + shift.global_offset[ch] + stripe;
        if (!shift.class_offsets.empty()) v += shift.class_offsets[c][ch];
        v += shift.noise_sigma * noise(noise_rng);
        px[ch] = v;
      }
    }
  }
  return img;
}

}  // namespace

void SceneSpec::validate() const {
  if (height < 4 || width < 4) throw ConfigError("scene: height and width must be >= 4");
  if (colors.size() != 5 || class_names.size() != 5) {
    throw ConfigError("scene: the layout expects exactly 5 classes (colors and names)");
  }
  for (std::size_t a = 0; a < colors.size(); ++a) {
    for (std::size_t b = a + 1; b < colors.size(); ++b) {
      double d = 0.0;
      for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(colors[a][ch] - colors[b][ch]));
      if (d < 0.1) throw ConfigError("scene: class colors " + class_names[a] + "/" + class_names[b] + " closer than 0.1");
    }
  }
  if (min_blobs < 0 || max_blobs < min_blobs) throw ConfigError("scene: invalid blob count range");
  if (!(rare_probability >= 0.0 && rare_probability <= 1.0)) throw ConfigError("scene: rare_probability outside [0,1]");
  if (!(texture >= 0.0)) throw ConfigError("scene: texture must be >= 0");
}

DomainShift DomainShift::scaled(double factor) const {
  DomainShift out = *this;
  for (double& v : out.global_offset) v *= factor;
  for (auto& c : out.class_offsets) {
    for (double& v : c) v *= factor;
  }
  out.noise_sigma *= factor;
  out.texture_jitter *= factor;
  return out;
}

double DomainShift::magnitude() const {
  double s = 0.0;
  for (double v : global_offset) s += v * v;
  for (const auto& c : class_offsets) {
    for (double v : c) s += v * v;
  }
  s += noise_sigma * noise_sigma + texture_jitter * texture_jitter;
  return std::sqrt(s);
}

DomainShift DomainShift::benchmark_default() {
  DomainShift s;
  s.global_offset = {0.075, 0.025, -0.075};
  s.class_offsets = {
      Color{0.0, 0.0, 0.0},
      Color{0.125, 0.1, 0.025},
      Color{-0.075, -0.125, -0.15},
      Color{-0.125, 0.15, 0.075},
      Color{-0.15, -0.1, 0.125},
  };
  s.noise_sigma = 0.0375;
  s.texture_jitter = 0.05;
  return s;
}

Image generate_unclamped(const SceneSpec& spec, const DomainShift& shift, int index, Domain domain) {
  spec.validate();
  if (!shift.class_offsets.empty() && static_cast<int>(shift.class_offsets.size()) != spec.classes()) {
    throw ConfigError("domain shift: class_offsets must be empty or one per class");
  }
  return paint(spec, shift, layout(spec, index), index, domain);
}

LabeledScene generate(const SceneSpec& spec, const DomainShift& shift, int index, Domain domain) {
  LabeledScene scene;
  scene.ground_truth = layout(spec, index);
  scene.image = generate_unclamped(spec, shift, index, domain);
  for (double& v : scene.image.data) v = std::clamp(v, 0.0, 1.0);
  scene.domain = domain;
  scene.index = index;
  return scene;
}

const LabelMap& TargetView::ground_truth() const {
  throw ContractViolation("sealed: target ground truth is not available through the training view");
}

const LabelMap& EvalHandle::train_target_truth(int i) const {
  return ds_->target_.at(static_cast<std::size_t>(i)).ground_truth;
}

int EvalHandle::eval_size() const { return static_cast<int>(ds_->eval_.size()); }

const LabeledScene& EvalHandle::eval_scene(int i) const { return ds_->eval_.at(static_cast<std::size_t>(i)); }

SceneDataset::SceneDataset(SceneSpec spec, DomainShift shift, int n_source, int n_target, int n_eval)
    : spec_(std::move(spec)), shift_(std::move(shift)) {
  spec_.validate();
  if (n_source < 1 || n_target < 1 || n_eval < 0) throw ConfigError("dataset: need n_source, n_target >= 1");
  for (int i = 0; i < n_source; ++i) {
    source_.push_back(generate(spec_, shift_, i, Domain::kSource));
    const auto& gt = source_.back().ground_truth.data;
    if (std::find(gt.begin(), gt.end(), scene_class::kBlobB) != gt.end()) rare_source_.push_back(i);
  }
  for (int i = 0; i < n_target; ++i) target_.push_back(generate(spec_, shift_, kTargetIndexBase + i, Domain::kTarget));
  for (int i = 0; i < n_eval; ++i) eval_.push_back(generate(spec_, shift_, kEvalIndexBase + i, Domain::kTarget));
}

void SceneDataset::mutate_target_truth(const std::function<void(LabelMap&, int)>& fn) {
  for (std::size_t i = 0; i < target_.size(); ++i) fn(target_[i].ground_truth, static_cast<int>(i));
}

void SceneDataset::mutate_target_images(const std::function<void(Image&, int)>& fn) {
  for (std::size_t i = 0; i < target_.size(); ++i) fn(target_[i].image, static_cast<int>(i));
}

}  // namespace pixproto

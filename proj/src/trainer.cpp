#include "pixproto/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace pixproto {

namespace {

enum Phase : std::uint64_t { kPretrainPhase = 11, kAdaptPhase = 12 };
enum SamplePurpose : std::uint64_t { kPickSource = 21, kPickTarget = 22, kAugSource = 23, kAugTarget = 24 };

struct Geometry {
  int height;
  int width;
  bool flip;
};

Image warp(const Image& img, const Geometry& g) {
  Image out(g.height, g.width, img.dim);
  for (int y = 0; y < g.height; ++y) {
    const int sy = static_cast<int>(static_cast<long long>(y) * img.height / g.height);
    for (int x = 0; x < g.width; ++x) {
      int sx = static_cast<int>(static_cast<long long>(x) * img.width / g.width);
      if (g.flip) sx = img.width - 1 - sx;
      auto src = img.pixel(static_cast<std::size_t>(sy) * img.width + sx);
      auto dst = out.pixel(static_cast<std::size_t>(y) * g.width + x);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return out;
}

LabelMap warp(const LabelMap& labels, const Geometry& g) {
  LabelMap out(g.height, g.width, labels.classes);
  for (int y = 0; y < g.height; ++y) {
    const int sy = static_cast<int>(static_cast<long long>(y) * labels.height / g.height);
    for (int x = 0; x < g.width; ++x) {
      int sx = static_cast<int>(static_cast<long long>(x) * labels.width / g.width);
      if (g.flip) sx = labels.width - 1 - sx;
      out.data[static_cast<std::size_t>(y) * g.width + x] = labels.data[static_cast<std::size_t>(sy) * labels.width + sx];
    }
  }
  return out;
}

// One scale per batch so every image of a domain batch shares its size.
std::pair<int, int> batch_size_for(const TrainConfig& cfg, std::mt19937_64& rng) {
  const double s = cfg.scale_min == cfg.scale_max
                       ? cfg.scale_min
                       : std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng);
  const int h = std::max(4, static_cast<int>(std::lround(cfg.scene.height * s)));
  const int w = std::max(4, static_cast<int>(std::lround(cfg.scene.width * s)));
  return {h, w};
}

bool coin(std::mt19937_64& rng) { return (rng() >> 63) != 0; }

ProbMap stack_probs(const std::vector<const ProbMap*>& maps) {
  int rows = 0;
  for (const auto* m : maps) rows += m->height;
  ProbMap out(rows, maps[0]->width, maps[0]->classes);
  auto it = out.data.begin();
  for (const auto* m : maps) it = std::copy(m->data.begin(), m->data.end(), it);
  return out;
}

// Copies the rows of `stacked` that belong to image `k` (all images same size).
template <typename Map>
void add_slice(const Map& stacked, std::size_t k, std::size_t per_image, Map& dst) {
  const auto begin = stacked.data.begin() + static_cast<std::ptrdiff_t>(k * per_image);
  std::transform(begin, begin + static_cast<std::ptrdiff_t>(per_image), dst.data.begin(), dst.data.begin(),
                 [](double a, double b) { return a + b; });
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

struct TermAccumulator {
  double sum = 0.0;
  std::size_t groups = 0;
  std::size_t contributing = 0;
  std::size_t skipped = 0;
};

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) { throw ConfigError(field + ": " + msg); };
  try {
    scene.validate();
  } catch (const ConfigError& e) {
    fail("scene", e.what());
  }
  if (!shift.class_offsets.empty() && static_cast<int>(shift.class_offsets.size()) != scene.classes()) {
    fail("shift.class_offsets", "must be empty or one entry per class");
  }
  if (!(shift.noise_sigma >= 0.0)) fail("shift.noise_sigma", "must be >= 0");
  if (n_source < 1) fail("n_source", "must be >= 1");
  if (n_target < 1) fail("n_target", "must be >= 1");
  if (n_eval < 1) fail("n_eval", "must be >= 1");
  try {
    encoder.validate();
  } catch (const ConfigError& e) {
    fail("encoder", e.what());
  }
  if (encoder.classes != scene.classes()) fail("encoder.classes", "must equal the scene class count");
  if (pretrain_iterations < 0) fail("pretrain_iterations", "must be >= 0");
  if (!(pretrain_lr >= 0.0)) fail("pretrain_lr", "must be >= 0");
  if (iterations < 1) fail("iterations", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(lr > 0.0)) fail("lr", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(poly_power >= 0.0)) fail("poly_power", "must be >= 0");
  try {
    weights.validate();
  } catch (const ConfigError& e) {
    fail("weights", e.what());
  }
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) fail("ema_momentum", "must lie in [0, 1]");
  if (!(threshold > -1.0 && threshold < 1.0)) fail("threshold", "must lie in (-1, 1)");
  try {
    static_labels.validate();
  } catch (const ConfigError& e) {
    fail("static_labels", e.what());
  }
  if (!(scale_min > 0.0 && scale_max >= scale_min)) fail("scale_min/scale_max", "need 0 < scale_min <= scale_max");
  if (eval_interval < 0) fail("eval_interval", "must be >= 0");
}

std::vector<std::pair<std::string, std::string>> config_provenance() {
  const std::string reference = "[reference schedule]";
  const std::string scaled = "[reference schedule, scaled to desk size]";
  const std::string impl = "[implementation default]";
  return {
      {"seed", impl},
      {"scene", "[implementation default] synthetic benchmark layout"},
      {"shift", "[implementation default] synthetic domain gap"},
      {"n_source", impl},
      {"n_target", impl},
      {"n_eval", impl},
      {"encoder", "[implementation default] desk-scale stand-in for the segmentation backbone"},
      {"pretrain_iterations", "[reference schedule, scaled] source-only warm start"},
      {"pretrain_lr", impl},
      {"iterations", scaled + " 100k iterations"},
      {"batch_size", reference + " batch size of 4"},
      {"lr", impl + " (reference 7.5e-5 assumes a pretrained backbone)"},
      {"momentum", reference + " momentum of 0.9"},
      {"weight_decay", reference + " weight decay of 5e-4"},
      {"poly_power", "[implementation default] conventional poly exponent"},
      {"weights", impl + " loss balance parameters and temperature"},
      {"ema_momentum", impl + " EMA momentum"},
      {"threshold", impl + " (reference 0.75; raised to stop calibrated-label runaway at desk scale)"},
      {"static_labels.fraction", impl + " per-class selection fraction"},
      {"static_labels.refresh_interval", scaled + " static labels refreshed every 10k of 100k iterations"},
      {"switches", "[ablation] component toggles"},
      {"target_seg_labels", impl},
      {"pooling", impl},
      {"negatives", impl},
      {"augment_flip", reference + " horizontal flipping"},
      {"scale_min", reference + " random scaling in [0.8, 1.2]"},
      {"scale_max", reference + " random scaling in [0.8, 1.2]"},
      {"oversample_rare", "[approximation] rare-class source oversampling at 2x"},
      {"eval_interval", impl},
  };
}

TrainState initial_state(const TrainConfig& cfg, const SceneDataset& data) {
  cfg.validate();
  const int c = cfg.encoder.classes;
  const int d = cfg.encoder.feature_dim();
  TrainState s{EncoderParams::init(cfg.encoder, mix_key({cfg.seed, 0xE1C0DE})),
               SgdState(cfg.encoder),
               PrototypeBank(c, d, cfg.ema_momentum),
               PrototypeBank(c, d, cfg.ema_momentum),
               {},
               0};
  s.static_store.reserve(static_cast<std::size_t>(data.target_size()));
  for (int i = 0; i < data.target_size(); ++i) {
    const Image& img = data.target(i).image();
    s.static_store.emplace_back(img.height, img.width, c);
  }
  return s;
}

std::vector<SourceItem> sample_source_batch(const TrainConfig& cfg, const SceneDataset& data, long iteration,
                                            int phase) {
  auto pick = keyed_rng({cfg.seed, static_cast<std::uint64_t>(phase), static_cast<std::uint64_t>(iteration), kPickSource});
  auto aug = keyed_rng({cfg.seed, static_cast<std::uint64_t>(phase), static_cast<std::uint64_t>(iteration), kAugSource});
  std::vector<int> pool(static_cast<std::size_t>(data.source_size()));
  std::iota(pool.begin(), pool.end(), 0);
  if (cfg.oversample_rare) {
    const auto& rare = data.rare_source_indices();
    pool.insert(pool.end(), rare.begin(), rare.end());
  }
  std::uniform_int_distribution<std::size_t> u(0, pool.size() - 1);
  const auto [h, w] = batch_size_for(cfg, aug);
  std::vector<SourceItem> out;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const LabeledScene& scene = data.source(pool[u(pick)]);
    const Geometry g{h, w, cfg.augment_flip && coin(aug)};
    out.push_back({warp(scene.image, g), warp(scene.ground_truth, g)});
  }
  return out;
}

std::vector<TargetItem> sample_target_batch(const TrainConfig& cfg, const SceneDataset& data,
                                            const TrainState& state, long iteration, const EvalHandle* truth) {
  auto pick = keyed_rng({cfg.seed, kAdaptPhase, static_cast<std::uint64_t>(iteration), kPickTarget});
  auto aug = keyed_rng({cfg.seed, kAdaptPhase, static_cast<std::uint64_t>(iteration), kAugTarget});
  std::uniform_int_distribution<int> u(0, data.target_size() - 1);
  const auto [h, w] = batch_size_for(cfg, aug);
  std::vector<TargetItem> out;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const int idx = u(pick);
    const TargetView view = data.target(idx);
    const Geometry g{h, w, cfg.augment_flip && coin(aug)};
    TargetItem item{warp(view.image(), g), warp(state.static_store.at(static_cast<std::size_t>(idx)), g), {}};
    if (truth != nullptr) item.truth = warp(truth->train_target_truth(idx), g);
    out.push_back(std::move(item));
  }
  return out;
}

double pretrain_step(TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source) {
  EncoderGrads grads = EncoderParams::zeros(cfg.encoder);
  std::vector<ForwardResult> fwd;
  std::vector<const ProbMap*> probs;
  std::vector<LabelMap> labels;
  for (const auto& item : source) {
    fwd.push_back(forward(state.params, item.image));
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    probs.push_back(&fwd[i].probs);
    labels.push_back(resample_nearest(source[i].labels, fwd[i].features.height, fwd[i].features.width));
  }
  const ProbMap stacked = stack_probs(probs);
  const PixelLossResult seg = segmentation_loss(stacked, stack_rows(std::span<const LabelMap>(labels)));
  require_finite(seg.loss, "pretraining loss");
  const std::size_t per_image = fwd[0].probs.data.size();
  for (std::size_t i = 0; i < source.size(); ++i) {
    LogitGrad gl(fwd[i].probs.height, fwd[i].probs.width, fwd[i].probs.classes);
    add_slice(seg.grad_logits, i, per_image, gl);
    accumulate(grads, backward(state.params, fwd[i], FeatureGrad{}, gl));
  }
  const double lr = poly_lr(cfg.pretrain_lr, state.iteration, cfg.pretrain_iterations, cfg.poly_power);
  sgd_step(state.params, grads, state.sgd, lr, cfg.momentum, cfg.weight_decay);
  ++state.iteration;
  return seg.loss;
}

StepComputation compute_step(const TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source,
                             std::span<const TargetItem> target) {
  if (source.empty() || target.empty()) throw ContractViolation("train_step: empty batch");
  if (cfg.pooling == PrototypePooling::kPair && source.size() != target.size()) {
    throw ContractViolation("train_step: pair pooling needs equal source/target batch sizes");
  }
  const AblationSwitches& sw = cfg.switches;
  const LossWeights& w = cfg.weights;
  const int classes = cfg.encoder.classes;
  const std::size_t ns = source.size();
  const std::size_t nt = target.size();

  // (1) forward both domains
  std::vector<ForwardResult> fs, ft;
  for (const auto& item : source) fs.push_back(forward(state.params, item.image));
  for (const auto& item : target) ft.push_back(forward(state.params, item.image));
  const int sh = fs[0].features.height, swd = fs[0].features.width;
  const int th = ft[0].features.height, twd = ft[0].features.width;
  std::vector<LabelMap> ys, yf;
  for (const auto& item : source) ys.push_back(resample_nearest(item.labels, sh, swd));
  for (const auto& item : target) yf.push_back(resample_nearest(item.static_labels, th, twd));

  // prototype groups: the whole batch, or one (source i, target i) pair each
  std::vector<std::vector<std::size_t>> src_groups, tgt_groups;
  if (cfg.pooling == PrototypePooling::kBatch) {
    src_groups.emplace_back(ns);
    std::iota(src_groups[0].begin(), src_groups[0].end(), 0);
    tgt_groups.emplace_back(nt);
    std::iota(tgt_groups[0].begin(), tgt_groups[0].end(), 0);
  } else {
    for (std::size_t i = 0; i < ns; ++i) {
      src_groups.push_back({i});
      tgt_groups.push_back({i});
    }
  }
  const std::size_t n_groups = src_groups.size();
  auto gather_f = [](const std::vector<ForwardResult>& f, const std::vector<std::size_t>& idx) {
    std::vector<FeatureMap> maps;
    for (std::size_t i : idx) maps.push_back(f[i].features);
    return stack_rows(std::span<const FeatureMap>(maps));
  };
  auto gather_y = [](const std::vector<LabelMap>& y, const std::vector<std::size_t>& idx) {
    std::vector<LabelMap> maps;
    for (std::size_t i : idx) maps.push_back(y[i]);
    return stack_rows(std::span<const LabelMap>(maps));
  };

  // (3) bias from the banks as they stood before this step
  const BiasMap bias = sw.use_calibration ? domain_bias(state.bank_source, state.bank_target)
                                          : BiasMap::zero(classes, cfg.encoder.feature_dim());

  std::vector<FeatureMap> group_fs, group_ft;
  std::vector<LabelMap> group_ys, group_yt;
  std::vector<PrototypeSet> rho_s, rho_t;
  std::vector<LabelMap> yd(nt), yt(nt);
  for (std::size_t g = 0; g < n_groups; ++g) {
    group_fs.push_back(gather_f(fs, src_groups[g]));
    group_ys.push_back(gather_y(ys, src_groups[g]));
    // (2) instance source prototypes
    rho_s.push_back(masked_average_pool(group_fs[g], group_ys[g]));
    const PrototypeSet calibrated = calibrate(rho_s[g], bias);
    for (std::size_t i : tgt_groups[g]) {
      // (4) dynamic labels, (5) hybrid fusion
      yd[i] = sw.use_dynamic ? dynamic_labels(ft[i].features, calibrated, cfg.threshold, classes).labels
                             : LabelMap(th, twd, classes);
      yt[i] = hybrid_fuse(yd[i], yf[i]);
    }
    group_ft.push_back(gather_f(ft, tgt_groups[g]));
    group_yt.push_back(gather_y(yt, tgt_groups[g]));
    // (6) target prototypes from hybrid labels
    rho_t.push_back(masked_average_pool(group_ft[g], group_yt[g]));
  }

  // (7) losses and gradients
  std::vector<FeatureGrad> gfs, gft;
  std::vector<LogitGrad> gls, glt;
  for (std::size_t i = 0; i < ns; ++i) {
    gfs.emplace_back(sh, swd, cfg.encoder.feature_dim());
    gls.emplace_back(sh, swd, classes);
  }
  for (std::size_t i = 0; i < nt; ++i) {
    gft.emplace_back(th, twd, cfg.encoder.feature_dim());
    glt.emplace_back(th, twd, classes);
  }
  bool any_source_grad = false;
  bool any_target_grad = false;

  StepRecord rec;
  rec.iteration = state.iteration;
  LossParts parts;
  LossBreakdown counts;

  std::vector<const ProbMap*> ps_ptr, pt_ptr;
  for (const auto& f : fs) ps_ptr.push_back(&f.probs);
  for (const auto& f : ft) pt_ptr.push_back(&f.probs);
  const std::size_t s_logit_size = fs[0].probs.data.size();
  const std::size_t t_logit_size = ft[0].probs.data.size();

  auto apply_logit_grad = [](const LogitGrad& stacked, double weight, std::size_t per_image,
                             std::vector<LogitGrad>& dst) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const auto begin = stacked.data.begin() + static_cast<std::ptrdiff_t>(i * per_image);
      for (std::size_t k = 0; k < per_image; ++k) dst[i].data[k] += weight * begin[static_cast<std::ptrdiff_t>(k)];
    }
  };

  if (w.seg_source > 0.0 || w.ent_source > 0.0) {
    const ProbMap ps = stack_probs(ps_ptr);
    if (w.seg_source > 0.0) {
      const auto seg = segmentation_loss(ps, stack_rows(std::span<const LabelMap>(ys)));
      parts.seg_source = seg.loss;
      counts.n_seg_source = seg.contributing;
      if (seg.status == PairStatus::kOk) {
        apply_logit_grad(seg.grad_logits, w.seg_source, s_logit_size, gls);
        any_source_grad = true;
      }
    }
    if (w.ent_source > 0.0) {
      const auto ent = entropy_loss(ps);
      parts.ent_source = ent.loss;
      counts.n_ent_source = ent.contributing;
      apply_logit_grad(ent.grad_logits, w.ent_source, s_logit_size, gls);
      any_source_grad = true;
    }
  }
  if (w.seg_target > 0.0 || w.ent_target > 0.0) {
    const ProbMap pt = stack_probs(pt_ptr);
    if (w.seg_target > 0.0) {
      const auto& labels = cfg.target_seg_labels == TargetSegLabels::kHybrid ? yt : yf;
      const auto seg = segmentation_loss(pt, stack_rows(std::span<const LabelMap>(labels)));
      parts.seg_target = seg.loss;
      counts.n_seg_target = seg.contributing;
      if (seg.status == PairStatus::kOk) {
        apply_logit_grad(seg.grad_logits, w.seg_target, t_logit_size, glt);
        any_target_grad = true;
      }
    }
    if (w.ent_target > 0.0) {
      const auto ent = entropy_loss(pt);
      parts.ent_target = ent.loss;
      counts.n_ent_target = ent.contributing;
      apply_logit_grad(ent.grad_logits, w.ent_target, t_logit_size, glt);
      any_target_grad = true;
    }
  }

  // Contrastive terms. `pixels` side receives direct gradients; the
  // prototype side receives them through masked average pooling.
  auto contrast = [&](bool active, double weight, const std::vector<FeatureMap>& pix_f,
                      const std::vector<LabelMap>& pix_y, const std::vector<PrototypeSet>& protos,
                      const std::vector<LabelMap>& proto_y, const std::vector<std::vector<std::size_t>>& pix_groups,
                      const std::vector<std::vector<std::size_t>>& proto_groups, std::vector<FeatureGrad>& pix_grad,
                      std::vector<FeatureGrad>& proto_grad, const PrototypeBank& fallback_bank) {
    TermAccumulator acc;
    if (!active) return acc;
    std::vector<ContrastiveResult> results;
    for (std::size_t g = 0; g < n_groups; ++g) {
      PrototypeSet fallback;
      const PrototypeSet* fb = nullptr;
      if (cfg.negatives == NegativeSet::kAllClassesBankFallback) {
        fallback.dim = cfg.encoder.feature_dim();
        for (int c = 0; c < classes; ++c) {
          if (auto mu = fallback_bank.read(c)) fallback.entries[c] = Prototype{{mu->begin(), mu->end()}, 1};
        }
        fb = &fallback;
      }
      results.push_back(pixel_prototype_contrast(pix_f[g], pix_y[g], protos[g], w.tau, fb));
      acc.skipped += results.back().skipped;
      if (results.back().status == PairStatus::kOk) {
        ++acc.groups;
        acc.contributing += results.back().contributing;
      }
    }
    if (acc.groups == 0) return acc;
    const double scale = weight / static_cast<double>(acc.groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
      const auto& r = results[g];
      if (r.status != PairStatus::kOk) continue;
      acc.sum += r.loss;
      const std::size_t pix_per = static_cast<std::size_t>(pix_grad[0].pixels()) * pix_grad[0].dim;
      for (std::size_t k = 0; k < pix_groups[g].size(); ++k) {
        const std::size_t i = pix_groups[g][k];
        const auto begin = r.grad_features.data.begin() + static_cast<std::ptrdiff_t>(k * pix_per);
        for (std::size_t j = 0; j < pix_per; ++j) pix_grad[i].data[j] += scale * begin[static_cast<std::ptrdiff_t>(j)];
      }
      FeatureGrad back(proto_y[g].height, proto_y[g].width, cfg.encoder.feature_dim());
      masked_average_pool_backward(r.grad_protos, protos[g], proto_y[g], back);
      const std::size_t proto_per = static_cast<std::size_t>(proto_grad[0].pixels()) * proto_grad[0].dim;
      for (std::size_t k = 0; k < proto_groups[g].size(); ++k) {
        const std::size_t i = proto_groups[g][k];
        const auto begin = back.data.begin() + static_cast<std::ptrdiff_t>(k * proto_per);
        for (std::size_t j = 0; j < proto_per; ++j) proto_grad[i].data[j] += scale * begin[static_cast<std::ptrdiff_t>(j)];
      }
    }
    acc.sum /= static_cast<double>(acc.groups);
    return acc;
  };

  const TermAccumulator fc = contrast(sw.use_fcl && w.fcl > 0.0, w.fcl, group_ft, group_yt, rho_s, group_ys,
                                      tgt_groups, src_groups, gft, gfs, state.bank_source);
  const TermAccumulator bc = contrast(sw.use_bcl && w.bcl > 0.0, w.bcl, group_fs, group_ys, rho_t, group_yt,
                                      src_groups, tgt_groups, gfs, gft, state.bank_target);
  parts.fcl = fc.sum;
  parts.bcl = bc.sum;
  counts.n_fcl = fc.contributing;
  counts.n_bcl = bc.contributing;
  rec.skipped_fcl = fc.skipped;
  rec.skipped_bcl = bc.skipped;
  rec.fcl_no_pairs = (sw.use_fcl && w.fcl > 0.0) && fc.groups == 0;
  rec.bcl_no_pairs = (sw.use_bcl && w.bcl > 0.0) && bc.groups == 0;
  if (fc.groups > 0 || bc.groups > 0) {
    any_source_grad = true;
    any_target_grad = true;
  }

  rec.loss = total_loss(parts, w);
  rec.loss.n_seg_source = counts.n_seg_source;
  rec.loss.n_seg_target = counts.n_seg_target;
  rec.loss.n_ent_source = counts.n_ent_source;
  rec.loss.n_ent_target = counts.n_ent_target;
  rec.loss.n_fcl = counts.n_fcl;
  rec.loss.n_bcl = counts.n_bcl;
  require_finite(rec.loss.total, "training loss");

  // backpropagate into the encoder
  EncoderGrads grads = EncoderParams::zeros(cfg.encoder);
  if (any_source_grad) {
    for (std::size_t i = 0; i < ns; ++i) accumulate(grads, backward(state.params, fs[i], gfs[i], gls[i]));
  }
  if (any_target_grad) {
    for (std::size_t i = 0; i < nt; ++i) accumulate(grads, backward(state.params, ft[i], gft[i], glt[i]));
  }
  if (!target[0].truth.data.empty()) {
    rec.has_truth = true;
    std::vector<PseudoLabelReport> rd, rs, rh;
    double same = 0.0, diff = 0.0;
    std::size_t n_same = 0, n_diff = 0;
    for (std::size_t g = 0; g < n_groups; ++g) {
      for (std::size_t i : tgt_groups[g]) {
        const LabelMap truth = resample_nearest(target[i].truth, th, twd);
        rd.push_back(label_metrics(yd[i], truth));
        rs.push_back(label_metrics(yf[i], truth));
        rh.push_back(label_metrics(yt[i], truth));
        for (std::size_t p = 0; p < truth.pixels(); ++p) {
          if (!truth.labeled(p)) continue;
          auto f = ft[i].features.pixel(p);
          for (const auto& [c, proto] : rho_s[g].entries) {
            const double s = cosine_similarity(f, proto.vec);
            if (c == truth[p]) {
              same += s;
              ++n_same;
            } else {
              diff += s;
              ++n_diff;
            }
          }
        }
      }
    }
    rec.dynamic_report = merge_reports(rd);
    rec.static_report = merge_reports(rs);
    rec.hybrid_report = merge_reports(rh);
    rec.same_class_similarity = n_same > 0 ? same / static_cast<double>(n_same) : 0.0;
    rec.diff_class_similarity = n_diff > 0 ? diff / static_cast<double>(n_diff) : 0.0;
  }

  return StepComputation{std::move(rec), std::move(grads), std::move(rho_s), std::move(rho_t)};
}

StepRecord train_step(TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source,
                      std::span<const TargetItem> target) {
  StepComputation step = compute_step(state, cfg, source, target);
  // (8) optimizer step
  step.record.lr = poly_lr(cfg.lr, state.iteration, cfg.iterations, cfg.poly_power);
  sgd_step(state.params, step.grads, state.sgd, step.record.lr, cfg.momentum, cfg.weight_decay);
  // (9) EMA banks absorb this step's (pre-update) prototypes
  for (std::size_t g = 0; g < step.rho_source.size(); ++g) {
    state.bank_source.update(step.rho_source[g]);
    state.bank_target.update(step.rho_target[g]);
  }
  ++state.iteration;
  return std::move(step.record);
}

void refresh_static_labels(TrainState& state, const TrainConfig& cfg, const SceneDataset& data) {
  for (int i = 0; i < data.target_size(); ++i) {
    const Image& img = data.target(i).image();
    const ForwardResult fwd = forward(state.params, img);
    const LabelMap y = static_labels(fwd.probs, cfg.static_labels);
    state.static_store.at(static_cast<std::size_t>(i)) = resample_nearest(y, img.height, img.width);
  }
}

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {}

void ConfusionMatrix::add(const LabelMap& prediction, const LabelMap& ground_truth) {
  if (prediction.height != ground_truth.height || prediction.width != ground_truth.width) {
    throw ContractViolation("ConfusionMatrix::add: shape mismatch");
  }
  for (std::size_t p = 0; p < prediction.pixels(); ++p) {
    const int t = ground_truth[p];
    const int q = prediction[p];
    if (t == kUnlabeled) continue;
    if (t >= classes_ || q >= classes_) throw ContractViolation("ConfusionMatrix::add: class out of range");
    ++counts_[static_cast<std::size_t>(t) * classes_ + q];
  }
}

std::size_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_.at(static_cast<std::size_t>(truth) * classes_ + predicted);
}

bool ConfusionMatrix::present(int c) const {
  std::size_t row = 0;
  for (int q = 0; q < classes_; ++q) row += at(c, q);
  return row > 0;
}

double ConfusionMatrix::iou(int c) const {
  const std::size_t tp = at(c, c);
  std::size_t fp = 0, fn = 0;
  for (int k = 0; k < classes_; ++k) {
    if (k == c) continue;
    fp += at(k, c);
    fn += at(c, k);
  }
  const std::size_t denom = tp + fp + fn;
  return denom == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(denom);
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < classes_; ++c) {
    if (!present(c)) continue;
    sum += iou(c);
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

LabelMap predict(const EncoderParams& params, const Image& image) {
  const ForwardResult fwd = forward(params, image);
  LabelMap pred(fwd.probs.height, fwd.probs.width, fwd.probs.classes);
  for (std::size_t p = 0; p < pred.pixels(); ++p) pred.set(p, fwd.probs.argmax(p));
  return resample_nearest(pred, image.height, image.width);
}

EvalResult evaluate(const EncoderParams& params, const EvalHandle& handle) {
  ConfusionMatrix cm(params.config.classes);
  for (int i = 0; i < handle.eval_size(); ++i) {
    const LabeledScene& scene = handle.eval_scene(i);
    cm.add(predict(params, scene.image), scene.ground_truth);
  }
  EvalResult r;
  for (int c = 0; c < cm.classes(); ++c) {
    r.iou.push_back(cm.iou(c));
    r.present.push_back(cm.present(c));
  }
  r.miou = cm.miou();
  return r;
}

AlignmentStats alignment_stats(const EncoderParams& params, const SceneDataset& data, const EvalHandle& handle,
                               int n_source_scenes) {
  std::vector<FeatureMap> feats;
  std::vector<LabelMap> labels;
  const int n = std::min(n_source_scenes, data.source_size());
  for (int i = 0; i < n; ++i) {
    const auto& scene = data.source(i);
    ForwardResult fwd = forward(params, scene.image);
    labels.push_back(resample_nearest(scene.ground_truth, fwd.features.height, fwd.features.width));
    feats.push_back(std::move(fwd.features));
  }
  const PrototypeSet protos = masked_average_pool(std::span<const FeatureMap>(feats), std::span<const LabelMap>(labels));
  double same = 0.0, diff = 0.0;
  std::size_t n_same = 0, n_diff = 0;
  for (int i = 0; i < handle.eval_size(); ++i) {
    const auto& scene = handle.eval_scene(i);
    const ForwardResult fwd = forward(params, scene.image);
    const LabelMap truth = resample_nearest(scene.ground_truth, fwd.features.height, fwd.features.width);
    for (std::size_t p = 0; p < truth.pixels(); ++p) {
      auto f = fwd.features.pixel(p);
      for (const auto& [c, proto] : protos.entries) {
        const double s = cosine_similarity(f, proto.vec);
        if (c == truth[p]) {
          same += s;
          ++n_same;
        } else {
          diff += s;
          ++n_diff;
        }
      }
    }
  }
  AlignmentStats out;
  out.same_class = n_same > 0 ? same / static_cast<double>(n_same) : 0.0;
  out.diff_class = n_diff > 0 ? diff / static_cast<double>(n_diff) : 0.0;
  return out;
}

PseudoLabelVariants pseudo_label_variants(const TrainState& state, const TrainConfig& cfg, const SceneDataset& data,
                                          int target_index, double threshold) {
  const int classes = cfg.encoder.classes;
  const BiasMap bias = domain_bias(state.bank_source, state.bank_target);
  const LabeledScene& src = data.source(target_index % data.source_size());
  const ForwardResult fs = forward(state.params, src.image);
  const LabelMap ys = resample_nearest(src.ground_truth, fs.features.height, fs.features.width);
  const PrototypeSet rho_s = masked_average_pool(fs.features, ys);

  const ForwardResult ft = forward(state.params, data.target(target_index).image());
  const int h = ft.features.height, w = ft.features.width;
  PseudoLabelVariants v;
  v.static_labels = resample_nearest(state.static_store.at(static_cast<std::size_t>(target_index)), h, w);
  v.dynamic_uncalibrated = dynamic_labels(ft.features, rho_s, threshold, classes).labels;
  v.dynamic_calibrated = dynamic_labels(ft.features, calibrate(rho_s, bias), threshold, classes).labels;
  v.hybrid = hybrid_fuse(v.dynamic_calibrated, v.static_labels);
  return v;
}

PseudoLabelDiagnostics pseudo_label_diagnostics(const TrainState& state, const TrainConfig& cfg,
                                                const SceneDataset& data, const EvalHandle& handle, double threshold,
                                                int n_scenes) {
  std::vector<PseudoLabelReport> rs, rdn, rdc, rh;
  const int n = std::min(n_scenes, data.target_size());
  for (int i = 0; i < n; ++i) {
    const PseudoLabelVariants v = pseudo_label_variants(state, cfg, data, i, threshold);
    const LabelMap truth = resample_nearest(handle.train_target_truth(i), v.hybrid.height, v.hybrid.width);
    rs.push_back(label_metrics(v.static_labels, truth));
    rdn.push_back(label_metrics(v.dynamic_uncalibrated, truth));
    rdc.push_back(label_metrics(v.dynamic_calibrated, truth));
    rh.push_back(label_metrics(v.hybrid, truth));
  }
  return {merge_reports(rs), merge_reports(rdn), merge_reports(rdc), merge_reports(rh)};
}

SceneDataset make_dataset(const TrainConfig& cfg) {
  cfg.validate();
  SceneSpec spec = cfg.scene;
  spec.seed = cfg.seed;
  return SceneDataset(spec, cfg.shift, cfg.n_source, cfg.n_target, cfg.n_eval);
}

TrainState pretrain(const TrainConfig& cfg, const SceneDataset& data) {
  TrainState state = initial_state(cfg, data);
  for (long it = 0; it < cfg.pretrain_iterations; ++it) {
    const auto batch = sample_source_batch(cfg, data, it, kPretrainPhase);
    pretrain_step(state, cfg, batch);
  }
  // adaptation starts with a fresh optimizer and iteration counter
  state.sgd = SgdState(cfg.encoder);
  state.iteration = 0;
  return state;
}

RunResult adapt(TrainState state, const TrainConfig& cfg, const SceneDataset& data, const RunHooks& hooks) {
  cfg.validate();
  const EvalHandle handle = data.evaluation();
  std::vector<StepRecord> records;
  std::optional<PseudoLabelDiagnostics> midpoint;
  const long half = cfg.iterations / 2;
  for (long it = state.iteration; it < cfg.iterations; ++it) {
    if (it % cfg.static_labels.refresh_interval == 0) refresh_static_labels(state, cfg, data);
    if (it == half) midpoint = pseudo_label_diagnostics(state, cfg, data, handle, cfg.threshold, data.target_size());
    const auto src = sample_source_batch(cfg, data, it, kAdaptPhase);
    const auto tgt = sample_target_batch(cfg, data, state, it, &handle);
    StepRecord rec = train_step(state, cfg, src, tgt);
    if (hooks.on_step) hooks.on_step(rec);
    records.push_back(std::move(rec));
    if (hooks.on_checkpoint && hooks.checkpoint_interval > 0 && state.iteration % hooks.checkpoint_interval == 0) {
      hooks.on_checkpoint(state);
    }
  }
  EvalResult eval = evaluate(state.params, handle);
  const AlignmentStats alignment = alignment_stats(state.params, data, handle, std::min(data.source_size(), 40));
  return RunResult{std::move(state), std::move(records), std::move(eval), alignment, std::move(midpoint)};
}

RunResult run_training(const TrainConfig& cfg, const RunHooks& hooks) {
  const SceneDataset data = make_dataset(cfg);
  return adapt(pretrain(cfg, data), cfg, data, hooks);
}

std::string arm_name(Arm arm) {
  switch (arm) {
    case Arm::kBase: return "base";
    case Arm::kFcl: return "fcl";
    case Arm::kFclBcl: return "fcl_bcl";
    case Arm::kDynamicNoCal: return "dynamic_nocal";
    case Arm::kDynamicCal: return "dynamic_cal";
  }
  return "unknown";
}

std::optional<Arm> parse_arm(const std::string& name) {
  for (Arm a : kAllArms) {
    if (arm_name(a) == name) return a;
  }
  return std::nullopt;
}

AblationSwitches arm_switches(Arm arm) {
  switch (arm) {
    case Arm::kBase: return {false, false, false, false};
    case Arm::kFcl: return {true, false, false, false};
    case Arm::kFclBcl: return {true, true, false, false};
    case Arm::kDynamicNoCal: return {true, true, true, false};
    case Arm::kDynamicCal: return {true, true, true, true};
  }
  return {};
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, std::span<const Arm> arms,
                                      std::span<const std::uint64_t> seeds,
                                      const std::function<void(const std::string&)>& log) {
  std::vector<AblationRow> rows;
  for (Arm a : arms) rows.push_back(AblationRow{a, {}, {}, {}, {}, 0.0, 0.0});
  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    const SceneDataset data = make_dataset(cfg);
    const TrainState warm = pretrain(cfg, data);
    for (auto& row : rows) {
      TrainConfig arm_cfg = cfg;
      arm_cfg.switches = arm_switches(row.arm);
      const RunResult r = adapt(warm, arm_cfg, data);
      row.seeds.push_back(seed);
      row.miou.push_back(r.eval.miou);
      row.alignment_gap.push_back(r.alignment.gap());
      if (r.midpoint) row.midpoint.push_back(*r.midpoint);
      if (log) {
        log("seed " + std::to_string(seed) + " arm " + arm_name(row.arm) + " mIoU " + std::to_string(r.eval.miou) +
            " gap " + std::to_string(r.alignment.gap()));
      }
    }
  }
  for (auto& row : rows) {
    const double n = static_cast<double>(row.miou.size());
    row.mean = std::accumulate(row.miou.begin(), row.miou.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : row.miou) ss += (v - row.mean) * (v - row.mean);
    row.sd = row.miou.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return rows;
}

}  // namespace pixproto

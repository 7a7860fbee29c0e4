// Acceptance run: every criterion prints one PASS/FAIL line; exit code is
// nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "oracle.hpp"
#include "pixproto/contrastive.hpp"
#include "pixproto/io.hpp"
#include "pixproto/pseudo.hpp"
#include "pixproto/trainer.hpp"

using namespace pixproto;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// The desk-scale benchmark every training criterion uses.
TrainConfig acceptance_config() {
  TrainConfig cfg;
  cfg.scene.height = cfg.scene.width = 32;
  cfg.n_source = cfg.n_target = 100;
  cfg.n_eval = 20;
  cfg.pretrain_iterations = 1000;
  cfg.iterations = 600;
  cfg.static_labels.refresh_interval = 120;
  return cfg;
}

// ---- 1: oracle equivalence ----

Outcome oracle_equivalence() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> side(1, 8), dim(1, 8), cls(2, 5);
  const int n = 100;
  int pool_bad = 0, dyn_bad = 0, static_bad = 0, fcl_bad = 0, bcl_bad = 0;
  double worst = 0.0;
  const double fractions[] = {0.0, 0.1, 0.25, 0.5, 0.75, 1.0};
  for (int t = 0; t < n; ++t) {
    const int h = side(rng), w = side(rng), d = dim(rng), c = cls(rng);
    const FeatureMap fs = oracle::random_features(rng, h, w, d), ft = oracle::random_features(rng, h, w, d);
    const LabelMap ys = oracle::random_labels(rng, h, w, c), yt = oracle::random_labels(rng, h, w, c, 0.4);

    const PrototypeSet ps = masked_average_pool(fs, ys), pt = masked_average_pool(ft, yt);
    const auto rs = oracle::ref_pool(fs, ys), rt = oracle::ref_pool(ft, yt);
    bool ok = ps.size() == rs.vec.size();
    for (const auto& [k, v] : rs.vec) {
      if (!ps.contains(k) || ps.at(k).pixel_count != rs.count.at(k)) {
        ok = false;
        continue;
      }
      const double e = oracle::max_abs_diff(ps.at(k).vec, v);
      worst = std::max(worst, e);
      ok = ok && e <= 1e-10;
    }
    pool_bad += !ok;

    const double thr = std::uniform_real_distribution<double>(-0.5, 0.95)(rng);
    dyn_bad += dynamic_labels(ft, ps, thr, c).labels != oracle::ref_dynamic(ft, rs.vec, thr, c);

    const ProbMap probs = oracle::random_probs(rng, h, w, c);
    const double q = fractions[t % 6];
    static_bad += static_labels(probs, {q, 1}) != oracle::ref_static(probs, q);

    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const ContrastiveResult f = fcl(ft, yt, ps, tau);
    const auto [rf, nf] = oracle::ref_contrast(ft, yt, rs.vec, tau);
    worst = std::max(worst, std::abs(f.loss - rf));
    fcl_bad += std::abs(f.loss - rf) > 1e-10 || f.contributing != nf;
    const ContrastiveResult b = bcl(fs, ys, pt, tau);
    const auto [rb, nb] = oracle::ref_contrast(fs, ys, rt.vec, tau);
    worst = std::max(worst, std::abs(b.loss - rb));
    bcl_bad += std::abs(b.loss - rb) > 1e-10 || b.contributing != nb;
  }
  return {pool_bad + dyn_bad + static_bad + fcl_bad + bcl_bad == 0,
          fmt("%d instances each; mismatches pool %d dynamic %d static %d fcl %d bcl %d; max numeric diff %.2e", n,
              pool_bad, dyn_bad, static_bad, fcl_bad, bcl_bad, worst)};
}

// ---- 2: gradients ----

constexpr double kStep = 1e-5;
constexpr double kRelTol = 1e-4;
constexpr double kFloor = 1e-6;

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
  void add(double analytic, double numeric) {
    worst = std::max(worst, oracle::rel_err(analytic, numeric, kFloor));
    ++checked;
  }
};

ProbMap softmax_map(const ProbMap& logits) {
  ProbMap p(logits.height, logits.width, logits.classes);
  const std::size_t c = static_cast<std::size_t>(logits.classes);
  for (std::size_t i = 0; i < logits.pixels(); ++i) {
    stable_softmax(std::span<const double>(logits.data).subspan(i * c, c), std::span<double>(p.data).subspan(i * c, c));
  }
  return p;
}

// Feature-level checks: contrastive terms through masked average pooling on
// both feature maps, segmentation and entropy through the softmax.
void feature_gradients(std::mt19937_64& rng, GradCheck& gfcl, GradCheck& gbcl, GradCheck& gseg, GradCheck& gent) {
  const int h = 4, w = 4, d = 5, c = 4;
  FeatureMap fs = oracle::random_features(rng, h, w, d), ft = oracle::random_features(rng, h, w, d);
  const LabelMap ys = oracle::random_labels(rng, h, w, c), yt = oracle::random_labels(rng, h, w, c);
  const double tau = 0.2;
  for (bool forward_dir : {true, false}) {
    GradCheck& g = forward_dir ? gfcl : gbcl;
    // pixels come from one map, prototypes are pooled from the other
    FeatureMap& pix = forward_dir ? ft : fs;
    FeatureMap& pro = forward_dir ? fs : ft;
    const LabelMap& ypix = forward_dir ? yt : ys;
    const LabelMap& ypro = forward_dir ? ys : yt;
    auto term = [&](const FeatureMap& a, const PrototypeSet& p) {
      return forward_dir ? fcl(a, ypix, p, tau) : bcl(a, ypix, p, tau);
    };
    const PrototypeSet protos = masked_average_pool(pro, ypro);
    const ContrastiveResult r = term(pix, protos);
    FeatureGrad gpro(h, w, d);
    masked_average_pool_backward(r.grad_protos, protos, ypro, gpro);
    auto loss = [&] { return term(pix, masked_average_pool(pro, ypro)).loss; };
    for (std::size_t i = 0; i < pix.data.size(); ++i)
      g.add(r.grad_features.data[i], oracle::central_difference(pix.data, i, kStep, loss));
    for (std::size_t i = 0; i < pro.data.size(); ++i)
      g.add(gpro.data[i], oracle::central_difference(pro.data, i, kStep, loss));
  }
  ProbMap logits(h, w, c);
  for (double& v : logits.data) v = std::normal_distribution<double>(0, 2)(rng);
  const PixelLossResult seg = segmentation_loss(softmax_map(logits), ys);
  const PixelLossResult ent = entropy_loss(softmax_map(logits));
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    gseg.add(seg.grad_logits.data[i], oracle::central_difference(logits.data, i, kStep, [&] {
               return segmentation_loss(softmax_map(logits), ys).loss;
             }));
    gent.add(ent.grad_logits.data[i],
             oracle::central_difference(logits.data, i, kStep, [&] { return entropy_loss(softmax_map(logits)).loss; }));
  }
}

// Parameter-level check of one weighted objective through the whole step.
void parameter_gradients(std::uint64_t seed, const LossWeights& weights, GradCheck& g) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.scene.height = cfg.scene.width = 8;
  cfg.encoder.widths = {3, 4, 4};
  cfg.n_source = cfg.n_target = 4;
  cfg.n_eval = 1;
  cfg.pretrain_iterations = 20;
  cfg.batch_size = 2;
  cfg.threshold = 0.5;
  cfg.weights = weights;
  const SceneDataset data = make_dataset(cfg);
  TrainState st = pretrain(cfg, data);
  refresh_static_labels(st, cfg, data);
  for (long it = 0; it < 2; ++it) {
    train_step(st, cfg, sample_source_batch(cfg, data, it, 1), sample_target_batch(cfg, data, st, it, nullptr));
  }
  const auto src = sample_source_batch(cfg, data, 2, 1);
  const auto tgt = sample_target_batch(cfg, data, st, 2, nullptr);
  const StepComputation c = compute_step(st, cfg, src, tgt);
  auto pt = st.params.tensors();
  const auto gt = c.grads.tensors();
  auto loss = [&] { return compute_step(st, cfg, src, tgt).record.loss.total; };
  for (std::size_t k = 0; k < pt.size(); ++k) {
    for (std::size_t i = 0; i < pt[k].size(); ++i) {
      const double keep = pt[k][i];
      pt[k][i] = keep + kStep;
      const double up = loss();
      pt[k][i] = keep - kStep;
      const double down = loss();
      pt[k][i] = keep;
      g.add(gt[k][i], (up - down) / (2 * kStep));
    }
  }
}

Outcome gradient_correctness() {
  const int n = 20;
  GradCheck f_fcl, f_bcl, f_seg, f_ent, p_fcl, p_bcl, p_seg, p_ent, p_all;
  std::mt19937_64 rng(202);
  for (int t = 0; t < n; ++t) feature_gradients(rng, f_fcl, f_bcl, f_seg, f_ent);
  auto only = [](double LossWeights::*field) {
    LossWeights w{0, 0, 0, 0, 0, 0, 0.2};
    w.*field = 1.0;
    return w;
  };
  LossWeights composed;
  composed.ent_source = 0.05;
  composed.tau = 0.2;
  for (int t = 0; t < n; ++t) {
    const auto seed = static_cast<std::uint64_t>(1000 + t);
    parameter_gradients(seed, only(&LossWeights::fcl), p_fcl);
    parameter_gradients(seed, only(&LossWeights::bcl), p_bcl);
    parameter_gradients(seed, only(&LossWeights::seg_target), p_seg);
    parameter_gradients(seed, only(&LossWeights::ent_target), p_ent);
    parameter_gradients(seed, composed, p_all);
  }
  const GradCheck* all[] = {&f_fcl, &f_bcl, &f_seg, &f_ent, &p_fcl, &p_bcl, &p_seg, &p_ent, &p_all};
  bool pass = true;
  std::size_t checked = 0;
  for (const GradCheck* g : all) {
    pass = pass && g->worst <= kRelTol;
    checked += g->checked;
  }
  return {pass, fmt("%d instances per term, %zu partials; worst rel err features fcl %.1e bcl %.1e seg %.1e ent %.1e | "
                    "params fcl %.1e bcl %.1e seg %.1e ent %.1e composed %.1e",
                    n, checked, f_fcl.worst, f_bcl.worst, f_seg.worst, f_ent.worst, p_fcl.worst, p_bcl.worst,
                    p_seg.worst, p_ent.worst, p_all.worst)};
}

// ---- 3: hybrid fusion truth table ----

Outcome hybrid_truth_table() {
  // dynamic state x static state over {unlabeled, class 0, class 1}; agreement
  // and disagreement arise from the labeled-labeled cells
  const int u = kUnlabeled;
  const int states[] = {u, 0, 1};
  LabelMap dyn(1, 9, 2), fix(1, 9, 2);
  std::vector<int> expected;
  std::size_t p = 0;
  for (int d : states) {
    for (int s : states) {
      dyn.data[p] = d;
      fix.data[p] = s;
      expected.push_back(d != u ? d : s);
      ++p;
    }
  }
  const LabelMap out = hybrid_fuse(dyn, fix);
  int wrong = 0;
  for (std::size_t i = 0; i < 9; ++i) wrong += out.data[i] != expected[i];
  return {wrong == 0, fmt("9 cases, %d wrong", wrong)};
}

// ---- 4: scale invariance ----

Outcome scale_invariance() {
  std::mt19937_64 rng(404);
  double worst = 0.0;
  const int n = 200;
  for (int t = 0; t < n; ++t) {
    const FeatureMap fs = oracle::random_features(rng, 6, 6, 5), ft = oracle::random_features(rng, 6, 6, 5);
    const LabelMap ys = oracle::random_labels(rng, 6, 6, 4), yt = oracle::random_labels(rng, 6, 6, 4);
    const double a = std::exp(std::uniform_real_distribution<double>(-6, 6)(rng));
    const double b = std::exp(std::uniform_real_distribution<double>(-6, 6)(rng));
    FeatureMap fs2 = fs, ft2 = ft;
    for (double& v : fs2.data) v *= a;
    for (double& v : ft2.data) v *= b;
    const double tau = 0.1;
    const double f1 = fcl(ft, yt, masked_average_pool(fs, ys), tau).loss;
    const double f2 = fcl(ft2, yt, masked_average_pool(fs2, ys), tau).loss;
    const double b1 = bcl(fs, ys, masked_average_pool(ft, yt), tau).loss;
    const double b2 = bcl(fs2, ys, masked_average_pool(ft2, yt), tau).loss;
    worst = std::max({worst, std::abs(f1 - f2), std::abs(b1 - b2)});
  }
  return {worst <= 1e-9, fmt("%d instances, scales in [e^-6, e^6]; max |dL| %.2e", n, worst)};
}

// ---- 5: calibration ----

Outcome calibration_identity() {
  std::mt19937_64 rng(505);
  std::normal_distribution<double> nd(0, 1);
  int identity_bad = 0;
  double worst = 0.0;
  const int n = 200;
  for (int t = 0; t < n; ++t) {
    const FeatureMap f = oracle::random_features(rng, 5, 5, 6, 3.0);
    const PrototypeSet rho = masked_average_pool(f, oracle::random_labels(rng, 5, 5, 5));
    const PrototypeSet same = calibrate(rho, BiasMap::zero(5, 6));
    for (const auto& [c, p] : rho.entries) identity_bad += same.at(c).vec != p.vec;
    BiasMap xi = BiasMap::zero(5, 6);
    for (auto& row : xi.xi)
      for (double& v : row) v = nd(rng) * 10.0;
    const PrototypeSet back = calibrate(calibrate(rho, xi), xi.negated());
    for (const auto& [c, p] : rho.entries) worst = std::max(worst, oracle::max_abs_diff(back.at(c).vec, p.vec));
  }
  return {identity_bad == 0 && worst <= 1e-12,
          fmt("%d instances; zero-bias changes %d prototypes; round-trip max diff %.2e", n, identity_bad, worst)};
}

// ---- 6-8: ablation on the synthetic benchmark ----

std::vector<AblationRow> g_rows;

const AblationRow& row(Arm a) {
  for (const auto& r : g_rows)
    if (r.arm == a) return r;
  throw std::logic_error("missing arm");
}

Outcome pseudo_label_ordering() {
  const AblationRow& full = row(Arm::kDynamicCal);
  PseudoLabelDiagnostics m{};
  const double n = static_cast<double>(full.midpoint.size());
  auto acc = [&](PseudoLabelReport PseudoLabelDiagnostics::*f) {
    PseudoLabelReport out;
    out.accuracy = 0.0;
    for (const auto& d : full.midpoint) {
      out.density += (d.*f).density / n;
      out.accuracy += (d.*f).accuracy / n;
    }
    return out;
  };
  m.static_labels = acc(&PseudoLabelDiagnostics::static_labels);
  m.dynamic_uncalibrated = acc(&PseudoLabelDiagnostics::dynamic_uncalibrated);
  m.dynamic_calibrated = acc(&PseudoLabelDiagnostics::dynamic_calibrated);
  m.hybrid = acc(&PseudoLabelDiagnostics::hybrid);
  const double floor = m.static_labels.accuracy - 0.02;
  const bool pass = m.hybrid.density > m.dynamic_calibrated.density &&
                    m.dynamic_calibrated.density > m.static_labels.density &&
                    m.dynamic_calibrated.density > m.dynamic_uncalibrated.density &&
                    m.dynamic_uncalibrated.accuracy >= floor && m.dynamic_calibrated.accuracy >= floor &&
                    m.hybrid.accuracy >= floor && n == 3;
  return {pass, fmt("density/accuracy over %.0f seeds: static %.3f/%.3f dyn w/o cal %.3f/%.3f dyn w/ cal %.3f/%.3f "
                    "hybrid %.3f/%.3f",
                    n, m.static_labels.density, m.static_labels.accuracy, m.dynamic_uncalibrated.density,
                    m.dynamic_uncalibrated.accuracy, m.dynamic_calibrated.density, m.dynamic_calibrated.accuracy,
                    m.hybrid.density, m.hybrid.accuracy)};
}

Outcome ablation_ordering() {
  bool increasing = true;
  std::string means;
  double prev = -1.0;
  for (Arm a : kAllArms) {
    const double m = row(a).mean;
    increasing = increasing && m > prev;
    prev = m;
    means += fmt("%s %.4f (sd %.4f) ", arm_name(a).c_str(), m, row(a).sd);
  }
  const double margin = row(Arm::kDynamicCal).mean - row(Arm::kBase).mean;
  return {increasing && margin >= 0.03, fmt("mean mIoU %sstrictly increasing: %s; full - base %.4f", means.c_str(),
                                            increasing ? "yes" : "no", margin)};
}

Outcome feature_alignment() {
  const AblationRow& base = row(Arm::kBase);
  const AblationRow& full = row(Arm::kDynamicCal);
  bool pass = full.alignment_gap.size() == 3;
  std::string detail;
  for (std::size_t i = 0; i < full.alignment_gap.size(); ++i) {
    pass = pass && full.alignment_gap[i] > 0 && base.alignment_gap[i] > 0 &&
           full.alignment_gap[i] > base.alignment_gap[i];
    detail += fmt("seed %llu base %.4f full %.4f; ", static_cast<unsigned long long>(full.seeds[i]),
                  base.alignment_gap[i], full.alignment_gap[i]);
  }
  return {pass, "same-class minus different-class cosine: " + detail};
}

// ---- 9: sealed target ground truth ----

Outcome sealed_ground_truth() {
  TrainConfig cfg = acceptance_config();
  cfg.pretrain_iterations = 50;
  cfg.iterations = 100;
  cfg.static_labels.refresh_interval = 20;
  SceneDataset clean = make_dataset(cfg), zeroed = make_dataset(cfg), shuffled = make_dataset(cfg);
  zeroed.mutate_target_truth([](LabelMap& y, int) { std::fill(y.data.begin(), y.data.end(), 0); });
  std::mt19937_64 rng(909);
  shuffled.mutate_target_truth([&](LabelMap& y, int) {
    for (auto& v : y.data) v = std::uniform_int_distribution<int>(0, y.classes - 1)(rng);
  });
  const RunResult a = adapt(pretrain(cfg, clean), cfg, clean);
  const RunResult b = adapt(pretrain(cfg, zeroed), cfg, zeroed);
  const RunResult c = adapt(pretrain(cfg, shuffled), cfg, shuffled);
  auto same = [](const TrainState& x, const TrainState& y) {
    return x.params == y.params && x.sgd.velocity == y.sgd.velocity && x.bank_source == y.bank_source &&
           x.bank_target == y.bank_target && x.static_store == y.static_store;
  };
  const bool pass = same(a.state, b.state) && same(a.state, c.state) && a.records.size() == 100;
  return {pass, fmt("%zu adaptation steps; zeroed truth identical: %s; randomized truth identical: %s",
                    a.records.size(), same(a.state, b.state) ? "yes" : "no", same(a.state, c.state) ? "yes" : "no")};
}

// ---- 10: determinism ----

Outcome determinism() {
  const TrainConfig cfg = acceptance_config();
  const fs::path dir = fs::temp_directory_path() / "pixproto_acceptance";
  fs::create_directories(dir);
  std::vector<std::string> bytes;
  for (int run = 0; run < 2; ++run) {
    const fs::path path = dir / ("metrics_" + std::to_string(run) + ".csv");
    {
      std::ofstream out(path, std::ios::binary);
      out << metrics_csv_header() << '\n';
      RunHooks hooks;
      hooks.on_step = [&](const StepRecord& r) { out << metrics_csv_row(r) << '\n'; };
      run_training(cfg, hooks);
    }
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bytes.push_back(ss.str());
  }
  return {bytes[0] == bytes[1] && !bytes[0].empty(),
          fmt("two runs of %ld steps, %zu bytes each, identical: %s", cfg.iterations, bytes[0].size(),
              bytes[0] == bytes[1] ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  bool report_only = false;
  std::string report_file;
  app.add_option("--only", only, "Run only these criteria (1-10)")->delimiter(',');
  app.add_flag("--report-only", report_only, "Exit 0 once every criterion has been evaluated, even if some fail");
  app.add_option("--report-file", report_file, "Also write the PASS/FAIL lines to this file");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int i) { return only.empty() || std::find(only.begin(), only.end(), i) != only.end(); };

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "oracle equivalence", oracle_equivalence},
      {2, "gradient correctness", gradient_correctness},
      {3, "hybrid fusion truth table", hybrid_truth_table},
      {4, "contrastive scale invariance", scale_invariance},
      {5, "calibration identity and round trip", calibration_identity},
      {6, "pseudo-label ordering at mid-training", pseudo_label_ordering},
      {7, "ablation ordering", ablation_ordering},
      {8, "feature alignment", feature_alignment},
      {9, "sealed target ground truth", sealed_ground_truth},
      {10, "determinism", determinism},
  };

  if (wanted(6) || wanted(7) || wanted(8)) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seeds[] = {1, 2, 3};
    g_rows = run_ablation(acceptance_config(), kAllArms, seeds, [](const std::string& s) { std::cerr << s << '\n'; });
    std::cerr << fmt("ablation: %.0f s\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  int failed = 0;
  int evaluated = 0;
  std::ofstream report;
  if (!report_file.empty()) report.open(report_file);
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    ++evaluated;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + fmt(" [%2d] ", c.id) + c.name + " (" +
                             fmt("%.1f s", secs) + ") -- " + o.detail;
    std::cout << line << std::endl;
    if (report) report << line << '\n';
  }
  const std::string summary = fmt("%d of %d criteria failed", failed, evaluated);
  std::cout << summary << std::endl;
  if (report) report << summary << '\n';
  return failed == 0 || report_only ? 0 : 1;
}

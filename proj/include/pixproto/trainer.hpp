#pragma once

// Training pipeline: source-only warm start, then adaptation steps that
// build prototypes, calibrate them, transfer dynamic labels, fuse them with
// static labels, evaluate every loss term, backpropagate, and finally fold
// the step's prototypes into the EMA banks. Also evaluation and ablation.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pixproto/contrastive.hpp"
#include "pixproto/encoder.hpp"
#include "pixproto/prototypes.hpp"
#include "pixproto/pseudo.hpp"
#include "pixproto/synthdata.hpp"

namespace pixproto {

/// Which labels feed the target segmentation term.
enum class TargetSegLabels { kHybrid, kStatic };

/// How instance prototypes are pooled when the batch holds several images.
enum class PrototypePooling {
  kBatch,  ///< one masked average pool over the whole batch
  kPair,   ///< one pool per (source i, target i) pair
};

struct AblationSwitches {
  bool use_fcl = true;
  bool use_bcl = true;
  bool use_dynamic = true;
  bool use_calibration = true;
  bool operator==(const AblationSwitches&) const = default;
};

struct TrainConfig {
  std::uint64_t seed = 1;

  SceneSpec scene;
  DomainShift shift = DomainShift::benchmark_default();
  int n_source = 200;
  int n_target = 200;
  int n_eval = 40;

  EncoderConfig encoder;

  long pretrain_iterations = 1000;
  double pretrain_lr = 0.01;
  long iterations = 3000;
  int batch_size = 4;
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double poly_power = 0.9;

  LossWeights weights;
  double ema_momentum = 0.99;
  double threshold = 0.95;
  StaticLabelConfig static_labels;
  AblationSwitches switches;

  TargetSegLabels target_seg_labels = TargetSegLabels::kHybrid;
  PrototypePooling pooling = PrototypePooling::kBatch;
  NegativeSet negatives = NegativeSet::kPresentClasses;

  bool augment_flip = true;
  double scale_min = 0.8;
  double scale_max = 1.2;
  bool oversample_rare = true;

  long eval_interval = 0;  ///< 0 disables periodic evaluation

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// (field path, provenance note) for every TrainConfig field.
std::vector<std::pair<std::string, std::string>> config_provenance();

struct TrainState {
  EncoderParams params;
  SgdState sgd;
  PrototypeBank bank_source;
  PrototypeBank bank_target;
  std::vector<LabelMap> static_store;  ///< y_F per target scene, image resolution
  long iteration = 0;

  bool operator==(const TrainState&) const = default;
};

struct SourceItem {
  Image image;
  LabelMap labels;
};

struct TargetItem {
  Image image;
  LabelMap static_labels;  ///< y_F, geometrically aligned with `image`
  LabelMap truth;          ///< metrics only; empty unless a handle was supplied
};

struct StepRecord {
  long iteration = 0;
  double lr = 0.0;
  LossBreakdown loss;
  PseudoLabelReport dynamic_report;
  PseudoLabelReport static_report;
  PseudoLabelReport hybrid_report;
  double same_class_similarity = 0.0;
  double diff_class_similarity = 0.0;
  std::size_t skipped_fcl = 0;
  std::size_t skipped_bcl = 0;
  bool fcl_no_pairs = false;
  bool bcl_no_pairs = false;
  bool has_truth = false;
};

/// Fresh state: initialized encoder, empty banks, all-unlabeled y_F.
TrainState initial_state(const TrainConfig& cfg, const SceneDataset& data);

/// Everything one adaptation step computes before touching the state:
/// losses and reports, parameter gradients, and the instance prototypes
/// (one set per pooling group) the banks will absorb.
struct StepComputation {
  StepRecord record;  ///< lr is left at 0
  EncoderGrads grads;
  std::vector<PrototypeSet> rho_source;
  std::vector<PrototypeSet> rho_target;
};
StepComputation compute_step(const TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source,
                             std::span<const TargetItem> target);

/// One adaptation step over prepared batches. Ground truth inside `target`
/// is read only for the StepRecord's reports.
StepRecord train_step(TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source,
                      std::span<const TargetItem> target);

/// One source-only step (segmentation loss on source labels).
double pretrain_step(TrainState& state, const TrainConfig& cfg, std::span<const SourceItem> source);

/// Recomputes y_F for every target scene from the current parameters.
void refresh_static_labels(TrainState& state, const TrainConfig& cfg, const SceneDataset& data);

/// Augmented batches for an iteration; deterministic in (seed, phase, iteration).
std::vector<SourceItem> sample_source_batch(const TrainConfig& cfg, const SceneDataset& data, long iteration,
                                            int phase);
std::vector<TargetItem> sample_target_batch(const TrainConfig& cfg, const SceneDataset& data,
                                            const TrainState& state, long iteration, const EvalHandle* truth);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);
  /// Unlabeled ground-truth pixels are ignored.
  void add(const LabelMap& prediction, const LabelMap& ground_truth);
  std::size_t at(int truth, int predicted) const;
  double iou(int c) const;
  bool present(int c) const;  ///< class occurs in the ground truth
  /// Mean IoU over classes present in the ground truth.
  double miou() const;
  int classes() const { return classes_; }

 private:
  int classes_;
  std::vector<std::size_t> counts_;
};

struct EvalResult {
  std::vector<double> iou;
  std::vector<bool> present;
  double miou = 0.0;
};

/// Argmax prediction at image resolution (nearest upsampling for strided encoders).
LabelMap predict(const EncoderParams& params, const Image& image);

/// Per-class IoU and mIoU on the held-out target pool.
EvalResult evaluate(const EncoderParams& params, const EvalHandle& handle);

/// Cross-domain cosine statistics: target pixels (by true class) against
/// source prototypes pooled over the given source scenes.
struct AlignmentStats {
  double same_class = 0.0;
  double diff_class = 0.0;
  double gap() const { return same_class - diff_class; }
};
AlignmentStats alignment_stats(const EncoderParams& params, const SceneDataset& data, const EvalHandle& handle,
                               int n_source_scenes);

/// Every pseudo-label variant for target training scene i (paired with
/// source scene i mod n_source), at feature resolution. Reads no ground truth.
struct PseudoLabelVariants {
  LabelMap static_labels;
  LabelMap dynamic_uncalibrated;
  LabelMap dynamic_calibrated;
  LabelMap hybrid;
};
PseudoLabelVariants pseudo_label_variants(const TrainState& state, const TrainConfig& cfg, const SceneDataset& data,
                                          int target_index, double threshold);

/// Density/accuracy of every pseudo-label variant on target training scenes,
/// pairing scene i with source scene i (mod n_source). Read-only on `state`.
struct PseudoLabelDiagnostics {
  PseudoLabelReport static_labels;
  PseudoLabelReport dynamic_uncalibrated;
  PseudoLabelReport dynamic_calibrated;
  PseudoLabelReport hybrid;
};
PseudoLabelDiagnostics pseudo_label_diagnostics(const TrainState& state, const TrainConfig& cfg,
                                                const SceneDataset& data, const EvalHandle& handle, double threshold,
                                                int n_scenes);

/// Everything observable about a finished run.
struct RunResult {
  TrainState state;
  std::vector<StepRecord> records;
  EvalResult eval;
  AlignmentStats alignment;
  std::optional<PseudoLabelDiagnostics> midpoint;  ///< taken at iterations / 2
};

struct RunHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
  long checkpoint_interval = 0;
};

/// Source-only warm start (pretrain_iterations steps).
TrainState pretrain(const TrainConfig& cfg, const SceneDataset& data);

/// Adaptation from a warm-started state: static refresh at step 0 and every
/// refresh_interval, one train_step per iteration.
RunResult adapt(TrainState state, const TrainConfig& cfg, const SceneDataset& data, const RunHooks& hooks = {});

/// pretrain + adapt on a dataset built from cfg.
RunResult run_training(const TrainConfig& cfg, const RunHooks& hooks = {});

SceneDataset make_dataset(const TrainConfig& cfg);

enum class Arm { kBase, kFcl, kFclBcl, kDynamicNoCal, kDynamicCal };
inline constexpr Arm kAllArms[] = {Arm::kBase, Arm::kFcl, Arm::kFclBcl, Arm::kDynamicNoCal, Arm::kDynamicCal};
std::string arm_name(Arm arm);
std::optional<Arm> parse_arm(const std::string& name);
AblationSwitches arm_switches(Arm arm);

struct AblationRow {
  Arm arm;
  std::vector<std::uint64_t> seeds;
  std::vector<double> miou;
  std::vector<double> alignment_gap;
  std::vector<PseudoLabelDiagnostics> midpoint;
  double mean = 0.0;
  double sd = 0.0;  ///< sample standard deviation (0 for one seed)
};

/// Every arm on every seed; each seed's warm start is shared by its arms.
std::vector<AblationRow> run_ablation(const TrainConfig& base, std::span<const Arm> arms,
                                      std::span<const std::uint64_t> seeds,
                                      const std::function<void(const std::string&)>& log = {});

}  // namespace pixproto

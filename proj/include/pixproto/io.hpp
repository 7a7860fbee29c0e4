#pragma once

// PNG files for images and label maps, and the CSV reports written by the
// command-line tool.
//
// Label PNGs are 8-bit single-channel: the pixel value is the class index,
// 255 marks an unlabeled pixel.

#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pixproto/synthdata.hpp"
#include "pixproto/trainer.hpp"

namespace pixproto {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_label_png(const std::filesystem::path& path, const LabelMap& labels);
/// Throws IoError on unreadable files, non-8-bit-gray images, or class
/// indices >= classes (other than 255).
LabelMap read_label_png(const std::filesystem::path& path, int classes);

/// Colorized label map (unlabeled pixels black) for inspection.
void write_color_png(const std::filesystem::path& path, const LabelMap& labels);

/// RGB8 image, values in [0, 1] quantized with rounding.
void write_image_png(const std::filesystem::path& path, const Image& image);
Image read_image_png(const std::filesystem::path& path);

/// Palette used by write_color_png.
Color class_color(int c);

/// Scene dump: <stem>_image.png, <stem>_label.png, <stem>.json sidecar.
void dump_scene(const std::filesystem::path& dir, const std::string& stem, const LabeledScene& scene,
                const SceneSpec& spec, const DomainShift& shift);

// Metrics CSV, schema version 1. Column order is fixed.
inline constexpr int kMetricsSchemaVersion = 1;
std::string metrics_csv_header();
std::string metrics_csv_row(const StepRecord& rec);

// Ablation summary CSV: arm,seeds,miou_mean,miou_sd,miou_per_seed,alignment_gap_mean
std::string ablation_csv(std::span<const AblationRow> rows);

// Pseudo-label sweep CSV, one row per threshold:
// threshold,{static,dynamic_nocal,dynamic_cal,hybrid}_{density,accuracy}
struct SweepRow {
  double threshold;
  PseudoLabelDiagnostics diagnostics;
};
std::string sweep_csv(std::span<const SweepRow> rows);

/// Per-pixel embeddings (every `stride`-th pixel) of source and eval-target
/// scenes: domain,scene,pixel,class,f0..f{D-1}.
void write_embedding_csv(std::ostream& out, const EncoderParams& params, const SceneDataset& data,
                         const EvalHandle& handle, int n_scenes, int stride);

/// Shortest round-trip text form of a double (locale independent).
std::string format_double(double v);

}  // namespace pixproto

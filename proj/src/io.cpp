#include "pixproto/io.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace pixproto {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

void write_png(const std::filesystem::path& path, int width, int height, int color_type,
               const std::vector<std::uint8_t>& pixels) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng: cannot allocate write structs");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng: write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  for (int y = 0; y < height; ++y) {
    png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct RawPng {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int bit_depth = 0;
  std::vector<std::uint8_t> pixels;
};

RawPng read_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng: cannot allocate read structs");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng: read failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  RawPng raw;
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.color_type = png_get_color_type(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  if (raw.bit_depth != 8 || (raw.color_type != PNG_COLOR_TYPE_GRAY && raw.color_type != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG layout (need 8-bit gray or RGB): " + path.string());
  }
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  raw.pixels.resize(row_bytes * static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) png_read_row(png, raw.pixels.data() + row_bytes * y, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

}  // namespace

Color class_color(int c) {
  static const Color palette[] = {
      {0.50, 0.50, 0.50}, {0.50, 0.25, 0.50}, {0.27, 0.51, 0.71}, {0.86, 0.08, 0.24},
      {0.98, 0.78, 0.12}, {0.42, 0.56, 0.14}, {0.00, 0.00, 0.56}, {0.47, 0.05, 0.13},
  };
  return palette[static_cast<std::size_t>(c) % std::size(palette)];
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  write_png(path, labels.width, labels.height, PNG_COLOR_TYPE_GRAY, labels.data);
}

LabelMap read_label_png(const std::filesystem::path& path, int classes) {
  RawPng raw = read_png(path);
  if (raw.color_type != PNG_COLOR_TYPE_GRAY) throw IoError("label PNG must be single-channel: " + path.string());
  LabelMap out(raw.height, raw.width, classes);
  out.data = std::move(raw.pixels);
  try {
    out.validate();
  } catch (const ContractViolation& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return out;
}

void write_color_png(const std::filesystem::path& path, const LabelMap& labels) {
  std::vector<std::uint8_t> rgb(labels.pixels() * 3, 0);
  for (std::size_t p = 0; p < labels.pixels(); ++p) {
    if (!labels.labeled(p)) continue;
    const Color col = class_color(labels[p]);
    for (int ch = 0; ch < 3; ++ch) rgb[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(col[ch] * 255.0));
  }
  write_png(path, labels.width, labels.height, PNG_COLOR_TYPE_RGB, rgb);
}

void write_image_png(const std::filesystem::path& path, const Image& image) {
  if (image.dim != 3) throw IoError("write_image_png: expected 3 channels");
  std::vector<std::uint8_t> rgb(image.data.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  write_png(path, image.width, image.height, PNG_COLOR_TYPE_RGB, rgb);
}

Image read_image_png(const std::filesystem::path& path) {
  RawPng raw = read_png(path);
  if (raw.color_type != PNG_COLOR_TYPE_RGB) throw IoError("image PNG must be RGB: " + path.string());
  Image img(raw.height, raw.width, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = raw.pixels[i] / 255.0;
  return img;
}

void dump_scene(const std::filesystem::path& dir, const std::string& stem, const LabeledScene& scene,
                const SceneSpec& spec, const DomainShift& shift) {
  std::filesystem::create_directories(dir);
  write_image_png(dir / (stem + "_image.png"), scene.image);
  write_label_png(dir / (stem + "_label.png"), scene.ground_truth);
  nlohmann::json side;
  side["index"] = scene.index;
  side["domain"] = scene.domain == Domain::kSource ? "source" : "target";
  side["height"] = spec.height;
  side["width"] = spec.width;
  side["seed"] = spec.seed;
  side["class_names"] = spec.class_names;
  side["colors"] = spec.colors;
  side["shift"] = {{"global_offset", shift.global_offset},
                   {"class_offsets", shift.class_offsets},
                   {"noise_sigma", shift.noise_sigma},
                   {"texture_jitter", shift.texture_jitter}};
  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw IoError("cannot write sidecar for " + stem);
  out << side.dump(2) << "\n";
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string metrics_csv_header() {
  return "iteration,lr,loss_total,loss_base,seg_source,seg_target,ent_source,ent_target,fcl,bcl,"
         "n_fcl,n_bcl,skipped_fcl,skipped_bcl,fcl_no_pairs,bcl_no_pairs,"
         "dynamic_density,dynamic_accuracy,static_density,static_accuracy,hybrid_density,hybrid_accuracy,"
         "same_class_similarity,diff_class_similarity";
}

std::string metrics_csv_row(const StepRecord& r) {
  std::ostringstream os;
  const auto& l = r.loss;
  os << r.iteration << ',' << format_double(r.lr) << ',' << format_double(l.total) << ',' << format_double(l.base)
     << ',' << format_double(l.parts.seg_source) << ',' << format_double(l.parts.seg_target) << ','
     << format_double(l.parts.ent_source) << ',' << format_double(l.parts.ent_target) << ','
     << format_double(l.parts.fcl) << ',' << format_double(l.parts.bcl) << ',' << l.n_fcl << ',' << l.n_bcl << ','
     << r.skipped_fcl << ',' << r.skipped_bcl << ',' << (r.fcl_no_pairs ? 1 : 0) << ',' << (r.bcl_no_pairs ? 1 : 0)
     << ',' << format_double(r.dynamic_report.density) << ',' << format_double(r.dynamic_report.accuracy) << ','
     << format_double(r.static_report.density) << ',' << format_double(r.static_report.accuracy) << ','
     << format_double(r.hybrid_report.density) << ',' << format_double(r.hybrid_report.accuracy) << ','
     << format_double(r.same_class_similarity) << ',' << format_double(r.diff_class_similarity);
  return os.str();
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "arm,seeds,miou_mean,miou_sd,miou_per_seed,alignment_gap_mean\n";
  for (const auto& row : rows) {
    std::string seeds, per_seed;
    for (std::size_t i = 0; i < row.seeds.size(); ++i) {
      if (i > 0) {
        seeds += ';';
        per_seed += ';';
      }
      seeds += std::to_string(row.seeds[i]);
      per_seed += format_double(row.miou[i]);
    }
    const double gap = row.alignment_gap.empty()
                           ? 0.0
                           : std::accumulate(row.alignment_gap.begin(), row.alignment_gap.end(), 0.0) /
                                 static_cast<double>(row.alignment_gap.size());
    os << arm_name(row.arm) << ',' << seeds << ',' << format_double(row.mean) << ',' << format_double(row.sd) << ','
       << per_seed << ',' << format_double(gap) << '\n';
  }
  return os.str();
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "threshold,static_density,static_accuracy,dynamic_nocal_density,dynamic_nocal_accuracy,"
        "dynamic_cal_density,dynamic_cal_accuracy,hybrid_density,hybrid_accuracy\n";
  for (const auto& r : rows) {
    const auto& d = r.diagnostics;
    os << format_double(r.threshold);
    for (const PseudoLabelReport* rep : {&d.static_labels, &d.dynamic_uncalibrated, &d.dynamic_calibrated, &d.hybrid}) {
      os << ',' << format_double(rep->density) << ',' << format_double(rep->accuracy);
    }
    os << '\n';
  }
  return os.str();
}

void write_embedding_csv(std::ostream& out, const EncoderParams& params, const SceneDataset& data,
                         const EvalHandle& handle, int n_scenes, int stride) {
  const int dim = params.config.feature_dim();
  out << "domain,scene,pixel,class";
  for (int d = 0; d < dim; ++d) out << ",f" << d;
  out << '\n';
  auto emit = [&](const char* domain, int scene_idx, const LabeledScene& scene) {
    const ForwardResult fwd = forward(params, scene.image);
    const LabelMap truth = resample_nearest(scene.ground_truth, fwd.features.height, fwd.features.width);
    for (std::size_t p = 0; p < truth.pixels(); p += static_cast<std::size_t>(stride)) {
      out << domain << ',' << scene_idx << ',' << p << ',' << static_cast<int>(truth[p]);
      for (double v : fwd.features.pixel(p)) out << ',' << format_double(v);
      out << '\n';
    }
  };
  for (int i = 0; i < std::min(n_scenes, data.source_size()); ++i) emit("source", i, data.source(i));
  for (int i = 0; i < std::min(n_scenes, handle.eval_size()); ++i) emit("target", i, handle.eval_scene(i));
}

}  // namespace pixproto

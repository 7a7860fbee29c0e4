#include "pixproto/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pixproto {

FeatureMap::FeatureMap(int h, int w, int d) : height(h), width(w), dim(d) {
  if (h < 1 || w < 1 || d < 1) {
    throw ContractViolation("FeatureMap: height, width and dim must be >= 1");
  }
  data.assign(static_cast<std::size_t>(h) * w * d, 0.0);
}

bool FeatureMap::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

LabelMap::LabelMap(int h, int w, int c) : height(h), width(w), classes(c) {
  if (h < 1 || w < 1) throw ContractViolation("LabelMap: empty spatial shape");
  if (c < 1 || c > kMaxClasses) throw ContractViolation("LabelMap: class count out of range");
  data.assign(static_cast<std::size_t>(h) * w, kUnlabeled);
}

void LabelMap::set(std::size_t p, int c) {
  if (c < 0 || c >= classes) {
    throw ContractViolation("LabelMap::set: class " + std::to_string(c) + " >= " + std::to_string(classes));
  }
  data[p] = static_cast<std::uint8_t>(c);
}

std::size_t LabelMap::labeled_count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != kUnlabeled; }));
}

void LabelMap::validate() const {
  if (data.size() != pixels()) throw ContractViolation("LabelMap: data size mismatch");
  for (std::uint8_t v : data) {
    if (v != kUnlabeled && v >= classes) {
      throw ContractViolation("LabelMap: class index " + std::to_string(v) + " out of range");
    }
  }
}

ProbMap::ProbMap(int h, int w, int c) : height(h), width(w), classes(c) {
  if (h < 1 || w < 1 || c < 1) throw ContractViolation("ProbMap: empty shape");
  data.assign(static_cast<std::size_t>(h) * w * c, 0.0);
}

int ProbMap::argmax(std::size_t p) const {
  auto px = pixel(p);
  // first maximum wins, so ties go to the lowest class index
  return static_cast<int>(std::max_element(px.begin(), px.end()) - px.begin());
}

void ProbMap::validate(double tol) const {
  for (std::size_t p = 0; p < pixels(); ++p) {
    double sum = 0.0;
    for (double v : pixel(p)) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ContractViolation("ProbMap: negative or non-finite probability");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol) throw ContractViolation("ProbMap: pixel does not sum to 1");
  }
}

ClassSet::ClassSet(int c, std::vector<std::string> n) : count(c), names(std::move(n)) {
  if (c < 2) throw ConfigError("ClassSet: need at least 2 classes");
  if (!names.empty() && static_cast<int>(names.size()) != c) {
    throw ConfigError("ClassSet: names size does not match class count");
  }
}

std::string ClassSet::name(int c) const {
  if (c >= 0 && c < static_cast<int>(names.size())) return names[c];
  return "class" + std::to_string(c);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("cosine_similarity: dimension mismatch");
  const double na = std::max(norm(a), kCosineEps);
  const double nb = std::max(norm(b), kCosineEps);
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

void stable_softmax(std::span<const double> logits, std::span<double> out) {
  if (logits.empty()) throw ContractViolation("stable_softmax: empty input");
  if (out.size() != logits.size()) throw ContractViolation("stable_softmax: output size mismatch");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
}

std::vector<double> stable_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  stable_softmax(logits, out);
  return out;
}

double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

LabelMap resample_nearest(const LabelMap& labels, int height, int width) {
  if (height == labels.height && width == labels.width) return labels;
  LabelMap out(height, width, labels.classes);
  for (int y = 0; y < height; ++y) {
    const int sy = static_cast<int>(static_cast<long long>(y) * labels.height / height);
    for (int x = 0; x < width; ++x) {
      const int sx = static_cast<int>(static_cast<long long>(x) * labels.width / width);
      out.data[static_cast<std::size_t>(y) * width + x] = labels.data[static_cast<std::size_t>(sy) * labels.width + sx];
    }
  }
  return out;
}

FeatureMap stack_rows(std::span<const FeatureMap> maps) {
  if (maps.empty()) throw ContractViolation("stack_rows: no maps");
  int rows = 0;
  for (const auto& m : maps) {
    if (m.width != maps[0].width || m.dim != maps[0].dim) throw ContractViolation("stack_rows: width/dim mismatch");
    rows += m.height;
  }
  FeatureMap out(rows, maps[0].width, maps[0].dim);
  auto it = out.data.begin();
  for (const auto& m : maps) it = std::copy(m.data.begin(), m.data.end(), it);
  return out;
}

LabelMap stack_rows(std::span<const LabelMap> maps) {
  if (maps.empty()) throw ContractViolation("stack_rows: no maps");
  int rows = 0;
  for (const auto& m : maps) {
    if (m.width != maps[0].width || m.classes != maps[0].classes) {
      throw ContractViolation("stack_rows: width/classes mismatch");
    }
    rows += m.height;
  }
  LabelMap out(rows, maps[0].width, maps[0].classes);
  auto it = out.data.begin();
  for (const auto& m : maps) it = std::copy(m.data.begin(), m.data.end(), it);
  return out;
}

std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t v : parts) {
    std::uint64_t z = h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    h = z ^ (z >> 31);
  }
  return h;
}

}  // namespace pixproto

#pragma once

// Small fully convolutional feature extractor with a per-pixel linear
// classifier, exact backpropagation, and momentum SGD.
//
// Layout: every layer is a 3x3 zero-padded convolution. Softplus follows
// each layer except the last, whose linear output is the embedding f(p).
// The classifier maps f(p) to C logits.

#include <cstdint>
#include <span>
#include <vector>

#include "pixproto/core.hpp"

namespace pixproto {

/// H x W x 3 image with values in [0, 1].
using Image = FeatureMap;

struct EncoderConfig {
  int in_channels = 3;
  std::vector<int> widths{8, 16, 16};  ///< last entry is the embedding dim D
  std::vector<int> strides{1, 1, 1};
  int classes = 5;

  int feature_dim() const { return widths.back(); }
  /// Output spatial size for an input of the given size.
  int output_size(int input) const;
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct ConvLayer {
  int in = 0;
  int out = 0;
  int stride = 1;
  std::vector<double> weight;  ///< [ky][kx][in][out]
  std::vector<double> bias;    ///< [out]

  bool operator==(const ConvLayer&) const = default;
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<ConvLayer> layers;
  std::vector<double> cls_weight;  ///< [C][D]
  std::vector<double> cls_bias;    ///< [C]

  /// All-zero parameters of the configured shape.
  static EncoderParams zeros(const EncoderConfig& cfg);
  /// Fan-in scaled uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed);

  /// Every parameter array, in a fixed order (layer weights, layer biases,
  /// classifier weight, classifier bias).
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t size() const;
  bool all_finite() const;

  bool operator==(const EncoderParams&) const = default;
};

using EncoderGrads = EncoderParams;

struct ForwardTrace {
  std::vector<FeatureMap> inputs;       ///< input of each conv layer (inputs[0] is the image)
  std::vector<FeatureMap> pre;          ///< pre-activation of each conv layer
};

struct ForwardResult {
  FeatureMap features;
  ProbMap logits;
  ProbMap probs;
  ForwardTrace trace;
};

ForwardResult forward(const EncoderParams& params, const Image& image);

/// Gradients of sum(grad_features * f) + sum(grad_logits * logits) w.r.t.
/// every parameter. Either upstream map may be empty (treated as zero).
EncoderGrads backward(const EncoderParams& params, const ForwardResult& fwd, const FeatureGrad& grad_features,
                      const ProbMap& grad_logits);

/// In-place accumulation a += b for gradient structs of the same shape.
void accumulate(EncoderGrads& into, const EncoderGrads& g);

struct SgdState {
  EncoderParams velocity;
  explicit SgdState(const EncoderConfig& cfg) : velocity(EncoderParams::zeros(cfg)) {}
  bool operator==(const SgdState&) const = default;
};

/// v <- momentum * v + g;  p <- p - lr * (v + weight_decay * p).
/// Throws NumericError (leaving params untouched) if any gradient is non-finite.
void sgd_step(EncoderParams& params, const EncoderGrads& grads, SgdState& state, double lr, double momentum,
              double weight_decay);

/// lr0 * (1 - t / t_max)^power, clamped at 0 for t >= t_max.
double poly_lr(double lr0, long iteration, long max_iterations, double power = 0.9);

}  // namespace pixproto

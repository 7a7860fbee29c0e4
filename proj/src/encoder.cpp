#include "pixproto/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace pixproto {

namespace {

constexpr int kKernel = 3;

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

FeatureMap conv_forward(const ConvLayer& layer, const FeatureMap& in) {
  const int s = layer.stride;
  const int ho = (in.height - 1) / s + 1;
  const int wo = (in.width - 1) / s + 1;
  FeatureMap out(ho, wo, layer.out);
  const int ci = layer.in;
  const int co = layer.out;
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      double* o = out.data.data() + (static_cast<std::size_t>(y) * wo + x) * co;
      for (int k = 0; k < co; ++k) o[k] = layer.bias[k];
      for (int ky = 0; ky < kKernel; ++ky) {
        const int iy = y * s + ky - 1;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kKernel; ++kx) {
          const int ix = x * s + kx - 1;
          if (ix < 0 || ix >= in.width) continue;
          const double* src = in.data.data() + (static_cast<std::size_t>(iy) * in.width + ix) * ci;
          const double* w = layer.weight.data() + static_cast<std::size_t>(ky * kKernel + kx) * ci * co;
          for (int i = 0; i < ci; ++i) {
            const double v = src[i];
            const double* wr = w + static_cast<std::size_t>(i) * co;
            for (int k = 0; k < co; ++k) o[k] += v * wr[k];
          }
        }
      }
    }
  }
  return out;
}

// Accumulates weight/bias gradients into `g`; writes the input gradient into
// `grad_in` when it is non-null.
void conv_backward(const ConvLayer& layer, const FeatureMap& in, const FeatureMap& grad_out, ConvLayer& g,
                   FeatureMap* grad_in) {
  const int s = layer.stride;
  const int ci = layer.in;
  const int co = layer.out;
  for (int y = 0; y < grad_out.height; ++y) {
    for (int x = 0; x < grad_out.width; ++x) {
      const double* go = grad_out.data.data() + (static_cast<std::size_t>(y) * grad_out.width + x) * co;
      for (int k = 0; k < co; ++k) g.bias[k] += go[k];
      for (int ky = 0; ky < kKernel; ++ky) {
        const int iy = y * s + ky - 1;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < kKernel; ++kx) {
          const int ix = x * s + kx - 1;
          if (ix < 0 || ix >= in.width) continue;
          const std::size_t in_off = (static_cast<std::size_t>(iy) * in.width + ix) * ci;
          const double* src = in.data.data() + in_off;
          const std::size_t w_off = static_cast<std::size_t>(ky * kKernel + kx) * ci * co;
          const double* w = layer.weight.data() + w_off;
          double* gw = g.weight.data() + w_off;
          double* gi = grad_in != nullptr ? grad_in->data.data() + in_off : nullptr;
          for (int i = 0; i < ci; ++i) {
            const double v = src[i];
            double* gwr = gw + static_cast<std::size_t>(i) * co;
            const double* wr = w + static_cast<std::size_t>(i) * co;
            double acc = 0.0;
            for (int k = 0; k < co; ++k) {
              gwr[k] += v * go[k];
              acc += wr[k] * go[k];
            }
            if (gi != nullptr) gi[i] += acc;
          }
        }
      }
    }
  }
}

}  // namespace

int EncoderConfig::output_size(int input) const {
  int n = input;
  for (int s : strides) n = (n - 1) / s + 1;
  return n;
}

void EncoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
  if (widths.empty()) throw ConfigError("encoder: need at least one layer");
  if (strides.size() != widths.size()) throw ConfigError("encoder: strides and widths differ in length");
  for (int w : widths) {
    if (w < 1) throw ConfigError("encoder: layer widths must be >= 1");
  }
  for (int s : strides) {
    if (s < 1 || s > 2) throw ConfigError("encoder: strides must be 1 or 2");
  }
  if (classes < 2 || classes > kMaxClasses) throw ConfigError("encoder: classes out of range");
}

EncoderParams EncoderParams::zeros(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderParams p;
  p.config = cfg;
  int in = cfg.in_channels;
  for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
    ConvLayer layer;
    layer.in = in;
    layer.out = cfg.widths[l];
    layer.stride = cfg.strides[l];
    layer.weight.assign(static_cast<std::size_t>(kKernel * kKernel) * layer.in * layer.out, 0.0);
    layer.bias.assign(static_cast<std::size_t>(layer.out), 0.0);
    p.layers.push_back(std::move(layer));
    in = cfg.widths[l];
  }
  p.cls_weight.assign(static_cast<std::size_t>(cfg.classes) * cfg.feature_dim(), 0.0);
  p.cls_bias.assign(static_cast<std::size_t>(cfg.classes), 0.0);
  return p;
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderParams p = zeros(cfg);
  std::mt19937_64 rng(seed);
  for (auto& layer : p.layers) {
    const double a = std::sqrt(6.0 / (kKernel * kKernel * layer.in));
    std::uniform_real_distribution<double> u(-a, a);
    for (double& w : layer.weight) w = u(rng);
  }
  const double a = std::sqrt(6.0 / cfg.feature_dim());
  std::uniform_real_distribution<double> u(-a, a);
  for (double& w : p.cls_weight) w = u(rng);
  return p;
}

std::vector<std::span<double>> EncoderParams::tensors() {
  std::vector<std::span<double>> out;
  for (auto& l : layers) out.emplace_back(l.weight);
  for (auto& l : layers) out.emplace_back(l.bias);
  out.emplace_back(cls_weight);
  out.emplace_back(cls_bias);
  return out;
}

std::vector<std::span<const double>> EncoderParams::tensors() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers) out.emplace_back(l.weight);
  for (const auto& l : layers) out.emplace_back(l.bias);
  out.emplace_back(cls_weight);
  out.emplace_back(cls_bias);
  return out;
}

std::size_t EncoderParams::size() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

bool EncoderParams::all_finite() const {
  for (auto t : tensors()) {
    for (double v : t) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ForwardResult forward(const EncoderParams& params, const Image& image) {
  if (image.dim != params.config.in_channels) throw ContractViolation("forward: image channel count mismatch");
  ForwardResult res;
  const std::size_t n_layers = params.layers.size();
  FeatureMap act = image;
  for (std::size_t l = 0; l < n_layers; ++l) {
    FeatureMap pre = conv_forward(params.layers[l], act);
    res.trace.inputs.push_back(std::move(act));
    if (l + 1 < n_layers) {
      act = pre;
      for (double& v : act.data) v = softplus(v);
      res.trace.pre.push_back(std::move(pre));
    } else {
      res.features = std::move(pre);
    }
  }

  const int classes = params.config.classes;
  const int dim = params.config.feature_dim();
  const FeatureMap& f = res.features;
  res.logits = ProbMap(f.height, f.width, classes);
  res.probs = ProbMap(f.height, f.width, classes);
  for (std::size_t p = 0; p < f.pixels(); ++p) {
    auto fp = f.pixel(p);
    auto lp = res.logits.pixel(p);
    for (int c = 0; c < classes; ++c) {
      const double* w = params.cls_weight.data() + static_cast<std::size_t>(c) * dim;
      double z = params.cls_bias[c];
      for (int d = 0; d < dim; ++d) z += w[d] * fp[d];
      lp[c] = z;
    }
    stable_softmax(lp, res.probs.pixel(p));
  }
  return res;
}

EncoderGrads backward(const EncoderParams& params, const ForwardResult& fwd, const FeatureGrad& grad_features,
                      const ProbMap& grad_logits) {
  const FeatureMap& f = fwd.features;
  const int classes = params.config.classes;
  const int dim = params.config.feature_dim();
  const bool has_gf = !grad_features.data.empty();
  const bool has_gl = !grad_logits.data.empty();
  if (has_gf && !grad_features.same_shape(f)) throw ContractViolation("backward: feature gradient shape mismatch");
  if (has_gl && (grad_logits.height != f.height || grad_logits.width != f.width || grad_logits.classes != classes)) {
    throw ContractViolation("backward: logit gradient shape mismatch");
  }
  if (fwd.trace.inputs.size() != params.layers.size()) throw ContractViolation("backward: trace/params mismatch");

  EncoderGrads g = EncoderParams::zeros(params.config);
  FeatureMap grad = has_gf ? grad_features : FeatureMap(f.height, f.width, dim);

  if (has_gl) {
    for (std::size_t p = 0; p < f.pixels(); ++p) {
      auto fp = f.pixel(p);
      auto gl = grad_logits.pixel(p);
      auto gp = grad.pixel(p);
      for (int c = 0; c < classes; ++c) {
        const double gc = gl[c];
        if (gc == 0.0) continue;
        g.cls_bias[c] += gc;
        double* gw = g.cls_weight.data() + static_cast<std::size_t>(c) * dim;
        const double* w = params.cls_weight.data() + static_cast<std::size_t>(c) * dim;
        for (int d = 0; d < dim; ++d) {
          gw[d] += gc * fp[d];
          gp[d] += gc * w[d];
        }
      }
    }
  }

  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const FeatureMap& in = fwd.trace.inputs[l];
    if (l == 0) {
      conv_backward(params.layers[l], in, grad, g.layers[l], nullptr);
      break;
    }
    FeatureMap grad_in(in.height, in.width, in.dim);
    conv_backward(params.layers[l], in, grad, g.layers[l], &grad_in);
    // through the softplus that produced `in`
    const FeatureMap& pre = fwd.trace.pre[l - 1];
    for (std::size_t i = 0; i < grad_in.data.size(); ++i) grad_in.data[i] *= sigmoid(pre.data[i]);
    grad = std::move(grad_in);
  }
  return g;
}

void accumulate(EncoderGrads& into, const EncoderGrads& g) {
  auto dst = into.tensors();
  auto src = g.tensors();
  if (dst.size() != src.size()) throw ContractViolation("accumulate: parameter layout mismatch");
  for (std::size_t t = 0; t < dst.size(); ++t) {
    if (dst[t].size() != src[t].size()) throw ContractViolation("accumulate: tensor size mismatch");
    for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += src[t][i];
  }
}

void sgd_step(EncoderParams& params, const EncoderGrads& grads, SgdState& state, double lr, double momentum,
              double weight_decay) {
  if (!(lr >= 0.0)) throw ConfigError("sgd_step: learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd_step: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("sgd_step: weight decay must be >= 0");
  if (!grads.all_finite()) throw NumericError("sgd_step: non-finite gradient, step aborted");
  auto p = params.tensors();
  auto g = grads.tensors();
  auto v = state.velocity.tensors();
  if (p.size() != g.size() || p.size() != v.size()) throw ContractViolation("sgd_step: parameter layout mismatch");
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      v[t][i] = momentum * v[t][i] + g[t][i];
      p[t][i] -= lr * (v[t][i] + weight_decay * p[t][i]);
    }
  }
}

double poly_lr(double lr0, long iteration, long max_iterations, double power) {
  if (max_iterations <= 0 || iteration >= max_iterations) return 0.0;
  const double frac = 1.0 - static_cast<double>(iteration) / static_cast<double>(max_iterations);
  return lr0 * std::pow(frac, power);
}

}  // namespace pixproto

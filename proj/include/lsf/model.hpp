#pragma once

// Small U-shaped encoder-decoder with hand-written forward and backward passes.
//
// For depth D and base width w, level l has width w * 2^l. Each level runs two
// 3x3 convolutions (padding 1) with ReLU. The encoder halves resolution with 2x2
// max pooling between levels; the decoder upsamples by nearest neighbour,
// concatenates [upsampled, skip] and runs two more 3x3 convolutions. A 1x1
// convolution maps the top decoder level to C logits followed by a softmax.
//
// Parameter count, with conv(a, b) = 9ab + b:
//   conv(in, w0) + conv(w0, w0)
//   + sum_{l=1}^{D-1} [conv(w_{l-1}, w_l) + conv(w_l, w_l)]
//   + sum_{l=0}^{D-2} [conv(w_{l+1} + w_l, w_l) + conv(w_l, w_l)]
//   + w0 * C + C

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "lsf/error.hpp"
#include "lsf/rng.hpp"

namespace lsf {

struct ModelConfig {
  int in_channels = 1;
  int out_channels = 2;  // C, including background
  int depth = 3;
  int base_width = 16;
  bool zero_head = true;  // 1x1 output layer starts at zero: uniform 1/C everywhere
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels != 1) throw Error(Errc::InvalidConfig, "in_channels must be 1");
    if (out_channels < 2) throw Error(Errc::InvalidConfig, "out_channels must be at least 2");
    if (depth < 1 || depth > 6) throw Error(Errc::InvalidConfig, "depth must be in 1..6");
    if (base_width < 1) throw Error(Errc::InvalidConfig, "base_width must be positive");
  }

  int width_at(int level) const { return base_width << level; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels}, {"out_channels", c.out_channels}, {"depth", c.depth},
          {"base_width", c.base_width},   {"zero_head", c.zero_head}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.depth = j.value("depth", c.depth);
  c.base_width = j.value("base_width", c.base_width);
  c.zero_head = j.value("zero_head", c.zero_head);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  bool relu = true;
  std::size_t weight_offset = 0;  // out x (in * kernel^2), row-major
  std::size_t bias_offset = 0;

  std::size_t fan_in() const { return static_cast<std::size_t>(in) * kernel * kernel; }
  std::size_t parameter_count() const { return fan_in() * out + out; }
};

/// Convolution layers in execution order: encoder levels, decoder levels (deepest
/// first), head. This order is also the layout of the flat parameter vector.
inline std::vector<ConvSpec> layer_plan(const ModelConfig& config) {
  config.validate();
  std::vector<ConvSpec> plan;
  auto add = [&](int in, int out, int kernel, bool relu) { plan.push_back(ConvSpec{in, out, kernel, relu, 0, 0}); };
  const int D = config.depth;
  for (int l = 0; l < D; ++l) {
    add(l == 0 ? config.in_channels : config.width_at(l - 1), config.width_at(l), 3, true);
    add(config.width_at(l), config.width_at(l), 3, true);
  }
  for (int l = D - 2; l >= 0; --l) {
    add(config.width_at(l + 1) + config.width_at(l), config.width_at(l), 3, true);
    add(config.width_at(l), config.width_at(l), 3, true);
  }
  add(config.base_width, config.out_channels, 1, false);
  std::size_t offset = 0;
  for (auto& layer : plan) {
    layer.weight_offset = offset;
    offset += static_cast<std::size_t>(layer.out) * layer.fan_in();
    layer.bias_offset = offset;
    offset += static_cast<std::size_t>(layer.out);
  }
  return plan;
}

inline std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& layer : layer_plan(config)) n += layer.parameter_count();
  return n;
}

/// Per-pixel softmax over channel-major logits (C x N), in place.
template <typename T>
void softmax_channels(std::span<T> values, std::size_t channels, std::size_t pixels) {
  for (std::size_t i = 0; i < pixels; ++i) {
    T peak = values[i];
    for (std::size_t c = 1; c < channels; ++c) peak = std::max(peak, values[c * pixels + i]);
    T sum = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      T& v = values[c * pixels + i];
      v = std::exp(v - peak);
      sum += v;
    }
    for (std::size_t c = 0; c < channels; ++c) values[c * pixels + i] /= sum;
  }
}

inline constexpr double kDiceSmooth = 1e-5;

/// Soft Dice loss over unmasked foreground channels (channel 0 is background and
/// never contributes):
///   loss = 1 - mean_c (2 sum(p g) + eps) / (sum p + sum g + eps)
/// `probs` and `target` are channel-major (C x N). Writes dloss/dprobs to `grad`;
/// masked and background channels receive exactly zero.
template <typename T>
double soft_dice_loss(std::span<const T> probs, std::span<const T> target, std::size_t channels,
                      std::span<const char> channel_mask, std::span<T> grad) {
  if (channels < 2 || probs.size() % channels != 0 || target.size() != probs.size() || grad.size() != probs.size() ||
      channel_mask.size() != channels) {
    throw Error(Errc::ShapeError, "soft dice: inconsistent tensor shapes");
  }
  const std::size_t pixels = probs.size() / channels;
  std::size_t active = 0;
  for (std::size_t c = 1; c < channels; ++c) active += channel_mask[c] ? 1 : 0;
  if (active == 0) throw Error(Errc::AllChannelsMasked, "soft dice: every foreground channel is masked");

  std::fill(grad.begin(), grad.end(), T(0));
  double dice_sum = 0.0;
  const double scale = -1.0 / static_cast<double>(active);
  for (std::size_t c = 1; c < channels; ++c) {
    if (!channel_mask[c]) continue;
    const T* p = probs.data() + c * pixels;
    const T* g = target.data() + c * pixels;
    double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) {
      inter += static_cast<double>(p[i]) * static_cast<double>(g[i]);
      sum_p += static_cast<double>(p[i]);
      sum_g += static_cast<double>(g[i]);
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = sum_p + sum_g + kDiceSmooth;
    dice_sum += num / den;
    T* d = grad.data() + c * pixels;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double ddice = (2.0 * static_cast<double>(g[i]) * den - num) / (den * den);
      d[i] = static_cast<T>(scale * ddice);
    }
  }
  return 1.0 - dice_sum / static_cast<double>(active);
}

/// Adaptive-moment optimizer state over a flat parameter vector.
template <typename T>
struct Adam {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<T> m;
  std::vector<T> v;

  void step_update(std::span<T> params, std::span<const T> grads) {
    if (m.size() != params.size()) {
      m.assign(params.size(), T(0));
      v.assign(params.size(), T(0));
    }
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T lr_t = static_cast<T>(learning_rate * std::sqrt(c2) / c1);
    const T eps_t = static_cast<T>(epsilon * std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = grads[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      params[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps_t);
    }
  }
};

template <typename T>
class Network {
 public:
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

  /// Seeded fan-in-scaled uniform initialization: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
  /// biases zero. With config.zero_head the output layer starts at zero.
  explicit Network(const ModelConfig& config) : config_(config), plan_(layer_plan(config)) {
    params_.assign(lsf::parameter_count(config), T(0));
    Rng rng(config.seed);
    for (const auto& layer : plan_) {
      if (config.zero_head && &layer == &plan_.back()) break;
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in()));
      const std::size_t n = static_cast<std::size_t>(layer.out) * layer.fan_in();
      for (std::size_t i = 0; i < n; ++i) params_[layer.weight_offset + i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    cache_.resize(plan_.size());
  }

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<ConvSpec>& layers() const noexcept { return plan_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<T> parameters() noexcept { return params_; }
  std::span<const T> parameters() const noexcept { return params_; }

  std::size_t required_multiple() const noexcept { return std::size_t{1} << (config_.depth - 1); }

  /// Class probabilities (C x H x W, channel-major) for one single-channel image.
  /// Keeps the activations needed by the next call to backward().
  std::span<const T> forward(std::span<const T> image, std::size_t height, std::size_t width) {
    const std::size_t m = required_multiple();
    if (height == 0 || width == 0 || height % m != 0 || width % m != 0 || image.size() != height * width) {
      throw Error(Errc::ShapeError, "input must be non-empty with sides divisible by " + std::to_string(m));
    }
    height_ = height;
    width_ = width;
    const int D = config_.depth;
    skips_.assign(static_cast<std::size_t>(D), {});
    pool_index_.assign(static_cast<std::size_t>(D), {});

    std::vector<T> current(image.begin(), image.end());
    std::size_t h = height, w = width;
    std::size_t li = 0;
    for (int l = 0; l < D; ++l) {
      current = conv_forward(li++, current, h, w);
      current = conv_forward(li++, current, h, w);
      skips_[static_cast<std::size_t>(l)] = current;
      if (l < D - 1) {
        current = pool_forward(current, config_.width_at(l), h, w, pool_index_[static_cast<std::size_t>(l)]);
        h /= 2;
        w /= 2;
      }
    }
    for (int l = D - 2; l >= 0; --l) {
      std::vector<T> up = upsample_forward(current, config_.width_at(l + 1), h, w);
      h *= 2;
      w *= 2;
      const auto& skip = skips_[static_cast<std::size_t>(l)];
      up.insert(up.end(), skip.begin(), skip.end());
      current = conv_forward(li++, up, h, w);
      current = conv_forward(li++, current, h, w);
    }
    probs_ = conv_forward(li, current, h, w);
    softmax_channels<T>(probs_, static_cast<std::size_t>(config_.out_channels), h * w);
    return probs_;
  }

  /// Raw logits are not kept; this exposes the probabilities of the last forward pass.
  std::span<const T> probabilities() const noexcept { return probs_; }

  /// Accumulate d(loss)/d(params) into `grads` given d(loss)/d(probs) for the last forward pass.
  void backward(std::span<const T> dprobs, std::span<T> grads) {
    if (grads.size() != params_.size() || dprobs.size() != probs_.size()) {
      throw Error(Errc::ShapeError, "backward: gradient buffers do not match the network");
    }
    const std::size_t C = static_cast<std::size_t>(config_.out_channels);
    const std::size_t N = height_ * width_;
    std::vector<T> dz(probs_.size());
    for (std::size_t i = 0; i < N; ++i) {
      T dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += probs_[c * N + i] * dprobs[c * N + i];
      for (std::size_t c = 0; c < C; ++c) dz[c * N + i] = probs_[c * N + i] * (dprobs[c * N + i] - dot);
    }

    const int D = config_.depth;
    std::size_t li = plan_.size() - 1;
    std::size_t h = height_, w = width_;
    std::vector<T> grad = conv_backward(li, dz, h, w, grads, true);
    std::vector<std::vector<T>> skip_grads(static_cast<std::size_t>(D));
    for (int l = 0; l <= D - 2; ++l) {
      grad = conv_backward(--li, grad, h, w, grads, true);
      grad = conv_backward(--li, grad, h, w, grads, true);
      const std::size_t up_channels = static_cast<std::size_t>(config_.width_at(l + 1));
      const std::size_t n = h * w;
      skip_grads[static_cast<std::size_t>(l)].assign(grad.begin() + static_cast<std::ptrdiff_t>(up_channels * n), grad.end());
      grad.resize(up_channels * n);
      grad = upsample_backward(grad, up_channels, h, w);
      h /= 2;
      w /= 2;
    }
    // `grad` now holds d/d(output of the deepest encoder level)
    for (int l = D - 1; l >= 0; --l) {
      auto& extra = skip_grads[static_cast<std::size_t>(l)];
      if (!extra.empty()) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += extra[i];
      }
      grad = conv_backward(--li, grad, h, w, grads, true);
      grad = conv_backward(--li, grad, h, w, grads, l > 0);
      if (l > 0) {
        grad = pool_backward(grad, config_.width_at(l - 1), h, w, pool_index_[static_cast<std::size_t>(l - 1)]);
        h *= 2;
        w *= 2;
      }
    }
  }

 private:
  struct LayerCache {
    std::vector<T> input;   // im2col matrix for 3x3, raw input for 1x1
    std::vector<T> output;  // post-activation
  };

  std::vector<T> conv_forward(std::size_t index, const std::vector<T>& input, std::size_t h, std::size_t w) {
    const ConvSpec& layer = plan_[index];
    LayerCache& cache = cache_[index];
    const std::size_t n = h * w;
    if (layer.kernel == 3) {
      im2col(input, static_cast<std::size_t>(layer.in), h, w, cache.input);
    } else {
      cache.input = input;
    }
    ConstMatrixMap weights(params_.data() + layer.weight_offset, layer.out, static_cast<Eigen::Index>(layer.fan_in()));
    ConstMatrixMap cols(cache.input.data(), static_cast<Eigen::Index>(layer.fan_in()), static_cast<Eigen::Index>(n));
    ConstVectorMap bias(params_.data() + layer.bias_offset, layer.out);
    std::vector<T> out(static_cast<std::size_t>(layer.out) * n);
    MatrixMap y(out.data(), layer.out, static_cast<Eigen::Index>(n));
    y.noalias() = weights * cols;
    y.colwise() += bias;
    if (layer.relu) {
      for (auto& v : out) v = v > T(0) ? v : T(0);
    }
    cache.output = out;
    return out;
  }

  std::vector<T> conv_backward(std::size_t index, std::vector<T> dout, std::size_t h, std::size_t w,
                               std::span<T> grads, bool need_input_grad) {
    const ConvSpec& layer = plan_[index];
    const LayerCache& cache = cache_[index];
    const std::size_t n = h * w;
    if (layer.relu) {
      for (std::size_t i = 0; i < dout.size(); ++i) {
        if (!(cache.output[i] > T(0))) dout[i] = T(0);
      }
    }
    const auto fan_in = static_cast<Eigen::Index>(layer.fan_in());
    ConstMatrixMap dz(dout.data(), layer.out, static_cast<Eigen::Index>(n));
    ConstMatrixMap cols(cache.input.data(), fan_in, static_cast<Eigen::Index>(n));
    MatrixMap dweights(grads.data() + layer.weight_offset, layer.out, fan_in);
    VectorMap dbias(grads.data() + layer.bias_offset, layer.out);
    dweights.noalias() += dz * cols.transpose();
    // plain loop: Eigen's vectorized reductions depend on buffer alignment
    for (int o = 0; o < layer.out; ++o) {
      const T* row = dout.data() + static_cast<std::size_t>(o) * n;
      T sum = 0;
      for (std::size_t i = 0; i < n; ++i) sum += row[i];
      dbias[o] += sum;
    }
    if (!need_input_grad) return {};

    ConstMatrixMap weights(params_.data() + layer.weight_offset, layer.out, fan_in);
    std::vector<T> dcols(static_cast<std::size_t>(fan_in) * n);
    MatrixMap dc(dcols.data(), fan_in, static_cast<Eigen::Index>(n));
    dc.noalias() = weights.transpose() * dz;
    if (layer.kernel == 1) return dcols;
    return col2im(dcols, static_cast<std::size_t>(layer.in), h, w);
  }

  // col[(ci*9 + ky*3 + kx), y*w + x] = in[ci, y+ky-1, x+kx-1], zero outside
  static void im2col(const std::vector<T>& in, std::size_t channels, std::size_t h, std::size_t w, std::vector<T>& col) {
    const std::size_t n = h * w;
    col.assign(channels * 9 * n, T(0));
    for (std::size_t ci = 0; ci < channels; ++ci) {
      const T* src = in.data() + ci * n;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col.data() + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * n;
          const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
          for (std::size_t y = y0; y < y1; ++y) {
            const T* s = src + (y + ky - 1) * w + (kx - 1);
            T* d = dst + y * w;
            for (std::size_t x = x0; x < x1; ++x) d[x] = s[x];
          }
        }
      }
    }
  }

  static std::vector<T> col2im(const std::vector<T>& col, std::size_t channels, std::size_t h, std::size_t w) {
    const std::size_t n = h * w;
    std::vector<T> out(channels * n, T(0));
    for (std::size_t ci = 0; ci < channels; ++ci) {
      T* dst = out.data() + ci * n;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = col.data() + (ci * 9 + static_cast<std::size_t>(ky * 3 + kx)) * n;
          const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? w - 1 : w;
          for (std::size_t y = y0; y < y1; ++y) {
            T* d = dst + (y + ky - 1) * w + (kx - 1);
            const T* s = src + y * w;
            for (std::size_t x = x0; x < x1; ++x) d[x] += s[x];
          }
        }
      }
    }
    return out;
  }

  // 2x2 max pooling; ties resolve to the first element in row-major window order.
  static std::vector<T> pool_forward(const std::vector<T>& in, int channels, std::size_t h, std::size_t w,
                                     std::vector<std::uint32_t>& argmax) {
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(static_cast<std::size_t>(channels) * oh * ow);
    argmax.resize(out.size());
    for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          std::size_t best = c * h * w + (2 * y) * w + 2 * x;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = c * h * w + (2 * y + dy) * w + 2 * x + dx;
              if (in[idx] > in[best]) best = idx;
            }
          }
          const std::size_t o = (c * oh + y) * ow + x;
          out[o] = in[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
    return out;
  }

  static std::vector<T> pool_backward(const std::vector<T>& dout, int channels, std::size_t oh, std::size_t ow,
                                      const std::vector<std::uint32_t>& argmax) {
    std::vector<T> din(static_cast<std::size_t>(channels) * oh * ow * 4, T(0));
    for (std::size_t i = 0; i < dout.size(); ++i) din[argmax[i]] += dout[i];
    return din;
  }

  static std::vector<T> upsample_forward(const std::vector<T>& in, int channels, std::size_t h, std::size_t w) {
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<T> out(static_cast<std::size_t>(channels) * oh * ow);
    for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) out[(c * oh + y) * ow + x] = in[(c * h + y / 2) * w + x / 2];
      }
    }
    return out;
  }

  // `h`, `w` are the upsampled extents
  static std::vector<T> upsample_backward(const std::vector<T>& dout, std::size_t channels, std::size_t h, std::size_t w) {
    const std::size_t ih = h / 2, iw = w / 2;
    std::vector<T> din(channels * ih * iw, T(0));
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) din[(c * ih + y / 2) * iw + x / 2] += dout[(c * h + y) * w + x];
      }
    }
    return din;
  }

  ModelConfig config_;
  std::vector<ConvSpec> plan_;
  std::vector<T> params_;
  std::vector<LayerCache> cache_;
  std::vector<std::vector<T>> skips_;
  std::vector<std::vector<std::uint32_t>> pool_index_;
  std::vector<T> probs_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
};

}  // namespace lsf

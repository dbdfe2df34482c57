#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/image.hpp"
#include "wobseg/rng.hpp"

// Small fully-convolutional pixel classifier with hand-written forward and
// backward passes. Layers: 3x3 "same" convolution, ReLU, 2x2 max-pool,
// nearest 2x upsample and a final sigmoid. Arithmetic is templated on the
// scalar so training runs in float and gradient checks in double.

namespace wobseg::nn {

enum class LayerKind { conv3, relu, maxpool2, upsample2, sigmoid };

struct Layer {
  LayerKind kind = LayerKind::relu;
  int in_channels = 0;
  int out_channels = 0;

  static Layer conv(int in, int out) { return {LayerKind::conv3, in, out}; }
  static Layer relu() { return {LayerKind::relu, 0, 0}; }
  static Layer pool() { return {LayerKind::maxpool2, 0, 0}; }
  static Layer upsample() { return {LayerKind::upsample2, 0, 0}; }
  static Layer sigmoid() { return {LayerKind::sigmoid, 0, 0}; }

  bool operator==(const Layer&) const = default;
};

struct FcnConfig {
  int input_channels = 3;
  std::vector<Layer> layers;

  bool operator==(const FcnConfig&) const = default;

  /// conv3(3->8) relu conv3(8->8) relu conv3(8->1) sigmoid
  static FcnConfig reference_base() {
    return {3,
            {Layer::conv(3, 8), Layer::relu(), Layer::conv(8, 8), Layer::relu(),
             Layer::conv(8, 1), Layer::sigmoid()}};
  }
  /// Compound head: 4 input channels, a pool/upsample pair around the middle
  /// convolution for wider context.
  static FcnConfig reference_head() {
    return {4,
            {Layer::conv(4, 8), Layer::relu(), Layer::pool(), Layer::conv(8, 8),
             Layer::relu(), Layer::upsample(), Layer::conv(8, 1),
             Layer::sigmoid()}};
  }

  void validate() const {
    if (input_channels < 1) throw config_error("fcn: input_channels must be >= 1");
    if (layers.empty() || layers.back().kind != LayerKind::sigmoid)
      throw config_error("fcn: last layer must be sigmoid");
    int channels = input_channels;
    int depth = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      switch (l.kind) {
        case LayerKind::conv3:
          if (l.in_channels != channels || l.out_channels < 1)
            throw config_error("fcn: conv layer " + std::to_string(i) +
                               " channel mismatch");
          channels = l.out_channels;
          break;
        case LayerKind::maxpool2: ++depth; break;
        case LayerKind::upsample2:
          if (--depth < 0) throw config_error("fcn: upsample without matching pool");
          break;
        case LayerKind::sigmoid:
          if (i + 1 != layers.size()) throw config_error("fcn: sigmoid must be final");
          break;
        case LayerKind::relu: break;
      }
    }
    if (depth != 0) throw config_error("fcn: pool/upsample counts do not balance");
    if (channels != 1) throw config_error("fcn: output must have one channel");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.kind == LayerKind::conv3)
        n += static_cast<std::size_t>(l.in_channels) * l.out_channels * 9 +
             static_cast<std::size_t>(l.out_channels);
    return n;
  }

  /// Offset of each conv layer's weights in the flat parameter vector
  /// (weights [out][in][3][3] followed by out biases); -1 for other layers.
  std::vector<std::ptrdiff_t> param_offsets() const {
    std::vector<std::ptrdiff_t> off;
    std::ptrdiff_t n = 0;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::conv3) {
        off.push_back(n);
        n += static_cast<std::ptrdiff_t>(l.in_channels) * l.out_channels * 9 +
             l.out_channels;
      } else {
        off.push_back(-1);
      }
    }
    return off;
  }

  std::string canonical() const {
    std::string s = "in" + std::to_string(input_channels);
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::conv3:
          s += "|conv3:" + std::to_string(l.in_channels) + ":" +
               std::to_string(l.out_channels);
          break;
        case LayerKind::relu: s += "|relu"; break;
        case LayerKind::maxpool2: s += "|maxpool2"; break;
        case LayerKind::upsample2: s += "|upsample2"; break;
        case LayerKind::sigmoid: s += "|sigmoid"; break;
      }
    }
    return s;
  }

  /// FNV-1a 64 of the canonical layer string.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  /// Conservative receptive-field radius in input pixels.
  int receptive_radius() const {
    int radius = 0, scale = 1;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::conv3: radius += scale; break;
        case LayerKind::maxpool2: radius += scale; scale *= 2; break;
        case LayerKind::upsample2: scale /= 2; radius += scale; break;
        default: break;
      }
    }
    return radius;
  }

  /// Tile origins must be multiples of this for pooling grids to line up.
  int alignment() const {
    int depth = 0, max_depth = 0;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::maxpool2) max_depth = std::max(max_depth, ++depth);
      if (l.kind == LayerKind::upsample2) --depth;
    }
    return 1 << max_depth;
  }
};

/// Flat parameter vector. Values are float so that the on-disk format is
/// exact; arithmetic may widen them.
struct Params {
  FcnConfig config;
  std::vector<float> values;
  std::uint64_t init_seed = 0;
};

/// Glorot-uniform weights, zero biases.
inline Params init_params(const FcnConfig& config, std::uint64_t seed) {
  config.validate();
  Params p{config, std::vector<float>(config.param_count(), 0.0f), seed};
  Rng rng(seed);
  const auto offsets = config.param_offsets();
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto& l = config.layers[i];
    if (l.kind != LayerKind::conv3) continue;
    const double fan_in = 9.0 * l.in_channels, fan_out = 9.0 * l.out_channels;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    const auto n = static_cast<std::size_t>(l.in_channels) * l.out_channels * 9;
    for (std::size_t k = 0; k < n; ++k)
      p.values[static_cast<std::size_t>(offsets[i]) + k] =
          static_cast<float>(rng.uniform(-limit, limit));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Engine

/// Planar (channel-major) activation tensor.
template <typename T>
struct Tensor {
  int channels = 0, height = 0, width = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  T* plane(int c) { return data.data() + static_cast<std::size_t>(c) * plane_size(); }
  const T* plane(int c) const {
    return data.data() + static_cast<std::size_t>(c) * plane_size();
  }
};

template <typename T>
Tensor<T> to_tensor(const FloatImage& img) {
  Tensor<T> t(img.channels(), img.height(), img.width());
  const auto n = img.pixel_count();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < img.channels(); ++c)
      t.data[static_cast<std::size_t>(c) * n + i] =
          static_cast<T>(img.storage()[i * img.channels() + c]);
  return t;
}

/// Per-layer record needed by the backward pass.
template <typename T>
struct Trace {
  std::vector<Tensor<T>> inputs;                 // input of each layer
  std::vector<std::vector<std::uint32_t>> argmax;  // per maxpool layer
  Tensor<T> logits;                              // input of the final sigmoid
};

namespace detail {

/// Copies a plane into a zero border of width 1.
template <typename T>
void pad_plane(const T* src, int h, int w, T* dst) {
  const int pw = w + 2;
  std::fill(dst, dst + static_cast<std::size_t>(pw) * (h + 2), T{});
  for (int y = 0; y < h; ++y)
    std::copy(src + static_cast<std::size_t>(y) * w,
              src + static_cast<std::size_t>(y + 1) * w,
              dst + static_cast<std::size_t>(y + 1) * pw + 1);
}

/// Dot product with eight independent partial sums (vectorizable without
/// reassociation); the summation order is fixed.
template <typename T>
T dot8(const T* a, const T* b, int n) {
  T acc[8] = {};
  int i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  T tail{};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
Tensor<T> conv3_forward(const Tensor<T>& in, const T* weights, const T* bias,
                        int out_channels) {
  const int h = in.height, w = in.width, pw = w + 2;
  Tensor<T> out(out_channels, h, w);
  std::vector<T> padded(static_cast<std::size_t>(in.channels) * (h + 2) * pw);
  const auto padded_size = static_cast<std::size_t>(h + 2) * pw;
  for (int c = 0; c < in.channels; ++c)
    pad_plane(in.plane(c), h, w, padded.data() + c * padded_size);
  for (int co = 0; co < out_channels; ++co) {
    T* dst = out.plane(co);
    std::fill(dst, dst + out.plane_size(), bias[co]);
    for (int ci = 0; ci < in.channels; ++ci) {
      const T* src = padded.data() + ci * padded_size;
      const T* k = weights + (static_cast<std::size_t>(co) * in.channels + ci) * 9;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T wv = k[ky * 3 + kx];
          for (int y = 0; y < h; ++y) {
            const T* s = src + static_cast<std::size_t>(y + ky) * pw + kx;
            T* d = dst + static_cast<std::size_t>(y) * w;
            for (int x = 0; x < w; ++x) d[x] += wv * s[x];
          }
        }
    }
  }
  return out;
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad`.
template <typename T>
Tensor<T> conv3_backward(const Tensor<T>& in, const T* weights,
                         const Tensor<T>& grad_out, T* grad_w, T* grad_b,
                         bool need_input_grad) {
  const int h = in.height, w = in.width, pw = w + 2;
  const auto padded_size = static_cast<std::size_t>(h + 2) * pw;
  std::vector<T> padded(static_cast<std::size_t>(in.channels) * padded_size);
  for (int c = 0; c < in.channels; ++c)
    pad_plane(in.plane(c), h, w, padded.data() + c * padded_size);
  std::vector<T> grad_padded(need_input_grad ? padded.size() : 0, T{});
  for (int co = 0; co < grad_out.channels; ++co) {
    const T* g = grad_out.plane(co);
    T bsum{};
    for (std::size_t k = 0; k < grad_out.plane_size(); ++k) bsum += g[k];
    grad_b[co] += bsum;
    for (int ci = 0; ci < in.channels; ++ci) {
      const T* src = padded.data() + ci * padded_size;
      const auto widx = (static_cast<std::size_t>(co) * in.channels + ci) * 9;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T acc{};
          for (int y = 0; y < h; ++y)
            acc += dot8(g + static_cast<std::size_t>(y) * w,
                        src + static_cast<std::size_t>(y + ky) * pw + kx, w);
          grad_w[widx + static_cast<std::size_t>(ky * 3 + kx)] += acc;
          if (need_input_grad) {
            const T wv = weights[widx + static_cast<std::size_t>(ky * 3 + kx)];
            T* gp = grad_padded.data() + ci * padded_size;
            for (int y = 0; y < h; ++y) {
              T* d = gp + static_cast<std::size_t>(y + ky) * pw + kx;
              const T* s = g + static_cast<std::size_t>(y) * w;
              for (int x = 0; x < w; ++x) d[x] += wv * s[x];
            }
          }
        }
    }
  }
  Tensor<T> grad_in;
  if (need_input_grad) {
    grad_in = Tensor<T>(in.channels, h, w);
    for (int c = 0; c < in.channels; ++c) {
      const T* gp = grad_padded.data() + c * padded_size;
      T* dst = grad_in.plane(c);
      for (int y = 0; y < h; ++y)
        std::copy(gp + static_cast<std::size_t>(y + 1) * pw + 1,
                  gp + static_cast<std::size_t>(y + 1) * pw + 1 + w,
                  dst + static_cast<std::size_t>(y) * w);
    }
  }
  return grad_in;
}

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& in, std::vector<std::uint32_t>* argmax) {
  const int oh = half_up(in.height), ow = half_up(in.width);
  Tensor<T> out(in.channels, oh, ow);
  if (argmax) argmax->assign(out.data.size(), 0);
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.plane(c);
    T* dst = out.plane(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        std::uint32_t best = static_cast<std::uint32_t>(2 * y * in.width + 2 * x);
        for (int yy = 2 * y; yy <= std::min(2 * y + 1, in.height - 1); ++yy)
          for (int xx = 2 * x; xx <= std::min(2 * x + 1, in.width - 1); ++xx) {
            const auto idx = static_cast<std::uint32_t>(yy * in.width + xx);
            if (src[idx] > src[best]) best = idx;
          }
        const auto o = static_cast<std::size_t>(y) * ow + x;
        dst[o] = src[best];
        if (argmax) (*argmax)[static_cast<std::size_t>(c) * out.plane_size() + o] = best;
      }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_forward(const Tensor<T>& in, int out_h, int out_w) {
  Tensor<T> out(in.channels, out_h, out_w);
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.plane(c);
    T* dst = out.plane(c);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        dst[static_cast<std::size_t>(y) * out_w + x] =
            src[static_cast<std::size_t>(y / 2) * in.width + x / 2];
  }
  return out;
}

template <typename T>
T sigmoid(T z) {
  return T{1} / (T{1} + std::exp(-z));
}

}  // namespace detail

/// Runs the network; returns probabilities (1 x H x W). When `trace` is given,
/// records what the backward pass needs.
template <typename T>
Tensor<T> run_forward(const FcnConfig& config, std::span<const T> weights,
                      Tensor<T> x, Trace<T>* trace = nullptr) {
  if (x.channels != config.input_channels)
    throw config_error("input has " + std::to_string(x.channels) +
                       " channels, network expects " +
                       std::to_string(config.input_channels));
  if (weights.size() != config.param_count())
    throw config_error("parameter vector length does not match config");
  const auto offsets = config.param_offsets();
  std::vector<std::pair<int, int>> pooled_dims;
  if (trace) {
    trace->inputs.clear();
    trace->argmax.clear();
  }
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto& l = config.layers[i];
    if (trace) trace->inputs.push_back(x);
    switch (l.kind) {
      case LayerKind::conv3: {
        const T* w = weights.data() + offsets[i];
        x = detail::conv3_forward(x, w, w + static_cast<std::size_t>(l.in_channels) *
                                                l.out_channels * 9,
                                  l.out_channels);
        break;
      }
      case LayerKind::relu:
        for (auto& v : x.data) v = v > T{} ? v : T{};
        break;
      case LayerKind::maxpool2: {
        pooled_dims.emplace_back(x.height, x.width);
        std::vector<std::uint32_t> am;
        x = detail::maxpool_forward(x, trace ? &am : nullptr);
        if (trace) trace->argmax.push_back(std::move(am));
        break;
      }
      case LayerKind::upsample2: {
        const auto [h, w] = pooled_dims.back();
        pooled_dims.pop_back();
        x = detail::upsample_forward(x, h, w);
        break;
      }
      case LayerKind::sigmoid:
        if (trace) trace->logits = x;
        for (auto& v : x.data) v = detail::sigmoid(v);
        break;
    }
  }
  return x;
}

/// Backpropagates dL/dlogits through all layers below the final sigmoid and
/// accumulates into `grad`.
template <typename T>
void run_backward(const FcnConfig& config, std::span<const T> weights,
                  const Trace<T>& trace, Tensor<T> grad, std::span<T> grad_w) {
  const auto offsets = config.param_offsets();
  std::size_t pool_index = trace.argmax.size();
  for (std::size_t i = config.layers.size() - 1; i-- > 0;) {
    const auto& l = config.layers[i];
    const auto& in = trace.inputs[i];
    switch (l.kind) {
      case LayerKind::conv3: {
        const auto off = static_cast<std::size_t>(offsets[i]);
        const auto nw = static_cast<std::size_t>(l.in_channels) * l.out_channels * 9;
        grad = detail::conv3_backward(in, weights.data() + off, grad,
                                      grad_w.data() + off,
                                      grad_w.data() + off + nw, i > 0);
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < grad.data.size(); ++k)
          if (!(in.data[k] > T{})) grad.data[k] = T{};
        break;
      case LayerKind::maxpool2: {
        const auto& am = trace.argmax[--pool_index];
        Tensor<T> g(in.channels, in.height, in.width);
        for (int c = 0; c < in.channels; ++c)
          for (std::size_t o = 0; o < grad.plane_size(); ++o)
            g.plane(c)[am[static_cast<std::size_t>(c) * grad.plane_size() + o]] +=
                grad.plane(c)[o];
        grad = std::move(g);
        break;
      }
      case LayerKind::upsample2: {
        Tensor<T> g(in.channels, in.height, in.width);
        for (int c = 0; c < in.channels; ++c)
          for (int y = 0; y < grad.height; ++y)
            for (int x = 0; x < grad.width; ++x)
              g.plane(c)[static_cast<std::size_t>(y / 2) * in.width + x / 2] +=
                  grad.plane(c)[static_cast<std::size_t>(y) * grad.width + x];
        grad = std::move(g);
        break;
      }
      case LayerKind::sigmoid: break;
    }
    if (i == 0) break;
  }
}

/// Training example: input raster in [0,1] (H x W x C) and a {0,1} mask.
struct Example {
  FloatImage input;
  ByteImage mask;
};

constexpr double kProbClamp = 1e-7;

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean pixelwise binary cross-entropy over a batch and its gradient, with the
/// scalar type chosen by the caller.
template <typename T>
LossGrad loss_and_grad_as(const FcnConfig& config, std::span<const T> weights,
                          std::span<const Example> batch) {
  if (batch.empty()) throw config_error("loss_and_grad: empty batch");
  std::size_t total = 0;
  for (const auto& ex : batch) {
    if (!ex.input.same_shape(ex.mask) || ex.mask.channels() != 1)
      throw config_error("loss_and_grad: input and mask dims differ");
    total += ex.mask.pixel_count();
  }
  std::vector<T> grad_w(weights.size(), T{});
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(total);
  for (const auto& ex : batch) {
    Trace<T> trace;
    const auto probs = run_forward<T>(config, weights, to_tensor<T>(ex.input), &trace);
    Tensor<T> dz(1, probs.height, probs.width);
    for (std::size_t k = 0; k < probs.data.size(); ++k) {
      const double p = static_cast<double>(probs.data[k]);
      const double y = ex.mask.storage()[k] ? 1.0 : 0.0;
      const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
      loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
      // d/dz of the clamped loss; zero where the clamp is active.
      dz.data[k] = (p > kProbClamp && p < 1.0 - kProbClamp)
                       ? static_cast<T>((p - y) * inv_n)
                       : T{};
    }
    run_backward<T>(config, weights, trace, std::move(dz), grad_w);
  }
  return {loss * inv_n, std::vector<double>(grad_w.begin(), grad_w.end())};
}

inline LossGrad loss_and_grad(const Params& params, std::span<const Example> batch) {
  return loss_and_grad_as<float>(params.config, params.values, batch);
}

/// Probability map for one input raster (values in [0,1], H x W x C).
inline FloatImage forward(const Params& params, const FloatImage& input) {
  const auto out = run_forward<float>(params.config, params.values,
                                      to_tensor<float>(input));
  return FloatImage(out.width, out.height, 1, out.data);
}

/// Byte input is scaled by 1/255 at the boundary.
inline FloatImage forward(const Params& params, const ByteImage& input) {
  return forward(params, to_unit_float(input));
}

/// v' = momentum * v - lr * grad; params' = params + v' (stored as float).
inline void sgd_step(Params& params, std::span<const double> grad, double lr,
                     double momentum, std::vector<double>& velocity) {
  if (grad.size() != params.values.size() || velocity.size() != params.values.size())
    throw config_error("sgd_step: shape mismatch");
  if (!(lr > 0.0)) throw config_error("sgd_step: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw config_error("sgd_step: momentum must lie in [0,1)");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grad[i];
    params.values[i] = static_cast<float>(params.values[i] + velocity[i]);
  }
}

/// Scales `grad` down so its L2 norm is at most `max_norm`; returns the norm
/// before scaling. max_norm <= 0 leaves the gradient alone.
inline double clip_grad_norm(std::vector<double>& grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Parameter files: "WOBSEGP1", u64 config hash, u64 count, count x f32, all
// little-endian.

inline constexpr std::array<char, 8> kParamMagic{'W', 'O', 'B', 'S', 'E', 'G', 'P', '1'};

namespace detail {
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_params(const Params& p) {
  std::vector<std::uint8_t> out(kParamMagic.begin(), kParamMagic.end());
  detail::put_u64(out, p.config.hash());
  detail::put_u64(out, p.values.size());
  for (float f : p.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

inline Params decode_params(std::span<const std::uint8_t> bytes,
                            const FcnConfig& config) {
  if (bytes.size() < 24 ||
      !std::equal(kParamMagic.begin(), kParamMagic.end(), bytes.begin()))
    throw config_error("corrupt parameter file: bad header");
  const auto hash = detail::get_u64(bytes.data() + 8);
  const auto count = detail::get_u64(bytes.data() + 16);
  if (hash != config.hash())
    throw config_error("parameter file config hash does not match " +
                       config.canonical());
  if (count != config.param_count() || bytes.size() != 24 + 4 * count)
    throw config_error("corrupt parameter file: length mismatch");
  Params p{config, std::vector<float>(count), 0};
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | bytes[24 + 4 * i + static_cast<std::size_t>(b)];
    std::memcpy(&p.values[i], &bits, 4);
  }
  return p;
}

inline void save_params(const Params& p, const std::filesystem::path& path) {
  const auto bytes = encode_params(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path.string());
}

inline Params load_params(const std::filesystem::path& path, const FcnConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_params(bytes, config);
}

}  // namespace wobseg::nn

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/gaussian.hpp"
#include "wobseg/image.hpp"
#include "wobseg/rng.hpp"

// Online augmentation of (patch, mask) pairs. A pipeline is a text file with
// one operator per line, e.g.
//
//   rot90 k=random
//   mirror axis=random p=0.5
//   elastic alpha=10 sigma=4
//   color brightness=0.1 contrast=0.1 gray_mix=0.1

namespace wobseg::augment {

enum class OpKind { rot90, mirror, elastic, color };
enum class Axis { h, v, random };

struct AugmentOp {
  OpKind kind = OpKind::rot90;
  int k = -1;  // rot90 quarter turns; -1 draws uniformly from {0..3}
  Axis axis = Axis::random;
  double p = 0.5;
  double alpha = 10.0;
  double sigma = 4.0;
  double brightness = 0.1;
  double contrast = 0.1;
  double gray_mix = 0.1;

  bool operator==(const AugmentOp&) const = default;
};

struct AugmentPipeline {
  std::vector<AugmentOp> ops;
  std::string source;

  /// Source text is not part of the identity.
  bool operator==(const AugmentPipeline& o) const { return ops == o.ops; }
};

inline const char* kind_name(OpKind k) {
  switch (k) {
    case OpKind::rot90: return "rot90";
    case OpKind::mirror: return "mirror";
    case OpKind::elastic: return "elastic";
    case OpKind::color: return "color";
  }
  return "?";
}

namespace detail {

inline Error line_error(const std::string& what, int line) {
  return config_error(what + ", line " + std::to_string(line));
}

inline double parse_number(const std::string& key, const std::string& text, int line) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v))
    throw line_error("malformed value for " + key, line);
  return v;
}

inline void check_range(const std::string& key, double v, double lo, double hi,
                        int line) {
  if (!(v >= lo && v <= hi)) throw line_error(key + " out of range", line);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline AugmentOp parse_op(const std::string& line_text, int line) {
  std::istringstream in(line_text);
  std::string kind;
  in >> kind;
  AugmentOp op;
  if (kind == "rot90") op.kind = OpKind::rot90;
  else if (kind == "mirror") op.kind = OpKind::mirror;
  else if (kind == "elastic") op.kind = OpKind::elastic;
  else if (kind == "color") op.kind = OpKind::color;
  else throw detail::line_error("unknown op '" + kind + "'", line);

  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == token.size())
      throw detail::line_error("malformed token '" + token + "'", line);
    const auto key = token.substr(0, eq);
    const auto val = token.substr(eq + 1);
    const auto number = [&] { return detail::parse_number(key, val, line); };
    switch (op.kind) {
      case OpKind::rot90:
        if (key != "k") break;
        if (val == "random") {
          op.k = -1;
        } else {
          const double k = number();
          if (k != std::floor(k) || k < 0 || k > 3)
            throw detail::line_error("k out of range", line);
          op.k = static_cast<int>(k);
        }
        continue;
      case OpKind::mirror:
        if (key == "axis") {
          if (val == "h") op.axis = Axis::h;
          else if (val == "v") op.axis = Axis::v;
          else if (val == "random") op.axis = Axis::random;
          else throw detail::line_error("axis out of range", line);
          continue;
        }
        if (key == "p") {
          op.p = number();
          detail::check_range(key, op.p, 0.0, 1.0, line);
          continue;
        }
        break;
      case OpKind::elastic:
        if (key == "alpha") {
          op.alpha = number();
          if (!(op.alpha >= 0.0)) throw detail::line_error("alpha out of range", line);
          continue;
        }
        if (key == "sigma") {
          op.sigma = number();
          if (!(op.sigma > 0.0)) throw detail::line_error("sigma out of range", line);
          continue;
        }
        break;
      case OpKind::color:
        if (key == "brightness" || key == "contrast" || key == "gray_mix") {
          const double v = number();
          detail::check_range(key, v, 0.0, 1.0, line);
          (key == "brightness" ? op.brightness
                               : key == "contrast" ? op.contrast : op.gray_mix) = v;
          continue;
        }
        break;
    }
    throw detail::line_error("unknown key '" + key + "' for " + kind, line);
  }
  return op;
}

inline AugmentPipeline parse_pipeline(const std::string& text) {
  AugmentPipeline pipeline;
  pipeline.source = text;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    pipeline.ops.push_back(parse_op(line, number));
  }
  return pipeline;
}

inline std::string render(const AugmentPipeline& pipeline) {
  std::string out;
  for (const auto& op : pipeline.ops) {
    out += kind_name(op.kind);
    switch (op.kind) {
      case OpKind::rot90:
        out += op.k < 0 ? " k=random" : " k=" + std::to_string(op.k);
        break;
      case OpKind::mirror:
        out += std::string(" axis=") +
               (op.axis == Axis::h ? "h" : op.axis == Axis::v ? "v" : "random");
        out += " p=" + detail::format_number(op.p);
        break;
      case OpKind::elastic:
        out += " alpha=" + detail::format_number(op.alpha) +
               " sigma=" + detail::format_number(op.sigma);
        break;
      case OpKind::color:
        out += " brightness=" + detail::format_number(op.brightness) +
               " contrast=" + detail::format_number(op.contrast) +
               " gray_mix=" + detail::format_number(op.gray_mix);
        break;
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operators. Patches may be byte (0..255) or unit-float rasters; the color
// model works on the 0..255 scale either way.

/// Counter-clockwise quarter turns.
template <typename T>
Image<T> rot90(const Image<T>& src, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return src;
  const int w = src.width(), h = src.height(), c = src.channels();
  const bool swap = k % 2 == 1;
  Image<T> out(swap ? h : w, swap ? w : h, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int nx, ny;
      if (k == 1) { nx = y; ny = w - 1 - x; }
      else if (k == 2) { nx = w - 1 - x; ny = h - 1 - y; }
      else { nx = h - 1 - y; ny = x; }
      for (int ch = 0; ch < c; ++ch) out.at(nx, ny, ch) = src.at(x, y, ch);
    }
  return out;
}

/// h flips left-right, v flips top-bottom.
template <typename T>
Image<T> mirror(const Image<T>& src, Axis axis) {
  Image<T> out(src.width(), src.height(), src.channels());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      const int sx = axis == Axis::h ? src.width() - 1 - x : x;
      const int sy = axis == Axis::v ? src.height() - 1 - y : y;
      for (int ch = 0; ch < src.channels(); ++ch) out.at(x, y, ch) = src.at(sx, sy, ch);
    }
  return out;
}

namespace detail {

template <typename T>
T store_sample(double v) {
  if constexpr (std::is_same_v<T, std::uint8_t>) return clamp_byte(v);
  else return static_cast<float>(v);
}

/// Smoothed uniform noise field scaled to max-abs 1 then by alpha.
inline std::vector<double> displacement_field(int w, int h, double alpha,
                                              double sigma, Rng& rng) {
  std::vector<double> f(static_cast<std::size_t>(w) * h);
  for (auto& v : f) v = rng.uniform(-1.0, 1.0);
  f = gaussian_blur(f, w, h, sigma);
  double peak = 0.0;
  for (double v : f) peak = std::max(peak, std::abs(v));
  for (auto& v : f) v = peak > 0.0 ? alpha * v / peak : 0.0;
  return f;
}

}  // namespace detail

/// Backward warp by a smoothed random field: bilinear for the patch, nearest
/// for the mask, edge clamping outside.
template <typename T>
std::pair<Image<T>, ByteImage> elastic_transform(const Image<T>& patch,
                                                 const ByteImage& mask, double alpha,
                                                 double sigma, Rng& rng) {
  if (!patch.same_shape(mask)) throw config_error("augment: patch and mask dims differ");
  if (!(alpha >= 0.0) || !(sigma > 0.0))
    throw config_error("elastic: alpha must be >= 0 and sigma > 0");
  const int w = patch.width(), h = patch.height(), c = patch.channels();
  if (w == 0 || h == 0) return {patch, mask};
  const auto dx = detail::displacement_field(w, h, alpha, sigma, rng);
  const auto dy = detail::displacement_field(w, h, alpha, sigma, rng);
  Image<T> out(w, h, c);
  ByteImage out_mask(w, h, mask.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      const double sx = std::clamp(x + dx[i], 0.0, w - 1.0);
      const double sy = std::clamp(y + dy[i], 0.0, h - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < c; ++ch) {
        // Lerp form keeps constant neighbourhoods exactly constant.
        const double a = patch.at(x0, y0, ch), b = patch.at(x1, y0, ch);
        const double cc = patch.at(x0, y1, ch), d = patch.at(x1, y1, ch);
        const double top = a + (b - a) * fx;
        const double bottom = cc + (d - cc) * fx;
        out.at(x, y, ch) = detail::store_sample<T>(top + (bottom - top) * fy);
      }
      const int nx = std::clamp(static_cast<int>(std::floor(sx + 0.5)), 0, w - 1);
      const int ny = std::clamp(static_cast<int>(std::floor(sy + 0.5)), 0, h - 1);
      for (int ch = 0; ch < mask.channels(); ++ch)
        out_mask.at(x, y, ch) = mask.at(nx, ny, ch);
    }
  return {std::move(out), std::move(out_mask)};
}

struct ColorDraw {
  double b = 0.0;  // brightness shift, fraction of 255
  double c = 1.0;  // contrast factor around 128
  double g = 0.0;  // gray mix weight
};

/// v' = clamp((1-g)(c(v-128)+128+255b) + g*luma, 0, 255) on channels 0..2.
/// Rasters with fewer than three channels are returned unchanged.
template <typename T>
Image<T> color_apply(const Image<T>& src, const ColorDraw& d) {
  if (src.channels() < 3) return src;
  constexpr double scale = std::is_same_v<T, std::uint8_t> ? 1.0 : 255.0;
  Image<T> out = src;
  for (std::size_t i = 0; i < src.pixel_count(); ++i) {
    const auto base = i * static_cast<std::size_t>(src.channels());
    double rgb[3];
    for (int ch = 0; ch < 3; ++ch) rgb[ch] = scale * src.storage()[base + ch];
    const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (int ch = 0; ch < 3; ++ch) {
      double v = (1.0 - d.g) * (d.c * (rgb[ch] - 128.0) + 128.0 + 255.0 * d.b) +
                 d.g * luma;
      v = std::clamp(v, 0.0, 255.0);
      out.storage()[base + ch] = detail::store_sample<T>(v / scale);
    }
  }
  return out;
}

template <typename T>
Image<T> color_jitter(const Image<T>& src, double brightness, double contrast,
                      double gray_mix, Rng& rng) {
  ColorDraw d;
  d.b = rng.uniform(-brightness, brightness);
  d.c = rng.uniform(1.0 - contrast, 1.0 + contrast);
  d.g = rng.uniform(0.0, gray_mix);
  return color_apply(src, d);
}

/// Applies every op in order. Random draws happen in op order and do not
/// depend on the raster contents.
template <typename T>
std::pair<Image<T>, ByteImage> apply(const AugmentPipeline& pipeline, Image<T> patch,
                                     ByteImage mask, Rng& rng) {
  if (!patch.same_shape(mask)) throw config_error("augment: patch and mask dims differ");
  for (const auto& op : pipeline.ops) {
    switch (op.kind) {
      case OpKind::rot90: {
        const int k = op.k < 0 ? static_cast<int>(rng.below(4)) : op.k;
        patch = rot90(patch, k);
        mask = rot90(mask, k);
        break;
      }
      case OpKind::mirror: {
        const bool fire = rng.bernoulli(op.p);
        Axis axis = op.axis;
        if (axis == Axis::random) axis = rng.bernoulli(0.5) ? Axis::h : Axis::v;
        if (fire) {
          patch = mirror(patch, axis);
          mask = mirror(mask, axis);
        }
        break;
      }
      case OpKind::elastic: {
        auto [p, m] = elastic_transform(patch, mask, op.alpha, op.sigma, rng);
        patch = std::move(p);
        mask = std::move(m);
        break;
      }
      case OpKind::color:
        patch = color_jitter(patch, op.brightness, op.contrast, op.gray_mix, rng);
        break;
    }
  }
  return {std::move(patch), std::move(mask)};
}

}  // namespace wobseg::augment

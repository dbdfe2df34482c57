#pragma once

#include <cmath>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/image.hpp"

namespace wobseg {

/// Sampled Gaussian, truncated at ceil(3 sigma), normalized to unit sum.
/// Element r of the result is the weight at offset r - radius.
inline std::vector<double> gaussian_kernel(double sigma_px) {
  if (!(sigma_px > 0.0)) throw config_error("gaussian sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_px));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma_px * sigma_px));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Symmetric reflection (d c b a | a b c d | d c b a), valid for any offset.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

/// Separable Gaussian blur of a single-channel plane held in doubles.
/// Horizontal pass first, then vertical, both with reflective boundaries.
inline std::vector<double> gaussian_blur(const std::vector<double>& plane,
                                         int width, int height,
                                         double sigma_px) {
  const auto k = gaussian_kernel(sigma_px);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(plane.size());
  std::vector<double> row(static_cast<std::size_t>(width + 2 * radius));
  for (int y = 0; y < height; ++y) {
    const double* src = plane.data() + static_cast<std::size_t>(y) * width;
    for (int i = -radius; i < width + radius; ++i)
      row[static_cast<std::size_t>(i + radius)] = src[reflect_index(i, width)];
    double* dst = tmp.data() + static_cast<std::size_t>(y) * width;
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      const double* r = row.data() + x;
      for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * r[t];
      dst[x] = acc;
    }
  }
  std::vector<double> out(plane.size(), 0.0);
  // Vertical pass accumulates whole rows so the inner loop runs along x.
  for (int y = 0; y < height; ++y) {
    double* dst = out.data() + static_cast<std::size_t>(y) * width;
    for (int t = -radius; t <= radius; ++t) {
      const double w = k[static_cast<std::size_t>(t + radius)];
      const double* src =
          tmp.data() + static_cast<std::size_t>(reflect_index(y + t, height)) * width;
      for (int x = 0; x < width; ++x) dst[x] += w * src[x];
    }
  }
  return out;
}

inline FloatImage gaussian_blur(const FloatImage& src, double sigma_px) {
  if (src.channels() != 1)
    throw config_error("gaussian_blur expects a single-channel raster");
  std::vector<double> plane(src.storage().begin(), src.storage().end());
  auto blurred = gaussian_blur(plane, src.width(), src.height(), sigma_px);
  FloatImage out(src.width(), src.height(), 1);
  for (std::size_t i = 0; i < blurred.size(); ++i)
    out.storage()[i] = static_cast<float>(blurred[i]);
  return out;
}

}  // namespace wobseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "wobseg/error.hpp"

namespace wobseg {

/// Row-major, channel-interleaved raster. Byte rasters hold [0,255] samples;
/// float rasters hold unit-interval samples.
template <typename T>
class Image {
  static_assert(std::is_same_v<T, std::uint8_t> || std::is_same_v<T, float>,
                "Image supports byte and unit-float samples");

 public:
  using value_type = T;

  Image() = default;
  Image(int width, int height, int channels, T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 0)
      throw config_error("negative raster dimension");
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }
  Image(int width, int height, int channels, std::vector<T> data)
      : width_(width), height_(height), channels_(channels),
        data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(width) * height * channels)
      throw config_error("raster data length does not match dimensions");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * height_;
  }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(int w, int h) const noexcept {
    return width_ == w && height_ == h;
  }
  template <typename U>
  bool same_shape(const Image<U>& o) const noexcept {
    return width_ == o.width() && height_ == o.height();
  }

  std::size_t index(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  T& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }
  T at(int x, int y, int c = 0) const noexcept { return data_[index(x, y, c)]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool operator==(const Image& o) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

using ByteImage = Image<std::uint8_t>;
using FloatImage = Image<float>;

inline std::uint8_t clamp_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

/// Single channel copy.
template <typename T>
Image<T> extract_channel(const Image<T>& src, int channel) {
  if (channel < 0 || channel >= src.channels())
    throw config_error("channel index out of range");
  Image<T> out(src.width(), src.height(), 1);
  for (std::size_t i = 0; i < src.pixel_count(); ++i)
    out.storage()[i] = src.storage()[i * src.channels() + channel];
  return out;
}

/// Channels [first, first+count) copied into a new raster.
template <typename T>
Image<T> extract_channels(const Image<T>& src, int first, int count) {
  if (first < 0 || count < 1 || first + count > src.channels())
    throw config_error("channel range out of bounds");
  Image<T> out(src.width(), src.height(), count);
  const auto sc = static_cast<std::size_t>(src.channels());
  for (std::size_t i = 0; i < src.pixel_count(); ++i)
    for (int c = 0; c < count; ++c)
      out.storage()[i * count + c] = src.storage()[i * sc + first + c];
  return out;
}

inline FloatImage to_unit_float(const ByteImage& src) {
  FloatImage out(src.width(), src.height(), src.channels());
  for (std::size_t i = 0; i < src.storage().size(); ++i)
    out.storage()[i] = static_cast<float>(src.storage()[i]) / 255.0f;
  return out;
}

/// Channel-wise concatenation of two rasters with equal spatial dims.
template <typename T>
Image<T> stack_channels(const Image<T>& a, const Image<T>& b) {
  if (!a.same_shape(b)) throw config_error("stack_channels: dimension mismatch");
  const int c = a.channels() + b.channels();
  Image<T> out(a.width(), a.height(), c);
  for (std::size_t i = 0; i < a.pixel_count(); ++i) {
    for (int k = 0; k < a.channels(); ++k)
      out.storage()[i * c + k] = a.storage()[i * a.channels() + k];
    for (int k = 0; k < b.channels(); ++k)
      out.storage()[i * c + a.channels() + k] =
          b.storage()[i * b.channels() + k];
  }
  return out;
}

template <typename T>
Image<T> crop(const Image<T>& src, int x, int y, int width, int height) {
  if (x < 0 || y < 0 || width < 0 || height < 0 || x + width > src.width() ||
      y + height > src.height())
    throw config_error("crop window out of bounds");
  Image<T> out(width, height, src.channels());
  const auto row = static_cast<std::size_t>(width) * src.channels();
  for (int r = 0; r < height; ++r) {
    const auto from = src.storage().begin() +
                      static_cast<std::ptrdiff_t>(src.index(x, y + r));
    std::copy(from, from + static_cast<std::ptrdiff_t>(row),
              out.storage().begin() +
                  static_cast<std::ptrdiff_t>(out.index(0, r)));
  }
  return out;
}

inline int half_up(int n) { return (n + 1) / 2; }

/// 2x2 box mean; odd trailing rows/columns average the available pixels.
/// Byte output rounds half up.
template <typename T>
Image<T> downsample2(const Image<T>& src) {
  if (src.empty()) throw config_error("downsample2: empty raster");
  const int w = half_up(src.width());
  const int h = half_up(src.height());
  const int ch = src.channels();
  Image<T> out(w, h, ch);
  for (int y = 0; y < h; ++y) {
    const int y1 = std::min(2 * y + 1, src.height() - 1);
    for (int x = 0; x < w; ++x) {
      const int x1 = std::min(2 * x + 1, src.width() - 1);
      const int n = (y1 - 2 * y + 1) * (x1 - 2 * x + 1);
      for (int c = 0; c < ch; ++c) {
        if constexpr (std::is_same_v<T, std::uint8_t>) {
          int sum = 0;
          for (int yy = 2 * y; yy <= y1; ++yy)
            for (int xx = 2 * x; xx <= x1; ++xx) sum += src.at(xx, yy, c);
          // round-half-up of sum / n in integer arithmetic
          out.at(x, y, c) = static_cast<std::uint8_t>((2 * sum + n) / (2 * n));
        } else {
          double sum = 0.0;
          for (int yy = 2 * y; yy <= y1; ++yy)
            for (int xx = 2 * x; xx <= x1; ++xx) sum += src.at(xx, yy, c);
          out.at(x, y, c) = static_cast<float>(sum / n);
        }
      }
    }
  }
  return out;
}

/// Majority vote over each 2x2 block of a {0,1} mask; ties go to 1.
inline ByteImage downsample_mask(const ByteImage& mask) {
  if (mask.empty()) throw config_error("downsample_mask: empty raster");
  if (mask.channels() != 1) throw config_error("mask must be single-channel");
  const int w = half_up(mask.width());
  const int h = half_up(mask.height());
  ByteImage out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    const int y1 = std::min(2 * y + 1, mask.height() - 1);
    for (int x = 0; x < w; ++x) {
      const int x1 = std::min(2 * x + 1, mask.width() - 1);
      int ones = 0, n = 0;
      for (int yy = 2 * y; yy <= y1; ++yy)
        for (int xx = 2 * x; xx <= x1; ++xx, ++n) ones += mask.at(xx, yy) != 0;
      out.at(x, y) = 2 * ones >= n ? 1 : 0;
    }
  }
  return out;
}

}  // namespace wobseg

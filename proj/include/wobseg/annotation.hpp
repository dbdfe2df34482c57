#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/gaussian.hpp"
#include "wobseg/image.hpp"
#include "wobseg/slide.hpp"

// WOB mask generation from immunofluorescence channels: each channel is
// smoothed by a density filter, two ratio heatmaps are formed, combined with
// basal priority, thresholded and merged with the manual IDC-P override.

namespace wobseg::annotation {

/// Smoothed single-channel marker density in [0,1].
struct DensityField {
  FloatImage values;
  double kernel_radius_um = 0.0;
};

enum class HeatmapKind { basal_ratio, amacr_ratio, combined };

struct Heatmap {
  FloatImage values;
  HeatmapKind kind = HeatmapKind::combined;
};

struct Settings {
  double sigma_um = 15.0;
  double eps = 1e-6;
  double tissue_tau = 0.05;
  double agree_delta = 0.25;
  double tau = 0.5;
  double min_area_um2 = 100.0;
};

/// Gaussian density estimate with sigma = sigma_um / mpp pixels.
inline DensityField density_filter(const FloatImage& channel, double sigma_um,
                                   double mpp) {
  if (!(sigma_um > 0.0)) throw config_error("density filter sigma must be positive");
  if (!(mpp > 0.0)) throw config_error("mpp must be positive");
  auto blurred = gaussian_blur(channel, sigma_um / mpp);
  for (auto& v : blurred.storage()) v = std::clamp(v, 0.0f, 1.0f);
  return {std::move(blurred), std::ceil(3.0 * sigma_um / mpp) * mpp};
}

namespace detail {
template <typename F>
FloatImage pixelwise(const FloatImage& a, const FloatImage& b, F f) {
  if (!a.same_shape(b) || a.channels() != 1 || b.channels() != 1)
    throw config_error("heatmap inputs: dimension mismatch");
  FloatImage out(a.width(), a.height(), 1);
  for (std::size_t i = 0; i < a.storage().size(); ++i)
    out.storage()[i] = f(a.storage()[i], b.storage()[i]);
  return out;
}

inline float ratio(double num, double other, double eps) {
  return static_cast<float>(std::clamp(num / (num + other + eps), 0.0, 1.0));
}
}  // namespace detail

/// D_E / (D_E + D_B + eps): high where epithelium lacks basal cells.
inline Heatmap heatmap_basal(const DensityField& epithelial,
                             const DensityField& basal, double eps) {
  if (!(eps > 0.0)) throw config_error("eps must be positive");
  return {detail::pixelwise(epithelial.values, basal.values,
                            [eps](float e, float b) {
                              return detail::ratio(e, b, eps);
                            }),
          HeatmapKind::basal_ratio};
}

/// D_A / (D_A + D_E + eps): high where AMACR dominates.
inline Heatmap heatmap_amacr(const DensityField& amacr,
                             const DensityField& epithelial, double eps) {
  if (!(eps > 0.0)) throw config_error("eps must be positive");
  return {detail::pixelwise(amacr.values, epithelial.values,
                            [eps](float a, float e) {
                              return detail::ratio(a, e, eps);
                            }),
          HeatmapKind::amacr_ratio};
}

/// Zero where D_E <= tissue_tau; the mean of the two heatmaps where they agree
/// within agree_delta; otherwise the basal heatmap.
inline Heatmap combine_heatmaps(const Heatmap& basal, const Heatmap& amacr,
                                const DensityField& epithelial,
                                double tissue_tau, double agree_delta) {
  const auto& hb = basal.values;
  const auto& ha = amacr.values;
  const auto& de = epithelial.values;
  if (!hb.same_shape(ha) || !hb.same_shape(de))
    throw config_error("combine_heatmaps: dimension mismatch");
  FloatImage out(hb.width(), hb.height(), 1);
  for (std::size_t i = 0; i < out.storage().size(); ++i) {
    const double b = hb.storage()[i];
    const double a = ha.storage()[i];
    double v;
    if (de.storage()[i] <= tissue_tau)
      v = 0.0;
    else if (std::abs(b - a) <= agree_delta)
      v = 0.5 * (a + b);
    else
      v = b;
    out.storage()[i] = static_cast<float>(v);
  }
  return {std::move(out), HeatmapKind::combined};
}

/// Pixel lists of the 4-connected foreground components, in raster order of
/// their first pixel.
inline std::vector<std::vector<std::size_t>> connected_components(
    const ByteImage& mask) {
  const int w = mask.width(), h = mask.height();
  std::vector<std::uint8_t> seen(mask.pixel_count(), 0);
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.pixel_count(); ++start) {
    if (!mask.storage()[start] || seen[start]) continue;
    comps.emplace_back();
    auto& comp = comps.back();
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const int x = static_cast<int>(p % static_cast<std::size_t>(w));
      const int y = static_cast<int>(p / static_cast<std::size_t>(w));
      const auto visit = [&](int nx, int ny) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) return;
        const auto q = static_cast<std::size_t>(ny) * w + nx;
        if (mask.storage()[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      visit(x - 1, y);
      visit(x + 1, y);
      visit(x, y - 1);
      visit(x, y + 1);
    }
  }
  return comps;
}

/// Threshold at tau (strictly greater), then drop 4-connected components
/// smaller than min_area_um2 / mpp^2 pixels.
inline ByteImage binarize_mask(const Heatmap& heatmap, double tau,
                               double min_area_um2, double mpp) {
  if (!(tau > 0.0 && tau < 1.0)) throw config_error("tau must lie in (0,1)");
  const auto& h = heatmap.values;
  ByteImage mask(h.width(), h.height(), 1);
  for (std::size_t i = 0; i < h.storage().size(); ++i)
    mask.storage()[i] = h.storage()[i] > tau ? 1 : 0;
  const double min_px = min_area_um2 / (mpp * mpp);
  for (const auto& comp : connected_components(mask))
    if (static_cast<double>(comp.size()) < min_px)
      for (auto p : comp) mask.storage()[p] = 0;
  return mask;
}

inline ByteImage apply_idcp_override(const ByteImage& mask,
                                     const ByteImage& override_mask) {
  if (!mask.same_shape(override_mask) || mask.channels() != 1 ||
      override_mask.channels() != 1)
    throw config_error("override mask: dimension mismatch");
  ByteImage out = mask;
  for (std::size_t i = 0; i < out.storage().size(); ++i)
    out.storage()[i] = (mask.storage()[i] | override_mask.storage()[i]) ? 1 : 0;
  return out;
}

/// Intersection over union of two binary masks; 1 when both are empty.
inline double iou(const ByteImage& a, const ByteImage& b) {
  if (!a.same_shape(b)) throw config_error("iou: dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.storage().size(); ++i) {
    const bool x = a.storage()[i] != 0, y = b.storage()[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Full pipeline on one level. When `override_mask` is non-null it is merged
/// into the result.
inline ByteImage generate_wob_mask(const Slide& slide, int level_index,
                                   const Settings& settings,
                                   const ByteImage* override_mask) {
  const auto& lv = slide.level(level_index);
  const auto unit_channel = [&](ChannelRole role) {
    return to_unit_float(extract_channel(lv.image, slide.channel(role)));
  };
  const auto de = density_filter(unit_channel(ChannelRole::epithelial),
                                 settings.sigma_um, lv.mpp);
  const auto db = density_filter(unit_channel(ChannelRole::basal),
                                 settings.sigma_um, lv.mpp);
  const auto da = density_filter(unit_channel(ChannelRole::amacr),
                                 settings.sigma_um, lv.mpp);
  const auto hb = heatmap_basal(de, db, settings.eps);
  const auto ha = heatmap_amacr(da, de, settings.eps);
  const auto combined =
      combine_heatmaps(hb, ha, de, settings.tissue_tau, settings.agree_delta);
  auto mask = binarize_mask(combined, settings.tau, settings.min_area_um2, lv.mpp);
  if (override_mask) mask = apply_idcp_override(mask, *override_mask);
  return mask;
}

/// Runs the pipeline on the finest level, merging the slide's "idcp_override"
/// mask when present, and stores the result as "wob_generated" on every level.
inline ByteImage generate_wob_mask(Slide& slide, const Settings& settings = {}) {
  const ByteImage* override_mask =
      slide.has_mask("idcp_override", 0) ? &slide.mask("idcp_override", 0)
                                         : nullptr;
  auto mask = generate_wob_mask(slide, 0, settings, override_mask);
  ByteImage level_mask = mask;
  slide.set_mask("wob_generated", 0, level_mask);
  for (int li = 1; li < static_cast<int>(slide.levels.size()); ++li) {
    level_mask = downsample_mask(level_mask);
    slide.set_mask("wob_generated", li, level_mask);
  }
  return mask;
}

}  // namespace wobseg::annotation

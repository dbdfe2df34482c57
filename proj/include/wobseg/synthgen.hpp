#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wobseg/error.hpp"
#include "wobseg/image.hpp"
#include "wobseg/rng.hpp"
#include "wobseg/slide.hpp"

// Deterministic synthetic slides: elliptical glands on textured stroma, an
// H&E-like RGB rendering, immunofluorescence channels and exact WOB masks.
// Geometry is rasterized at 0.5 mpp; the 1 and 2 mpp levels are derived by
// downsample2.

namespace wobseg::synth {

struct GlandSpec {
  double cx_um = 0, cy_um = 0;
  double radius_a_um = 0, radius_b_um = 0;
  double rotation = 0;
  bool has_basal_rim = false;
  double rim_thickness_um = 0;
  bool is_idcp = false;
  double amacr_level = 0;
  /// Small benign gland rendered with WOB-like epithelium; only its context
  /// cuff distinguishes it in RGB.
  bool is_decoy = false;
  bool spurious_amacr = false;
  int infoldings = 0;

  bool is_wob() const { return !has_basal_rim || is_idcp; }
};

enum class TissueShape { full, core };

struct SynthParams {
  double width_um = 512.0;
  double height_um = 512.0;
  int gland_count_min = 6;
  int gland_count_max = 10;
  double gland_radius_min_um = 30.0;
  double gland_radius_max_um = 50.0;
  int decoy_count_min = 6;
  int decoy_count_max = 10;
  double decoy_radius_min_um = 4.0;
  double decoy_radius_max_um = 7.0;
  double rim_probability = 0.6;
  double idcp_probability = 0.1;
  double spurious_amacr_fraction = 0.2;
  /// Additive noise amplitude per channel (R, G, B, CK8/18, CK5/6+p63, AMACR,
  /// DAPI), in byte units. AMACR additionally gets multiplicative noise.
  std::array<double, 7> noise{14, 14, 14, 8, 8, 8, 0};
  double context_cue_scale_um = 12.0;
  TissueShape tissue = TissueShape::full;
  double core_height_fraction = 0.6;
  /// Added to the rendered RGB (stain / scanner shift between domains).
  std::array<double, 3> stain_shift{0, 0, 0};
  std::uint64_t seed = 0;
};

constexpr double kFineMpp = 0.5;
constexpr int kLevelCount = 3;

inline void validate(const SynthParams& p) {
  const auto prob = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw config_error(std::string(name) + " must lie in [0,1]");
  };
  prob(p.rim_probability, "rim_probability");
  prob(p.idcp_probability, "idcp_probability");
  prob(p.spurious_amacr_fraction, "spurious_amacr_fraction");
  if (!(p.width_um >= 16.0 && p.height_um >= 16.0))
    throw config_error("slide must be at least 16 um on each side");
  if (p.gland_count_min < 0 || p.gland_count_max < p.gland_count_min)
    throw config_error("invalid gland count range");
  if (p.decoy_count_min < 0 || p.decoy_count_max < p.decoy_count_min)
    throw config_error("invalid decoy count range");
  if (!(p.gland_radius_min_um > 0 && p.gland_radius_max_um >= p.gland_radius_min_um))
    throw config_error("invalid gland radius range");
  if (!(p.decoy_radius_min_um > 0 && p.decoy_radius_max_um >= p.decoy_radius_min_um))
    throw config_error("invalid decoy radius range");
  if (!(p.context_cue_scale_um > 0.0 && p.context_cue_scale_um <= 20.0))
    throw config_error("context_cue_scale_um must lie in (0,20]");
  if (!(p.core_height_fraction > 0.0 && p.core_height_fraction <= 1.0))
    throw config_error("core_height_fraction must lie in (0,1]");
  for (double n : p.noise)
    if (!(n >= 0.0 && n <= 128.0)) throw config_error("noise amplitude out of range");
}

struct SynthSlide {
  Slide slide;
  std::vector<GlandSpec> glands;
};

namespace detail {

/// Bilinearly interpolated lattice noise in [0,1].
class ValueNoise {
 public:
  ValueNoise(Rng& rng, double width_um, double height_um, double spacing_um)
      : spacing_(spacing_um),
        nx_(static_cast<int>(width_um / spacing_um) + 2),
        ny_(static_cast<int>(height_um / spacing_um) + 2),
        values_(static_cast<std::size_t>(nx_) * ny_) {
    for (auto& v : values_) v = rng.uniform();
  }

  double operator()(double x_um, double y_um) const {
    const double gx = x_um / spacing_, gy = y_um / spacing_;
    const int ix = std::clamp(static_cast<int>(gx), 0, nx_ - 2);
    const int iy = std::clamp(static_cast<int>(gy), 0, ny_ - 2);
    const double fx = smooth(gx - ix), fy = smooth(gy - iy);
    const auto at = [&](int x, int y) {
      return values_[static_cast<std::size_t>(y) * nx_ + x];
    };
    const double top = at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx;
    const double bot = at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }

 private:
  static double smooth(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3 - 2 * t);
  }
  double spacing_;
  int nx_, ny_;
  std::vector<double> values_;
};

struct Rgb {
  double r, g, b;
};

constexpr Rgb kGlass{242, 240, 244};
constexpr Rgb kStroma{226, 158, 190};
constexpr Rgb kCuff{180, 118, 140};
constexpr Rgb kBenignEpithelium{214, 160, 214};
constexpr Rgb kBenignLumen{248, 238, 246};
constexpr Rgb kBasalRim{118, 72, 150};
constexpr Rgb kWobEpithelium{152, 92, 172};
constexpr Rgb kWobLumen{238, 222, 238};

constexpr double kEpithelialIntensity = 77;   // ~0.3 of full scale
constexpr double kStromaBasalBackground = 90;
constexpr double kBasalSignal = 255;
constexpr double kBasalDensity = 0.7;         // punctate coverage
constexpr double kDapiPlaceholder = 64;
constexpr double kGlandGapUm = 20.0;
constexpr double kCoreMarginUm = 30.0;
constexpr int kPlacementRetries = 2000;

/// Elliptical radius (1 on the boundary) and polar angle in normalized
/// coordinates of a point relative to a gland.
inline void gland_coords(const GlandSpec& g, double x, double y, double& rho,
                         double& angle) {
  const double dx = x - g.cx_um, dy = y - g.cy_um;
  const double c = std::cos(g.rotation), s = std::sin(g.rotation);
  const double u = (dx * c + dy * s) / g.radius_a_um;
  const double v = (-dx * s + dy * c) / g.radius_b_um;
  rho = std::sqrt(u * u + v * v);
  angle = std::atan2(v, u);
}

inline double max_radius(const GlandSpec& g) {
  return std::max(g.radius_a_um, g.radius_b_um);
}
inline double min_radius(const GlandSpec& g) {
  return std::min(g.radius_a_um, g.radius_b_um);
}

}  // namespace detail

/// Renders a slide and returns it with the gland specifications that produced
/// it. Output is a pure function of `params` and `id`.
inline SynthSlide generate_slide_with_specs(const SynthParams& params,
                                            const std::string& id) {
  using namespace detail;
  validate(params);
  Rng rng(derive_seed(params.seed, 0x5eed));
  const int width = static_cast<int>(std::lround(params.width_um / kFineMpp));
  const int height = static_cast<int>(std::lround(params.height_um / kFineMpp));

  // Tissue region.
  const double core_half = 0.5 * params.core_height_fraction * params.height_um;
  const double mid_y = 0.5 * params.height_um;
  ValueNoise core_wobble(rng, params.width_um, params.height_um, 80.0);
  const auto core_edges = [&](double x_um) {
    const double wobble = (core_wobble(x_um, mid_y) - 0.5) * 20.0;
    return std::pair{mid_y - core_half + wobble, mid_y + core_half + wobble};
  };
  const auto in_tissue = [&](double x_um, double y_um) {
    if (params.tissue == TissueShape::full) return true;
    const auto [lo, hi] = core_edges(x_um);
    return y_um >= lo && y_um <= hi;
  };

  // Gland placement.
  std::vector<GlandSpec> glands;
  const auto fits = [&](const GlandSpec& g, double clearance) {
    const double r = max_radius(g);
    if (g.cx_um - r - 2 < 0 || g.cy_um - r - 2 < 0 ||
        g.cx_um + r + 2 > params.width_um || g.cy_um + r + 2 > params.height_um)
      return false;
    if (params.tissue == TissueShape::core) {
      for (double dx : {-r, 0.0, r}) {
        const auto [lo, hi] = core_edges(g.cx_um + dx);
        if (g.cy_um - r - kCoreMarginUm < lo || g.cy_um + r + kCoreMarginUm > hi)
          return false;
      }
    }
    for (const auto& o : glands) {
      const double need = r + max_radius(o) + clearance +
                          (o.is_decoy ? params.context_cue_scale_um : 0.0);
      if (std::hypot(g.cx_um - o.cx_um, g.cy_um - o.cy_um) < need) return false;
    }
    return true;
  };
  const auto place = [&](GlandSpec g, double clearance) {
    for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
      g.cx_um = rng.uniform(0.0, params.width_um);
      g.cy_um = rng.uniform(0.0, params.height_um);
      if (fits(g, clearance)) {
        glands.push_back(g);
        return;
      }
    }
    throw config_error("slide '" + id + "': could not place gland " +
                       std::to_string(glands.size()) + " without overlap after " +
                       std::to_string(kPlacementRetries) + " retries");
  };

  const int gland_count =
      params.gland_count_min +
      static_cast<int>(rng.below(static_cast<std::uint64_t>(
          params.gland_count_max - params.gland_count_min + 1)));
  for (int i = 0; i < gland_count; ++i) {
    GlandSpec g;
    const double r = rng.uniform(params.gland_radius_min_um, params.gland_radius_max_um);
    g.radius_a_um = r * rng.uniform(0.85, 1.15);
    g.radius_b_um = r * rng.uniform(0.85, 1.15);
    g.rotation = rng.uniform(0.0, std::numbers::pi);
    g.has_basal_rim = rng.bernoulli(params.rim_probability);
    g.is_idcp = g.has_basal_rim && rng.bernoulli(params.idcp_probability);
    g.rim_thickness_um = 4.0;
    g.infoldings = g.has_basal_rim ? 24 : 0;
    g.amacr_level = rng.uniform(0.5, 0.7);
    g.spurious_amacr = !g.is_wob() && rng.bernoulli(params.spurious_amacr_fraction);
    place(g, kGlandGapUm);
  }
  const int decoy_count =
      params.decoy_count_min +
      static_cast<int>(rng.below(static_cast<std::uint64_t>(
          params.decoy_count_max - params.decoy_count_min + 1)));
  for (int i = 0; i < decoy_count; ++i) {
    GlandSpec g;
    const double r = rng.uniform(params.decoy_radius_min_um, params.decoy_radius_max_um);
    g.radius_a_um = r * rng.uniform(0.9, 1.1);
    g.radius_b_um = r * rng.uniform(0.9, 1.1);
    g.rotation = rng.uniform(0.0, std::numbers::pi);
    g.has_basal_rim = true;
    g.rim_thickness_um = 2.0;
    g.is_decoy = true;
    g.amacr_level = rng.uniform(0.5, 0.7);
    g.spurious_amacr = rng.bernoulli(params.spurious_amacr_fraction);
    place(g, kGlandGapUm + params.context_cue_scale_um);
  }

  // Layer buffers at the fine level.
  const auto n = static_cast<std::size_t>(width) * height;
  std::vector<double> red(n), green(n), blue(n), epi(n, 0.0), basal(n, 0.0),
      amacr(n, 0.0);
  ByteImage wob(width, height, 1), idcp(width, height, 1), tissue(width, height, 1);
  ValueNoise texture(rng, params.width_um, params.height_um, 6.0);

  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double xu = (x + 0.5) * kFineMpp, yu = (y + 0.5) * kFineMpp;
      const auto i = static_cast<std::size_t>(y) * width + x;
      if (in_tissue(xu, yu)) {
        tissue.storage()[i] = 1;
        const double t = (texture(xu, yu) - 0.5) * 24.0;
        red[i] = kStroma.r + t;
        green[i] = kStroma.g + t;
        blue[i] = kStroma.b + 0.5 * t;
        basal[i] = kStromaBasalBackground;
      } else {
        red[i] = kGlass.r;
        green[i] = kGlass.g;
        blue[i] = kGlass.b;
      }
    }

  const auto paint = [&](std::size_t i, const Rgb& c) {
    red[i] = c.r;
    green[i] = c.g;
    blue[i] = c.b;
  };
  const auto box = [&](const GlandSpec& g, double extra_um, auto&& fn) {
    const double r = max_radius(g) + extra_um;
    const int x0 = std::max(0, static_cast<int>((g.cx_um - r) / kFineMpp) - 1);
    const int x1 = std::min(width - 1, static_cast<int>((g.cx_um + r) / kFineMpp) + 1);
    const int y0 = std::max(0, static_cast<int>((g.cy_um - r) / kFineMpp) - 1);
    const int y1 = std::min(height - 1, static_cast<int>((g.cy_um + r) / kFineMpp) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double rho, angle;
        gland_coords(g, (x + 0.5) * kFineMpp, (y + 0.5) * kFineMpp, rho, angle);
        fn(static_cast<std::size_t>(y) * width + x, rho, angle);
      }
  };

  // Context cuffs first so gland interiors overwrite them.
  for (const auto& g : glands) {
    if (!g.is_decoy) continue;
    const double outer = 1.0 + params.context_cue_scale_um / min_radius(g);
    box(g, params.context_cue_scale_um, [&](std::size_t i, double rho, double) {
      if (rho > 1.0 && rho <= outer) {
        const double xu = (static_cast<double>(i % width) + 0.5) * kFineMpp;
        const double yu = (static_cast<double>(i / width) + 0.5) * kFineMpp;
        const double t = (texture(xu + 97.0, yu + 31.0) - 0.5) * 20.0;
        paint(i, {kCuff.r + t, kCuff.g + t, kCuff.b + t});
      }
    });
  }

  for (const auto& g : glands) {
    const bool wob_gland = g.is_wob();
    const double rim_rho = 1.0 - g.rim_thickness_um / min_radius(g);
    const double lumen_rho = wob_gland ? 0.15 : 0.25;
    const double amacr_base =
        wob_gland ? g.amacr_level * 255.0
                  : (g.spurious_amacr ? 0.5 * g.amacr_level * 255.0 : 0.0);
    box(g, 0.0, [&](std::size_t i, double rho, double angle) {
      if (rho > 1.0) return;
      wob.storage()[i] = wob_gland ? 1 : 0;
      idcp.storage()[i] = g.is_idcp ? 1 : 0;
      const bool lumen = !g.is_decoy && rho < lumen_rho;
      const bool on_rim = g.has_basal_rim && rho > rim_rho;

      // RGB
      if (g.is_decoy || wob_gland)
        paint(i, lumen ? kWobLumen : kWobEpithelium);
      else
        paint(i, lumen ? kBenignLumen : kBenignEpithelium);
      if (on_rim && !g.is_decoy) paint(i, kBasalRim);

      // Immunofluorescence
      epi[i] = lumen ? 0.3 * kEpithelialIntensity : kEpithelialIntensity;
      basal[i] = 0.0;
      bool basal_site = on_rim;
      if (g.infoldings > 0 && rho > 0.3) {
        const double step = 2.0 * std::numbers::pi / g.infoldings;
        double d = std::remainder(angle, step);
        basal_site = basal_site || std::abs(d) * rho * min_radius(g) < 2.0;
      }
      if (basal_site && rng.bernoulli(kBasalDensity)) basal[i] = kBasalSignal;
      amacr[i] = amacr_base > 0.0 ? amacr_base * rng.uniform(0.7, 1.3) : 0.0;
    });
  }

  // Assemble the 7-channel fine level with additive noise.
  ByteImage fine(width, height, 7);
  for (std::size_t i = 0; i < n; ++i) {
    const double base[7] = {red[i] + params.stain_shift[0],
                            green[i] + params.stain_shift[1],
                            blue[i] + params.stain_shift[2],
                            epi[i], basal[i], amacr[i], kDapiPlaceholder};
    for (int c = 0; c < 7; ++c) {
      const double amp = params.noise[static_cast<std::size_t>(c)];
      const double v = amp > 0.0 ? base[c] + rng.uniform(-amp, amp) : base[c];
      fine.storage()[i * 7 + static_cast<std::size_t>(c)] = clamp_byte(v);
    }
  }

  SynthSlide out;
  out.glands = std::move(glands);
  Slide& s = out.slide;
  s.id = id;
  s.levels = build_pyramid(std::move(fine), kFineMpp, kLevelCount);
  s.channel_roles = {{0, ChannelRole::red},        {1, ChannelRole::green},
                     {2, ChannelRole::blue},       {3, ChannelRole::epithelial},
                     {4, ChannelRole::basal},      {5, ChannelRole::amacr},
                     {6, ChannelRole::dapi}};
  for (auto& [name, mask] : {std::pair<std::string, ByteImage*>{"wob", &wob},
                             {"idcp_override", &idcp},
                             {"tissue", &tissue}}) {
    ByteImage m = *mask;
    for (int li = 0; li < kLevelCount; ++li) {
      if (li > 0) m = downsample_mask(m);
      s.masks[name][li] = m;
    }
  }
  return out;
}

inline Slide generate_slide(const SynthParams& params, const std::string& id) {
  return generate_slide_with_specs(params, id).slide;
}

// ---------------------------------------------------------------------------
// Parameter files and datasets.

inline SynthParams params_from_json(const nlohmann::json& j) {
  SynthParams p;
  try {
    p.width_um = j.value("width_um", p.width_um);
    p.height_um = j.value("height_um", p.height_um);
    p.gland_count_min = j.value("gland_count_min", p.gland_count_min);
    p.gland_count_max = j.value("gland_count_max", p.gland_count_max);
    p.gland_radius_min_um = j.value("gland_radius_min_um", p.gland_radius_min_um);
    p.gland_radius_max_um = j.value("gland_radius_max_um", p.gland_radius_max_um);
    p.decoy_count_min = j.value("decoy_count_min", p.decoy_count_min);
    p.decoy_count_max = j.value("decoy_count_max", p.decoy_count_max);
    p.decoy_radius_min_um = j.value("decoy_radius_min_um", p.decoy_radius_min_um);
    p.decoy_radius_max_um = j.value("decoy_radius_max_um", p.decoy_radius_max_um);
    p.rim_probability = j.value("rim_probability", p.rim_probability);
    p.idcp_probability = j.value("idcp_probability", p.idcp_probability);
    p.spurious_amacr_fraction =
        j.value("spurious_amacr_fraction", p.spurious_amacr_fraction);
    p.noise = j.value("noise", p.noise);
    p.context_cue_scale_um = j.value("context_cue_scale_um", p.context_cue_scale_um);
    const auto shape = j.value("tissue", std::string("full"));
    if (shape == "full")
      p.tissue = TissueShape::full;
    else if (shape == "core")
      p.tissue = TissueShape::core;
    else
      throw config_error("tissue must be \"full\" or \"core\"");
    p.core_height_fraction = j.value("core_height_fraction", p.core_height_fraction);
    p.stain_shift = j.value("stain_shift", p.stain_shift);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("synth params: ") + e.what());
  }
  validate(p);
  return p;
}

inline nlohmann::json params_to_json(const SynthParams& p) {
  return {{"width_um", p.width_um},
          {"height_um", p.height_um},
          {"gland_count_min", p.gland_count_min},
          {"gland_count_max", p.gland_count_max},
          {"gland_radius_min_um", p.gland_radius_min_um},
          {"gland_radius_max_um", p.gland_radius_max_um},
          {"decoy_count_min", p.decoy_count_min},
          {"decoy_count_max", p.decoy_count_max},
          {"decoy_radius_min_um", p.decoy_radius_min_um},
          {"decoy_radius_max_um", p.decoy_radius_max_um},
          {"rim_probability", p.rim_probability},
          {"idcp_probability", p.idcp_probability},
          {"spurious_amacr_fraction", p.spurious_amacr_fraction},
          {"noise", p.noise},
          {"context_cue_scale_um", p.context_cue_scale_um},
          {"tissue", p.tissue == TissueShape::full ? "full" : "core"},
          {"core_height_fraction", p.core_height_fraction},
          {"stain_shift", p.stain_shift},
          {"seed", p.seed}};
}

struct DatasetEntry {
  std::string id;
  std::filesystem::path path;  // absolute or relative to the listing
  std::string split;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::filesystem::path root;  // directory holding dataset.json
  std::vector<DatasetEntry> slides;

  std::vector<DatasetEntry> split(const std::string& name) const {
    std::vector<DatasetEntry> out;
    for (const auto& e : slides)
      if (e.split == name) out.push_back(e);
    return out;
  }
  std::filesystem::path resolve(const DatasetEntry& e) const {
    return e.path.is_absolute() ? e.path : root / e.path;
  }
};

inline std::string slide_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "slide_%03d", index);
  return buf;
}

/// Writes n_train + n_test slides under out_dir with seeds derived from the
/// master seed, plus the dataset.json split listing.
inline Dataset generate_dataset(const SynthParams& params, int n_train,
                                int n_test, const std::filesystem::path& out_dir) {
  if (n_train < 1 || n_test < 1) throw config_error("empty split");
  validate(params);
  Dataset ds;
  ds.root = out_dir;
  nlohmann::json listing;
  listing["master_seed"] = params.seed;
  listing["params"] = params_to_json(params);
  listing["slides"] = nlohmann::json::array();
  for (int i = 0; i < n_train + n_test; ++i) {
    SynthParams p = params;
    p.seed = derive_seed(params.seed, static_cast<std::uint64_t>(i));
    const auto id = slide_name(i);
    save_slide(generate_slide(p, id), out_dir / (id + ".slab"));
    DatasetEntry e{id, id + ".slab", i < n_train ? "train" : "test", p.seed};
    listing["slides"].push_back(
        {{"id", e.id}, {"path", e.path.string()}, {"split", e.split}, {"seed", e.seed}});
    ds.slides.push_back(std::move(e));
  }
  wobseg::detail::write_text(out_dir / "dataset.json", listing.dump(2) + "\n");
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& listing_path) {
  const auto j = wobseg::detail::read_json(listing_path);
  Dataset ds;
  ds.root = listing_path.parent_path();
  try {
    for (const auto& s : j.at("slides"))
      ds.slides.push_back({s.at("id").get<std::string>(),
                           s.at("path").get<std::string>(),
                           s.at("split").get<std::string>(),
                           s.value("seed", std::uint64_t{0})});
  } catch (const nlohmann::json::exception& e) {
    throw config_error("malformed dataset listing " + listing_path.string() +
                       ": " + e.what());
  }
  if (ds.slides.empty()) throw config_error("dataset listing has no slides");
  return ds;
}

}  // namespace wobseg::synth

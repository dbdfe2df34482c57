#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/fcn.hpp"
#include "wobseg/image.hpp"
#include "wobseg/slide.hpp"

namespace wobseg::predict {

/// Single-channel probability raster tagged with its resolution.
struct ProbMap {
  FloatImage probs;
  double mpp = 0.0;
};

/// Tiling of whole-level inference. A negative halo selects the smallest valid
/// one for the network.
struct TileSpec {
  int tile = 256;
  int halo = -1;
  int threads = 1;
};

/// Receptive-field radius rounded up to the pooling alignment.
inline int default_halo(const nn::FcnConfig& config) {
  const int a = config.alignment();
  return (config.receptive_radius() + a - 1) / a * a;
}

/// Overlapping-tile forward pass. Each tile is run independently and only its
/// interior is written, so the result equals the whole-image forward pass.
inline FloatImage predict_tiled(const nn::Params& params, const FloatImage& input,
                                TileSpec spec = {}) {
  const auto& config = params.config;
  if (input.channels() != config.input_channels)
    throw config_error("input has " + std::to_string(input.channels()) +
                       " channels, network expects " +
                       std::to_string(config.input_channels));
  const int halo = spec.halo < 0 ? default_halo(config) : spec.halo;
  if (halo < config.receptive_radius()) throw config_error("halo too small");
  if (spec.tile <= 2 * halo) throw config_error("tile must exceed twice the halo");
  const int a = config.alignment();
  if (spec.tile % a != 0 || halo % a != 0)
    throw config_error("tile and halo must be multiples of " + std::to_string(a));

  const int w = input.width(), h = input.height();
  FloatImage out(w, h, 1);
  if (w == 0 || h == 0) return out;
  if (w <= spec.tile && h <= spec.tile) return nn::forward(params, input);

  const int step = spec.tile - 2 * halo;
  struct Tile { int x0, y0; };
  std::vector<Tile> tiles;
  for (int y = 0; y < h; y += step)
    for (int x = 0; x < w; x += step) tiles.push_back({x, y});

  const auto run_tile = [&](const Tile& t) {
    const int wx0 = std::max(0, t.x0 - halo), wy0 = std::max(0, t.y0 - halo);
    const int wx1 = std::min(w, t.x0 + step + halo), wy1 = std::min(h, t.y0 + step + halo);
    const auto probs =
        nn::forward(params, crop(input, wx0, wy0, wx1 - wx0, wy1 - wy0));
    const int ix1 = std::min(w, t.x0 + step), iy1 = std::min(h, t.y0 + step);
    for (int y = t.y0; y < iy1; ++y)
      for (int x = t.x0; x < ix1; ++x) out.at(x, y) = probs.at(x - wx0, y - wy0);
  };

  const int threads = std::clamp(spec.threads, 1, static_cast<int>(tiles.size()));
  if (threads == 1) {
    for (const auto& t : tiles) run_tile(t);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (int i = 0; i < threads; ++i)
    pool.emplace_back([&] {
      try {
        for (std::size_t k; (k = next.fetch_add(1)) < tiles.size();) run_tile(tiles[k]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

/// RGB of the level at `level_mpp`, scaled to [0,1].
inline FloatImage rgb_input(const Slide& slide, double level_mpp) {
  return to_unit_float(slide.rgb(slide.level_index(level_mpp)));
}

inline ProbMap predict_slide(const nn::Params& params, const Slide& slide,
                             double level_mpp, TileSpec spec = {}) {
  return {predict_tiled(params, rgb_input(slide, level_mpp), spec), level_mpp};
}

constexpr double kBaseMpp = 1.0;
constexpr double kHeadMpp = 2.0;

/// Head input: 2 mpp RGB with the 2x-downsampled base output as channel 4.
inline FloatImage compound_input(const ProbMap& base, const Slide& slide) {
  if (std::abs(base.mpp - kBaseMpp) > 1e-9)
    throw config_error("compound input expects a base map at 1 mpp");
  auto coarse = downsample2(base.probs);
  auto rgb = rgb_input(slide, kHeadMpp);
  if (!coarse.same_shape(rgb))
    throw config_error("base map geometry does not match the 2 mpp level of '" +
                       slide.id + "'");
  return stack_channels(rgb, coarse);
}

inline ProbMap compound_predict(const nn::Params& base, const nn::Params& head,
                                const Slide& slide, TileSpec spec = {}) {
  if (base.config.input_channels != 3)
    throw config_error("compound base network must take 3 channels");
  if (head.config.input_channels != 4)
    throw config_error("compound head network must take 4 channels");
  TileSpec base_spec = spec, head_spec = spec;
  base_spec.halo = head_spec.halo = -1;
  const auto base_map = predict_slide(base, slide, kBaseMpp, base_spec);
  return {predict_tiled(head, compound_input(base_map, slide), head_spec), kHeadMpp};
}

}  // namespace wobseg::predict

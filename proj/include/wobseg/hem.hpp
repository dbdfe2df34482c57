#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "wobseg/augment.hpp"
#include "wobseg/error.hpp"
#include "wobseg/fcn.hpp"
#include "wobseg/image.hpp"
#include "wobseg/predict.hpp"
#include "wobseg/rng.hpp"
#include "wobseg/slide.hpp"

// Quasi-online hard example mining. An error-map worker scores whole slides
// with the latest synchronized parameters while a training worker draws
// patches from the previous slide's error map into a pool and trains on
// batches from that pool. The two meet at a rendezvous after every cycle,
// where parameters flow to the error worker and the patch quota k is tuned so
// that neither side idles for long.

namespace wobseg::hem {

/// Network input and ground truth for one slide at the training resolution.
struct TrainingSlide {
  std::string id;
  FloatImage input;  // H x W x C, values in [0,1]
  ByteImage mask;    // {0,1}
  ByteImage tissue;  // optional {0,1}; empty when absent
  double mpp = 1.0;
};

/// RGB input at `level_mpp` with the mask `mask_name` as ground truth.
inline TrainingSlide training_slide(const Slide& slide, double level_mpp,
                                    const std::string& mask_name) {
  const int li = slide.level_index(level_mpp);
  TrainingSlide ts{slide.id, predict::rgb_input(slide, level_mpp),
                   slide.mask(mask_name, li), {}, level_mpp};
  if (slide.has_mask("tissue", li)) ts.tissue = slide.mask("tissue", li);
  return ts;
}

/// Four-channel head input at 2 mpp, the base network's output materialized as
/// the extra channel.
inline TrainingSlide compound_training_slide(const nn::Params& base, const Slide& slide,
                                             const std::string& mask_name,
                                             predict::TileSpec spec = {}) {
  spec.halo = -1;
  const auto base_map = predict::predict_slide(base, slide, predict::kBaseMpp, spec);
  const int li = slide.level_index(predict::kHeadMpp);
  TrainingSlide ts{slide.id, predict::compound_input(base_map, slide),
                   slide.mask(mask_name, li), {}, predict::kHeadMpp};
  if (slide.has_mask("tissue", li)) ts.tissue = slide.mask("tissue", li);
  return ts;
}

// ---------------------------------------------------------------------------
// Error maps and sampling

enum class PixelClass : std::uint8_t { background = 0, wob = 1 };

/// Cumulative weights over the pixels of one class.
struct ClassTable {
  std::vector<std::uint32_t> pixels;
  std::vector<double> cumulative;

  double total() const { return cumulative.empty() ? 0.0 : cumulative.back(); }
  bool usable() const { return total() > 0.0; }

  /// Inverse-CDF lookup; never returns a zero-weight pixel.
  std::uint32_t draw(Rng& rng) const {
    const double target = rng.uniform() * total();
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), target);
    if (it == cumulative.end()) --it;
    return pixels[static_cast<std::size_t>(it - cumulative.begin())];
  }
};

struct ErrorMap {
  std::string slide_id;
  std::size_t slide_index = 0;
  double mpp = 0.0;
  FloatImage error;  // |p - y|
  ClassTable wob, background;
  std::uint64_t fp_count = 0;     // p >= 0.5 and y = 0
  std::uint64_t params_version = 0;
};

/// Rebuilds the per-class tables with weight e + eps_floor. When `domain` is
/// non-empty only its pixels are eligible.
inline void build_tables(ErrorMap& em, const ByteImage& mask, double eps_floor,
                         const ByteImage& domain = {}) {
  if (!(eps_floor >= 0.0)) throw config_error("eps_floor must be >= 0");
  em.wob = {};
  em.background = {};
  double acc_w = 0.0, acc_b = 0.0;
  const auto& e = em.error.storage();
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!domain.empty() && !domain.storage()[i]) continue;
    const double weight = static_cast<double>(e[i]) + eps_floor;
    auto& table = mask.storage()[i] ? em.wob : em.background;
    double& acc = mask.storage()[i] ? acc_w : acc_b;
    acc += weight;
    table.pixels.push_back(static_cast<std::uint32_t>(i));
    table.cumulative.push_back(acc);
  }
}

inline ErrorMap error_map_from_probs(const TrainingSlide& ts, const FloatImage& probs,
                                     double eps_floor, bool restrict_to_tissue = false) {
  if (!probs.same_shape(ts.mask))
    throw config_error("error map: prediction and mask dims differ");
  ErrorMap em;
  em.slide_id = ts.id;
  em.mpp = ts.mpp;
  em.error = FloatImage(probs.width(), probs.height(), 1);
  for (std::size_t i = 0; i < probs.storage().size(); ++i) {
    const float p = probs.storage()[i];
    const bool y = ts.mask.storage()[i] != 0;
    em.error.storage()[i] = std::abs(p - (y ? 1.0f : 0.0f));
    if (!y && p >= 0.5f) ++em.fp_count;
  }
  build_tables(em, ts.mask, eps_floor,
               restrict_to_tissue ? ts.tissue : ByteImage{});
  return em;
}

inline ErrorMap compute_error_map(const nn::Params& params, const TrainingSlide& ts,
                                  double eps_floor, bool restrict_to_tissue = false,
                                  predict::TileSpec spec = {}) {
  if (ts.mask.empty()) throw config_error("slide '" + ts.id + "' has no ground truth");
  return error_map_from_probs(ts, predict::predict_tiled(params, ts.input, spec),
                              eps_floor, restrict_to_tissue);
}

/// Error map of a stored slide at one level against a named mask.
inline ErrorMap compute_error_map(const nn::Params& params, const Slide& slide,
                                  double level_mpp, const std::string& mask_name,
                                  double eps_floor = 0.01) {
  return compute_error_map(params, training_slide(slide, level_mpp, mask_name),
                           eps_floor);
}

struct Center {
  int x = 0, y = 0;
  PixelClass cls = PixelClass::background;
  bool operator==(const Center&) const = default;
};

/// round(n * class_balance) centers from the WOB table, the rest from the
/// background table; a class without usable weight defers to the other one.
inline std::vector<Center> sample_centers(const ErrorMap& em, int n, double class_balance,
                                          Rng& rng) {
  if (n < 1) throw config_error("sample_centers: n must be >= 1");
  if (!(class_balance >= 0.0 && class_balance <= 1.0))
    throw config_error("class_balance must lie in [0,1]");
  const bool has_w = em.wob.usable(), has_b = em.background.usable();
  if (!has_w && !has_b) throw config_error("empty error map for '" + em.slide_id + "'");
  int n_wob = static_cast<int>(std::lround(n * class_balance));
  if (!has_w) n_wob = 0;
  if (!has_b) n_wob = n;
  std::vector<Center> out;
  out.reserve(static_cast<std::size_t>(n));
  const int w = em.error.width();
  const auto push = [&](std::uint32_t idx, PixelClass c) {
    out.push_back({static_cast<int>(idx % static_cast<std::uint32_t>(w)),
                   static_cast<int>(idx / static_cast<std::uint32_t>(w)), c});
  };
  for (int i = 0; i < n_wob; ++i) push(em.wob.draw(rng), PixelClass::wob);
  for (int i = n_wob; i < n; ++i) push(em.background.draw(rng), PixelClass::background);
  return out;
}

/// Centers uniform over all pixels, classes ignored (the baseline sampler).
inline std::vector<Center> sample_uniform_centers(const TrainingSlide& ts, int n,
                                                  Rng& rng) {
  if (n < 1) throw config_error("sample_centers: n must be >= 1");
  const auto count = ts.mask.pixel_count();
  if (count == 0) throw config_error("empty slide '" + ts.id + "'");
  std::vector<Center> out;
  for (int i = 0; i < n; ++i) {
    const auto idx = rng.below(count);
    const int w = ts.mask.width();
    out.push_back({static_cast<int>(idx % static_cast<std::uint64_t>(w)),
                   static_cast<int>(idx / static_cast<std::uint64_t>(w)),
                   ts.mask.storage()[idx] ? PixelClass::wob : PixelClass::background});
  }
  return out;
}

/// Square window around `c`, shifted minimally inward to fit the slide.
inline nn::Example extract_training_patch(const TrainingSlide& ts, Center c,
                                          int patch_size) {
  if (patch_size < 1) throw config_error("patch_size must be >= 1");
  if (patch_size > ts.input.width() || patch_size > ts.input.height())
    throw config_error("patch_size " + std::to_string(patch_size) +
                       " exceeds dims of '" + ts.id + "'");
  const int x0 = std::clamp(c.x - patch_size / 2, 0, ts.input.width() - patch_size);
  const int y0 = std::clamp(c.y - patch_size / 2, 0, ts.input.height() - patch_size);
  return {crop(ts.input, x0, y0, patch_size, patch_size),
          crop(ts.mask, x0, y0, patch_size, patch_size)};
}

/// Unvisited slides first in index order, then sampling with weight fp + 1.
inline std::size_t choose_next_slide(const std::vector<std::uint64_t>& fp_counts,
                                     const std::vector<bool>& visited, Rng& rng) {
  if (fp_counts.empty()) throw config_error("empty dataset");
  for (std::size_t i = 0; i < visited.size() && i < fp_counts.size(); ++i)
    if (!visited[i]) return i;
  double total = 0.0;
  for (auto fp : fp_counts) total += static_cast<double>(fp) + 1.0;
  double target = rng.uniform() * total;
  for (std::size_t i = 0; i < fp_counts.size(); ++i) {
    target -= static_cast<double>(fp_counts[i]) + 1.0;
    if (target < 0.0) return i;
  }
  return fp_counts.size() - 1;
}

/// k_prev * clamp(T_error / T_train, 0.5, 2), rounded and clamped to
/// [k_min, k_max].
inline int adjust_k(int k_prev, double t_error, double t_train, int k_min, int k_max) {
  constexpr double eps_t = 1e-12;
  const double ratio = std::clamp(t_error / std::max(t_train, eps_t), 0.5, 2.0);
  const auto k = std::llround(static_cast<double>(k_prev) * ratio);
  return static_cast<int>(std::clamp<long long>(k, k_min, k_max));
}

// ---------------------------------------------------------------------------
// Patch pool

struct PoolEntry {
  nn::Example example;
  std::string slide_id;
  std::uint64_t digest = 0;
};

inline std::uint64_t content_digest(const nn::Example& ex) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(ex.input.storage().data(), ex.input.storage().size() * sizeof(float));
  feed(ex.mask.storage().data(), ex.mask.storage().size());
  return h;
}

/// Ring buffer overwriting its oldest entry once full.
class PatchPool {
 public:
  PatchPool(std::size_t capacity, std::size_t n_min)
      : capacity_(capacity), n_min_(n_min) {
    if (n_min == 0 || n_min > capacity)
      throw infeasible_error("patch pool: need 0 < N_min <= capacity (N_min=" +
                             std::to_string(n_min) + ", capacity=" +
                             std::to_string(capacity) + ")");
  }

  void add(nn::Example ex, std::string slide_id) {
    PoolEntry e{std::move(ex), std::move(slide_id), 0};
    e.digest = content_digest(e.example);
    if (entries_.size() < capacity_) {
      entries_.push_back(std::move(e));
    } else {
      entries_[head_] = std::move(e);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t n_min() const { return n_min_; }
  bool ready() const { return entries_.size() >= n_min_; }
  const std::vector<PoolEntry>& entries() const { return entries_; }

  /// Up to `b` entries drawn uniformly without replacement, skipping entries
  /// byte-identical to one already chosen.
  std::vector<const PoolEntry*> sample_batch(std::size_t b, Rng& rng) const {
    std::vector<std::size_t> order(entries_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<const PoolEntry*> batch;
    for (std::size_t i = 0; i < order.size() && batch.size() < b; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
      std::swap(order[i], order[j]);
      const auto& cand = entries_[order[i]];
      const bool dup = std::any_of(batch.begin(), batch.end(), [&](const PoolEntry* e) {
        return e->digest == cand.digest && e->example.input == cand.example.input &&
               e->example.mask == cand.example.mask;
      });
      if (!dup) batch.push_back(&cand);
    }
    return batch;
  }

 private:
  std::size_t capacity_, n_min_;
  std::size_t head_ = 0;
  std::vector<PoolEntry> entries_;
};

// ---------------------------------------------------------------------------
// Protocol

enum class ClockMode { simulated, real };
enum class LrSchedule { constant, cosine };
enum class Sampling { error_weighted, uniform };

struct SamplerConfig {
  int patch_size = 188;
  int batch_size = 32;
  int k0 = 0;        // 0 selects 8 * batch_size
  int n_min = 0;     // 0 selects 8 * batch_size
  int capacity = 0;  // 0 selects 16 * n_min
  int k_min = 0;     // 0 selects batch_size
  int k_max = 0;     // 0 selects 64 * batch_size
  double eps_floor = 0.01;
  double class_balance = 0.5;
  double level_mpp = 1.0;
  long long total_iterations = 1000000;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double grad_clip = 0.0;  // max gradient L2 norm per step; 0 disables
  LrSchedule lr_schedule = LrSchedule::constant;
  ClockMode clock = ClockMode::simulated;
  double cost_error_per_pixel = 1e-6;  // simulated seconds
  double cost_train_per_patch = 2e-3;  // simulated seconds
  Sampling sampling = Sampling::error_weighted;
  bool restrict_to_tissue = false;
  int threads = 1;  // tile fan-out inside the error worker

  /// Laptop-scale settings: 64 px patches, batch 8, 2000 iterations, learning
  /// rate 0.02 on a cosine schedule, gradient norm clipped at 5.
  static SamplerConfig desk() {
    SamplerConfig c;
    c.patch_size = 64;
    c.batch_size = 8;
    c.total_iterations = 2000;
    c.learning_rate = 0.02;
    c.grad_clip = 5.0;
    c.lr_schedule = LrSchedule::cosine;
    return c;
  }

  int resolved_k0() const { return k0 > 0 ? k0 : 8 * batch_size; }
  int resolved_n_min() const { return n_min > 0 ? n_min : 8 * batch_size; }
  int resolved_capacity() const { return capacity > 0 ? capacity : 16 * resolved_n_min(); }
  int resolved_k_min() const { return k_min > 0 ? k_min : batch_size; }
  int resolved_k_max() const { return k_max > 0 ? k_max : 64 * batch_size; }

  /// Step size for iteration t (0-based) of this run. The cosine schedule
  /// decays from learning_rate towards 0 over total_iterations.
  double learning_rate_at(long long t) const {
    if (lr_schedule == LrSchedule::constant || total_iterations <= 0) return learning_rate;
    const double frac = static_cast<double>(t) / static_cast<double>(total_iterations);
    return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }

  void validate() const {
    if (patch_size < 1) throw config_error("patch_size must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (!(class_balance >= 0.0 && class_balance <= 1.0))
      throw config_error("class_balance must lie in [0,1]");
    if (!(eps_floor >= 0.0)) throw config_error("eps_floor must be >= 0");
    if (total_iterations < 0) throw config_error("total_iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw config_error("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw config_error("momentum must lie in [0,1)");
    if (!(grad_clip >= 0.0)) throw config_error("grad_clip must be >= 0");
    if (resolved_k_min() < 1 || resolved_k_min() > resolved_k_max())
      throw config_error("need 1 <= k_min <= k_max");
    if (!(cost_error_per_pixel >= 0.0 && cost_train_per_patch >= 0.0))
      throw config_error("simulated costs must be >= 0");
  }
};

struct CycleStats {
  int cycle = 0;
  int k_n = 0;
  double t_error = 0.0, t_train = 0.0;
  double idle_error = 0.0, idle_train = 0.0;
  std::size_t pool_fill = 0;
  double loss_mean = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;                 // trained this cycle
  long long cumulative_iterations = 0;
  std::size_t train_slide = 0;        // slide the training worker sampled from
  std::size_t error_slide = 0;        // slide the error worker scored
  std::uint64_t map_version = 0;      // params version behind the sampled map
  std::uint64_t snapshot_version = 0; // params version the error worker used

  bool operator==(const CycleStats& o) const {
    const auto same_loss = (std::isnan(loss_mean) && std::isnan(o.loss_mean)) ||
                           loss_mean == o.loss_mean;
    return cycle == o.cycle && k_n == o.k_n && t_error == o.t_error &&
           t_train == o.t_train && idle_error == o.idle_error &&
           idle_train == o.idle_train && pool_fill == o.pool_fill && same_loss &&
           iterations == o.iterations &&
           cumulative_iterations == o.cumulative_iterations &&
           train_slide == o.train_slide && error_slide == o.error_slide &&
           map_version == o.map_version && snapshot_version == o.snapshot_version;
  }
};

struct RunResult {
  nn::Params params;
  std::vector<CycleStats> stats;
};

/// Stats CSV: cycle,k_n,T_error,T_train,idle_error,idle_train,pool_fill,loss_mean
inline std::string stats_csv(const std::vector<CycleStats>& stats) {
  std::string out = "cycle,k_n,T_error,T_train,idle_error,idle_train,pool_fill,loss_mean\n";
  char buf[256];
  for (const auto& s : stats) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g,%zu,%.9g\n", s.cycle,
                  s.k_n, s.t_error, s.t_train, s.idle_error, s.idle_train,
                  s.pool_fill, s.loss_mean);
    out += buf;
  }
  return out;
}

// Messages crossing the worker boundary travel as bytes.

struct SnapshotMessage {
  std::uint64_t version = 0;
  std::vector<std::uint8_t> params;  // encode_params
};

namespace detail {
inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}
template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw config_error("truncated error map message");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

/// Error raster plus metadata; sampling tables are rebuilt by the receiver
/// from its own copy of the mask.
inline std::vector<std::uint8_t> encode_error_map(const ErrorMap& em) {
  std::vector<std::uint8_t> out;
  const auto put = [&](auto v) { detail::put_bytes(out, &v, sizeof v); };
  put(static_cast<std::uint64_t>(em.slide_index));
  put(em.mpp);
  put(em.fp_count);
  put(em.params_version);
  put(static_cast<std::int32_t>(em.error.width()));
  put(static_cast<std::int32_t>(em.error.height()));
  put(static_cast<std::uint64_t>(em.slide_id.size()));
  detail::put_bytes(out, em.slide_id.data(), em.slide_id.size());
  detail::put_bytes(out, em.error.storage().data(),
                    em.error.storage().size() * sizeof(float));
  return out;
}

inline ErrorMap decode_error_map(const std::vector<std::uint8_t>& in) {
  std::size_t pos = 0;
  ErrorMap em;
  em.slide_index = detail::take<std::uint64_t>(in, pos);
  em.mpp = detail::take<double>(in, pos);
  em.fp_count = detail::take<std::uint64_t>(in, pos);
  em.params_version = detail::take<std::uint64_t>(in, pos);
  const auto w = detail::take<std::int32_t>(in, pos);
  const auto h = detail::take<std::int32_t>(in, pos);
  const auto n = detail::take<std::uint64_t>(in, pos);
  const auto floats = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (w < 0 || h < 0 || pos + n + floats * sizeof(float) != in.size())
    throw config_error("malformed error map message");
  em.slide_id.assign(reinterpret_cast<const char*>(in.data() + pos), n);
  pos += n;
  std::vector<float> data(floats);
  std::memcpy(data.data(), in.data() + pos, floats * sizeof(float));
  em.error = FloatImage(w, h, 1, std::move(data));
  return em;
}

/// Scores slides. Holds the slide-selection state (visited flags, false
/// positive counts) and its own random stream.
class ErrorWorker {
 public:
  ErrorWorker(const std::vector<TrainingSlide>& slides, const SamplerConfig& cfg,
              nn::FcnConfig net, std::uint64_t seed)
      : slides_(slides), cfg_(cfg), config_(std::move(net)), rng_(seed),
        fp_(slides.size(), 0),
        visited_(slides.size(), false) {}

  struct Output {
    std::vector<std::uint8_t> map;  // encode_error_map
    double seconds = 0.0;           // simulated or measured
  };

  Output step(const SnapshotMessage& msg) {
    const auto started = std::chrono::steady_clock::now();
    const auto params = nn::decode_params(msg.params, config_);
    // The uniform baseline does not steer slide choice by false positives.
    const auto weights = cfg_.sampling == Sampling::uniform
                             ? std::vector<std::uint64_t>(fp_.size(), 0)
                             : fp_;
    const auto idx = choose_next_slide(weights, visited_, rng_);
    predict::TileSpec spec;
    spec.threads = cfg_.threads;
    auto em = compute_error_map(params, slides_[idx], cfg_.eps_floor,
                                cfg_.restrict_to_tissue, spec);
    em.slide_index = idx;
    em.params_version = msg.version;
    visited_[idx] = true;
    fp_[idx] = em.fp_count;
    Output out{encode_error_map(em), 0.0};
    if (cfg_.clock == ClockMode::simulated)
      out.seconds = cfg_.cost_error_per_pixel *
                    static_cast<double>(slides_[idx].mask.pixel_count());
    else
      out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                  started).count();
    return out;
  }

 private:
  const std::vector<TrainingSlide>& slides_;
  SamplerConfig cfg_;
  nn::FcnConfig config_;
  Rng rng_;
  std::vector<std::uint64_t> fp_;
  std::vector<bool> visited_;
};

/// Owns the live parameters, the optimizer state and the patch pool.
class TrainingWorker {
 public:
  TrainingWorker(const std::vector<TrainingSlide>& slides, const SamplerConfig& cfg,
                 const augment::AugmentPipeline& pipeline, nn::Params init,
                 std::uint64_t seed)
      : slides_(slides), cfg_(cfg), pipeline_(pipeline), params_(std::move(init)),
        velocity_(params_.values.size(), 0.0), rng_(seed),
        pool_(static_cast<std::size_t>(cfg.resolved_capacity()),
              static_cast<std::size_t>(cfg.resolved_n_min())) {}

  struct Output {
    int iterations = 0;
    double loss_mean = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
  };

  /// Samples k patches from `map` into the pool, then trains up to
  /// ceil(k / B) iterations (never more than `iteration_budget`) once the
  /// pool holds N_min entries.
  Output step(const ErrorMap& map, int k, long long iteration_budget) {
    const auto started = std::chrono::steady_clock::now();
    const auto& ts = slides_[map.slide_index];
    const auto centers = cfg_.sampling == Sampling::uniform
                             ? sample_uniform_centers(ts, k, rng_)
                             : sample_centers(map, k, cfg_.class_balance, rng_);
    for (const auto& c : centers) {
      auto ex = extract_training_patch(ts, c, cfg_.patch_size);
      auto [patch, mask] = augment::apply(pipeline_, std::move(ex.input),
                                          std::move(ex.mask), rng_);
      pool_.add({std::move(patch), std::move(mask)}, ts.id);
    }
    Output out;
    if (pool_.ready()) {
      const long long want = (k + cfg_.batch_size - 1) / cfg_.batch_size;
      out.iterations = static_cast<int>(std::min(want, iteration_budget));
      double loss_sum = 0.0;
      std::vector<nn::Example> batch;
      for (int it = 0; it < out.iterations; ++it) {
        batch.clear();
        for (const auto* e : pool_.sample_batch(static_cast<std::size_t>(cfg_.batch_size), rng_))
          batch.push_back(e->example);
        auto lg = nn::loss_and_grad(params_, batch);
        nn::clip_grad_norm(lg.grad, cfg_.grad_clip);
        nn::sgd_step(params_, lg.grad, cfg_.learning_rate_at(iterations_done_++), cfg_.momentum,
                     velocity_);
        loss_sum += lg.loss;
      }
      if (out.iterations > 0) out.loss_mean = loss_sum / out.iterations;
    }
    if (cfg_.clock == ClockMode::simulated)
      out.seconds = cfg_.cost_train_per_patch * k;
    else
      out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                  started).count();
    return out;
  }

  /// Rebuilds tables for a map that arrived over the worker boundary.
  ErrorMap receive(const std::vector<std::uint8_t>& bytes) const {
    auto em = decode_error_map(bytes);
    if (em.slide_index >= slides_.size()) throw config_error("error map for unknown slide");
    const auto& ts = slides_[em.slide_index];
    if (!em.error.same_shape(ts.mask)) throw config_error("error map dims differ");
    build_tables(em, ts.mask, cfg_.eps_floor,
                 cfg_.restrict_to_tissue ? ts.tissue : ByteImage{});
    return em;
  }

  const nn::Params& params() const { return params_; }
  const PatchPool& pool() const { return pool_; }

 private:
  const std::vector<TrainingSlide>& slides_;
  SamplerConfig cfg_;
  augment::AugmentPipeline pipeline_;
  nn::Params params_;
  std::vector<double> velocity_;
  long long iterations_done_ = 0;
  Rng rng_;
  PatchPool pool_;
};

namespace detail {

/// Single-slot mailbox used for the real-clock rendezvous.
template <typename T>
class Mailbox {
 public:
  void put(T v) {
    {
      std::lock_guard lock(m_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }
  T take() {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return !q_.empty(); });
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<T> q_;
};

}  // namespace detail

struct ProtocolOptions {
  std::uint64_t seed = 0;
  std::optional<nn::Params> init;  // resume from these instead of a fresh init
  /// Called after every rendezvous, e.g. for progress output.
  std::function<void(const CycleStats&)> on_cycle;
};

/// Runs cycles until `total_iterations` training iterations are done.
inline RunResult run_protocol(const std::vector<TrainingSlide>& slides,
                              const SamplerConfig& cfg,
                              const augment::AugmentPipeline& pipeline,
                              const nn::FcnConfig& net, const ProtocolOptions& opt = {}) {
  cfg.validate();
  net.validate();
  if (slides.empty()) throw config_error("empty dataset");
  for (const auto& s : slides) {
    if (s.input.channels() != net.input_channels)
      throw config_error("slide '" + s.id + "' has " + std::to_string(s.input.channels()) +
                         " input channels, network expects " +
                         std::to_string(net.input_channels));
    if (s.mask.empty() || !s.mask.same_shape(s.input))
      throw config_error("slide '" + s.id + "' lacks ground truth at the training level");
  }
  if (cfg.resolved_capacity() < cfg.resolved_n_min())
    throw infeasible_error("pool capacity " + std::to_string(cfg.resolved_capacity()) +
                           " is below N_min " + std::to_string(cfg.resolved_n_min()));

  nn::Params init = opt.init ? *opt.init : nn::init_params(net, derive_seed(opt.seed, 1));
  if (!(init.config == net)) throw config_error("initial parameters do not match network");
  RunResult result{init, {}};
  if (cfg.total_iterations == 0) return result;

  ErrorWorker error_worker(slides, cfg, net, derive_seed(opt.seed, 2));
  TrainingWorker trainer(slides, cfg, pipeline, init, derive_seed(opt.seed, 3));

  std::uint64_t version = 0;
  SnapshotMessage snapshot{version, nn::encode_params(init)};
  // Prologue: the error worker scores S0 before any training happens.
  auto current = trainer.receive(error_worker.step(snapshot).map);

  const int k_min = cfg.resolved_k_min(), k_max = cfg.resolved_k_max();
  int k = std::clamp(cfg.resolved_k0(), k_min, k_max);
  long long done = 0;

  detail::Mailbox<SnapshotMessage> to_error;
  detail::Mailbox<ErrorWorker::Output> from_error;
  std::thread error_thread;
  bool stop = false;
  if (cfg.clock == ClockMode::real)
    error_thread = std::thread([&] {
      for (;;) {
        auto msg = to_error.take();
        if (msg.params.empty()) return;
        ErrorWorker::Output out;
        try {
          out = error_worker.step(msg);
        } catch (...) {
          out.map.clear();
        }
        from_error.put(std::move(out));
      }
    });
  const auto shutdown = [&] {
    if (error_thread.joinable()) {
      to_error.put({});
      error_thread.join();
    }
  };

  try {
    for (int cycle = 0; !stop; ++cycle) {
      CycleStats st;
      st.cycle = cycle;
      st.k_n = k;
      st.train_slide = current.slide_index;
      st.map_version = current.params_version;
      st.snapshot_version = snapshot.version;

      ErrorWorker::Output err;
      TrainingWorker::Output tr;
      if (cfg.clock == ClockMode::real) {
        to_error.put(snapshot);
        tr = trainer.step(current, k, cfg.total_iterations - done);
        err = from_error.take();
        if (err.map.empty()) throw config_error("error worker failed");
      } else {
        err = error_worker.step(snapshot);
        tr = trainer.step(current, k, cfg.total_iterations - done);
      }

      // Rendezvous: parameters flow to the error worker.
      done += tr.iterations;
      auto next = trainer.receive(err.map);
      st.error_slide = next.slide_index;
      st.t_error = err.seconds;
      st.t_train = tr.seconds;
      st.idle_error = std::max(0.0, tr.seconds - err.seconds);
      st.idle_train = std::max(0.0, err.seconds - tr.seconds);
      st.pool_fill = trainer.pool().size();
      st.loss_mean = tr.loss_mean;
      st.iterations = tr.iterations;
      st.cumulative_iterations = done;
      snapshot = {++version, nn::encode_params(trainer.params())};
      current = std::move(next);
      k = adjust_k(k, err.seconds, tr.seconds, k_min, k_max);
      result.stats.push_back(st);
      if (opt.on_cycle) opt.on_cycle(st);
      stop = done >= cfg.total_iterations;
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();
  result.params = trainer.params();
  return result;
}

}  // namespace wobseg::hem

#include <gtest/gtest.h>

#include <array>
#include <set>

#include "test_support.hpp"
#include "wobseg/hem.hpp"

using namespace wobseg;
using namespace wobseg::hem;

namespace {

/// Random RGB slide with a disk-shaped WOB region.
TrainingSlide make_slide(const std::string& id, int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  TrainingSlide ts{id, wobseg::testing::random_unit(w, h, 3, rng), ByteImage(w, h, 1), {}, 1.0};
  const double cx = rng.uniform(0.3, 0.7) * w, cy = rng.uniform(0.3, 0.7) * h;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      ts.mask.at(x, y) = std::hypot(x - cx, y - cy) < 0.2 * std::min(w, h) ? 1 : 0;
  return ts;
}

FloatImage mask_as_probs(const ByteImage& m) {
  FloatImage p(m.width(), m.height(), 1);
  for (std::size_t i = 0; i < p.storage().size(); ++i) p.storage()[i] = m.storage()[i];
  return p;
}

/// One-convolution network; protocol tests exercise bookkeeping, not learning.
nn::FcnConfig tiny_net() { return {3, {nn::Layer::conv(3, 1), nn::Layer::sigmoid()}}; }

SamplerConfig tiny_cfg() {
  SamplerConfig c;
  c.patch_size = 12;
  c.batch_size = 4;
  c.total_iterations = 60;
  c.learning_rate = 0.05;
  return c;
}

double chi_square(const std::vector<double>& observed, double expected) {
  double s = 0.0;
  for (double o : observed) s += (o - expected) * (o - expected) / expected;
  return s;
}

}  // namespace

TEST(ErrorMap, PerfectPredictionGivesUniformFloorTables) {
  const auto ts = make_slide("a", 16, 16, 1);
  const auto em = error_map_from_probs(ts, mask_as_probs(ts.mask), 0.01);
  for (auto v : em.error.storage()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(em.fp_count, 0u);
  for (const auto* table : {&em.wob, &em.background})
    for (std::size_t i = 0; i < table->cumulative.size(); ++i)
      EXPECT_NEAR(table->cumulative[i], 0.01 * static_cast<double>(i + 1), 1e-12);
  EXPECT_EQ(em.wob.pixels.size() + em.background.pixels.size(), 256u);
}

TEST(ErrorMap, HalfEverywhereGivesHalfErrorAndStrictlyIncreasingTables) {
  const auto ts = make_slide("a", 16, 16, 2);
  const auto em = error_map_from_probs(ts, FloatImage(16, 16, 1, 0.5f), 0.01);
  for (auto v : em.error.storage()) EXPECT_EQ(v, 0.5f);
  std::size_t background = 0;
  for (auto v : ts.mask.storage()) background += v == 0;
  EXPECT_EQ(em.fp_count, background);
  for (const auto* table : {&em.wob, &em.background}) {
    ASSERT_TRUE(table->usable());
    for (std::size_t i = 1; i < table->cumulative.size(); ++i)
      EXPECT_GT(table->cumulative[i], table->cumulative[i - 1]);
    EXPECT_NEAR(table->total(), 0.51 * static_cast<double>(table->pixels.size()), 1e-9);
  }
}

TEST(ErrorMap, FalsePositiveCountMatchesDirectCount) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto ts = make_slide("a", 16, 16, 10 + static_cast<std::uint64_t>(trial));
    ts.mask = wobseg::testing::random_mask(16, 16, 0.3, rng);
    auto probs = wobseg::testing::random_unit(16, 16, 1, rng);
    probs.storage()[0] = 0.5f;
    std::uint64_t fp = 0;
    for (std::size_t i = 0; i < probs.storage().size(); ++i)
      if (!ts.mask.storage()[i] && probs.storage()[i] >= 0.5f) ++fp;
    const auto em = error_map_from_probs(ts, probs, 0.01);
    ASSERT_EQ(em.fp_count, fp);
    for (std::size_t i = 0; i < probs.storage().size(); ++i)
      ASSERT_EQ(em.error.storage()[i],
                std::abs(probs.storage()[i] - static_cast<float>(ts.mask.storage()[i])));
  }
}

TEST(ErrorMap, MissingMaskAndDimensionMismatchAreErrors) {
  auto ts = make_slide("a", 16, 16, 4);
  EXPECT_THROW(error_map_from_probs(ts, FloatImage(8, 8, 1), 0.01), Error);
  ts.mask = ByteImage();
  EXPECT_THROW(compute_error_map(nn::init_params(tiny_net(), 1), ts, 0.01), Error);
}

TEST(ErrorMap, TissueRestrictionLimitsEligiblePixels) {
  auto ts = make_slide("a", 16, 16, 5);
  ts.tissue = ByteImage(16, 16, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x) ts.tissue.at(x, y) = 1;
  const auto em = error_map_from_probs(ts, FloatImage(16, 16, 1, 0.3f), 0.01, true);
  EXPECT_EQ(em.wob.pixels.size() + em.background.pixels.size(), 128u);
  for (auto idx : em.background.pixels) EXPECT_LT(idx / 16, 8u);
}

TEST(SampleCenters, UniformTableGivesUniformCenters) {
  TrainingSlide ts{"u", FloatImage(16, 16, 3), ByteImage(16, 16, 1), {}, 1.0};
  const auto em = error_map_from_probs(ts, FloatImage(16, 16, 1), 0.01);
  Rng rng(6);
  const int n = 10000;
  const auto centers = sample_centers(em, n, 0.5, rng);
  ASSERT_EQ(centers.size(), static_cast<std::size_t>(n));
  std::vector<double> cells(16, 0.0);
  for (const auto& c : centers) {
    EXPECT_EQ(c.cls, PixelClass::background);
    cells[static_cast<std::size_t>((c.y / 4) * 4 + c.x / 4)] += 1;
  }
  // Critical value of chi-square with 15 degrees of freedom at p = 0.001.
  EXPECT_LT(chi_square(cells, n / 16.0), 37.70);
}

TEST(SampleCenters, ClassBalanceSplitsAndFallsBack) {
  const auto ts = make_slide("b", 24, 24, 7);
  const auto em = error_map_from_probs(ts, FloatImage(24, 24, 1, 0.3f), 0.01);
  Rng rng(7);
  for (const auto& c : sample_centers(em, 200, 1.0, rng)) {
    EXPECT_EQ(c.cls, PixelClass::wob);
    EXPECT_EQ(ts.mask.at(c.x, c.y), 1);
  }
  const auto half = sample_centers(em, 11, 0.5, rng);
  const auto wob = std::count_if(half.begin(), half.end(),
                                 [](const Center& c) { return c.cls == PixelClass::wob; });
  EXPECT_EQ(wob, 6);  // round(5.5)
  for (const auto& c : sample_centers(em, 50, 0.0, rng)) EXPECT_EQ(ts.mask.at(c.x, c.y), 0);
  EXPECT_THROW(sample_centers(em, 0, 0.5, rng), Error);
  EXPECT_THROW(sample_centers(em, 5, 1.5, rng), Error);
  EXPECT_THROW(sample_centers(ErrorMap{}, 5, 0.5, rng), Error);
}

TEST(SampleCenters, AllMassOnOnePixelPerClass) {
  const auto ts = make_slide("c", 20, 20, 8);
  auto probs = mask_as_probs(ts.mask);
  int wob_px = -1, bg_px = -1;
  for (int i = 0; i < 400; ++i) {
    if (ts.mask.storage()[static_cast<std::size_t>(i)] && wob_px < 0) wob_px = i;
    if (!ts.mask.storage()[static_cast<std::size_t>(i)] && bg_px < 0) bg_px = i;
  }
  probs.storage()[static_cast<std::size_t>(wob_px)] = 0.2f;
  probs.storage()[static_cast<std::size_t>(bg_px)] = 0.9f;
  const auto em = error_map_from_probs(ts, probs, 0.0);
  Rng rng(8);
  for (const auto& c : sample_centers(em, 500, 0.5, rng)) {
    const int idx = c.y * 20 + c.x;
    EXPECT_EQ(idx, c.cls == PixelClass::wob ? wob_px : bg_px);
  }
}

TEST(SampleCenters, ZeroFloorConcentratesOnTheErrorRegion) {
  const auto ts = make_slide("d", 32, 32, 9);
  auto probs = mask_as_probs(ts.mask);
  Rng noise(9);
  // Region R: a band of rows crossing the WOB disk.
  for (int y = 12; y < 20; ++y)
    for (int x = 0; x < 32; ++x)
      probs.at(x, y) = std::abs(static_cast<float>(ts.mask.at(x, y)) -
                                static_cast<float>(noise.uniform(0.05, 0.95)));
  const auto em = error_map_from_probs(ts, probs, 0.0);
  Rng rng(10);
  for (const auto& c : sample_centers(em, 2000, 0.5, rng)) {
    ASSERT_GE(c.y, 12);
    ASSERT_LT(c.y, 20);
  }
}

TEST(SampleUniform, CoversTheSlideAndLabelsClasses) {
  const auto ts = make_slide("e", 16, 16, 11);
  Rng rng(11);
  std::vector<double> cells(16, 0.0);
  for (const auto& c : sample_uniform_centers(ts, 8000, rng)) {
    EXPECT_EQ(c.cls == PixelClass::wob, ts.mask.at(c.x, c.y) == 1);
    cells[static_cast<std::size_t>((c.y / 4) * 4 + c.x / 4)] += 1;
  }
  EXPECT_LT(chi_square(cells, 500.0), 37.70);
}

TEST(ExtractPatch, ClampsWindowsInward) {
  auto ts = make_slide("f", 20, 16, 12);
  const auto centred = extract_training_patch(ts, {10, 8}, 8);
  EXPECT_EQ(centred.input, crop(ts.input, 6, 4, 8, 8));
  EXPECT_EQ(centred.mask, crop(ts.mask, 6, 4, 8, 8));
  EXPECT_EQ(extract_training_patch(ts, {0, 0}, 8).input, crop(ts.input, 0, 0, 8, 8));
  EXPECT_EQ(extract_training_patch(ts, {19, 15}, 8).input, crop(ts.input, 12, 8, 8, 8));
  EXPECT_THROW(extract_training_patch(ts, {0, 0}, 17), Error);
  EXPECT_THROW(extract_training_patch(ts, {0, 0}, 0), Error);
}

TEST(ChooseNextSlide, UnvisitedFirstThenWeighted) {
  Rng rng(13);
  EXPECT_EQ(choose_next_slide({5, 0, 7}, {true, false, false}, rng), 1u);
  EXPECT_EQ(choose_next_slide({42}, {true}, rng), 0u);
  EXPECT_THROW(choose_next_slide({}, {}, rng), Error);

  std::vector<double> counts(5, 0.0);
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    counts[choose_next_slide({3, 3, 3, 3, 3}, std::vector<bool>(5, true), rng)] += 1;
  // Critical value of chi-square with 4 degrees of freedom at p = 0.001.
  EXPECT_LT(chi_square(counts, n / 5.0), 18.47);

  std::array<double, 2> two{0, 0};
  const int m = 200000;
  for (int i = 0; i < m; ++i) two[choose_next_slide({999, 0}, {true, true}, rng)] += 1;
  const double ratio = two[0] / two[1];
  EXPECT_GT(ratio, 800.0);
  EXPECT_LT(ratio, 1250.0);
}

TEST(AdjustK, ClampedMultiplicativeUpdate) {
  EXPECT_EQ(adjust_k(40, 1.0, 1.0, 8, 512), 40);
  EXPECT_EQ(adjust_k(40, 4.0, 1.0, 8, 512), 80);
  EXPECT_EQ(adjust_k(41, 1.0, 4.0, 8, 512), 21);  // 20.5 rounds half away from zero
  EXPECT_EQ(adjust_k(40, 1.5, 1.0, 8, 512), 60);
  EXPECT_EQ(adjust_k(300, 4.0, 1.0, 8, 512), 512);
  EXPECT_EQ(adjust_k(10, 0.0, 1.0, 8, 512), 8);
  EXPECT_EQ(adjust_k(10, 1.0, 0.0, 8, 512), 20);
}

TEST(PatchPool, CapacityRingAndReadiness) {
  EXPECT_THROW(PatchPool(4, 5), Error);
  EXPECT_THROW(PatchPool(4, 0), Error);
  try {
    PatchPool(2, 3);
  } catch (const Error& e) {
    EXPECT_EQ(e.exit_code(), 3);
  }
  PatchPool pool(3, 2);
  const auto ex = [](float v) { return nn::Example{FloatImage(2, 2, 3, v), ByteImage(2, 2, 1)}; };
  pool.add(ex(1), "a");
  EXPECT_FALSE(pool.ready());
  pool.add(ex(2), "a");
  EXPECT_TRUE(pool.ready());
  pool.add(ex(3), "a");
  pool.add(ex(4), "b");  // overwrites the oldest entry (1)
  ASSERT_EQ(pool.size(), 3u);
  std::set<float> values;
  for (const auto& e : pool.entries()) values.insert(e.example.input.storage()[0]);
  EXPECT_EQ(values, (std::set<float>{2, 3, 4}));
}

TEST(PatchPool, BatchesNeverHoldByteIdenticalEntries) {
  PatchPool pool(64, 1);
  const auto ex = [](float v) { return nn::Example{FloatImage(2, 2, 3, v), ByteImage(2, 2, 1)}; };
  for (int i = 0; i < 10; ++i) pool.add(ex(7), "dup");
  for (int i = 0; i < 6; ++i) pool.add(ex(static_cast<float>(i)), "u");
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const auto batch = pool.sample_batch(8, rng);
    EXPECT_LE(batch.size(), 8u);
    EXPECT_GE(batch.size(), 7u);  // 7 distinct contents exist
    std::set<float> seen;
    for (const auto* e : batch) ASSERT_TRUE(seen.insert(e->example.input.storage()[0]).second);
  }
}

TEST(Serialization, ErrorMapRoundTrip) {
  const std::vector<TrainingSlide> slides{make_slide("s0", 16, 16, 15), make_slide("s1", 20, 12, 16)};
  Rng rng(15);
  auto em = error_map_from_probs(slides[1], wobseg::testing::random_unit(20, 12, 1, rng), 0.01);
  em.slide_index = 1;
  em.params_version = 17;
  const auto bytes = encode_error_map(em);
  const auto back = decode_error_map(bytes);
  EXPECT_EQ(back.slide_id, "s1");
  EXPECT_EQ(back.slide_index, 1u);
  EXPECT_EQ(back.params_version, 17u);
  EXPECT_EQ(back.fp_count, em.fp_count);
  EXPECT_EQ(back.error, em.error);
  TrainingWorker worker(slides, tiny_cfg(), {}, nn::init_params(tiny_net(), 1), 1);
  const auto rebuilt = worker.receive(bytes);
  EXPECT_EQ(rebuilt.wob.cumulative, em.wob.cumulative);
  EXPECT_EQ(rebuilt.background.pixels, em.background.pixels);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_error_map(truncated), Error);
}

TEST(Protocol, TotalZeroReturnsInitialParameters) {
  const std::vector<TrainingSlide> slides{make_slide("s", 24, 24, 17)};
  auto cfg = tiny_cfg();
  cfg.total_iterations = 0;
  const auto r = run_protocol(slides, cfg, {}, tiny_net(), {5, std::nullopt, {}});
  EXPECT_TRUE(r.stats.empty());
  EXPECT_EQ(r.params.values, nn::init_params(tiny_net(), derive_seed(5, 1)).values);
}

TEST(Protocol, InvalidSetupsAreRejected) {
  const std::vector<TrainingSlide> slides{make_slide("s", 24, 24, 18)};
  auto cfg = tiny_cfg();
  EXPECT_THROW(run_protocol({}, cfg, {}, tiny_net()), Error);
  cfg.n_min = 50;
  cfg.capacity = 10;
  try {
    run_protocol(slides, cfg, {}, tiny_net());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::infeasible);
  }
  auto no_mask = slides;
  no_mask[0].mask = ByteImage();
  EXPECT_THROW(run_protocol(no_mask, tiny_cfg(), {}, tiny_net()), Error);
  EXPECT_THROW(run_protocol(slides, tiny_cfg(), {}, nn::FcnConfig::reference_head()), Error);
}

TEST(Protocol, BookkeepingInvariants) {
  std::vector<TrainingSlide> slides;
  for (int i = 0; i < 4; ++i) slides.push_back(make_slide("s" + std::to_string(i), 24, 24, 20 + static_cast<std::uint64_t>(i)));
  auto cfg = tiny_cfg();
  cfg.k0 = 6;
  cfg.n_min = 20;
  const auto r = run_protocol(slides, cfg, augment::parse_pipeline("rot90 k=random"),
                              tiny_net(), {3, std::nullopt, {}});
  ASSERT_FALSE(r.stats.empty());
  long long sum = 0;
  bool started = false;
  std::set<std::size_t> first_four;
  for (std::size_t n = 0; n < r.stats.size(); ++n) {
    const auto& s = r.stats[n];
    EXPECT_EQ(s.cycle, static_cast<int>(n));
    // Training only once the pool holds N_min patches.
    if (s.iterations > 0) {
      EXPECT_GE(s.pool_fill, 20u);
      started = true;
    } else if (!started) {
      EXPECT_LT(s.pool_fill, 20u);
      EXPECT_TRUE(std::isnan(s.loss_mean));
    }
    EXPECT_LE(s.iterations, (s.k_n + cfg.batch_size - 1) / cfg.batch_size);
    // The slower worker never waits.
    EXPECT_EQ(std::min(s.idle_error, s.idle_train), 0.0);
    // Snapshot versions: the error worker uses the last rendezvous' params and
    // the training worker samples from the map computed one cycle earlier.
    EXPECT_EQ(s.snapshot_version, n);
    EXPECT_EQ(s.map_version, n == 0 ? 0u : r.stats[n - 1].snapshot_version);
    if (n > 0) {
      EXPECT_EQ(s.train_slide, r.stats[n - 1].error_slide);
    }
    if (n < 3) first_four.insert(s.error_slide);
    sum += s.iterations;
    EXPECT_EQ(s.cumulative_iterations, sum);
  }
  EXPECT_EQ(r.stats.front().train_slide, 0u);
  EXPECT_EQ(first_four, (std::set<std::size_t>{1, 2, 3}));  // round-robin warm start
  EXPECT_EQ(sum, cfg.total_iterations);
  EXPECT_NE(r.params.values, nn::init_params(tiny_net(), derive_seed(3, 1)).values);
}

TEST(Protocol, SimulatedRunsAreBitReproducible) {
  std::vector<TrainingSlide> slides;
  for (int i = 0; i < 3; ++i) slides.push_back(make_slide("s" + std::to_string(i), 24, 24, 30 + static_cast<std::uint64_t>(i)));
  const auto pipe = augment::parse_pipeline("rot90 k=random\nmirror axis=random p=0.5\nelastic alpha=2 sigma=3\ncolor");
  const auto a = run_protocol(slides, tiny_cfg(), pipe, tiny_net(), {9, std::nullopt, {}});
  const auto b = run_protocol(slides, tiny_cfg(), pipe, tiny_net(), {9, std::nullopt, {}});
  const auto c = run_protocol(slides, tiny_cfg(), pipe, tiny_net(), {10, std::nullopt, {}});
  EXPECT_EQ(a.stats, b.stats);
  EXPECT_EQ(a.params.values, b.params.values);
  EXPECT_NE(a.params.values, c.params.values);
  EXPECT_EQ(stats_csv(a.stats), stats_csv(b.stats));
}

TEST(Protocol, QuotaConvergesForStationaryCostRatios) {
  const std::vector<TrainingSlide> slides{make_slide("s0", 32, 32, 40), make_slide("s1", 32, 32, 41)};
  for (double ratio : {1.0 / 8.0, 1.0, 8.0}) {
    auto cfg = tiny_cfg();
    cfg.batch_size = 8;
    cfg.k0 = 64;
    cfg.n_min = 16;
    // T_error / T_train = ratio at k = k0.
    cfg.cost_error_per_pixel = 1e-6;
    cfg.cost_train_per_patch = cfg.cost_error_per_pixel * 32 * 32 / (ratio * cfg.k0);
    // Enough iterations for roughly 50 steady-state cycles.
    const int k_steady = std::clamp(static_cast<int>(std::lround(cfg.k0 * ratio)), 8, 512);
    cfg.total_iterations = 50LL * (k_steady / 8);
    const auto r = run_protocol(slides, cfg, {}, tiny_net(), {1, std::nullopt, {}});
    ASSERT_GE(r.stats.size(), 31u) << "ratio " << ratio;
    for (std::size_t n = 30; n < r.stats.size(); ++n) {
      const auto& s = r.stats[n];
      const double idle = std::max(s.idle_error, s.idle_train);
      EXPECT_LT(idle / std::max(s.t_error, s.t_train), 0.2) << "ratio " << ratio << " cycle " << n;
    }
    EXPECT_EQ(r.stats.back().k_n, k_steady);
    if (ratio == 1.0) {
      for (std::size_t n = 5; n < r.stats.size(); ++n) EXPECT_LE(std::abs(r.stats[n].k_n - 64), 1);
    }
  }
}

TEST(Protocol, RealClockModeRunsAndKeepsVersionOrder) {
  std::vector<TrainingSlide> slides;
  for (int i = 0; i < 3; ++i) slides.push_back(make_slide("s" + std::to_string(i), 24, 24, 50 + static_cast<std::uint64_t>(i)));
  auto cfg = tiny_cfg();
  cfg.clock = ClockMode::real;
  const auto r = run_protocol(slides, cfg, {}, tiny_net(), {2, std::nullopt, {}});
  ASSERT_FALSE(r.stats.empty());
  EXPECT_EQ(r.stats.back().cumulative_iterations, cfg.total_iterations);
  for (std::size_t n = 0; n < r.stats.size(); ++n) {
    EXPECT_EQ(r.stats[n].snapshot_version, n);
    EXPECT_EQ(r.stats[n].map_version, n == 0 ? 0u : n - 1);
    EXPECT_GE(r.stats[n].t_error, 0.0);
    EXPECT_EQ(std::min(r.stats[n].idle_error, r.stats[n].idle_train), 0.0);
  }
}

TEST(Protocol, UniformBaselineUsesUniformCentersAndRoundRobinSlides) {
  std::vector<TrainingSlide> slides;
  for (int i = 0; i < 3; ++i) slides.push_back(make_slide("s" + std::to_string(i), 24, 24, 60 + static_cast<std::uint64_t>(i)));
  auto cfg = tiny_cfg();
  cfg.sampling = Sampling::uniform;
  const auto a = run_protocol(slides, cfg, {}, tiny_net(), {4, std::nullopt, {}});
  const auto b = run_protocol(slides, cfg, {}, tiny_net(), {4, std::nullopt, {}});
  EXPECT_EQ(a.stats, b.stats);
  EXPECT_EQ(a.stats.back().cumulative_iterations, cfg.total_iterations);
}

TEST(Protocol, ResumesFromGivenParameters) {
  const std::vector<TrainingSlide> slides{make_slide("s", 24, 24, 70)};
  auto cfg = tiny_cfg();
  cfg.total_iterations = 0;
  auto init = nn::init_params(tiny_net(), 99);
  init.values[0] = 0.123f;
  const auto r = run_protocol(slides, cfg, {}, tiny_net(), {1, init, {}});
  EXPECT_EQ(r.params.values, init.values);
}

TEST(LearningRate, CosineScheduleEndpointsAndConstant) {
  SamplerConfig c;
  c.learning_rate = 0.02;
  c.total_iterations = 100;
  EXPECT_EQ(c.learning_rate_at(0), 0.02);
  EXPECT_EQ(c.learning_rate_at(99), 0.02);
  c.lr_schedule = LrSchedule::cosine;
  EXPECT_EQ(c.learning_rate_at(0), 0.02);
  EXPECT_NEAR(c.learning_rate_at(50), 0.01, 1e-15);
  EXPECT_GT(c.learning_rate_at(99), 0.0);
  EXPECT_LT(c.learning_rate_at(99), 1e-5);
  for (long long t = 1; t < 100; ++t) EXPECT_LT(c.learning_rate_at(t), c.learning_rate_at(t - 1));
}

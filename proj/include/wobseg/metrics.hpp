#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wobseg/error.hpp"
#include "wobseg/image.hpp"

// Pixel-level evaluation on a 256-level probability grid. Histograms of
// (quantized probability, label) merge by addition, so curves over many
// slides stream in bounded memory.

namespace wobseg::metrics {

/// floor(p * 255), clamped to [0, 255].
inline std::uint8_t quantize(double p) {
  if (!(p > 0.0)) return 0;
  const double v = std::floor(p * 255.0);
  return v >= 255.0 ? 255 : static_cast<std::uint8_t>(v);
}

inline ByteImage quantize(const FloatImage& probs) {
  if (probs.channels() != 1) throw config_error("probability map must be single-channel");
  ByteImage out(probs.width(), probs.height(), 1);
  for (std::size_t i = 0; i < probs.storage().size(); ++i)
    out.storage()[i] = quantize(probs.storage()[i]);
  return out;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Counts per (bin, label).
struct Histogram {
  std::array<std::uint64_t, 256> negative{};
  std::array<std::uint64_t, 256> positive{};

  Histogram& operator+=(const Histogram& o) {
    for (std::size_t i = 0; i < 256; ++i) {
      negative[i] += o.negative[i];
      positive[i] += o.positive[i];
    }
    return *this;
  }
  bool operator==(const Histogram&) const = default;

  std::uint64_t positives() const {
    std::uint64_t n = 0;
    for (auto v : positive) n += v;
    return n;
  }
  std::uint64_t negatives() const {
    std::uint64_t n = 0;
    for (auto v : negative) n += v;
    return n;
  }
};

namespace detail {
inline void check_dims(const ByteImage& bins, const ByteImage& labels,
                       const ByteImage* domain) {
  if (!bins.same_shape(labels) || bins.channels() != 1 || labels.channels() != 1)
    throw config_error("prediction and label dims differ");
  if (domain && (!domain->same_shape(labels) || domain->channels() != 1))
    throw config_error("domain mask dims differ");
}
}  // namespace detail

/// Histogram of already-quantized bins. Pixels outside a non-null domain are
/// skipped.
inline Histogram accumulate_histogram(const ByteImage& bins, const ByteImage& labels,
                                      const ByteImage* domain = nullptr) {
  detail::check_dims(bins, labels, domain);
  Histogram h;
  for (std::size_t i = 0; i < bins.storage().size(); ++i) {
    if (domain && !domain->storage()[i]) continue;
    auto& row = labels.storage()[i] ? h.positive : h.negative;
    ++row[bins.storage()[i]];
  }
  return h;
}

inline Histogram accumulate_histogram(const FloatImage& probs, const ByteImage& labels,
                                      const ByteImage* domain = nullptr) {
  return accumulate_histogram(quantize(probs), labels, domain);
}

struct PrCurve {
  std::vector<double> thresholds;  // descending; first entry is above 1
  std::vector<double> precision, recall, f1;
  std::vector<ConfusionCounts> counts;
  double auc = 0.0;
};

inline double f1_score(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Sweeps thresholds 1+, 255/255, ..., 0/255 (positive iff bin/255 >= t).
/// auc is the average-precision step sum over that order.
inline PrCurve pr_curve_from_histogram(const Histogram& h) {
  const auto pos = h.positives(), neg = h.negatives();
  if (pos == 0) throw config_error("PR curve undefined: no positive pixels");
  PrCurve c;
  std::uint64_t tp = 0, fp = 0;
  const auto push = [&](double t) {
    const double prec = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double rec = static_cast<double>(tp) / static_cast<double>(pos);
    c.thresholds.push_back(t);
    c.precision.push_back(prec);
    c.recall.push_back(rec);
    c.f1.push_back(f1_score(prec, rec));
    c.counts.push_back({tp, fp, neg - fp, pos - tp});
  };
  push(std::nextafter(1.0, 2.0));
  for (int j = 255; j >= 0; --j) {
    tp += h.positive[static_cast<std::size_t>(j)];
    fp += h.negative[static_cast<std::size_t>(j)];
    push(j / 255.0);
  }
  for (std::size_t i = 1; i < c.thresholds.size(); ++i)
    c.auc += (c.recall[i] - c.recall[i - 1]) * c.precision[i];
  return c;
}

struct MaxF1 {
  double f1 = 0.0;
  double threshold = 1.0;
};

/// Ties go to the higher threshold.
inline MaxF1 max_f1(const PrCurve& c) {
  MaxF1 best{-1.0, 1.0};
  for (std::size_t i = 0; i < c.f1.size(); ++i)
    if (c.f1[i] > best.f1) best = {c.f1[i], c.thresholds[i]};
  if (best.f1 < 0.0) best = {0.0, 1.0};
  return best;
}

struct SlideMetrics {
  std::string slide_id;
  std::optional<double> sensitivity;  // needs positive pixels
  std::optional<double> specificity;  // needs negative pixels
  std::optional<double> f1;           // needs positive pixels
  double threshold = 0.5;
  ConfusionCounts counts;
};

inline ConfusionCounts count_at(const ByteImage& bins, const ByteImage& labels,
                                double threshold, const ByteImage* domain = nullptr) {
  detail::check_dims(bins, labels, domain);
  ConfusionCounts k;
  for (std::size_t i = 0; i < bins.storage().size(); ++i) {
    if (domain && !domain->storage()[i]) continue;
    const bool pred = bins.storage()[i] / 255.0 >= threshold;
    const bool y = labels.storage()[i] != 0;
    if (pred && y) ++k.tp;
    else if (pred) ++k.fp;
    else if (y) ++k.fn;
    else ++k.tn;
  }
  return k;
}

inline SlideMetrics metrics_from_counts(const ConfusionCounts& k, double threshold,
                                        std::string slide_id = {}) {
  SlideMetrics m;
  m.slide_id = std::move(slide_id);
  m.threshold = threshold;
  m.counts = k;
  const auto d = [](std::uint64_t a, std::uint64_t b) {
    return static_cast<double>(a) / static_cast<double>(b);
  };
  if (k.tp + k.fn > 0) {
    m.sensitivity = d(k.tp, k.tp + k.fn);
    m.f1 = d(2 * k.tp, 2 * k.tp + k.fp + k.fn);
  }
  if (k.tn + k.fp > 0) m.specificity = d(k.tn, k.tn + k.fp);
  return m;
}

inline SlideMetrics slide_metrics(const ByteImage& bins, const ByteImage& labels,
                                  double threshold, const ByteImage* domain = nullptr,
                                  std::string slide_id = {}) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw config_error("threshold must lie in [0,1]");
  return metrics_from_counts(count_at(bins, labels, threshold, domain), threshold,
                             std::move(slide_id));
}

inline SlideMetrics slide_metrics(const FloatImage& probs, const ByteImage& labels,
                                  double threshold, const ByteImage* domain = nullptr,
                                  std::string slide_id = {}) {
  return slide_metrics(quantize(probs), labels, threshold, domain, std::move(slide_id));
}

struct BoxStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  bool operator==(const BoxStats&) const = default;
};

/// Quartiles by linear interpolation between order statistics (inclusive).
inline BoxStats boxplot_stats(std::vector<double> values) {
  if (values.empty()) throw config_error("boxplot of an empty list");
  std::sort(values.begin(), values.end());
  const auto q = [&](double f) {
    const double h = f * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
  };
  return {values.front(), q(0.25), q(0.5), q(0.75), values.back()};
}

}  // namespace wobseg::metrics

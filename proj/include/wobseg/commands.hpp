#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wobseg/annotation.hpp"
#include "wobseg/augment.hpp"
#include "wobseg/error.hpp"
#include "wobseg/fcn.hpp"
#include "wobseg/hem.hpp"
#include "wobseg/metrics.hpp"
#include "wobseg/predict.hpp"
#include "wobseg/slide.hpp"
#include "wobseg/synthgen.hpp"

// Command implementations behind the wobseg executable. Each throws
// wobseg::Error on failure; the executable maps error kinds to exit codes.

namespace wobseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct Globals {
  std::optional<std::uint64_t> seed;  // overrides seeds in config files
  int threads = 1;
  bool verbose = false;
  std::ostream* out = &std::cout;
  std::ostream* log = &std::cerr;
};

namespace detail {

inline fs::path resolve(const fs::path& base_dir, const fs::path& p) {
  return p.is_absolute() ? p : base_dir / p;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create " + dir.string() + ": " + ec.message());
}

inline std::string read_text(const fs::path& p) {
  const auto bytes = wobseg::detail::read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth

struct SynthRequest {
  fs::path params_file;
  fs::path out_dir;
};

/// Params file: synth parameters plus n_train / n_test (defaults 8 / 4).
inline synth::Dataset cmd_synth(const Globals& g, const SynthRequest& r) {
  const auto j = wobseg::detail::read_json(r.params_file);
  if (!j.is_object()) throw config_error(r.params_file.string() + ": expected a JSON object");
  auto params = synth::params_from_json(j);
  if (g.seed) params.seed = *g.seed;
  int n_train = 8, n_test = 4;
  try {
    n_train = j.value("n_train", n_train);
    n_test = j.value("n_test", n_test);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(r.params_file.string() + ": " + e.what());
  }
  detail::ensure_dir(r.out_dir);
  auto ds = synth::generate_dataset(params, n_train, n_test, r.out_dir);
  *g.out << "wrote " << ds.slides.size() << " slides to " << r.out_dir.string() << "\n";
  return ds;
}

// ---------------------------------------------------------------------------
// annotate

struct AnnotateRequest {
  fs::path slide_dir;
  annotation::Settings settings;
  std::optional<std::string> override_mask;  // name of a mask layer in the slide
  std::optional<fs::path> out_dir;           // defaults to the input slide
};

/// Stores "wob_generated" on every level. Returns the IoU against "wob" when
/// that layer exists.
inline std::optional<double> cmd_annotate(const Globals& g, const AnnotateRequest& r) {
  auto slide = open_slide(r.slide_dir);
  for (auto role : {ChannelRole::epithelial, ChannelRole::basal, ChannelRole::amacr})
    slide.channel(role);
  const ByteImage* override_mask = nullptr;
  if (r.override_mask) override_mask = &slide.mask(*r.override_mask, 0);
  auto mask = annotation::generate_wob_mask(slide, 0, r.settings, override_mask);
  ByteImage level_mask = mask;
  slide.set_mask("wob_generated", 0, level_mask);
  for (int li = 1; li < static_cast<int>(slide.levels.size()); ++li) {
    level_mask = downsample_mask(level_mask);
    slide.set_mask("wob_generated", li, level_mask);
  }
  save_slide(slide, r.out_dir.value_or(r.slide_dir));
  if (!slide.has_mask("wob", 0)) return std::nullopt;
  const double score = annotation::iou(mask, slide.mask("wob", 0));
  *g.out << "IoU vs wob: " << detail::fmt(score) << "\n";
  return score;
}

// ---------------------------------------------------------------------------
// train

inline hem::SamplerConfig sampler_from_json(const json& j) {
  auto c = hem::SamplerConfig::desk();
  try {
    c.patch_size = j.value("patch_size", c.patch_size);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.k0 = j.value("k0", c.k0);
    c.n_min = j.value("n_min", c.n_min);
    c.capacity = j.value("capacity", c.capacity);
    c.k_min = j.value("k_min", c.k_min);
    c.k_max = j.value("k_max", c.k_max);
    c.eps_floor = j.value("eps_floor", c.eps_floor);
    c.class_balance = j.value("class_balance", c.class_balance);
    c.level_mpp = j.value("level_mpp", c.level_mpp);
    c.total_iterations = j.value("total_iterations", c.total_iterations);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.cost_error_per_pixel = j.value("cost_error_per_pixel", c.cost_error_per_pixel);
    c.cost_train_per_patch = j.value("cost_train_per_patch", c.cost_train_per_patch);
    c.restrict_to_tissue = j.value("restrict_to_tissue", c.restrict_to_tissue);
    const auto clock = j.value("clock", std::string("simulated"));
    if (clock == "simulated") c.clock = hem::ClockMode::simulated;
    else if (clock == "real") c.clock = hem::ClockMode::real;
    else throw config_error("clock must be \"simulated\" or \"real\"");
    const auto schedule = j.value(
        "lr_schedule", std::string(c.lr_schedule == hem::LrSchedule::cosine ? "cosine" : "constant"));
    if (schedule == "constant") c.lr_schedule = hem::LrSchedule::constant;
    else if (schedule == "cosine") c.lr_schedule = hem::LrSchedule::cosine;
    else throw config_error("lr_schedule must be \"constant\" or \"cosine\"");
    const auto sampling = j.value("sampling", std::string("error_weighted"));
    if (sampling == "error_weighted") c.sampling = hem::Sampling::error_weighted;
    else if (sampling == "uniform") c.sampling = hem::Sampling::uniform;
    else throw config_error("sampling must be \"error_weighted\" or \"uniform\"");
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("sampler config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json sampler_to_json(const hem::SamplerConfig& c) {
  return {{"patch_size", c.patch_size},
          {"batch_size", c.batch_size},
          {"k0", c.k0},
          {"n_min", c.n_min},
          {"capacity", c.capacity},
          {"k_min", c.k_min},
          {"k_max", c.k_max},
          {"eps_floor", c.eps_floor},
          {"class_balance", c.class_balance},
          {"level_mpp", c.level_mpp},
          {"total_iterations", c.total_iterations},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"grad_clip", c.grad_clip},
          {"lr_schedule", c.lr_schedule == hem::LrSchedule::cosine ? "cosine" : "constant"},
          {"clock", c.clock == hem::ClockMode::simulated ? "simulated" : "real"},
          {"cost_error_per_pixel", c.cost_error_per_pixel},
          {"cost_train_per_patch", c.cost_train_per_patch},
          {"sampling", c.sampling == hem::Sampling::uniform ? "uniform" : "error_weighted"},
          {"restrict_to_tissue", c.restrict_to_tissue}};
}

/// Training run description; relative paths resolve against `base_dir`.
struct RunConfig {
  fs::path dataset;
  std::string split = "train";
  std::string mask = "wob";
  std::optional<fs::path> augment;
  hem::SamplerConfig sampler = hem::SamplerConfig::desk();
  std::uint64_t seed = 0;
  fs::path output;
  std::optional<fs::path> stats;
};

inline RunConfig load_run_config(const fs::path& path) {
  const auto j = wobseg::detail::read_json(path);
  if (!j.is_object()) throw config_error(path.string() + ": expected a JSON object");
  const auto dir = path.parent_path();
  RunConfig rc;
  try {
    rc.dataset = detail::resolve(dir, j.at("dataset").get<std::string>());
    rc.split = j.value("split", rc.split);
    rc.mask = j.value("mask", rc.mask);
    if (j.contains("augment"))
      rc.augment = detail::resolve(dir, j.at("augment").get<std::string>());
    rc.sampler = sampler_from_json(j.value("sampler", json::object()));
    rc.seed = j.value("seed", rc.seed);
    rc.output = detail::resolve(dir, j.at("output").get<std::string>());
    if (j.contains("stats")) rc.stats = detail::resolve(dir, j.at("stats").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw config_error(path.string() + ": " + e.what());
  }
  return rc;
}

struct TrainRequest {
  RunConfig run;
  std::optional<fs::path> init_from;
  std::optional<fs::path> compound_base;  // base params; trains the head
};

inline hem::RunResult cmd_train(const Globals& g, const TrainRequest& r) {
  const auto& rc = r.run;
  const bool compound = r.compound_base.has_value();
  const auto net = compound ? nn::FcnConfig::reference_head() : nn::FcnConfig::reference_base();
  auto sampler = rc.sampler;
  sampler.threads = g.threads;
  if (compound) sampler.level_mpp = predict::kHeadMpp;

  augment::AugmentPipeline pipeline;
  if (rc.augment) pipeline = augment::parse_pipeline(detail::read_text(*rc.augment));

  std::optional<nn::Params> base;
  if (compound) base = nn::load_params(*r.compound_base, nn::FcnConfig::reference_base());
  hem::ProtocolOptions opt;
  opt.seed = g.seed.value_or(rc.seed);
  if (r.init_from) opt.init = nn::load_params(*r.init_from, net);

  const auto ds = synth::load_dataset(rc.dataset);
  std::vector<hem::TrainingSlide> slides;
  for (const auto& e : ds.split(rc.split)) {
    const auto slide = open_slide(ds.resolve(e));
    predict::TileSpec spec;
    spec.threads = g.threads;
    slides.push_back(compound ? hem::compound_training_slide(*base, slide, rc.mask, spec)
                              : hem::training_slide(slide, sampler.level_mpp, rc.mask));
  }
  if (slides.empty()) throw config_error("split '" + rc.split + "' is empty");

  if (g.verbose)
    opt.on_cycle = [&g](const hem::CycleStats& s) {
      *g.log << "cycle " << s.cycle << " k=" << s.k_n << " iters="
             << s.cumulative_iterations << " loss=" << detail::fmt(s.loss_mean) << "\n";
    };
  auto result = hem::run_protocol(slides, sampler, pipeline, net, opt);
  if (rc.output.has_parent_path()) detail::ensure_dir(rc.output.parent_path());
  nn::save_params(result.params, rc.output);
  if (rc.stats) {
    if (rc.stats->has_parent_path()) detail::ensure_dir(rc.stats->parent_path());
    wobseg::detail::write_text(*rc.stats, hem::stats_csv(result.stats));
  }
  *g.out << "trained " << (result.stats.empty() ? 0 : result.stats.back().cumulative_iterations)
         << " iterations over " << result.stats.size() << " cycles; params -> "
         << rc.output.string() << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// predict

/// Stored prediction: bins floor(p * 255) as a raw byte plane plus metadata.
struct StoredPrediction {
  std::string slide_id;
  fs::path source;
  int level_index = 0;
  double mpp = 0.0;
  ByteImage bins;
};

inline void save_prediction(const StoredPrediction& p, const fs::path& dir) {
  detail::ensure_dir(dir);
  wobseg::detail::write_file(dir / "prob.raw", p.bins.storage());
  const json m = {{"id", p.slide_id},
                  {"source", p.source.string()},
                  {"level_index", p.level_index},
                  {"mpp", p.mpp},
                  {"width", p.bins.width()},
                  {"height", p.bins.height()},
                  {"file", "prob.raw"},
                  {"encoding", "floor(p*255)"}};
  wobseg::detail::write_text(dir / "prediction.json", m.dump(2) + "\n");
}

inline StoredPrediction load_prediction(const fs::path& dir) {
  const auto m = wobseg::detail::read_json(dir / "prediction.json");
  StoredPrediction p;
  try {
    p.slide_id = m.at("id").get<std::string>();
    p.source = m.value("source", std::string());
    p.level_index = m.value("level_index", 0);
    p.mpp = m.at("mpp").get<double>();
    p.bins = wobseg::detail::read_plane(dir / m.at("file").get<std::string>(),
                                        m.at("width").get<int>(), m.at("height").get<int>(), 1);
  } catch (const nlohmann::json::exception& e) {
    throw config_error((dir / "prediction.json").string() + ": " + e.what());
  }
  return p;
}

struct PredictRequest {
  fs::path params;
  fs::path slide_dir;
  fs::path out_dir;
  std::optional<fs::path> compound_base;  // when set, `params` is the head
  double level_mpp = 1.0;
  int tile = 256;
};

inline StoredPrediction cmd_predict(const Globals& g, const PredictRequest& r) {
  const auto slide = open_slide(r.slide_dir);
  predict::TileSpec spec;
  spec.tile = r.tile;
  spec.threads = g.threads;
  predict::ProbMap map;
  if (r.compound_base) {
    const auto head = nn::load_params(r.params, nn::FcnConfig::reference_head());
    const auto base = nn::load_params(*r.compound_base, nn::FcnConfig::reference_base());
    map = predict::compound_predict(base, head, slide, spec);
  } else {
    const auto params = nn::load_params(r.params, nn::FcnConfig::reference_base());
    map = predict::predict_slide(params, slide, r.level_mpp, spec);
  }
  StoredPrediction p{slide.id, fs::absolute(r.slide_dir), slide.level_index(map.mpp), map.mpp,
                     metrics::quantize(map.probs)};
  save_prediction(p, r.out_dir);
  *g.out << "prediction for " << slide.id << " at " << map.mpp << " mpp -> "
         << r.out_dir.string() << "\n";
  return p;
}

// ---------------------------------------------------------------------------
// eval

enum class Domain { all, tissue };

struct EvalRequest {
  fs::path listing;  // JSON array of {"slide": dir, "prediction": dir}
  fs::path out_dir;
  double threshold = 0.5;
  Domain domain = Domain::all;
  std::string mask = "wob";
};

struct EvalReport {
  metrics::PrCurve curve;
  metrics::MaxF1 best;
  std::vector<metrics::SlideMetrics> slides;
};

inline EvalReport cmd_eval(const Globals& g, const EvalRequest& r) {
  if (!(r.threshold >= 0.0 && r.threshold <= 1.0))
    throw config_error("threshold must lie in [0,1]");
  const auto listing = wobseg::detail::read_json(r.listing);
  if (!listing.is_array()) throw config_error(r.listing.string() + ": expected a JSON array");
  const auto dir = r.listing.parent_path();
  metrics::Histogram hist;
  EvalReport report;
  for (const auto& item : listing) {
    fs::path slide_dir, pred_dir;
    try {
      slide_dir = detail::resolve(dir, item.at("slide").get<std::string>());
      pred_dir = detail::resolve(dir, item.at("prediction").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw config_error(r.listing.string() + ": " + e.what());
    }
    const auto slide = open_slide(slide_dir);
    const auto pred = load_prediction(pred_dir);
    const auto li = slide.find_level(pred.mpp);
    if (!li || !slide.has_mask(r.mask, *li))
      throw config_error("slide '" + slide.id + "' has no ground truth '" + r.mask +
                         "' at " + detail::fmt(pred.mpp) + " mpp");
    const auto& labels = slide.mask(r.mask, *li);
    const ByteImage* domain = nullptr;
    if (r.domain == Domain::tissue) {
      if (!slide.has_mask("tissue", *li))
        throw config_error("slide '" + slide.id + "' has no tissue mask");
      domain = &slide.mask("tissue", *li);
    }
    if (!pred.bins.same_shape(labels))
      throw config_error("prediction for '" + slide.id + "' does not match level geometry");
    hist += metrics::accumulate_histogram(pred.bins, labels, domain);
    report.slides.push_back(
        metrics::slide_metrics(pred.bins, labels, r.threshold, domain, slide.id));
  }
  if (report.slides.empty()) throw config_error("evaluation listing is empty");
  report.curve = metrics::pr_curve_from_histogram(hist);
  report.best = metrics::max_f1(report.curve);

  detail::ensure_dir(r.out_dir);
  std::string csv = "threshold,precision,recall,f1\n";
  for (std::size_t i = 0; i < report.curve.thresholds.size(); ++i)
    csv += detail::fmt(report.curve.thresholds[i]) + "," +
           detail::fmt(report.curve.precision[i]) + "," +
           detail::fmt(report.curve.recall[i]) + "," + detail::fmt(report.curve.f1[i]) + "\n";
  wobseg::detail::write_text(r.out_dir / "pr_curve.csv", csv);

  const json summary = {{"auc", report.curve.auc},
                        {"auc_rule", "average precision (step sum over descending thresholds)"},
                        {"max_f1", report.best.f1},
                        {"max_f1_threshold", report.best.threshold},
                        {"threshold", r.threshold},
                        {"domain", r.domain == Domain::all ? "all" : "tissue"},
                        {"positives", hist.positives()},
                        {"negatives", hist.negatives()},
                        {"slides", report.slides.size()}};
  wobseg::detail::write_text(r.out_dir / "summary.json", summary.dump(2) + "\n");

  const auto opt = [](const std::optional<double>& v) {
    return v ? detail::fmt(*v) : std::string();
  };
  std::string per = "slide,sensitivity,specificity,f1,sensitivity_defined,specificity_defined,f1_defined\n";
  std::vector<double> sens, spec, f1s;
  for (const auto& m : report.slides) {
    per += m.slide_id + "," + opt(m.sensitivity) + "," + opt(m.specificity) + "," +
           opt(m.f1) + "," + (m.sensitivity ? "1" : "0") + "," +
           (m.specificity ? "1" : "0") + "," + (m.f1 ? "1" : "0") + "\n";
    if (m.sensitivity) sens.push_back(*m.sensitivity);
    if (m.specificity) spec.push_back(*m.specificity);
    if (m.f1) f1s.push_back(*m.f1);
  }
  wobseg::detail::write_text(r.out_dir / "per_slide.csv", per);

  std::string box = "metric,n,min,q1,median,q3,max\n";
  for (const auto& [name, values] :
       {std::pair{"sensitivity", sens}, std::pair{"specificity", spec}, std::pair{"f1", f1s}}) {
    if (values.empty()) continue;
    const auto b = metrics::boxplot_stats(values);
    box += std::string(name) + "," + std::to_string(values.size()) + "," + detail::fmt(b.min) +
           "," + detail::fmt(b.q1) + "," + detail::fmt(b.median) + "," + detail::fmt(b.q3) +
           "," + detail::fmt(b.max) + "\n";
  }
  wobseg::detail::write_text(r.out_dir / "boxplot.csv", box);

  *g.out << "PR AUC " << detail::fmt(report.curve.auc) << " (average precision), max F1 "
         << detail::fmt(report.best.f1) << " at threshold "
         << detail::fmt(report.best.threshold) << "\n";
  return report;
}

}  // namespace wobseg::cli

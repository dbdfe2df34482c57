// wobseg command-line tool: synth, annotate, train, predict, eval.
// Exit codes: 0 success, 1 configuration/validation, 2 I/O, 3 infeasible run.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "wobseg/commands.hpp"

namespace fs = std::filesystem;
using namespace wobseg;

int main(int argc, char** argv) {
  CLI::App app{"WOB segmentation toolkit: synthetic slides, mask generation, "
               "hard-example-mining training, prediction and evaluation"};
  app.require_subcommand(1);

  cli::Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt =
      app.add_option("--seed", seed, "Master seed; overrides seeds in config files (default 0)");
  app.add_option("--threads", g.threads, "Tile-prediction threads")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "Progress output on stderr");

  // synth
  cli::SynthRequest synth_req;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("params", synth_req.params_file, "Synthesis parameter file (JSON)")->required();
  synth->add_option("--out", synth_req.out_dir, "Output directory")->required();

  // annotate
  cli::AnnotateRequest ann_req;
  std::string ann_out;
  auto* annotate = app.add_subcommand("annotate", "Generate a WOB mask from IF channels");
  annotate->add_option("slide", ann_req.slide_dir, "Slide directory")->required();
  annotate->add_option("--sigma", ann_req.settings.sigma_um, "Density filter sigma (um)");
  annotate->add_option("--eps", ann_req.settings.eps, "Ratio heatmap epsilon");
  annotate->add_option("--tau", ann_req.settings.tau, "Binarization threshold");
  annotate->add_option("--min-area", ann_req.settings.min_area_um2, "Minimum component area (um^2)");
  annotate->add_option("--tissue-tau", ann_req.settings.tissue_tau, "Epithelial density floor");
  annotate->add_option("--agree-delta", ann_req.settings.agree_delta, "Heatmap agreement band");
  auto* override_opt = annotate->add_option("--override", "Mask layer unioned into the result");
  annotate->add_option("--out", ann_out, "Write the annotated slide here instead of in place");

  // train
  fs::path run_config;
  std::string init_from, train_compound;
  auto* train = app.add_subcommand("train", "Train with hard example mining");
  train->add_option("config", run_config, "Run configuration (JSON)")->required();
  train->add_option("--init-from", init_from, "Start from these parameters (finetuning)");
  train->add_option("--compound", train_compound, "Base parameters; trains the compound head");

  // predict
  cli::PredictRequest pred_req;
  std::string pred_compound;
  auto* predict = app.add_subcommand("predict", "Predict a probability map for one slide");
  predict->add_option("--params", pred_req.params, "Parameter file (head when --compound)")->required();
  predict->add_option("--slide", pred_req.slide_dir, "Slide directory")->required();
  predict->add_option("--out", pred_req.out_dir, "Output directory")->required();
  predict->add_option("--compound", pred_compound, "Base parameters for compound prediction");
  predict->add_option("--level-mpp", pred_req.level_mpp, "Level for single-model prediction");
  predict->add_option("--tile", pred_req.tile, "Tile size in pixels");

  // eval
  cli::EvalRequest eval_req;
  std::string domain = "all";
  auto* eval = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  eval->add_option("listing", eval_req.listing, "JSON list of {slide, prediction}")->required();
  eval->add_option("--out", eval_req.out_dir, "Report directory")->required();
  eval->add_option("--threshold", eval_req.threshold, "Fixed threshold for per-slide metrics");
  eval->add_option("--domain", domain, "all or tissue")->check(CLI::IsMember({"all", "tissue"}));
  eval->add_option("--mask", eval_req.mask, "Ground-truth mask layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*synth) {
      cli::cmd_synth(g, synth_req);
    } else if (*annotate) {
      if (override_opt->count() > 0) ann_req.override_mask = override_opt->as<std::string>();
      if (!ann_out.empty()) ann_req.out_dir = ann_out;
      cli::cmd_annotate(g, ann_req);
    } else if (*train) {
      cli::TrainRequest req{cli::load_run_config(run_config), std::nullopt, std::nullopt};
      if (!init_from.empty()) req.init_from = init_from;
      if (!train_compound.empty()) req.compound_base = train_compound;
      cli::cmd_train(g, req);
    } else if (*predict) {
      if (!pred_compound.empty()) pred_req.compound_base = pred_compound;
      cli::cmd_predict(g, pred_req);
    } else if (*eval) {
      eval_req.domain = domain == "tissue" ? cli::Domain::tissue : cli::Domain::all;
      cli::cmd_eval(g, eval_req);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

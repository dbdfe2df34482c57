#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "wobseg/commands.hpp"

using namespace wobseg;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

/// Runs the wobseg executable with `args`, capturing stdout and stderr.
RunResult run(const wobseg::testing::TempDir& tmp, const std::string& args) {
  const auto out = tmp / "stdout.txt", err = tmp / "stderr.txt";
  const std::string cmd = std::string("'") + WOBSEG_CLI_PATH + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

const char* kSmallParams = R"({
  "width_um": 160,
  "height_um": 128,
  "gland_count_min": 1,
  "gland_count_max": 2,
  "gland_radius_min_um": 20,
  "gland_radius_max_um": 25,
  "decoy_count_min": 1,
  "decoy_count_max": 2,
  "idcp_probability": 0.5,
  "n_train": 2,
  "n_test": 1
}
)";

/// Byte contents of every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

/// Synthesizes the small dataset into tmp/ds and returns its first slide dir.
fs::path small_dataset(const wobseg::testing::TempDir& tmp) {
  spit(tmp / "params.json", kSmallParams);
  const auto r = run(tmp, "--seed 3 synth " + q(tmp / "params.json") + " --out " + q(tmp / "ds"));
  EXPECT_EQ(r.code, 0) << r.err;
  return tmp / "ds" / (synth::slide_name(0) + ".slab");
}

}  // namespace

TEST(Cli, SynthSameSeedGivesIdenticalBytes) {
  wobseg::testing::TempDir tmp;
  spit(tmp / "params.json", kSmallParams);
  ASSERT_EQ(run(tmp, "--seed 5 synth " + q(tmp / "params.json") + " --out " + q(tmp / "a")).code, 0);
  ASSERT_EQ(run(tmp, "--seed 5 synth " + q(tmp / "params.json") + " --out " + q(tmp / "b")).code, 0);
  EXPECT_TRUE(fs::exists(tmp / "a" / "dataset.json"));
  const auto a = tree(tmp / "a");
  EXPECT_EQ(a, tree(tmp / "b"));
  EXPECT_GT(a.size(), 3u);
  ASSERT_EQ(run(tmp, "--seed 6 synth " + q(tmp / "params.json") + " --out " + q(tmp / "c")).code, 0);
  EXPECT_NE(a, tree(tmp / "c"));
}

TEST(Cli, MalformedParamsExitOneWithLineNumber) {
  wobseg::testing::TempDir tmp;
  spit(tmp / "bad.json", "{\n  \"width_um\": 160,\n  oops\n}\n");
  const auto r = run(tmp, "synth " + q(tmp / "bad.json") + " --out " + q(tmp / "ds"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;

  spit(tmp / "range.json", R"({"gland_count_min": 5, "gland_count_max": 2})");
  EXPECT_EQ(run(tmp, "synth " + q(tmp / "range.json") + " --out " + q(tmp / "ds")).code, 1);
  EXPECT_EQ(run(tmp, "synth " + q(tmp / "missing.json") + " --out " + q(tmp / "ds")).code, 2);
  EXPECT_EQ(run(tmp, "frobnicate").code, 1);
}

TEST(Cli, AnnotatePrintsIouAndLeavesInputUntouchedWithOut) {
  wobseg::testing::TempDir tmp;
  const auto slide_dir = small_dataset(tmp);
  const auto before = tree(slide_dir);
  const auto r = run(tmp, "annotate " + q(slide_dir) + " --out " + q(tmp / "annotated"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("IoU vs wob: "), std::string::npos);
  EXPECT_EQ(tree(slide_dir), before);
  const auto annotated = open_slide(tmp / "annotated");
  for (int li = 0; li < static_cast<int>(annotated.levels.size()); ++li)
    EXPECT_TRUE(annotated.has_mask("wob_generated", li));
  const auto original = open_slide(slide_dir);
  const double expected = annotation::iou(
      annotation::generate_wob_mask(original, 0, annotation::Settings{}, nullptr),
      original.mask("wob", 0));
  EXPECT_NEAR(std::stod(r.out.substr(r.out.find(": ") + 2)), expected, 1e-9);
}

TEST(Cli, AnnotateOverrideAndMissingChannel) {
  wobseg::testing::TempDir tmp;
  const auto slide_dir = small_dataset(tmp);
  auto slide = open_slide(slide_dir);
  ByteImage all(slide.level(0).image.width(), slide.level(0).image.height(), 1, 1);
  slide.set_mask("everything", 0, all);
  save_slide(slide, tmp / "with_override");
  ASSERT_EQ(run(tmp, "annotate " + q(tmp / "with_override") + " --override everything").code, 0);
  EXPECT_EQ(open_slide(tmp / "with_override").mask("wob_generated", 0), all);

  for (auto it = slide.channel_roles.begin(); it != slide.channel_roles.end();) {
    if (it->second == ChannelRole::amacr)
      it = slide.channel_roles.erase(it);
    else
      ++it;
  }
  save_slide(slide, tmp / "no_amacr");
  const auto r = run(tmp, "annotate " + q(tmp / "no_amacr"));
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, PredictLevelsAndHashMismatch) {
  wobseg::testing::TempDir tmp;
  const auto slide_dir = small_dataset(tmp);
  nn::save_params(nn::init_params(nn::FcnConfig::reference_base(), 1), tmp / "base.params");
  nn::save_params(nn::init_params(nn::FcnConfig::reference_head(), 2), tmp / "head.params");

  ASSERT_EQ(run(tmp, "predict --params " + q(tmp / "base.params") + " --slide " + q(slide_dir) +
                         " --out " + q(tmp / "p1")).code, 0);
  const auto p1 = cli::load_prediction(tmp / "p1");
  EXPECT_EQ(p1.mpp, 1.0);
  const auto slide = open_slide(slide_dir);
  EXPECT_TRUE(p1.bins.same_shape(slide.level(slide.level_index(1.0)).image));

  ASSERT_EQ(run(tmp, "predict --params " + q(tmp / "head.params") + " --compound " +
                         q(tmp / "base.params") + " --slide " + q(slide_dir) + " --out " +
                         q(tmp / "p2")).code, 0);
  const auto p2 = cli::load_prediction(tmp / "p2");
  EXPECT_EQ(p2.mpp, 2.0);
  EXPECT_TRUE(p2.bins.same_shape(slide.level(slide.level_index(2.0)).image));

  EXPECT_EQ(run(tmp, "predict --params " + q(tmp / "head.params") + " --slide " + q(slide_dir) +
                         " --out " + q(tmp / "p3")).code, 1);
  EXPECT_EQ(run(tmp, "predict --params " + q(tmp / "base.params") + " --slide " + q(slide_dir) +
                         " --level-mpp 4 --out " + q(tmp / "p4")).code, 1);
}

TEST(Cli, EvalAnchorsAndMissingGroundTruth) {
  wobseg::testing::TempDir tmp;
  const auto slide_dir = small_dataset(tmp);
  const auto slide = open_slide(slide_dir);
  const auto& labels = slide.mask("wob", 0);
  std::size_t positives = 0;
  for (auto v : labels.storage()) positives += v != 0;
  ASSERT_GT(positives, 0u);

  ByteImage perfect(labels.width(), labels.height(), 1), constant(labels.width(), labels.height(), 1, 127);
  for (std::size_t i = 0; i < labels.storage().size(); ++i)
    perfect.storage()[i] = labels.storage()[i] ? 255 : 0;
  cli::save_prediction({slide.id, slide_dir, 0, slide.level(0).mpp, perfect}, tmp / "perfect");
  cli::save_prediction({slide.id, slide_dir, 0, slide.level(0).mpp, constant}, tmp / "constant");
  const auto listing = [&](const std::string& pred) {
    return nlohmann::json::array({{{"slide", slide_dir.string()}, {"prediction", pred}}}).dump();
  };
  spit(tmp / "perfect.json", listing("perfect"));
  spit(tmp / "constant.json", listing("constant"));

  ASSERT_EQ(run(tmp, "eval " + q(tmp / "perfect.json") + " --out " + q(tmp / "r1")).code, 0);
  const auto s1 = wobseg::detail::read_json(tmp / "r1" / "summary.json");
  EXPECT_EQ(s1.at("auc").get<double>(), 1.0);
  EXPECT_EQ(s1.at("max_f1").get<double>(), 1.0);
  for (const char* f : {"pr_curve.csv", "per_slide.csv", "boxplot.csv"})
    EXPECT_TRUE(fs::exists(tmp / "r1" / f)) << f;

  ASSERT_EQ(run(tmp, "eval " + q(tmp / "constant.json") + " --out " + q(tmp / "r2")).code, 0);
  const auto s2 = wobseg::detail::read_json(tmp / "r2" / "summary.json");
  EXPECT_DOUBLE_EQ(s2.at("auc").get<double>(),
                   static_cast<double>(positives) / static_cast<double>(labels.storage().size()));

  const auto r = run(tmp, "eval " + q(tmp / "perfect.json") + " --mask nothing --out " + q(tmp / "r3"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(slide.id), std::string::npos) << r.err;
}

TEST(Cli, TrainWritesParamsAndStatsAndReportsExitCodes) {
  wobseg::testing::TempDir tmp;
  small_dataset(tmp);
  const auto config = [&](const std::string& sampler, const std::string& out) {
    return nlohmann::json{{"dataset", (tmp / "ds" / "dataset.json").string()},
                          {"output", out + ".params"},
                          {"stats", out + ".csv"},
                          {"sampler", nlohmann::json::parse(sampler)}}
        .dump(2);
  };
  spit(tmp / "run.json", config(R"({"patch_size": 16, "batch_size": 2, "total_iterations": 12})", "run"));
  const auto r = run(tmp, "train " + q(tmp / "run.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto params = nn::load_params(tmp / "run.params", nn::FcnConfig::reference_base());
  EXPECT_EQ(params.values.size(), nn::FcnConfig::reference_base().param_count());
  const auto csv = slurp(tmp / "run.csv");
  EXPECT_GT(std::count(csv.begin(), csv.end(), '\n'), 1);

  // Same flags, same seed: identical parameter bytes.
  spit(tmp / "again.json", config(R"({"patch_size": 16, "batch_size": 2, "total_iterations": 12})", "again"));
  ASSERT_EQ(run(tmp, "train " + q(tmp / "again.json")).code, 0);
  EXPECT_EQ(slurp(tmp / "run.params"), slurp(tmp / "again.params"));

  nn::save_params(nn::init_params(nn::FcnConfig::reference_head(), 2), tmp / "head.params");
  EXPECT_EQ(run(tmp, "train " + q(tmp / "run.json") + " --init-from " + q(tmp / "head.params")).code, 1);
  EXPECT_EQ(run(tmp, "train " + q(tmp / "run.json") + " --init-from " + q(tmp / "run.params")).code, 0);

  spit(tmp / "infeasible.json",
       config(R"({"patch_size": 16, "batch_size": 2, "n_min": 40, "capacity": 10})", "x"));
  EXPECT_EQ(run(tmp, "train " + q(tmp / "infeasible.json")).code, 3);
  spit(tmp / "badlr.json", config(R"({"learning_rate": -1})", "x"));
  EXPECT_EQ(run(tmp, "train " + q(tmp / "badlr.json")).code, 1);
}

TEST(Cli, ShippedConfigsLoad) {
  const fs::path dir = WOBSEG_CONFIG_DIR;
  for (const char* name : {"synth_desk.json", "synth_biopsy.json"})
    EXPECT_NO_THROW(synth::params_from_json(wobseg::detail::read_json(dir / name))) << name;
  EXPECT_FALSE(augment::parse_pipeline(slurp(dir / "augment.txt")).ops.empty());
  for (const char* name : {"train_base.json", "train_head.json", "train_finetune.json",
                           "train_uniform.json"}) {
    const auto rc = cli::load_run_config(dir / name);
    EXPECT_EQ(rc.sampler.patch_size, 64) << name;
    EXPECT_TRUE(rc.augment.has_value()) << name;
  }
  EXPECT_EQ(cli::load_run_config(dir / "train_head.json").sampler.level_mpp, 2.0);
  EXPECT_EQ(cli::load_run_config(dir / "train_uniform.json").sampler.sampling,
            hem::Sampling::uniform);
}

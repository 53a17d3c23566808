#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "m3l/eval/eval.hpp"
#include "test_support.hpp"

namespace m3l {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("m3l_eval_" + name);
  fs::remove_all(p);
  return p;
}

/// Tiny m3l run with two cycles, trained once per test binary.
const std::string& trained_run() {
  static const std::string dir = [] {
    const fs::path d = fresh_dir("run");
    RunConfig cfg = testing::tiny_run_config(d.string());
    cfg.env.max_steps = 12;
    train::Trainer(cfg).train();
    return d.string();
  }();
  return dir;
}

eval::EvalOptions small_options(const std::string& split = "test") {
  eval::EvalOptions o;
  o.split = split;
  o.episodes_per_checkpoint = 5;
  o.lockstep = 3;
  return o;
}

std::set<std::string> ids_of(env::Split split) {
  std::set<std::string> out;
  for (const auto& s : env::default_library().shapes()) {
    if (s.split == split) out.insert(s.id);
  }
  return out;
}

TEST(Eval, DeterministicReport) {
  const auto a = eval::evaluate({trained_run()}, small_options());
  const auto b = eval::evaluate({trained_run()}, small_options());
  EXPECT_EQ(a.to_json(true).dump(), b.to_json(true).dump());
}

TEST(Eval, ReportArithmetic) {
  const auto r = eval::evaluate({trained_run()}, small_options("train"));
  ASSERT_EQ(r.per_checkpoint.size(), 2u);  // two kept checkpoints
  EXPECT_EQ(r.episodes, 2 * 5);
  int successes = 0;
  for (const auto& c : r.per_checkpoint) {
    EXPECT_EQ(c.episodes, 5);
    EXPECT_EQ(c.success_rate, static_cast<double>(c.successes) / c.episodes);
    successes += c.successes;
  }
  EXPECT_EQ(r.successes, successes);
  EXPECT_EQ(r.success_rate, static_cast<double>(r.successes) / r.episodes);
  EXPECT_GE(r.success_rate, 0.0);
  EXPECT_LE(r.success_rate, 1.0);
  EXPECT_EQ(r.mode, "m3l");
  EXPECT_EQ(r.seeds, std::vector<std::uint64_t>{0});
  // the same task list for every checkpoint of a seed
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.per_checkpoint[0].results[i].peg_id, r.per_checkpoint[1].results[i].peg_id);
}

TEST(Eval, SplitHygiene) {
  const auto test_ids = ids_of(env::Split::test);
  ASSERT_EQ(test_ids.size(), 2u);
  std::ifstream log(fs::path(trained_run()) / "tasks.log");
  int lines = 0;
  for (std::string id; std::getline(log, id); ++lines) EXPECT_EQ(test_ids.count(id), 0u) << id;
  EXPECT_GT(lines, 0);

  const auto r = eval::evaluate({trained_run()}, small_options("test"));
  for (const auto& c : r.per_checkpoint) {
    for (const auto& e : c.results) EXPECT_EQ(test_ids.count(e.peg_id), 1u) << e.peg_id;
  }
}

TEST(Eval, PolicyThatNeverMovesNeverSucceeds) {
  const fs::path dir = fresh_dir("still");
  RunConfig cfg = testing::tiny_run_config(dir.string());
  cfg.env.max_steps = 20;
  train::Trainer t(cfg);
  for (const auto& p : t.model().parameters()) {
    if (p.name.rfind("policy.actor.fc2.", 0) == 0) p.param->value.setZero();
  }
  fs::create_directories(dir / "checkpoints");
  train::save_checkpoint(t.make_checkpoint(), (dir / "checkpoints" / train::checkpoint_name(0)).string());
  for (const std::string split : {"train", "test"}) {
    const auto r = eval::evaluate({dir.string()}, small_options(split));
    EXPECT_EQ(r.successes, 0) << split;
    EXPECT_EQ(r.success_rate, 0.0) << split;
    for (const auto& e : r.per_checkpoint[0].results) EXPECT_EQ(e.length, 20);
  }
}

TEST(Eval, VisionPolicyEvaluationOfMultimodalCheckpoint) {
  const std::string run = trained_run();
  const std::uint64_t before = tok::taxel_reads();
  eval::EvalOptions o = small_options();
  o.modalities = "vision";
  const auto r = eval::evaluate({run}, o);
  EXPECT_EQ(tok::taxel_reads(), before);
  EXPECT_EQ(r.modalities, "vision");
  EXPECT_EQ(r.episodes, 10);
}

TEST(Eval, MismatchedCheckpointsAreRejected) {
  const fs::path dir = fresh_dir("wide");
  RunConfig cfg = testing::tiny_run_config(dir.string());
  cfg.model.tokenizer.dim = 32;
  cfg.trainer.total_env_steps = 16;
  train::Trainer(cfg).train();
  EXPECT_THROW(eval::evaluate({trained_run(), dir.string()}, small_options()), std::runtime_error);
  EXPECT_THROW(eval::evaluate({fresh_dir("empty").string()}, small_options()), std::runtime_error);
  eval::EvalOptions bad = small_options("validation");
  EXPECT_THROW(eval::evaluate({trained_run()}, bad), std::invalid_argument);
}

TEST(Eval, FrameStackAblationProducesComparableCurves) {
  const fs::path dir = fresh_dir("ablate");
  RunConfig cfg = testing::tiny_run_config();
  const auto res = eval::ablate_frame_stack(cfg, {1, 2}, dir.string());
  ASSERT_EQ(res.runs.size(), 2u);
  EXPECT_TRUE(res.identical_step_grids);
  EXPECT_EQ(res.runs[0].metrics.column("step"), (std::vector<double>{16, 32}));
  for (const auto& p : res.plots) EXPECT_TRUE(fs::exists(p)) << p;
  const auto ck = train::load_checkpoint(train::list_checkpoints(res.runs[0].run_dir).back());
  EXPECT_EQ(ck.config.env.frame_stack, 1);
  EXPECT_EQ(ck.config.model.tokenizer.in_channels(), 3);
  EXPECT_THROW(eval::ablate_frame_stack(cfg, {3}, dir.string()), std::invalid_argument);
}

TEST(Eval, ReconstructionDumpShapes) {
  const fs::path out = fresh_dir("recon");
  const std::string ckpt = train::list_checkpoints(trained_run()).back();
  const auto dump = eval::dump_reconstructions(ckpt, 4, out.string());
  ASSERT_EQ(dump.files.size(), 2u);
  EXPECT_EQ(dump.rows, 4);
  const auto vision = eval::read_ppm(dump.files[0]);
  EXPECT_EQ(vision.width, 3 * 64 + 2 * 2);
  EXPECT_EQ(vision.height, 4 * 64 + 3 * 2);
  const auto touch = eval::read_ppm(dump.files[1]);
  EXPECT_EQ(touch.width, 18 * 32 + 17 * 2);
  EXPECT_EQ(touch.height, 4 * 32 + 3 * 2);
}

TEST(Eval, ReconstructionWithoutMaskingShowsNothingMasked) {
  const fs::path out = fresh_dir("recon0");
  const std::string ckpt = train::list_checkpoints(trained_run()).back();
  const auto dump = eval::dump_reconstructions(ckpt, 2, out.string(), 0.0);
  const auto img = eval::read_ppm(dump.files[0]);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < 64; ++x) {
      for (int c = 0; c < 3; ++c) {
        ASSERT_EQ(img.at(x, y)[c], img.at(x + 66, y)[c]);
        ASSERT_EQ(img.at(x, y)[c], img.at(x + 132, y)[c]);
      }
    }
  }
}

TEST(Eval, MetricsReaderParsesTrainerOutput) {
  const auto t = eval::read_metrics((fs::path(trained_run()) / "metrics.csv").string());
  EXPECT_EQ(t.columns.size(), 9u);
  EXPECT_EQ(t.column("step"), (std::vector<double>{16, 32}));
}

}  // namespace
}  // namespace m3l

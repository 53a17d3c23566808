#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "m3l/trainer/trainer.hpp"
#include "test_support.hpp"

namespace m3l {
namespace {

namespace fs = std::filesystem;
using train::Trainer;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("m3l_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool same_parameters(Model<float>& a, Model<float>& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& x = pa[i].param->value;
    const auto& y = pb[i].param->value;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0) return false;
  }
  return true;
}

TEST(RolloutBuffer, ReconstructsStackedObservations) {
  RunConfig cfg = testing::tiny_run_config();
  cfg.env.frame_stack = 3;
  cfg.env.max_steps = 4;
  env::VecEnv venv(2, cfg.env, env::default_library(), env::Split::train, 5);
  std::vector<env::StackedObs> obs = venv.reset();
  std::vector<bool> fresh(2, true);
  Rng rng(3);
  // two phases: the second buffer starts from mid-episode stacks
  for (int phase = 0; phase < 2; ++phase) {
    train::RolloutBuffer buf(2, 3, tok::ModalitySet::both());
    std::vector<env::StackedObs> seen;
    for (int t = 0; t < 7; ++t) {
      for (int e = 0; e < 2; ++e) {
        train::Transition tr;
        tr.frames = buf.observe(e, obs[static_cast<std::size_t>(e)], fresh[static_cast<std::size_t>(e)]);
        buf.add(tr);
        seen.push_back(obs[static_cast<std::size_t>(e)]);
      }
      auto res = venv.step({{rng.uniform(-1, 1), rng.uniform(-1, 1), -1.0}, {rng.uniform(-1, 1), rng.uniform(-1, 1), -1.0}});
      obs = std::move(res.obs);
      fresh = res.done;
    }
    std::vector<int> all(buf.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const auto got = buf.gather<float>(all, tok::ModalitySet::both());
    const auto want = tok::gather_obs<float>(testing::pointers(seen), tok::ModalitySet::both());
    EXPECT_EQ(got.image, want.image) << "phase " << phase;
    EXPECT_EQ(got.touch, want.touch) << "phase " << phase;
  }
}

TEST(Trainer, ZeroLearningRateLeavesParametersBitIdentical) {
  for (TrainMode mode : {TrainMode::m3l, TrainMode::sequential}) {
    RunConfig cfg = testing::tiny_run_config();
    cfg.trainer.mode = mode;
    cfg.ppo.lr = 0.0;
    Trainer t(cfg);
    Model<float> before(t.model());
    t.run_cycle();
    EXPECT_TRUE(same_parameters(before, t.model())) << to_string(mode);
    EXPECT_GT(t.optimizer().steps(), 0);
  }
}

TEST(Trainer, OptimizerStepCountsPerSchedule) {
  // 16 transitions, B 8, 2 epochs: 4 minibatches
  RunConfig cfg = testing::tiny_run_config();
  {
    Trainer t(cfg);
    const auto m = t.run_cycle();
    EXPECT_EQ(m.update.minibatches, 4);
    EXPECT_EQ(m.update.optimizer_steps, 4);
    EXPECT_EQ(m.update.rep_forwards.size(), 4u);
  }
  {
    RunConfig c = cfg;
    c.trainer.schedule = Schedule::interleaved;
    Trainer t(c);
    const auto m = t.run_cycle();
    EXPECT_EQ(m.update.optimizer_steps, 4 * (c.trainer.rep_steps_per_rl + 1));
    EXPECT_EQ(t.optimizer().steps(), m.update.optimizer_steps);
  }
  {
    RunConfig c = cfg;
    c.trainer.mode = TrainMode::sequential;
    Trainer t(c);
    const auto m = t.run_cycle();
    EXPECT_EQ(m.update.optimizer_steps, 4 * 3);
    ASSERT_EQ(m.update.rep_forwards.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_EQ(m.update.rep_forwards[i], i % 2 == 0 ? tok::ModalitySet::vision_only() : tok::ModalitySet::touch_only());
    }
  }
  {
    RunConfig c = cfg;
    c.trainer.mode = TrainMode::end_to_end;
    Trainer t(c);
    const auto m = t.run_cycle();
    EXPECT_EQ(m.update.optimizer_steps, 4);
    EXPECT_TRUE(m.update.rep_forwards.empty());
    EXPECT_TRUE(std::isnan(m.update.mse_pixels));
    EXPECT_TRUE(std::isnan(m.update.l_rep));
  }
}

TEST(Trainer, VisionOnlyModeNeverReadsTaxels) {
  RunConfig cfg = testing::tiny_run_config();
  cfg.trainer.mode = TrainMode::vision_only_mae;
  Trainer t(cfg);
  const std::uint64_t before = tok::taxel_reads();
  const auto m = t.run_cycle();
  EXPECT_EQ(tok::taxel_reads(), before);
  EXPECT_TRUE(std::isnan(m.update.mse_taxels));
  EXPECT_TRUE(std::isfinite(m.update.mse_pixels));

  RunConfig both = testing::tiny_run_config();
  Trainer tb(both);
  tb.run_cycle();
  EXPECT_GT(tok::taxel_reads(), before);
}

TEST(Trainer, TouchOnlyStepLeavesVisionStemGradientsZero) {
  RunConfig cfg = testing::tiny_run_config();
  cfg.trainer.mode = TrainMode::sequential;
  Trainer t(cfg);
  const auto buf = t.collect_rollouts();
  t.model().zero_grad();
  t.rep_pass(buf, {0, 1, 2, 3, 4, 5}, tok::ModalitySet::touch_only(), true);
  double vision = 0.0, touch = 0.0;
  for (const auto& p : t.model().parameters()) {
    const double n = static_cast<double>(p.param->grad.norm());
    if (p.name.rfind("tokenizer.vision_stem.", 0) == 0) vision += n;
    if (p.name.rfind("tokenizer.touch_stem.", 0) == 0) touch += n;
  }
  EXPECT_EQ(vision, 0.0);
  EXPECT_GT(touch, 0.0);
}

// Micro-batched representation and PPO terms with whole-minibatch denominators add
// up to the single-pass loss and gradient.
TEST(Trainer, MicroBatchedLossAndGradientMatchSinglePass) {
  const RunConfig cfg = testing::tiny_run_config();
  Model<double> model(cfg.model);
  model.init(4);
  Rng rng(8);
  for (const auto& p : model.parameters()) {
    for (Index i = 0; i < p.param->value.size(); ++i) p.param->value.data()[i] += 0.05 * rng.normal();
  }
  const Index b = 7;
  const auto obs = testing::random_obs<double>(cfg.model.tokenizer, b, rng);
  const auto mods = tok::ModalitySet::both();
  const auto masks = tok::sample_masks<double>(b, cfg.model.tokenizer.token_count(mods), 0.5, rng);
  const auto counts = mae::loss_counts(tok::token_layout(cfg.model.tokenizer, mods), b, masks, false);
  PpoBatch pb;
  for (Index i = 0; i < b; ++i) {
    pb.actions.push_back({rng.normal(), rng.normal(), rng.normal()});
    pb.old_log_probs.push_back(-3.0 + rng.normal());
    pb.advantages.push_back(rng.normal());
    pb.value_targets.push_back(rng.normal());
  }
  const auto grads = [&] {
    std::vector<double> g;
    for (const auto& p : model.parameters()) g.insert(g.end(), p.param->grad.data(), p.param->grad.data() + p.param->grad.size());
    return g;
  };

  model.zero_grad();
  const double full = rep_step(model, obs, mods, masks, &counts, true).l_rep + ppo_step(model, obs, mods, pb, cfg.ppo, 1.0 / b, true).loss;
  const auto g_full = grads();

  model.zero_grad();
  double chunked = 0.0;
  for (Index lo = 0; lo < b; lo += 3) {
    const Index hi = std::min(b, lo + 3);
    tok::ObsBatch<double> part;
    part.batch = hi - lo;
    part.frames = obs.frames;
    const Index px = cfg.model.tokenizer.image_size * cfg.model.tokenizer.image_size;
    const Index tx = cfg.model.tokenizer.taxel_size * cfg.model.tokenizer.taxel_size;
    part.image = obs.image.middleRows(lo * px, (hi - lo) * px);
    part.touch.resize(2 * (hi - lo) * tx, obs.touch.cols());
    part.touch.topRows((hi - lo) * tx) = obs.touch.middleRows(lo * tx, (hi - lo) * tx);
    part.touch.bottomRows((hi - lo) * tx) = obs.touch.middleRows((b + lo) * tx, (hi - lo) * tx);
    const std::vector<tok::MaskIndices> pm(masks.begin() + lo, masks.begin() + hi);
    const auto slice = [&](const auto& v) { return std::vector<typename std::decay_t<decltype(v)>::value_type>(v.begin() + lo, v.begin() + hi); };
    const PpoBatch pp{slice(pb.actions), slice(pb.old_log_probs), slice(pb.advantages), slice(pb.value_targets)};
    chunked += rep_step(model, part, mods, pm, &counts, true).l_rep;
    chunked += ppo_step(model, part, mods, pp, cfg.ppo, 1.0 / b, true).loss;
  }
  const auto g_chunk = grads();
  EXPECT_NEAR(chunked, full, 1e-6 * std::max(1.0, std::abs(full)));
  ASSERT_EQ(g_chunk.size(), g_full.size());
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < g_full.size(); ++i) {
    diff += (g_chunk[i] - g_full[i]) * (g_chunk[i] - g_full[i]);
    norm += g_full[i] * g_full[i];
  }
  EXPECT_LE(std::sqrt(diff), 1e-6 * std::max(1.0, std::sqrt(norm)));
}

TEST(Trainer, SameSeedSameRunDifferentSeedDifferentRun) {
  const auto run = [](std::uint64_t seed) {
    RunConfig cfg = testing::tiny_run_config();
    cfg.seed = seed;
    auto t = std::make_unique<Trainer>(cfg);
    std::vector<std::string> rows;
    for (int i = 0; i < 2; ++i) rows.push_back(train::metrics_row(t->run_cycle()));
    return std::make_pair(std::move(t), rows);
  };
  auto [a, ra] = run(1);
  auto [b, rb] = run(1);
  auto [c, rc] = run(2);
  EXPECT_EQ(ra, rb);
  EXPECT_TRUE(same_parameters(a->model(), b->model()));
  EXPECT_NE(ra, rc);
  EXPECT_EQ(a->env_steps(), 32);
}

TEST(Trainer, TrainWritesRunDirectory) {
  const fs::path dir = fresh_dir("rundir");
  RunConfig cfg = testing::tiny_run_config(dir.string());
  cfg.trainer.total_env_steps = 3 * cfg.ppo.rollout_length;
  Trainer(cfg).train();

  const auto rows = read_lines(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], train::kMetricsHeader);
  EXPECT_EQ(rows[1].substr(0, 3), "16,");
  EXPECT_EQ(rows[3].substr(0, 3), "48,");
  for (const auto& r : rows) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 8);

  const auto ckpts = train::list_checkpoints(dir.string());
  ASSERT_EQ(ckpts.size(), 2u);
  EXPECT_EQ(fs::path(ckpts.back()).filename(), train::checkpoint_name(48));

  std::ifstream cj(dir / "config.json");
  EXPECT_EQ(to_json(config_from_json(nlohmann::json::parse(cj))), to_json(cfg));

  const std::set<std::string> allowed(cfg.env.train_shapes.begin(), cfg.env.train_shapes.end());
  const auto tasks = read_lines(dir / "tasks.log");
  EXPECT_GE(tasks.size(), 2u);
  for (const auto& id : tasks) EXPECT_TRUE(allowed.count(id)) << id;
}

TEST(Trainer, TwoRolloutBudgetRunsTwoCycles) {
  const fs::path dir = fresh_dir("two");
  RunConfig cfg = testing::tiny_run_config(dir.string());
  cfg.trainer.total_env_steps = 2 * cfg.ppo.rollout_length;
  Trainer t(cfg);
  t.train();
  EXPECT_EQ(t.cycle(), 2);
  EXPECT_EQ(t.env_steps(), 2 * cfg.ppo.rollout_length);
}

TEST(Trainer, CheckpointRoundTripRestoresState) {
  const fs::path dir = fresh_dir("ckpt");
  fs::create_directories(dir);
  RunConfig cfg = testing::tiny_run_config(dir.string());
  Trainer a(cfg);
  a.run_cycle();
  const std::string path = (dir / "a.bin").string();
  train::save_checkpoint(a.make_checkpoint(), path);

  Trainer b(cfg);
  b.restore(train::load_checkpoint(path));
  EXPECT_TRUE(same_parameters(a.model(), b.model()));
  EXPECT_EQ(b.env_steps(), a.env_steps());
  EXPECT_EQ(b.optimizer().steps(), a.optimizer().steps());
  const std::string path_b = (dir / "b.bin").string();
  train::save_checkpoint(b.make_checkpoint(), path_b);
  EXPECT_EQ(read_bytes(path), read_bytes(path_b));
}

TEST(Trainer, CheckpointVersionMismatchIsLoud) {
  const fs::path dir = fresh_dir("version");
  fs::create_directories(dir);
  Trainer a(testing::tiny_run_config(dir.string()));
  const std::string path = (dir / "c.bin").string();
  train::save_checkpoint(a.make_checkpoint(), path);
  std::string bytes = read_bytes(path);
  bytes[8] = 7;
  std::ofstream(path, std::ios::binary) << bytes;
  try {
    train::load_checkpoint(path);
    FAIL() << "expected a version error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("version 7"), std::string::npos) << e.what();
  }
}

TEST(Trainer, ResumeContinuesFromNewestCheckpoint) {
  const fs::path full_dir = fresh_dir("resume_full");
  const fs::path dir = fresh_dir("resume");
  RunConfig cfg = testing::tiny_run_config(dir.string());
  cfg.trainer.total_env_steps = 16;
  Trainer(cfg).train();
  // a stray row past the checkpoint, as if the process died before checkpointing
  std::ofstream(dir / "metrics.csv", std::ios::app) << "32,1,0,1,1,1,1,1,1\n";

  cfg.trainer.total_env_steps = 48;
  Trainer resumed(cfg);
  resumed.train(true);
  EXPECT_EQ(resumed.env_steps(), 48);
  EXPECT_EQ(resumed.cycle(), 3);
  const auto rows = read_lines(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1].substr(0, 3), "16,");
  EXPECT_EQ(rows[2].substr(0, 3), "32,");
  EXPECT_NE(rows[2], "32,1,0,1,1,1,1,1,1");

  // step and optimizer accounting match an uninterrupted run
  RunConfig full = cfg;
  full.output_dir = full_dir.string();
  Trainer(full).train();
  const auto a = train::load_checkpoint((dir / "checkpoints" / train::checkpoint_name(48)).string());
  const auto b = train::load_checkpoint((full_dir / "checkpoints" / train::checkpoint_name(48)).string());
  EXPECT_EQ(a.env_steps, b.env_steps);
  EXPECT_EQ(a.adam_steps, b.adam_steps);
}

TEST(Trainer, ResumeWithoutCheckpointStartsFresh) {
  const fs::path dir = fresh_dir("resume_empty");
  Trainer t(testing::tiny_run_config(dir.string()));
  t.train(true);
  EXPECT_EQ(t.env_steps(), 32);
  EXPECT_EQ(read_lines(dir / "metrics.csv").size(), 3u);
}

}  // namespace
}  // namespace m3l

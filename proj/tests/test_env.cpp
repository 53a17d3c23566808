#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>

#include "m3l/env/insertion_env.hpp"
#include "m3l/env/vec_env.hpp"

namespace m3l::env {
namespace {

TaskSpec fixed_task(const std::string& peg = "square", Vec2 target = {0.0, 0.0}, Vec3 grip = {0.0, 0.0, 0.0}) {
  EnvConfig cfg;
  TaskSpec t;
  t.peg = default_library().find(peg);
  t.target_frame = FrameShape::square;
  t.target_position = target;
  t.init_gripper_position = grip;
  if (grip.z == 0.0) t.init_gripper_position.z = 0.04 + cfg.peg_drop();
  return t;
}

double channel_sum(const std::vector<float>& map, int ch) {
  double s = 0.0;
  for (std::size_t i = static_cast<std::size_t>(ch); i < map.size(); i += kChannels) s += map[i];
  return s;
}

TEST(DenseReward, KnownValues) {
  EXPECT_EQ(dense_reward(0.0), 0.0);
  EXPECT_NEAR(dense_reward((std::numbers::e - 1.0) / 100.0), -1.0, 1e-12);
  EXPECT_NEAR(dense_reward(0.09), -std::log(10.0), 1e-12);
  EXPECT_NEAR(dense_reward(0.09), -2.302585, 1e-6);
  EXPECT_THROW(dense_reward(-1e-9), std::domain_error);
  EXPECT_THROW(dense_reward(std::nan("")), std::domain_error);
}

TEST(DenseReward, StrictlyDecreasing) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const double a = rng.uniform(0.0, 0.2);
    const double b = a + rng.uniform(1e-6, 0.1);
    EXPECT_GT(dense_reward(a), dense_reward(b));
  }
}

TEST(Shapes, DefaultLibraryIsValid) {
  const ShapeLibrary lib = default_library();
  EXPECT_NO_THROW(lib.validate(0.5 * EnvConfig{}.pad_width));
  EXPECT_EQ(lib.split(Split::train).size(), 18u);
  const auto test = lib.split(Split::test);
  ASSERT_EQ(test.size(), 2u);
  EXPECT_EQ(test[0]->id, "rectangle");
  EXPECT_EQ(test[1]->id, "v_shape");
}

TEST(Shapes, RejectsBrokenPolygons) {
  PegShape bow{"bow", {{-0.005, -0.005}, {0.005, 0.005}, {0.005, -0.005}, {-0.005, 0.005}}, Split::train};
  EXPECT_THROW(validate_shape(bow, 0.016), std::invalid_argument);
  PegShape cw{"cw", {{0, 0}, {0, 0.01}, {0.01, 0}}, Split::train};
  EXPECT_THROW(validate_shape(cw, 0.016), std::invalid_argument);
  PegShape big{"big", {{-0.02, -0.02}, {0.02, -0.02}, {0.02, 0.02}}, Split::train};
  EXPECT_THROW(validate_shape(big, 0.016), std::invalid_argument);
  PegShape two{"two", {{0, 0}, {0.01, 0}}, Split::train};
  EXPECT_THROW(validate_shape(two, 0.016), std::invalid_argument);
}

TEST(Shapes, JsonRoundTrip) {
  const ShapeLibrary lib = default_library();
  const ShapeLibrary back = library_from_json(nlohmann::json::parse(library_to_json(lib).dump()));
  ASSERT_EQ(back.shapes().size(), lib.shapes().size());
  for (std::size_t i = 0; i < lib.shapes().size(); ++i) {
    EXPECT_EQ(back.shapes()[i].id, lib.shapes()[i].id);
    EXPECT_EQ(back.shapes()[i].split, lib.shapes()[i].split);
    EXPECT_EQ(back.shapes()[i].polygon, lib.shapes()[i].polygon);
  }
  auto j = library_to_json(lib);
  j["shapes"][0]["colour"] = "red";
  EXPECT_THROW(library_from_json(j), std::invalid_argument);
}

TEST(SampleTask, TestSplitDrawsHeldOutShapes) {
  Rng rng(11);
  const ShapeLibrary lib = default_library();
  for (int i = 0; i < 200; ++i) {
    const TaskSpec t = sample_task(rng, Split::test, lib, EnvConfig{});
    EXPECT_TRUE(t.peg.id == "rectangle" || t.peg.id == "v_shape") << t.peg.id;
  }
}

TEST(SampleTask, TrainShapesUniformWithinBinomialBound) {
  Rng rng(2024);
  const ShapeLibrary lib = default_library();
  const int n = 10000;
  std::map<std::string, int> counts;
  for (int i = 0; i < n; ++i) ++counts[sample_task(rng, Split::train, lib, EnvConfig{}).peg.id];
  ASSERT_EQ(counts.size(), 18u);
  const double p = 1.0 / 18.0;
  const double sigma = std::sqrt(n * p * (1.0 - p));
  for (const auto& [id, c] : counts) EXPECT_LE(std::abs(c - n * p), 3.0 * sigma) << id;
}

TEST(SampleTask, DeterministicAndValid) {
  const ShapeLibrary lib = default_library();
  EnvConfig cfg;
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) {
    const TaskSpec x = sample_task(a, Split::train, lib, cfg);
    const TaskSpec y = sample_task(b, Split::train, lib, cfg);
    EXPECT_EQ(x.peg.id, y.peg.id);
    EXPECT_EQ(x.target_frame, y.target_frame);
    EXPECT_EQ(x.target_position, y.target_position);
    EXPECT_EQ(x.init_gripper_position, y.init_gripper_position);
    EXPECT_NO_THROW(validate_task(x, cfg));
  }
}

TEST(SampleTask, TrainShapeRestriction) {
  EnvConfig cfg;
  cfg.train_shapes = {"square", "cross", "triangle"};
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const std::string id = sample_task(rng, Split::train, default_library(), cfg).peg.id;
    EXPECT_TRUE(id == "square" || id == "cross" || id == "triangle");
  }
  cfg.train_shapes = {"rectangle"};
  EXPECT_THROW(sample_task(rng, Split::train, default_library(), cfg), std::invalid_argument);
}

TEST(EnvReset, RejectsInvalidTaskWithDiagnostic) {
  InsertionEnv env;
  TaskSpec t = fixed_task();
  t.target_position = {0.5, 0.0};
  try {
    env.reset(1, t);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("target_position"), std::string::npos);
  }
  t = fixed_task();
  t.init_gripper_position.z = 1.0;
  EXPECT_THROW(env.reset(1, t), std::invalid_argument);
}

TEST(EnvReset, DeterministicObservations) {
  InsertionEnv a, b;
  const TaskSpec t = sample_task(*std::make_unique<Rng>(9), Split::train, default_library(), EnvConfig{});
  const StackedObs x = a.reset(7, t);
  const StackedObs y = b.reset(7, t);
  EXPECT_EQ(x.image_stack, y.image_stack);
  EXPECT_EQ(x.tactile_left_stack, y.tactile_left_stack);
  EXPECT_EQ(x.tactile_right_stack, y.tactile_right_stack);
}

TEST(EnvReset, StackRepeatsFirstFrame) {
  InsertionEnv env;
  const StackedObs s = env.reset(1, fixed_task());
  EXPECT_EQ(s.k, 4);
  ASSERT_EQ(s.image_stack.size(), static_cast<std::size_t>(kImageSize * kImageSize * 12));
  ASSERT_EQ(s.tactile_left_stack.size(), static_cast<std::size_t>(kTaxelSize * kTaxelSize * 12));
  for (std::size_t p = 0; p < static_cast<std::size_t>(kImageSize * kImageSize); ++p) {
    for (int f = 1; f < 4; ++f) {
      for (int c = 0; c < 3; ++c) EXPECT_EQ(s.image_stack[p * 12 + static_cast<std::size_t>(f * 3 + c)], s.image_stack[p * 12 + static_cast<std::size_t>(c)]);
    }
  }
}

// Holding only: pressure is positive exactly on the taxels the peg covers.
TEST(EnvReset, HoldingPressureMatchesPadOverlap) {
  EnvConfig cfg;
  const ShapeLibrary lib = default_library();
  for (const auto& shape : lib.shapes()) {
    InsertionEnv env(cfg);
    env.reset(1, fixed_task(shape.id));
    const VisuoTactileObs o = env.observe();
    for (int side = 0; side < 2; ++side) {
      const PadGeometry g = pad_geometry(shape.polygon, side == 0, cfg);
      const auto& map = side == 0 ? o.tactile_left : o.tactile_right;
      for (int i = 0; i < kTaxelSize; ++i) {
        for (int j = 0; j < kTaxelSize; ++j) {
          const float p = map[static_cast<std::size_t>((i * kTaxelSize + j) * kChannels + 2)];
          const bool covered = g.row_weight[static_cast<std::size_t>(i)] * g.column_weight[static_cast<std::size_t>(j)] > 0.0f;
          if (covered) {
            EXPECT_GT(p, 0.0f) << shape.id << " side " << side << " taxel " << i << "," << j;
          } else {
            EXPECT_EQ(p, 0.0f) << shape.id;
          }
        }
      }
    }
  }
}

TEST(EnvStep, ErrorsBeforeResetAfterDoneAndOnNaN) {
  InsertionEnv env;
  EXPECT_THROW(env.step({0, 0, 0}), std::logic_error);
  env.reset(1, fixed_task());
  EXPECT_THROW(env.step({std::nan(""), 0, 0}), std::invalid_argument);
  StepResult r;
  int steps = 0;
  do {
    r = env.step({0, 0, 0});
    ++steps;
  } while (!r.done);
  EXPECT_EQ(steps, 300);
  EXPECT_EQ(r.info.done_reason, DoneReason::timeout);
  EXPECT_THROW(env.step({0, 0, 0}), std::logic_error);
}

TEST(EnvStep, InsertionSucceedsWithSingleBonus) {
  InsertionEnv env;
  env.reset(1, fixed_task());
  double bonus_count = 0;
  StepResult r;
  do {
    r = env.step({0, 0, -1});
    if (r.reward > 500.0) ++bonus_count;
  } while (!r.done);
  EXPECT_EQ(r.info.done_reason, DoneReason::success);
  EXPECT_LT(r.info.distance, 0.005);
  EXPECT_EQ(bonus_count, 1);
  EXPECT_NEAR(r.reward, 1000.0 + dense_reward(r.info.distance), 1e-9);
  EXPECT_LT(env.state().step_count, 300);
}

TEST(EnvStep, ZeroActionWithoutContactKeepsTaxels) {
  InsertionEnv env;
  env.reset(1, fixed_task("l_shape", {0.02, 0.02}, {-0.03, -0.03, 0.0}));
  const VisuoTactileObs before = env.observe();
  for (int i = 0; i < 5; ++i) env.step({0, 0, 0});
  const VisuoTactileObs after = env.observe();
  EXPECT_EQ(before.tactile_left, after.tactile_left);
  EXPECT_EQ(before.tactile_right, after.tactile_right);
}

// Peg inside a square hole pushed in +x: the wall load lands on the left (trailing) pad.
TEST(EnvStep, WallPushLoadsOpposingPad) {
  InsertionEnv env;
  env.reset(1, fixed_task("square"));
  const VisuoTactileObs hold = env.observe();
  for (int i = 0; i < 5; ++i) env.step({0, 0, -0.5});
  ASSERT_TRUE(env.state().in_hole);
  ASSERT_FALSE(env.done());
  const StepResult r = env.step({1, 0, 0});
  bool wall = false;
  for (const Contact& c : r.info.contacts) {
    if (c.body == ContactBody::hole_wall) wall = c.normal_force > 0.0;
  }
  EXPECT_TRUE(wall);
  const VisuoTactileObs o = env.observe();
  EXPECT_GT(channel_sum(o.tactile_left, 2), 1.5 * channel_sum(hold.tactile_left, 2));
  EXPECT_NEAR(channel_sum(o.tactile_right, 2), channel_sum(hold.tactile_right, 2), 0.05 * channel_sum(hold.tactile_right, 2));
}

// Dragging the peg over the plate in +y: friction holds it back, so it slips in -y
// relative to the pads and shear_x is negative wherever the pad is loaded.
TEST(EnvStep, PlateDragShearFollowsSlip) {
  InsertionEnv env;
  env.reset(1, fixed_task("square", {0.03, 0.03}, {-0.03, -0.03, 0.0}));
  for (int i = 0; i < 3; ++i) env.step({0, 0, -1});
  const StepResult r = env.step({0, 1, -0.2});
  bool plate = false;
  for (const Contact& c : r.info.contacts) {
    if (c.body == ContactBody::frame_top) plate = c.normal_force > 0.0 && c.tangential.y < 0.0;
  }
  ASSERT_TRUE(plate);
  const VisuoTactileObs o = env.observe();
  for (const auto* map : {&o.tactile_left, &o.tactile_right}) {
    for (std::size_t t = 0; t < map->size(); t += kChannels) {
      if ((*map)[t + 2] > 0.0f) {
        EXPECT_LT((*map)[t], 0.0f);
      } else {
        EXPECT_EQ((*map)[t], 0.0f);
      }
    }
  }
}

TEST(EnvStep, DeterministicTrajectories) {
  const TaskSpec t = fixed_task("cross", {0.01, -0.02}, {0.02, 0.01, 0.0});
  InsertionEnv a, b;
  a.reset(3, t);
  b.reset(3, t);
  Rng rng(4);
  for (int i = 0; i < 120 && !a.done(); ++i) {
    const std::array<double, 3> act{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const StepResult x = a.step(act);
    const StepResult y = b.step(act);
    ASSERT_EQ(x.obs.image_stack, y.obs.image_stack);
    ASSERT_EQ(x.obs.tactile_left_stack, y.obs.tactile_left_stack);
    ASSERT_EQ(x.reward, y.reward);
  }
}

TEST(EnvProperties, RandomRolloutsRespectInvariants) {
  const ShapeLibrary lib = default_library();
  EnvConfig cfg;
  Rng rng(77);
  for (int ep = 0; ep < 12; ++ep) {
    InsertionEnv env(cfg);
    const TaskSpec t = sample_task(rng, ep % 4 == 0 ? Split::test : Split::train, lib, cfg);
    env.reset(static_cast<std::uint64_t>(ep), t);
    while (!env.done()) {
      // biased downward so that frame contacts are frequent
      const StepResult r = env.step({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 0.6)});
      const EnvState& s = env.state();
      ASSERT_LE(s.step_count, 300);
      ASSERT_GE(s.distance_to_target, 0.0);
      for (const Contact& c : s.contacts) ASSERT_GE(c.normal_force, 0.0);
      for (const auto* stack : {&r.obs.tactile_left_stack, &r.obs.tactile_right_stack}) {
        for (std::size_t i = 0; i < stack->size(); ++i) {
          ASSERT_GE((*stack)[i], -1.0f);
          ASSERT_LE((*stack)[i], 1.0f);
          if (i % kChannels == 2) {
            ASSERT_GE((*stack)[i], 0.0f);
          }
        }
      }
      for (float v : r.obs.image_stack) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
      }
      if (r.done && r.info.done_reason == DoneReason::success) {
        ASSERT_LT(r.info.distance, cfg.success_threshold);
      }
    }
  }
}

TEST(TaxelMaps, EmptyContactSetGivesZeroMaps) {
  EnvState s;
  s.scene = make_scene(fixed_task(), EnvConfig{});
  const auto maps = compute_taxel_maps(s, EnvConfig{});
  for (const auto& m : maps) {
    for (float v : m) EXPECT_EQ(v, 0.0f);
  }
}

// A normal force at the patch centroid spreads uniformly: the pressure channel sums
// to F / F_max and is mirror-symmetric about the pad centre.
TEST(TaxelMaps, CentredNormalForceIsUniformAndSymmetric) {
  EnvConfig cfg;
  EnvState s;
  s.scene = make_scene(fixed_task("square"), cfg);
  const PatchMoments m = patch_moments(pad_geometry(s.scene.peg, true, cfg), cfg);
  for (double f : {1.0, 2.0, 4.0}) {
    s.contacts = {{ContactBody::pad_left, {0.0, m.cu, m.cv}, {1, 0, 0}, f, {}}};
    const auto maps = compute_taxel_maps(s, cfg);
    EXPECT_NEAR(channel_sum(maps[0], 2), f / cfg.taxel_force_max, 1e-3 * f / cfg.taxel_force_max);
    EXPECT_EQ(channel_sum(maps[1], 2), 0.0);
    for (int i = 0; i < kTaxelSize; ++i) {
      for (int j = 0; j < kTaxelSize; ++j) {
        const float a = maps[0][static_cast<std::size_t>((i * kTaxelSize + j) * kChannels + 2)];
        const float b = maps[0][static_cast<std::size_t>((i * kTaxelSize + (kTaxelSize - 1 - j)) * kChannels + 2)];
        EXPECT_NEAR(a, b, 1e-6f);
      }
    }
  }
}

TEST(TaxelMaps, OffCentreForceMovesCentreOfPressure) {
  EnvConfig cfg;
  EnvState s;
  s.scene = make_scene(fixed_task("square"), cfg);
  const PatchMoments m = patch_moments(pad_geometry(s.scene.peg, true, cfg), cfg);
  const double shift = 0.002;
  s.contacts = {{ContactBody::pad_left, {0.0, m.cu + shift, m.cv}, {1, 0, 0}, 3.0, {}}};
  const auto maps = compute_taxel_maps(s, cfg);
  double mass = 0.0, moment = 0.0;
  for (int i = 0; i < kTaxelSize; ++i) {
    for (int j = 0; j < kTaxelSize; ++j) {
      const double p = maps[0][static_cast<std::size_t>((i * kTaxelSize + j) * kChannels + 2)];
      mass += p;
      moment += p * taxel_u(j, cfg);
    }
  }
  EXPECT_NEAR(moment / mass, m.cu + shift, 1e-6);
}

TEST(TaxelMaps, PureTangentialSlipInX) {
  EnvConfig cfg;
  EnvState s;
  s.scene = make_scene(fixed_task("square"), cfg);
  const PatchMoments m = patch_moments(pad_geometry(s.scene.peg, false, cfg), cfg);
  s.contacts = {{ContactBody::pad_right, {0.0, m.cu, m.cv}, {-1, 0, 0}, 2.0, {0.0, 0.5, 0.0}}};
  const auto maps = compute_taxel_maps(s, cfg);
  int loaded = 0;
  for (std::size_t t = 0; t < maps[1].size(); t += kChannels) {
    if (maps[1][t + 2] <= 0.0f) continue;
    ++loaded;
    EXPECT_GT(maps[1][t], 0.0f);
    EXPECT_NEAR(maps[1][t + 1], 0.0f, 1e-7f);
  }
  EXPECT_GT(loaded, 0);
}

TEST(Render, DeterministicRangeAndEmptyScene) {
  InsertionEnv env;
  env.reset(1, fixed_task());
  const auto a = render_image(env.state(), env.config());
  const auto b = render_image(env.state(), env.config());
  EXPECT_EQ(a, b);
  for (float v : a) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EnvState empty = env.state();
  empty.scene.has_peg = false;
  const auto labels = render_labels(empty, env.config(), RenderLayers::empty());
  for (Entity e : labels) EXPECT_EQ(e, Entity::background);
}

TEST(Render, DistinctEntityColours) {
  const Entity all[] = {Entity::background, Entity::shadow, Entity::frame, Entity::hole, Entity::peg, Entity::palm, Entity::pad};
  for (Entity a : all) {
    for (Entity b : all) {
      if (a != b) {
        EXPECT_NE(entity_color(a), entity_color(b));
      }
    }
  }
}

// Gripper drawn over peg drawn over frame; a held peg is mostly hidden under the
// palm while the pads still report holding pressure.
TEST(Render, OcclusionProbe) {
  EnvConfig cfg;
  InsertionEnv env(cfg);
  env.reset(1, fixed_task("square", {0.0, 0.0}, {0.0, 0.0, 0.0}));
  RenderLayers no_gripper;
  no_gripper.gripper = false;
  const auto full = render_labels(env.state(), cfg);
  const auto bare = render_labels(env.state(), cfg, no_gripper);
  int peg_bare = 0, peg_visible = 0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (bare[i] != Entity::peg) continue;
    ++peg_bare;
    EXPECT_NE(full[i], Entity::frame);
    if (full[i] == Entity::peg) ++peg_visible;
  }
  ASSERT_GT(peg_bare, 0);
  const double occluded = 1.0 - static_cast<double>(peg_visible) / peg_bare;
  EXPECT_GE(occluded, 0.5);
  const VisuoTactileObs o = env.observe();
  EXPECT_GT(channel_sum(o.tactile_left, 2), 0.0);
  EXPECT_GT(channel_sum(o.tactile_right, 2), 0.0);
}

TEST(VecEnv, AutoResetAndEpisodeLog) {
  EnvConfig cfg;
  cfg.max_steps = 20;
  VecEnv venv(3, cfg, default_library(), Split::train, 9);
  auto obs = venv.reset();
  ASSERT_EQ(obs.size(), 3u);
  std::vector<std::array<double, 3>> zeros(3, {0.0, 0.0, 0.0});
  int finished = 0;
  for (int t = 0; t < 45; ++t) {
    const VecStep s = venv.step(zeros);
    for (std::size_t i = 0; i < 3; ++i) {
      if (s.done[i]) {
        EXPECT_FALSE(s.final_obs[i].image_stack.empty());
        EXPECT_FALSE(venv.env(i).done());
        ++finished;
      }
    }
  }
  EXPECT_EQ(finished, 6);
  EXPECT_EQ(venv.take_completed().size(), 6u);
  EXPECT_TRUE(venv.take_completed().empty());
  EXPECT_EQ(venv.task_log().size(), 9u);
}

TEST(VecEnv, InstancesAreIndependentOfInterleaving) {
  EnvConfig cfg;
  VecEnv a(2, cfg, default_library(), Split::train, 5);
  VecEnv b(4, cfg, default_library(), Split::train, 5);
  const auto oa = a.reset();
  const auto ob = b.reset();
  EXPECT_EQ(oa[0].image_stack, ob[0].image_stack);
  EXPECT_EQ(oa[1].tactile_left_stack, ob[1].tactile_left_stack);
}

}  // namespace
}  // namespace m3l::env

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "m3l/config.hpp"
#include "test_support.hpp"

namespace m3l {
namespace {

using nlohmann::json;

std::string error_of(const json& j) {
  try {
    config_from_json(j).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, RoundTripIsExact) {
  for (RunConfig c : {paper_preset(), desk_preset(), testing::tiny_run_config("x/y")}) {
    c.seed = 12345678901234ULL;
    c.trainer.mode = TrainMode::sequential;
    c.eval.modalities = "vision";
    const json j = to_json(c);
    const RunConfig back = config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    // and through text
    EXPECT_EQ(to_json(config_from_json(json::parse(j.dump(2)))), j);
  }
}

TEST(Config, PartialFileStartsFromNamedPreset) {
  const RunConfig c = config_from_json(json{{"preset", "paper"}, {"policy", {{"lr", 3e-4}}}});
  EXPECT_EQ(c.preset, "paper");
  EXPECT_DOUBLE_EQ(c.ppo.lr, 3e-4);
  EXPECT_EQ(c.ppo.rollout_length, 32768);
  EXPECT_EQ(config_from_json(json::object()).ppo.rollout_length, 2048);
}

TEST(Config, UnknownKeysAreRejectedByName) {
  EXPECT_NE(error_of(json{{"policy", {{"learning_rate", 1e-3}}}}).find("policy.learning_rate"), std::string::npos);
  EXPECT_NE(error_of(json{{"optimizer", json::object()}}).find("optimizer"), std::string::npos);
  EXPECT_NE(error_of(json{{"mae", {{"mask_ratio", "high"}}}}).find("mae.mask_ratio"), std::string::npos);
  EXPECT_NE(error_of(json{{"preset", "huge"}}).find("huge"), std::string::npos);
  EXPECT_NE(error_of(json{{"trainer", {{"mode", "magic"}}}}).find("magic"), std::string::npos);
}

TEST(Config, ValidationNamesTheOffendingKey) {
  EXPECT_NE(error_of(json{{"env", {{"train_shapes", {"square", "blob"}}}}}).find("blob"), std::string::npos);
  for (const auto& s : env::default_library().shapes()) {
    if (s.split == env::Split::test) {
      EXPECT_NE(error_of(json{{"env", {{"train_shapes", json::array({s.id})}}}}).find(s.id), std::string::npos) << s.id;
    }
  }
  EXPECT_NE(error_of(json{{"trainer", {{"mode", "end_to_end"}, {"schedule", "interleaved"}}}}).find("interleaved"), std::string::npos);
  EXPECT_NE(error_of(json{{"trainer", {{"schedule", "interleaved"}, {"rep_steps_per_rl", 7}}}}).find("rep_steps_per_rl"), std::string::npos);
  EXPECT_NE(error_of(json{{"eval", {{"split", "val"}}}}).find("eval.split"), std::string::npos);
  EXPECT_NE(error_of(json{{"mae", {{"enc_heads", 3}}}}).find("enc_heads"), std::string::npos);
  EXPECT_EQ(error_of(json::object()), "");
}

TEST(Config, PaperPresetSnapshot) {
  const RunConfig c = paper_preset();
  EXPECT_EQ(c.ppo.n_envs, 8);
  EXPECT_DOUBLE_EQ(c.model.mae.mask_ratio, 0.95);
  EXPECT_DOUBLE_EQ(c.model.mae.beta_T, 10.0);
  EXPECT_EQ(c.ppo.minibatch_size, 512);
  EXPECT_EQ(c.trainer.rep_steps_per_rl, 16);
  EXPECT_EQ(c.ppo.rollout_length, 32768);
  EXPECT_EQ(c.ppo.epochs, 10);
  EXPECT_DOUBLE_EQ(c.ppo.lr, 1e-4);
  EXPECT_EQ(c.env.frame_stack, 4);
  EXPECT_EQ(c.model.tokenizer.frames, 4);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ModalityRoutingPerMode) {
  EXPECT_EQ(policy_modalities(TrainMode::m3l), tok::ModalitySet::both());
  EXPECT_EQ(policy_modalities(TrainMode::vision_only_mae), tok::ModalitySet::vision_only());
  EXPECT_EQ(policy_modalities(TrainMode::m3l_vision_policy), tok::ModalitySet::vision_only());
  EXPECT_EQ(rep_modalities(TrainMode::m3l_vision_policy), tok::ModalitySet::both());
  EXPECT_TRUE(rep_modalities(TrainMode::end_to_end).empty());
  EXPECT_EQ(stored_modalities(TrainMode::vision_only_mae), tok::ModalitySet::vision_only());
  for (const auto& [m, name] : train_mode_names()) EXPECT_EQ(parse_train_mode(name), m);
}

TEST(Config, LoadsFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "m3l_config_test.json";
  std::ofstream(path) << R"({"seed": 9, "trainer": {"total_env_steps": 4096}})";
  const RunConfig c = load_config(path.string());
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.trainer.total_env_steps, 4096);
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_config(path.string()), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/m3l.json"), ConfigError);
}

}  // namespace
}  // namespace m3l

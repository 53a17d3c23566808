#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/env/insertion_env.hpp"
#include "m3l/env/shapes.hpp"
#include "m3l/model.hpp"
#include "m3l/policy/policy.hpp"

namespace m3l {

enum class TrainMode { m3l, sequential, vision_only_mae, end_to_end, m3l_vision_policy };
enum class Schedule { joint, interleaved };

inline const std::vector<std::pair<TrainMode, std::string>>& train_mode_names() {
  static const std::vector<std::pair<TrainMode, std::string>> names = {
      {TrainMode::m3l, "m3l"},
      {TrainMode::sequential, "sequential"},
      {TrainMode::vision_only_mae, "vision_only_mae"},
      {TrainMode::end_to_end, "end_to_end"},
      {TrainMode::m3l_vision_policy, "m3l_vision_policy"}};
  return names;
}

inline std::string to_string(TrainMode m) {
  for (const auto& [mode, name] : train_mode_names()) {
    if (mode == m) return name;
  }
  throw std::logic_error("unnamed train mode");
}

inline TrainMode parse_train_mode(const std::string& s) {
  for (const auto& [mode, name] : train_mode_names()) {
    if (name == s) return mode;
  }
  throw std::invalid_argument("unknown mode '" + s +
                              "' (expected m3l, sequential, vision_only_mae, end_to_end or m3l_vision_policy)");
}

inline std::string to_string(Schedule s) { return s == Schedule::joint ? "joint" : "interleaved"; }

inline Schedule parse_schedule(const std::string& s) {
  if (s == "joint") return Schedule::joint;
  if (s == "interleaved") return Schedule::interleaved;
  throw std::invalid_argument("unknown schedule '" + s + "' (expected joint or interleaved)");
}

/// Token streams used by the policy path of a mode.
inline tok::ModalitySet policy_modalities(TrainMode m) {
  return m == TrainMode::vision_only_mae || m == TrainMode::m3l_vision_policy ? tok::ModalitySet::vision_only()
                                                                              : tok::ModalitySet::both();
}

/// Token streams reconstructed by the representation loss (empty for end-to-end).
inline tok::ModalitySet rep_modalities(TrainMode m) {
  switch (m) {
    case TrainMode::end_to_end: return {false, false};
    case TrainMode::vision_only_mae: return tok::ModalitySet::vision_only();
    default: return tok::ModalitySet::both();
  }
}

/// Streams the rollout buffer has to keep.
inline tok::ModalitySet stored_modalities(TrainMode m) {
  const tok::ModalitySet p = policy_modalities(m), r = rep_modalities(m);
  return {p.vision || r.vision, p.touch || r.touch};
}

struct TrainerConfig {
  TrainMode mode = TrainMode::m3l;
  Schedule schedule = Schedule::joint;
  int rep_steps_per_rl = 16;              // n, used by the interleaved schedule
  std::int64_t total_env_steps = 1000000;  // N_max
  int micro_batch = 64;                    // samples per forward/backward chunk (memory only)
  int checkpoints_kept = 4;
};

struct EvalConfig {
  int episodes_per_checkpoint = 25;
  int checkpoints = 4;
  std::string split = "test";
  std::string modalities;  // empty: the policy streams of the training mode
};

/// Every tunable of a run. The tokenizer's frame count and input sizes follow the
/// environment (see finalize()).
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  env::EnvConfig env;
  ModelConfig model;
  policy::PPOConfig ppo;
  TrainerConfig trainer;
  EvalConfig eval;

  void finalize() {
    model.tokenizer.frames = env.frame_stack;
    model.tokenizer.image_size = env::kImageSize;
    model.tokenizer.taxel_size = env::kTaxelSize;
  }

  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// One binder per section keeps serialization and parsing in sync.
template <typename F>
void bind(env::EnvConfig& c, F&& f) {
  f("frame_stack", c.frame_stack);
  f("max_steps", c.max_steps);
  f("success_threshold", c.success_threshold);
  f("success_bonus", c.success_bonus);
  f("max_displacement", c.max_displacement);
  f("contact_stiffness", c.contact_stiffness);
  f("controller_stiffness", c.controller_stiffness);
  f("friction", c.friction);
  f("grip_force", c.grip_force);
  f("peg_mass", c.peg_mass);
  f("taxel_force_max", c.taxel_force_max);
  f("pad_width", c.pad_width);
  f("pad_height", c.pad_height);
  f("pad_thickness", c.pad_thickness);
  f("pad_compliance", c.pad_compliance);
  f("palm_width", c.palm_width);
  f("peg_height", c.peg_height);
  f("peg_top_above_pad", c.peg_top_above_pad);
  f("frame_height", c.frame_height);
  f("insertion_depth", c.insertion_depth);
  f("hole_clearance", c.hole_clearance);
  f("frame_border", c.frame_border);
  f("workspace_half_extent", c.workspace_half_extent);
  f("gripper_z_max", c.gripper_z_max);
  f("target_range", c.target_range);
  f("init_xy_range", c.init_xy_range);
  f("init_peg_bottom_min", c.init_peg_bottom_min);
  f("init_peg_bottom_max", c.init_peg_bottom_max);
  f("camera_height", c.camera_height);
  f("view_half_extent", c.view_half_extent);
  f("image_noise_std", c.image_noise_std);
  f("train_shapes", c.train_shapes);
}

template <typename F>
void bind(tok::TokenizerConfig& c, F&& f) {
  f("vision_stride", c.vision_stride);
  f("touch_stride", c.touch_stride);
  f("dim", c.dim);
  f("conv_hidden", c.conv_hidden);
}

template <typename F>
void bind(mae::MaeConfig& c, F&& f) {
  f("enc_layers", c.enc_layers);
  f("enc_heads", c.enc_heads);
  f("mlp_ratio", c.mlp_ratio);
  f("dec_dim", c.dec_dim);
  f("dec_layers", c.dec_layers);
  f("dec_heads", c.dec_heads);
  f("mask_ratio", c.mask_ratio);
  f("beta_T", c.beta_T);
  f("loss_on_all_tokens", c.loss_on_all_tokens);
  f("init_std", c.init_std);
}

template <typename F>
void bind_policy(policy::PPOConfig& c, ModelConfig& m, F&& f) {
  f("epsilon", c.epsilon);
  f("gamma", c.gamma);
  f("lam", c.lam);
  f("beta_V", c.beta_V);
  f("beta_H", c.beta_H);
  f("lr", c.lr);
  f("epochs", c.epochs);
  f("minibatch_size", c.minibatch_size);
  f("rollout_length", c.rollout_length);
  f("n_envs", c.n_envs);
  f("normalize_advantages", c.normalize_advantages);
  f("head_hidden", m.head_hidden);
  f("head_heads", m.head_heads);
}

template <typename F>
void bind(TrainerConfig& c, F&& f) {
  f("mode", c.mode);
  f("schedule", c.schedule);
  f("rep_steps_per_rl", c.rep_steps_per_rl);
  f("total_env_steps", c.total_env_steps);
  f("micro_batch", c.micro_batch);
  f("checkpoints_kept", c.checkpoints_kept);
}

template <typename F>
void bind(EvalConfig& c, F&& f) {
  f("episodes_per_checkpoint", c.episodes_per_checkpoint);
  f("checkpoints", c.checkpoints);
  f("split", c.split);
  f("modalities", c.modalities);
}

inline nlohmann::json encode(TrainMode m) { return to_string(m); }
inline nlohmann::json encode(Schedule s) { return to_string(s); }
template <typename T>
nlohmann::json encode(const T& v) {
  return v;
}

inline void decode(const nlohmann::json& j, TrainMode& m) { m = parse_train_mode(j.get<std::string>()); }
inline void decode(const nlohmann::json& j, Schedule& s) { s = parse_schedule(j.get<std::string>()); }
template <typename T>
void decode(const nlohmann::json& j, T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw std::invalid_argument("expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw std::invalid_argument("expected an integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw std::invalid_argument("expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw std::invalid_argument("expected a string");
  }
  v = j.get<T>();
}

struct Writer {
  nlohmann::json& out;
  template <typename T>
  void operator()(const char* key, T& v) const {
    out[key] = encode(v);
  }
};

/// Reads the keys present in `j` (missing keys keep their current value) and rejects
/// keys the section does not define.
struct Reader {
  const nlohmann::json& in;
  std::string section;
  std::set<std::string>* seen;
  template <typename T>
  void operator()(const char* key, T& v) const {
    seen->insert(key);
    const auto it = in.find(key);
    if (it == in.end()) return;
    try {
      decode(*it, v);
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + section + "." + key + "': " + e.what());
    }
  }
};

template <typename Bind>
void read_section(const nlohmann::json& root, const std::string& name, Bind&& bind_fn) {
  const auto it = root.find(name);
  if (it == root.end()) return;
  if (!it->is_object()) throw ConfigError("config key '" + name + "' must be an object");
  std::set<std::string> seen;
  bind_fn(Reader{*it, name, &seen});
  for (const auto& [key, _] : it->items()) {
    if (!seen.count(key)) throw ConfigError("unknown config key '" + name + "." + key + "'");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  nlohmann::json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  nlohmann::json env, tokenizer, mae, pol, trainer, eval;
  detail::bind(cfg.env, detail::Writer{env});
  detail::bind(cfg.model.tokenizer, detail::Writer{tokenizer});
  detail::bind(cfg.model.mae, detail::Writer{mae});
  detail::bind_policy(cfg.ppo, cfg.model, detail::Writer{pol});
  detail::bind(cfg.trainer, detail::Writer{trainer});
  detail::bind(cfg.eval, detail::Writer{eval});
  j["env"] = env;
  j["tokenizer"] = tokenizer;
  j["mae"] = mae;
  j["policy"] = pol;
  j["trainer"] = trainer;
  j["eval"] = eval;
  return j;
}

/// Applies `j` on top of `base`. Unknown keys and mistyped values throw ConfigError
/// naming the key.
inline RunConfig apply_json(RunConfig cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  static const std::set<std::string> top = {"preset", "seed", "output_dir", "env", "tokenizer", "mae", "policy", "trainer", "eval"};
  for (const auto& [key, _] : j.items()) {
    if (!top.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  const auto scalar = [&](const char* key, auto& v) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    try {
      detail::decode(*it, v);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  };
  scalar("preset", cfg.preset);
  scalar("seed", cfg.seed);
  scalar("output_dir", cfg.output_dir);
  detail::read_section(j, "env", [&](auto&& r) { detail::bind(cfg.env, r); });
  detail::read_section(j, "tokenizer", [&](auto&& r) { detail::bind(cfg.model.tokenizer, r); });
  detail::read_section(j, "mae", [&](auto&& r) { detail::bind(cfg.model.mae, r); });
  detail::read_section(j, "policy", [&](auto&& r) { detail::bind_policy(cfg.ppo, cfg.model, r); });
  detail::read_section(j, "trainer", [&](auto&& r) { detail::bind(cfg.trainer, r); });
  detail::read_section(j, "eval", [&](auto&& r) { detail::bind(cfg.eval, r); });
  cfg.finalize();
  return cfg;
}

/// Full scale: 8 envs, 95% masking, B 512, n 16, N_PPO 32768, M 10, lr 1e-4, beta_T 10, k 4.
inline RunConfig paper_preset() {
  RunConfig c;
  c.preset = "paper";
  c.env.frame_stack = 4;
  c.model.mae.mask_ratio = 0.95;
  c.model.mae.beta_T = 10.0;
  c.ppo.n_envs = 8;
  c.ppo.minibatch_size = 512;
  c.ppo.rollout_length = 32768;
  c.ppo.epochs = 10;
  c.ppo.lr = 1e-4;
  c.trainer.rep_steps_per_rl = 16;
  c.trainer.total_env_steps = 3000000;
  c.output_dir = "runs/paper";
  c.finalize();
  return c;
}

/// Desk scale: the full preset except N_PPO 2048, N_max 1e6 and three training shapes.
inline RunConfig desk_preset() {
  RunConfig c = paper_preset();
  c.preset = "desk";
  c.ppo.rollout_length = 2048;
  c.trainer.total_env_steps = 1000000;
  c.env.train_shapes = {"square", "cross", "triangle"};
  c.output_dir = "runs/desk";
  c.finalize();
  return c;
}

inline RunConfig preset(const std::string& name) {
  if (name == "paper") return paper_preset();
  if (name == "desk") return desk_preset();
  throw ConfigError("unknown preset '" + name + "' (expected paper or desk)");
}

/// Preset named in the file (default desk), then the file's values on top.
inline RunConfig config_from_json(const nlohmann::json& j) {
  std::string name = "desk";
  if (j.is_object() && j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("config key 'preset': expected a string");
    name = j["preset"].get<std::string>();
  }
  return apply_json(preset(name), j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void RunConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  try {
    model.tokenizer.validate();
    ppo.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  need(env.frame_stack >= 1, "env.frame_stack must be >= 1");
  need(env.max_steps >= 1, "env.max_steps must be >= 1");
  need(env.success_threshold > 0.0, "env.success_threshold must be positive");
  need(env.max_displacement > 0.0, "env.max_displacement must be positive");
  need(env.taxel_force_max > 0.0, "env.taxel_force_max must be positive");
  need(env.image_noise_std >= 0.0, "env.image_noise_std must be non-negative");
  const env::ShapeLibrary lib = env::default_library();
  for (const std::string& id : env.train_shapes) {
    bool found = false;
    for (const auto& s : lib.shapes()) found = found || (s.id == id && s.split == env::Split::train);
    need(found, "env.train_shapes: '" + id + "' is not a training shape");
  }
  need(model.tokenizer.frames == env.frame_stack, "tokenizer frames differ from env.frame_stack");
  need(model.mae.enc_layers >= 1 && model.mae.dec_layers >= 1, "mae layer counts must be >= 1");
  need(model.mae.enc_heads >= 1 && model.tokenizer.dim % model.mae.enc_heads == 0, "mae.enc_heads must divide tokenizer.dim");
  need(model.mae.dec_heads >= 1 && model.mae.dec_dim % model.mae.dec_heads == 0, "mae.dec_heads must divide mae.dec_dim");
  need(model.mae.dec_dim > 0 && model.mae.dec_dim % 4 == 0, "mae.dec_dim must be a positive multiple of 4");
  need(model.mae.mlp_ratio >= 1, "mae.mlp_ratio must be >= 1");
  need(model.mae.mask_ratio >= 0.0 && model.mae.mask_ratio <= 1.0, "mae.mask_ratio must lie in [0, 1]");
  need(model.mae.beta_T >= 0.0, "mae.beta_T must be non-negative");
  need(model.mae.init_std > 0.0, "mae.init_std must be positive");
  need(model.head_hidden >= 1, "policy.head_hidden must be >= 1");
  need(model.head_heads >= 1 && model.tokenizer.dim % model.head_heads == 0, "policy.head_heads must divide tokenizer.dim");
  need(trainer.rep_steps_per_rl >= 1, "trainer.rep_steps_per_rl must be >= 1");
  need(trainer.total_env_steps >= ppo.rollout_length, "trainer.total_env_steps must cover at least one rollout");
  need(trainer.micro_batch >= 1, "trainer.micro_batch must be >= 1");
  need(trainer.checkpoints_kept >= 1, "trainer.checkpoints_kept must be >= 1");
  if (trainer.schedule == Schedule::interleaved) {
    need(trainer.mode != TrainMode::end_to_end, "the interleaved schedule needs a representation loss (mode end_to_end has none)");
    need(trainer.mode != TrainMode::sequential, "the interleaved schedule does not apply to mode sequential");
    need(ppo.minibatch_size % trainer.rep_steps_per_rl == 0, "policy.minibatch_size must be divisible by trainer.rep_steps_per_rl");
  }
  need(eval.episodes_per_checkpoint >= 1, "eval.episodes_per_checkpoint must be >= 1");
  need(eval.checkpoints >= 1, "eval.checkpoints must be >= 1");
  need(eval.split == "train" || eval.split == "test", "eval.split must be train or test");
  if (!eval.modalities.empty()) {
    try {
      tok::parse_modalities(eval.modalities);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("invalid config: eval.modalities: ") + e.what());
    }
  }
}

}  // namespace m3l

#pragma once

#include <vector>

#include "m3l/config.hpp"
#include "m3l/core/rng.hpp"
#include "m3l/env/insertion_env.hpp"
#include "m3l/env/shapes.hpp"
#include "m3l/tokenizer/tokenizer.hpp"

namespace m3l::testing {

using nn::Index;

/// Observations from short random rollouts on training tasks: a mix of free motion
/// and contact frames.
inline std::vector<env::StackedObs> sample_observations(int count, std::uint64_t seed, int frames = 4) {
  env::EnvConfig cfg;
  cfg.frame_stack = frames;
  const env::ShapeLibrary lib = env::default_library();
  Rng rng(seed);
  std::vector<env::StackedObs> out;
  while (static_cast<int>(out.size()) < count) {
    env::InsertionEnv e(cfg);
    env::StackedObs obs = e.reset(rng.next_u64(), env::sample_task(rng, env::Split::train, lib, cfg));
    const int steps = static_cast<int>(rng.below(12));
    for (int s = 0; s < steps && !e.done(); ++s) {
      obs = e.step({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 0.2)}).obs;
    }
    out.push_back(std::move(obs));
  }
  return out;
}

inline std::vector<const env::StackedObs*> pointers(const std::vector<env::StackedObs>& obs) {
  std::vector<const env::StackedObs*> p;
  for (const auto& o : obs) p.push_back(&o);
  return p;
}

/// Random channels-last batch with the tokenizer's geometry.
template <typename S>
tok::ObsBatch<S> random_obs(const tok::TokenizerConfig& cfg, Index batch, Rng& rng) {
  tok::ObsBatch<S> obs;
  obs.batch = batch;
  obs.frames = cfg.frames;
  obs.image.resize(batch * cfg.image_size * cfg.image_size, cfg.in_channels());
  obs.touch.resize(2 * batch * cfg.taxel_size * cfg.taxel_size, cfg.in_channels());
  for (Index i = 0; i < obs.image.size(); ++i) obs.image.data()[i] = static_cast<S>(rng.uniform());
  for (Index i = 0; i < obs.touch.size(); ++i) obs.touch.data()[i] = static_cast<S>(rng.uniform(-1.0, 1.0));
  return obs;
}

/// A run small enough for unit tests: 2 envs, 16-step rollouts, a 16-wide model.
inline RunConfig tiny_run_config(const std::string& output_dir = "runs/test") {
  RunConfig c = desk_preset();
  c.output_dir = output_dir;
  c.env.frame_stack = 2;
  c.env.max_steps = 6;
  c.model.tokenizer.vision_stride = 16;
  c.model.tokenizer.touch_stride = 16;
  c.model.tokenizer.dim = 16;
  c.model.tokenizer.conv_hidden = 4;
  c.model.mae.enc_layers = 1;
  c.model.mae.enc_heads = 2;
  c.model.mae.dec_dim = 8;
  c.model.mae.dec_layers = 1;
  c.model.mae.dec_heads = 2;
  c.model.mae.mlp_ratio = 2;
  c.model.mae.mask_ratio = 0.5;
  c.model.head_hidden = 8;
  c.model.head_heads = 2;
  c.ppo.n_envs = 2;
  c.ppo.rollout_length = 16;
  c.ppo.minibatch_size = 8;
  c.ppo.epochs = 2;
  c.ppo.lr = 1e-3;
  c.trainer.rep_steps_per_rl = 2;
  c.trainer.micro_batch = 3;
  c.trainer.total_env_steps = 32;
  c.trainer.checkpoints_kept = 2;
  c.finalize();
  return c;
}

}  // namespace m3l::testing

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m3l/env/insertion_env.hpp"

namespace m3l::env {

struct EpisodeRecord {
  std::string peg_id;
  double episode_return = 0.0;
  bool success = false;
  int length = 0;
};

struct VecStep {
  std::vector<StackedObs> obs;  // post-reset observation for finished envs
  std::vector<double> reward;
  std::vector<bool> done;
  std::vector<DoneReason> reason;
  std::vector<StackedObs> final_obs;  // last observation of a finished episode, else empty
};

/// N independent environments stepped in lockstep with automatic reset. Each
/// instance draws its tasks from its own generator, so instances share no state.
class VecEnv {
 public:
  VecEnv(int n, EnvConfig cfg, ShapeLibrary library, Split split, std::uint64_t seed)
      : cfg_(std::move(cfg)), library_(std::move(library)), split_(split), seed_(seed) {
    if (n < 1) throw std::invalid_argument("vec env: need at least one environment");
    for (int i = 0; i < n; ++i) {
      envs_.emplace_back(cfg_);
      task_rngs_.emplace_back(mix_seed(seed, static_cast<std::uint64_t>(i)));
    }
    episodes_.assign(static_cast<std::size_t>(n), 0);
    returns_.assign(static_cast<std::size_t>(n), 0.0);
  }

  std::size_t size() const { return envs_.size(); }
  const InsertionEnv& env(std::size_t i) const { return envs_[i]; }
  const EnvConfig& config() const { return cfg_; }

  std::vector<StackedObs> reset() {
    std::vector<StackedObs> out;
    for (std::size_t i = 0; i < envs_.size(); ++i) out.push_back(start_episode(i));
    return out;
  }

  VecStep step(const std::vector<std::array<double, 3>>& actions) {
    if (actions.size() != envs_.size()) throw std::invalid_argument("vec env: one action per environment required");
    VecStep out;
    out.obs.resize(envs_.size());
    out.final_obs.resize(envs_.size());
    for (std::size_t i = 0; i < envs_.size(); ++i) {
      StepResult r = envs_[i].step(actions[i]);
      returns_[i] += r.reward;
      out.reward.push_back(r.reward);
      out.done.push_back(r.done);
      out.reason.push_back(r.info.done_reason);
      if (r.done) {
        completed_.push_back({envs_[i].task().peg.id, returns_[i], r.info.done_reason == DoneReason::success,
                              envs_[i].state().step_count});
        out.final_obs[i] = std::move(r.obs);
        out.obs[i] = start_episode(i);
      } else {
        out.obs[i] = std::move(r.obs);
      }
    }
    return out;
  }

  /// Finished episodes since the last call.
  std::vector<EpisodeRecord> take_completed() { return std::exchange(completed_, {}); }

  /// Peg id of every episode started so far, in start order.
  const std::vector<std::string>& task_log() const { return task_log_; }

 private:
  StackedObs start_episode(std::size_t i) {
    const TaskSpec task = sample_task(task_rngs_[i], split_, library_, cfg_);
    task_log_.push_back(task.peg.id);
    returns_[i] = 0.0;
    const std::uint64_t episode = episodes_[i]++;
    return envs_[i].reset(mix_seed(seed_ ^ 0x5eedULL, (static_cast<std::uint64_t>(i) << 32) | episode), task);
  }

  EnvConfig cfg_;
  ShapeLibrary library_;
  Split split_;
  std::uint64_t seed_;
  std::vector<InsertionEnv> envs_;
  std::vector<Rng> task_rngs_;
  std::vector<std::uint64_t> episodes_;
  std::vector<double> returns_;
  std::vector<EpisodeRecord> completed_;
  std::vector<std::string> task_log_;
};

}  // namespace m3l::env

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "m3l/env/insertion_env.hpp"
#include "m3l/policy/policy.hpp"
#include "m3l/tokenizer/tokenizer.hpp"

namespace m3l::train {

using nn::Index;

/// Raw single frames. Images are stored as bytes (the renderer quantizes to 1/255),
/// taxels as floats. A transition refers to its k frames by id.
class FrameStore {
 public:
  explicit FrameStore(tok::ModalitySet mods = tok::ModalitySet::both()) : mods_(mods) {}

  /// Appends frame `slot` of a stacked observation and returns its id.
  int add(const env::StackedObs& obs, int slot) {
    const std::size_t k = static_cast<std::size_t>(obs.k);
    const std::size_t s = static_cast<std::size_t>(slot);
    const std::size_t px = static_cast<std::size_t>(env::kImageSize * env::kImageSize);
    const std::size_t tx = static_cast<std::size_t>(env::kTaxelSize * env::kTaxelSize);
    if (mods_.vision) {
      for (std::size_t p = 0; p < px; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = obs.image_stack[p * 3 * k + s * 3 + c];
          images_.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
        }
      }
    }
    if (mods_.touch) {
      for (const auto* stack : {&obs.tactile_left_stack, &obs.tactile_right_stack}) {
        for (std::size_t p = 0; p < tx; ++p) {
          for (std::size_t c = 0; c < 3; ++c) taxels_.push_back((*stack)[p * 3 * k + s * 3 + c]);
        }
      }
      ++tok::taxel_reads();
    }
    return count_++;
  }

  int size() const { return count_; }
  tok::ModalitySet modalities() const { return mods_; }

  /// Channels-last batch for the given frame-id stacks (oldest first).
  template <typename S>
  tok::ObsBatch<S> gather(const std::vector<const std::vector<int>*>& stacks, tok::ModalitySet mods) const {
    if (stacks.empty()) throw std::invalid_argument("frame store: empty batch");
    if ((mods.vision && !mods_.vision) || (mods.touch && !mods_.touch)) {
      throw std::logic_error("frame store: requested a stream that was not stored");
    }
    const Index b = static_cast<Index>(stacks.size());
    const Index k = static_cast<Index>(stacks.front()->size());
    const Index px = env::kImageSize * env::kImageSize;
    const Index tx = env::kTaxelSize * env::kTaxelSize;
    tok::ObsBatch<S> out;
    out.batch = b;
    out.frames = static_cast<int>(k);
    if (mods.vision) {
      out.image.resize(b * px, 3 * k);
      for (Index i = 0; i < b; ++i) {
        for (Index f = 0; f < k; ++f) {
          const std::uint8_t* src = images_.data() + static_cast<std::size_t>((*stacks[static_cast<std::size_t>(i)])[static_cast<std::size_t>(f)]) * px * 3;
          for (Index p = 0; p < px; ++p) {
            for (Index c = 0; c < 3; ++c) out.image(i * px + p, f * 3 + c) = static_cast<S>(src[p * 3 + c]) / static_cast<S>(255);
          }
        }
      }
    }
    if (mods.touch) {
      out.touch.resize(2 * b * tx, 3 * k);
      for (Index i = 0; i < b; ++i) {
        for (Index f = 0; f < k; ++f) {
          const float* src = taxels_.data() + static_cast<std::size_t>((*stacks[static_cast<std::size_t>(i)])[static_cast<std::size_t>(f)]) * 2 * tx * 3;
          for (Index pad = 0; pad < 2; ++pad) {
            for (Index p = 0; p < tx; ++p) {
              for (Index c = 0; c < 3; ++c) out.touch((pad * b + i) * tx + p, f * 3 + c) = static_cast<S>(src[(pad * tx + p) * 3 + c]);
            }
          }
        }
      }
      tok::taxel_reads() += static_cast<std::uint64_t>(b);
    }
    return out;
  }

 private:
  tok::ModalitySet mods_;
  std::vector<std::uint8_t> images_;
  std::vector<float> taxels_;
  int count_ = 0;
};

struct Transition {
  std::vector<int> frames;  // k frame ids, oldest first
  int env = 0;
  std::array<double, 3> action{};  // raw Gaussian sample (before clamping)
  double log_prob = 0.0;
  double reward = 0.0;  // includes gamma * V(final obs) on a timeout
  bool done = false;
  double value = 0.0;
  double advantage = 0.0;
  double value_target = 0.0;
};

/// On-policy storage for one collection phase, laid out step-major (all envs of step
/// 0, then step 1, ...).
class RolloutBuffer {
 public:
  RolloutBuffer(int n_envs, int frame_stack, tok::ModalitySet mods)
      : store_(mods), n_envs_(n_envs), k_(frame_stack), stacks_(static_cast<std::size_t>(n_envs)) {}

  /// Registers the observation an env is about to act on. `fresh` marks the first
  /// observation of an episode (all k slots hold the same frame).
  const std::vector<int>& observe(int env, const env::StackedObs& obs, bool fresh) {
    if (obs.k != k_) throw std::invalid_argument("rollout buffer: frame stack mismatch");
    auto& ids = stacks_[static_cast<std::size_t>(env)];
    if (fresh) {
      ids.assign(static_cast<std::size_t>(k_), store_.add(obs, k_ - 1));
    } else if (ids.empty()) {
      // mid-episode stack carried over from an earlier collection phase
      for (int f = 0; f < k_; ++f) ids.push_back(store_.add(obs, f));
    } else {
      ids.erase(ids.begin());
      ids.push_back(store_.add(obs, k_ - 1));
    }
    return ids;
  }

  void add(Transition t) { transitions_.push_back(std::move(t)); }

  /// GAE per environment; bootstrap[e] is V of env e's observation after the last step.
  void finish(const std::vector<double>& bootstrap, double gamma, double lam) {
    if (static_cast<int>(bootstrap.size()) != n_envs_) throw std::invalid_argument("rollout buffer: one bootstrap value per env");
    for (int e = 0; e < n_envs_; ++e) {
      std::vector<std::size_t> idx;
      for (std::size_t i = static_cast<std::size_t>(e); i < transitions_.size(); i += static_cast<std::size_t>(n_envs_)) idx.push_back(i);
      std::vector<double> r, v;
      std::vector<bool> d;
      for (std::size_t i : idx) {
        r.push_back(transitions_[i].reward);
        v.push_back(transitions_[i].value);
        d.push_back(transitions_[i].done);
      }
      const policy::GaeResult g = policy::gae(r, v, d, bootstrap[static_cast<std::size_t>(e)], gamma, lam);
      for (std::size_t j = 0; j < idx.size(); ++j) {
        if (!std::isfinite(g.advantages[j])) throw std::runtime_error("rollout buffer: non-finite advantage");
        transitions_[idx[j]].advantage = g.advantages[j];
        transitions_[idx[j]].value_target = g.returns[j];
      }
    }
  }

  template <typename S>
  tok::ObsBatch<S> gather(const std::vector<int>& indices, tok::ModalitySet mods) const {
    std::vector<const std::vector<int>*> stacks;
    stacks.reserve(indices.size());
    for (int i : indices) stacks.push_back(&transitions_[static_cast<std::size_t>(i)].frames);
    return store_.gather<S>(stacks, mods);
  }

  const std::vector<Transition>& transitions() const { return transitions_; }
  std::size_t size() const { return transitions_.size(); }
  const FrameStore& frames() const { return store_; }
  int n_envs() const { return n_envs_; }

 private:
  FrameStore store_;
  int n_envs_;
  int k_;
  std::vector<std::vector<int>> stacks_;
  std::vector<Transition> transitions_;
};

}  // namespace m3l::train

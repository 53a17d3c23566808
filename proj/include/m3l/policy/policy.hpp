#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <vector>

#include "m3l/mae/mae.hpp"
#include "m3l/nn/transformer.hpp"
#include "m3l/tokenizer/tokenizer.hpp"

namespace m3l::policy {

using nn::Index;
using nn::Matrix;
using nn::Parameter;

inline constexpr int kActionDim = 3;

struct PPOConfig {
  double epsilon = 0.2;
  double gamma = 0.99;
  double lam = 0.95;
  double beta_V = 0.5;
  double beta_H = 0.01;
  double lr = 1e-4;
  int epochs = 10;           // M
  int minibatch_size = 512;  // B
  int rollout_length = 32768;  // N_PPO, transitions per cycle over all envs
  int n_envs = 8;
  bool normalize_advantages = true;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("ppo config: epsilon must lie in (0, 1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("ppo config: gamma must lie in [0, 1]");
    if (!(lam >= 0.0 && lam <= 1.0)) throw std::invalid_argument("ppo config: lam must lie in [0, 1]");
    if (!(lr >= 0.0)) throw std::invalid_argument("ppo config: lr must be non-negative");
    if (epochs < 1) throw std::invalid_argument("ppo config: epochs must be >= 1");
    if (minibatch_size < 1) throw std::invalid_argument("ppo config: minibatch_size must be >= 1");
    if (n_envs < 1) throw std::invalid_argument("ppo config: n_envs must be >= 1");
    if (rollout_length < n_envs || rollout_length % n_envs != 0) {
      throw std::invalid_argument("ppo config: rollout_length must be a positive multiple of n_envs");
    }
    if (rollout_length % minibatch_size != 0) {
      throw std::invalid_argument("ppo config: rollout_length must divide into minibatches of minibatch_size");
    }
  }
};

/// Tokenizer + encoder without masking, restricted to `mods`.
template <typename S>
struct EmbedCache {
  typename tok::Tokenizer<S>::Cache tokenizer;
  typename mae::MaeEncoder<S>::Cache encoder;
  tok::TokenLayout layout;
};

template <typename S>
Matrix<S> embed_obs(const tok::Tokenizer<S>& tokenizer, const mae::MaeEncoder<S>& encoder, const tok::ObsBatch<S>& obs,
                    tok::ModalitySet mods, std::type_identity_t<EmbedCache<S>>* cache = nullptr, Index* seq_len = nullptr) {
  if (mods.empty()) throw std::invalid_argument("embed_obs: empty modality set");
  const tok::TokenBatch<S> tokens = tokenizer.forward(obs, mods, cache ? &cache->tokenizer : nullptr);
  if (cache) cache->layout = tokens.layout;
  if (seq_len) *seq_len = tokens.n_tokens();
  return encoder.encode(tokens, false, cache ? &cache->encoder : nullptr);
}

template <typename S>
void embed_obs_backward(tok::Tokenizer<S>& tokenizer, mae::MaeEncoder<S>& encoder, const Matrix<S>& demb,
                        const EmbedCache<S>& cache) {
  tokenizer.backward(encoder.backward(demb, cache.encoder), cache.layout, cache.tokenizer);
}

/// Diagonal Gaussian with a state-independent learned log standard deviation.
template <typename S>
struct ActionDist {
  Matrix<S> mean;     // batch x 3
  Matrix<S> log_std;  // 1 x 3
};

inline constexpr double kLog2Pi = 1.8378770664093453;

template <typename S>
S gaussian_log_prob(const S* action, const S* mean, const S* log_std, int dim) {
  S lp = 0;
  for (int j = 0; j < dim; ++j) {
    const S z = (action[j] - mean[j]) * std::exp(-log_std[j]);
    lp += static_cast<S>(-0.5) * z * z - log_std[j] - static_cast<S>(0.5 * kLog2Pi);
  }
  return lp;
}

template <typename S>
S gaussian_entropy(const S* log_std, int dim) {
  S h = 0;
  for (int j = 0; j < dim; ++j) h += log_std[j] + static_cast<S>(0.5 * (1.0 + kLog2Pi));
  return h;
}

/// Separate transformer-layer + mean-pool + MLP stacks for the actor (action mean)
/// and the critic (state value). Final layers start at zero.
template <typename S>
class ActorCritic {
 public:
  struct Cache {
    typename nn::TransformerBlock<S>::Cache actor_block, critic_block;
    typename nn::Linear<S>::Cache actor_fc1, actor_fc2, critic_fc1, critic_fc2;
    typename nn::Gelu<S>::Cache actor_act, critic_act;
    Index seq_len = 0;
  };

  ActorCritic() = default;
  ActorCritic(int dim, int heads, int mlp_ratio, int hidden)
      : actor_block_(dim, heads, static_cast<Index>(dim) * mlp_ratio),
        actor_fc1_(dim, hidden),
        actor_fc2_(hidden, kActionDim),
        critic_block_(dim, heads, static_cast<Index>(dim) * mlp_ratio),
        critic_fc1_(dim, hidden),
        critic_fc2_(hidden, 1),
        log_std_(1, kActionDim) {}

  void init(Rng& rng, double std) {
    actor_block_.init(rng, std);
    critic_block_.init(rng, std);
    actor_fc1_.init(rng, std);
    critic_fc1_.init(rng, std);
    actor_fc2_.zero_init();
    critic_fc2_.zero_init();
    log_std_.value.setZero();
  }

  /// Returns the action mean (batch x 3) and writes the value (batch x 1).
  Matrix<S> forward(const Matrix<S>& emb, Index seq_len, Matrix<S>* value, Cache* cache = nullptr) const {
    if (emb.rows() == 0 || seq_len <= 0) throw std::invalid_argument("actor_critic: empty embeddings");
    if (cache) cache->seq_len = seq_len;
    const Matrix<S> ha = nn::mean_pool(actor_block_.forward(emb, seq_len, cache ? &cache->actor_block : nullptr), seq_len);
    Matrix<S> mean = actor_fc2_.forward(
        nn::Gelu<S>::forward(actor_fc1_.forward(ha, cache ? &cache->actor_fc1 : nullptr), cache ? &cache->actor_act : nullptr),
        cache ? &cache->actor_fc2 : nullptr);
    if (value) {
      const Matrix<S> hc = nn::mean_pool(critic_block_.forward(emb, seq_len, cache ? &cache->critic_block : nullptr), seq_len);
      *value = critic_fc2_.forward(nn::Gelu<S>::forward(critic_fc1_.forward(hc, cache ? &cache->critic_fc1 : nullptr),
                                                        cache ? &cache->critic_act : nullptr),
                                   cache ? &cache->critic_fc2 : nullptr);
    }
    return mean;
  }

  ActionDist<S> dist(const Matrix<S>& mean) const { return {mean, log_std_.value}; }

  /// dL/demb from gradients on the mean and value outputs (either may be empty).
  Matrix<S> backward(const Matrix<S>& dmean, const Matrix<S>& dvalue, const Cache& cache) {
    Matrix<S> demb;
    const auto add = [&](const Matrix<S>& g) {
      if (demb.size() == 0) {
        demb = g;
      } else {
        demb += g;
      }
    };
    if (dmean.size() > 0) {
      const Matrix<S> dh = actor_fc1_.backward(nn::Gelu<S>::backward(actor_fc2_.backward(dmean, cache.actor_fc2), cache.actor_act),
                                               cache.actor_fc1);
      add(actor_block_.backward(nn::mean_pool_backward(dh, cache.seq_len), cache.actor_block));
    }
    if (dvalue.size() > 0) {
      const Matrix<S> dh = critic_fc1_.backward(
          nn::Gelu<S>::backward(critic_fc2_.backward(dvalue, cache.critic_fc2), cache.critic_act), cache.critic_fc1);
      add(critic_block_.backward(nn::mean_pool_backward(dh, cache.seq_len), cache.critic_block));
    }
    return demb;
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    actor_block_.visit(v, prefix + "actor.block.");
    actor_fc1_.visit(v, prefix + "actor.fc1.");
    actor_fc2_.visit(v, prefix + "actor.fc2.");
    critic_block_.visit(v, prefix + "critic.block.");
    critic_fc1_.visit(v, prefix + "critic.fc1.");
    critic_fc2_.visit(v, prefix + "critic.fc2.");
    v(prefix + "log_std", log_std_);
  }

  Parameter<S>& log_std() { return log_std_; }
  const Parameter<S>& log_std() const { return log_std_; }

 private:
  nn::TransformerBlock<S> actor_block_;
  nn::Linear<S> actor_fc1_;
  nn::Linear<S> actor_fc2_;
  nn::TransformerBlock<S> critic_block_;
  nn::Linear<S> critic_fc1_;
  nn::Linear<S> critic_fc2_;
  Parameter<S> log_std_;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Backward recursion over one environment's transitions. dones[t] marks the end of
/// an episode after step t; bootstrap_value is V of the state after the last step.
inline GaeResult gae(const std::vector<double>& rewards, const std::vector<double>& values, const std::vector<bool>& dones,
                     double bootstrap_value, double gamma, double lam) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw std::invalid_argument("gae: sequence lengths differ");
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    next_adv = delta + gamma * lam * live * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return out;
}

/// min(r A, clip(r, 1 - eps, 1 + eps) A).
inline double clipped_surrogate(double r, double advantage, double eps) {
  const double clipped = r < 1.0 - eps ? 1.0 - eps : (r > 1.0 + eps ? 1.0 + eps : r);
  return std::min(r * advantage, clipped * advantage);
}

struct PpoTerms {
  double l_clip = 0.0;    // mean clipped surrogate (maximized)
  double l_critic = 0.0;  // mean of (V - V_targ)^2 / 2
  double entropy = 0.0;
  double loss = 0.0;      // minimized: -l_clip + beta_V l_critic - beta_H entropy
  double clip_fraction = 0.0;
  std::vector<double> dlogp;   // dloss / dnew_log_prob per sample
  std::vector<double> dvalue;  // dloss / dnew_value per sample
  double dentropy = 0.0;       // dloss / dentropy
};

/// `scale` multiplies every mean (1 / B for a full minibatch, chunk fraction when the
/// minibatch is processed in pieces). Advantages must already be normalized.
/// `clip_weight` scales the surrogate term of the minimized loss (gradient checks
/// isolate single terms with it).
inline PpoTerms ppo_loss(const std::vector<double>& new_log_probs, const std::vector<double>& old_log_probs,
                         const std::vector<double>& advantages, const std::vector<double>& new_values,
                         const std::vector<double>& value_targets, double entropy, const PPOConfig& cfg, double scale = -1.0,
                         double clip_weight = 1.0) {
  const std::size_t n = new_log_probs.size();
  if (old_log_probs.size() != n || advantages.size() != n || new_values.size() != n || value_targets.size() != n) {
    throw std::invalid_argument("ppo_loss: input lengths differ");
  }
  if (n == 0) throw std::invalid_argument("ppo_loss: empty minibatch");
  const double w = scale > 0.0 ? scale : 1.0 / static_cast<double>(n);
  PpoTerms out;
  out.dlogp.assign(n, 0.0);
  out.dvalue.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::exp(new_log_probs[i] - old_log_probs[i]);
    if (std::isnan(r)) throw std::domain_error("ppo_loss: NaN probability ratio");
    const double a = advantages[i];
    const double surrogate = clipped_surrogate(r, a, cfg.epsilon);
    out.l_clip += w * surrogate;
    if (r * a <= surrogate) {
      out.dlogp[i] = -clip_weight * w * a * r;
    } else {
      out.clip_fraction += w;
    }
    const double dv = new_values[i] - value_targets[i];
    out.l_critic += w * 0.5 * dv * dv;
    out.dvalue[i] = w * cfg.beta_V * dv;
  }
  const double batch_weight = w * static_cast<double>(n);
  out.entropy = batch_weight * entropy;
  out.dentropy = -cfg.beta_H * batch_weight;
  out.loss = -clip_weight * out.l_clip + cfg.beta_V * out.l_critic - cfg.beta_H * out.entropy;
  return out;
}

/// Zero mean, unit variance.
inline std::vector<double> normalize_advantages(const std::vector<double>& a) {
  if (a.size() < 2) return a;
  double mean = 0.0;
  for (double x : a) mean += x;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  var /= static_cast<double>(a.size());
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - mean) * inv;
  return out;
}

}  // namespace m3l::policy

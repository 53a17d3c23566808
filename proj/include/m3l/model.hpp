#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/mae/mae.hpp"
#include "m3l/nn/parameter.hpp"
#include "m3l/policy/policy.hpp"
#include "m3l/tokenizer/tokenizer.hpp"

namespace m3l {

using nn::Index;
using nn::Matrix;

struct ModelConfig {
  tok::TokenizerConfig tokenizer;
  mae::MaeConfig mae;
  int head_hidden = 64;
  int head_heads = 4;
};

/// Every learnable module of the agent. Visitation order (and therefore the optimizer
/// state layout and checkpoint order) is tokenizer, encoder, decoder, actor-critic.
template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg)
      : tokenizer(cfg.tokenizer),
        encoder(cfg.tokenizer.dim, cfg.mae.enc_layers, cfg.mae.enc_heads, cfg.mae.mlp_ratio),
        decoder(cfg.tokenizer, cfg.tokenizer.dim, cfg.mae.dec_dim, cfg.mae.dec_layers, cfg.mae.dec_heads, cfg.mae.mlp_ratio),
        actor_critic(cfg.tokenizer.dim, cfg.head_heads, cfg.mae.mlp_ratio, cfg.head_hidden),
        cfg_(cfg) {
    params_ = nn::collect_parameters<S>(*this);
  }

  Model(const Model& other) : Model(other.cfg_) { copy_values_from(other); }
  Model& operator=(const Model&) = delete;

  void init(std::uint64_t seed) {
    Rng rng(seed);
    tokenizer.init(rng);
    encoder.init(rng, cfg_.mae.init_std);
    decoder.init(rng, cfg_.mae.init_std);
    actor_critic.init(rng, cfg_.mae.init_std);
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix = "") {
    tokenizer.visit(v, prefix + "tokenizer.");
    encoder.visit(v, prefix + "encoder.");
    decoder.visit(v, prefix + "decoder.");
    actor_critic.visit(v, prefix + "policy.");
  }

  const nn::ParameterList<S>& parameters() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  void zero_grad() { nn::zero_grads(params_); }

  template <typename T>
  void copy_values_from(const Model<T>& other) {
    const auto& src = other.parameters();
    if (src.size() != params_.size()) throw std::invalid_argument("model copy: parameter lists differ");
    for (std::size_t i = 0; i < src.size(); ++i) params_[i].param->value = src[i].param->value.template cast<S>();
  }

  tok::Tokenizer<S> tokenizer;
  mae::MaeEncoder<S> encoder;
  mae::MaeDecoder<S> decoder;
  policy::ActorCritic<S> actor_critic;

 private:
  ModelConfig cfg_;
  nn::ParameterList<S> params_;
};

/// Masked reconstruction on `obs` restricted to `mods`; accumulates dl_rep (times
/// `weight`) into the parameter gradients when `backprop` is set.
template <typename S>
mae::LossBreakdown rep_step(Model<S>& model, const tok::ObsBatch<S>& obs, tok::ModalitySet mods,
                            const std::vector<tok::MaskIndices>& masks, const mae::LossCounts* counts, bool backprop,
                            double weight = 1.0) {
  const mae::MaeConfig& mc = model.config().mae;
  typename tok::Tokenizer<S>::Cache tc;
  typename mae::MaeEncoder<S>::Cache ec;
  typename mae::MaeDecoder<S>::Cache dc;
  tok::TokenBatch<S> tokens = model.tokenizer.forward(obs, mods, backprop ? &tc : nullptr);
  tok::apply_masks(tokens, masks);
  const Matrix<S> latent = model.encoder.encode(tokens, true, backprop ? &ec : nullptr);
  const mae::Payloads<S> pred = model.decoder.decode(latent, tokens, backprop ? &dc : nullptr);
  const mae::Payloads<S> target = mae::patchify(obs, model.config().tokenizer, mods);
  mae::Payloads<S> grad;
  const mae::LossBreakdown loss = mae::mae_loss(pred, target, tokens.layout, tokens.batch, tokens.masks, mc.beta_T,
                                                mc.loss_on_all_tokens, counts, backprop ? &grad : nullptr);
  if (!std::isfinite(loss.l_rep)) throw std::runtime_error("representation loss is not finite");
  if (backprop) {
    if (weight != 1.0) {
      grad.vision *= static_cast<S>(weight);
      grad.touch *= static_cast<S>(weight);
    }
    const Matrix<S> dlatent = model.decoder.backward(grad, tokens, dc);
    model.tokenizer.backward(model.encoder.backward(dlatent, ec), tokens.layout, tc);
  }
  return loss;
}

/// Inputs of one PPO minibatch (or chunk of one).
struct PpoBatch {
  std::vector<std::array<double, 3>> actions;
  std::vector<double> old_log_probs;
  std::vector<double> advantages;  // already normalized when configured
  std::vector<double> value_targets;
};

/// Evaluates the PPO loss on `obs` and accumulates its gradient. `scale` is the
/// per-sample weight (1 / minibatch size).
template <typename S>
policy::PpoTerms ppo_step(Model<S>& model, const tok::ObsBatch<S>& obs, tok::ModalitySet mods, const PpoBatch& batch,
                          const policy::PPOConfig& cfg, double scale, bool backprop, double clip_weight = 1.0) {
  policy::EmbedCache<S> emb_cache;
  typename policy::ActorCritic<S>::Cache ac_cache;
  Index seq_len = 0;
  const Matrix<S> emb = policy::embed_obs(model.tokenizer, model.encoder, obs, mods, backprop ? &emb_cache : nullptr, &seq_len);
  Matrix<S> value;
  const Matrix<S> mean = model.actor_critic.forward(emb, seq_len, &value, backprop ? &ac_cache : nullptr);
  const Matrix<S>& log_std = model.actor_critic.log_std().value;
  const std::size_t n = batch.actions.size();
  if (static_cast<Index>(n) != mean.rows()) throw std::invalid_argument("ppo_step: action count differs from batch");
  std::vector<double> new_lp(n), new_v(n);
  for (std::size_t i = 0; i < n; ++i) {
    S a[3];
    for (int j = 0; j < 3; ++j) a[j] = static_cast<S>(batch.actions[i][static_cast<std::size_t>(j)]);
    new_lp[i] = static_cast<double>(policy::gaussian_log_prob<S>(a, mean.row(static_cast<Index>(i)).data(), log_std.data(), 3));
    new_v[i] = static_cast<double>(value(static_cast<Index>(i), 0));
  }
  const double entropy = static_cast<double>(policy::gaussian_entropy<S>(log_std.data(), 3));
  policy::PpoTerms terms =
      policy::ppo_loss(new_lp, batch.old_log_probs, batch.advantages, new_v, batch.value_targets, entropy, cfg, scale, clip_weight);
  if (!std::isfinite(terms.loss)) throw std::runtime_error("PPO loss is not finite");
  if (!backprop) return terms;

  Matrix<S> dmean(static_cast<Index>(n), 3);
  Matrix<S> dvalue(static_cast<Index>(n), 1);
  auto& dlog_std = model.actor_critic.log_std().grad;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double inv_var = std::exp(-2.0 * static_cast<double>(log_std(0, j)));
      const double diff = batch.actions[i][static_cast<std::size_t>(j)] - static_cast<double>(mean(static_cast<Index>(i), j));
      dmean(static_cast<Index>(i), j) = static_cast<S>(terms.dlogp[i] * diff * inv_var);
      dlog_std(0, j) += static_cast<S>(terms.dlogp[i] * (diff * diff * inv_var - 1.0));
    }
    dvalue(static_cast<Index>(i), 0) = static_cast<S>(terms.dvalue[i]);
  }
  for (int j = 0; j < 3; ++j) dlog_std(0, j) += static_cast<S>(terms.dentropy);
  const Matrix<S> demb = model.actor_critic.backward(dmean, dvalue, ac_cache);
  policy::embed_obs_backward(model.tokenizer, model.encoder, demb, emb_cache);
  return terms;
}

/// Frozen-network inference for action selection: action means, values and the
/// shared log standard deviation.
template <typename S>
struct PolicyOutput {
  Matrix<S> mean;
  Matrix<S> value;
};

template <typename S>
PolicyOutput<S> policy_forward(const Model<S>& model, const tok::ObsBatch<S>& obs, tok::ModalitySet mods) {
  Index seq_len = 0;
  const Matrix<S> emb = policy::embed_obs(model.tokenizer, model.encoder, obs, mods, nullptr, &seq_len);
  PolicyOutput<S> out;
  out.mean = model.actor_critic.forward(emb, seq_len, &out.value);
  return out;
}

}  // namespace m3l

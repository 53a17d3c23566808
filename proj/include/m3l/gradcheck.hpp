#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "m3l/model.hpp"

namespace m3l::gradcheck {

struct Options {
  bool use_double = false;    // double analytic gradients (otherwise float)
  bool inject_fault = false;  // perturb one analytic gradient entry; the suite must fail
  std::uint64_t seed = 0;
  double tolerance = -1.0;  // default 1e-3 (float) or 1e-6 (double)
  double step = 1e-5;       // central-difference step, always evaluated in double
};

struct ComponentResult {
  std::string name;
  double max_rel_error = 0.0;  // worst parameter tensor
  std::string worst_tensor;
  double global_rel_error = 0.0;  // over the concatenated gradient
  std::size_t parameters = 0;
  bool passed = false;
};

struct Report {
  std::vector<ComponentResult> components;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed = false;
};

/// Six tokens: a 2x2 vision grid on 8x8 images and one token per 4x4 pad.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.tokenizer.image_size = 8;
  c.tokenizer.taxel_size = 4;
  c.tokenizer.frames = 2;
  c.tokenizer.vision_stride = 4;
  c.tokenizer.touch_stride = 4;
  c.tokenizer.dim = 8;
  c.tokenizer.conv_hidden = 3;
  c.mae.enc_layers = 1;
  c.mae.enc_heads = 2;
  c.mae.dec_dim = 8;
  c.mae.dec_layers = 1;
  c.mae.dec_heads = 2;
  c.mae.mlp_ratio = 2;
  c.mae.mask_ratio = 0.5;
  c.head_hidden = 8;
  c.head_heads = 2;
  return c;
}

namespace detail {

struct Problem {
  ModelConfig cfg;
  tok::ObsBatch<double> obs;
  std::vector<tok::MaskIndices> masks;
  PpoBatch ppo;
};

template <typename S>
tok::ObsBatch<S> cast_obs(const tok::ObsBatch<double>& o) {
  tok::ObsBatch<S> out;
  out.batch = o.batch;
  out.frames = o.frames;
  out.image = o.image.cast<S>();
  out.touch = o.touch.cast<S>();
  return out;
}

/// Scalar loss of one component; accumulates its gradient when `backprop`.
template <typename S>
double component_loss(const std::string& name, Model<S>& model, const Problem& p, bool backprop) {
  const tok::ObsBatch<S> obs = cast_obs<S>(p.obs);
  const auto both = tok::ModalitySet::both();
  const double scale = 1.0 / static_cast<double>(p.obs.batch);
  policy::PPOConfig pc;
  if (name == "l_rep") return rep_step(model, obs, both, p.masks, nullptr, backprop).l_rep;
  if (name == "l_clip") {
    pc.beta_V = pc.beta_H = 0.0;
    return ppo_step(model, obs, both, p.ppo, pc, scale, backprop).loss;
  }
  if (name == "l_critic") {
    pc.beta_V = 1.0;
    pc.beta_H = 0.0;
    return ppo_step(model, obs, both, p.ppo, pc, scale, backprop, 0.0).loss;
  }
  if (name == "entropy") {
    pc.beta_V = 0.0;
    pc.beta_H = 1.0;
    return ppo_step(model, obs, both, p.ppo, pc, scale, backprop, 0.0).loss;
  }
  if (name == "joint") return rep_step(model, obs, both, p.masks, nullptr, backprop).l_rep + ppo_step(model, obs, both, p.ppo, pc, scale, backprop).loss;
  throw std::invalid_argument("gradcheck: unknown component " + name);
}

inline Problem make_problem(std::uint64_t seed, Model<double>& model) {
  Problem p;
  p.cfg = model.config();
  Rng rng(mix_seed(seed, 1));
  // move every tensor off its initializer (zero-initialized heads included)
  for (const auto& np : model.parameters()) {
    for (Index i = 0; i < np.param->value.size(); ++i) np.param->value.data()[i] += 0.2 * rng.normal();
  }
  const auto& tc = p.cfg.tokenizer;
  const Index b = 3;
  p.obs.batch = b;
  p.obs.frames = tc.frames;
  p.obs.image.resize(b * tc.image_size * tc.image_size, tc.in_channels());
  p.obs.touch.resize(2 * b * tc.taxel_size * tc.taxel_size, tc.in_channels());
  for (Index i = 0; i < p.obs.image.size(); ++i) p.obs.image.data()[i] = rng.uniform();
  for (Index i = 0; i < p.obs.touch.size(); ++i) p.obs.touch.data()[i] = rng.uniform(-1.0, 1.0);
  p.masks = tok::sample_masks<double>(b, tc.token_count(tok::ModalitySet::both()), p.cfg.mae.mask_ratio, rng);

  // old log-probs sit away from the clip kinks: |log r| = 0.1 inside, 0.5 outside
  const auto out = policy_forward(model, p.obs, tok::ModalitySet::both());
  const double* log_std = model.actor_critic.log_std().value.data();
  static const double offsets[] = {0.1, -0.1, 0.5, -0.5};
  for (Index i = 0; i < b; ++i) {
    std::array<double, 3> a{};
    for (int j = 0; j < 3; ++j) a[static_cast<std::size_t>(j)] = out.mean(i, j) + std::exp(log_std[j]) * rng.normal();
    const double lp = policy::gaussian_log_prob<double>(a.data(), out.mean.row(i).data(), log_std, 3);
    p.ppo.actions.push_back(a);
    p.ppo.old_log_probs.push_back(lp + offsets[static_cast<std::size_t>(i) % 4]);
    p.ppo.advantages.push_back(rng.normal());
    p.ppo.value_targets.push_back(rng.normal());
  }
  return p;
}

template <typename S>
ComponentResult check_component(const std::string& name, const Model<double>& reference, const Problem& p, const Options& opt, double tol) {
  Model<double> fd_model(reference);
  Model<S> model(p.cfg);
  model.copy_values_from(reference);
  model.zero_grad();
  component_loss(name, model, p, true);

  ComponentResult r;
  r.name = name;
  const auto& fd_params = fd_model.parameters();
  const auto& params = model.parameters();
  double diff_all = 0.0, a_all = 0.0, fd_all = 0.0;
  std::vector<std::vector<double>> analytic(params.size()), numeric(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& value = fd_params[t].param->value;
    const auto& grad = params[t].param->grad;
    for (Index i = 0; i < value.size(); ++i) {
      const double x = value.data()[i];
      value.data()[i] = x + opt.step;
      const double up = component_loss(name, fd_model, p, false);
      value.data()[i] = x - opt.step;
      const double down = component_loss(name, fd_model, p, false);
      value.data()[i] = x;
      numeric[t].push_back((up - down) / (2.0 * opt.step));
      analytic[t].push_back(static_cast<double>(grad.data()[i]));
    }
    r.parameters += static_cast<std::size_t>(value.size());
  }
  if (opt.inject_fault) {
    // corrupt the largest entry of the first tensor with a nonzero gradient
    for (auto& g : analytic) {
      std::size_t k = 0;
      for (std::size_t i = 1; i < g.size(); ++i) k = std::abs(g[i]) > std::abs(g[k]) ? i : k;
      if (!g.empty() && g[k] != 0.0) {
        g[k] = -2.0 * g[k];
        break;
      }
    }
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < analytic[t].size(); ++i) {
      diff_all += (analytic[t][i] - numeric[t][i]) * (analytic[t][i] - numeric[t][i]);
      a_all += analytic[t][i] * analytic[t][i];
      fd_all += numeric[t][i] * numeric[t][i];
    }
  }
  const double global_norm = std::sqrt(std::max(a_all, fd_all));
  r.global_rel_error = global_norm > 0.0 ? std::sqrt(diff_all) / global_norm : 0.0;
  // tensors whose gradient is negligible against the whole are compared on that scale
  const double floor = 1e-3 * global_norm + 1e-12;
  for (std::size_t t = 0; t < params.size(); ++t) {
    double d = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < analytic[t].size(); ++i) {
      d += (analytic[t][i] - numeric[t][i]) * (analytic[t][i] - numeric[t][i]);
      na += analytic[t][i] * analytic[t][i];
      nf += numeric[t][i] * numeric[t][i];
    }
    const double e = std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nf), floor});
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_tensor = params[t].name;
    }
  }
  r.passed = r.max_rel_error <= tol && r.global_rel_error <= tol;
  return r;
}

}  // namespace detail

inline const std::vector<std::string>& component_names() {
  static const std::vector<std::string> names = {"l_rep", "l_clip", "l_critic", "entropy", "joint"};
  return names;
}

/// Finite-difference check of every loss component on a tiny model.
inline Report run(const Options& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  rep.tolerance = opt.tolerance > 0.0 ? opt.tolerance : (opt.use_double ? 1e-6 : 1e-3);
  Model<double> reference(tiny_model_config());
  reference.init(mix_seed(opt.seed, 0));
  const detail::Problem problem = detail::make_problem(opt.seed, reference);
  rep.passed = true;
  for (const auto& name : component_names()) {
    ComponentResult r = opt.use_double ? detail::check_component<double>(name, reference, problem, opt, rep.tolerance)
                                       : detail::check_component<float>(name, reference, problem, opt, rep.tolerance);
    rep.passed = rep.passed && r.passed;
    rep.components.push_back(std::move(r));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace m3l::gradcheck

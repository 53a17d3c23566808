#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/config.hpp"
#include "m3l/env/vec_env.hpp"
#include "m3l/model.hpp"
#include "m3l/nn/adam.hpp"
#include "m3l/trainer/checkpoint.hpp"
#include "m3l/trainer/rollout_buffer.hpp"

namespace m3l::train {

/// Seed streams derived from RunConfig::seed.
enum Stream : std::uint64_t { kInitStream = 0, kEnvStream = 1, kActionStream = 2, kShuffleStream = 3, kMaskStream = 4 };

inline constexpr tok::ModalitySet kNoLog{false, false};

struct UpdateStats {
  double mse_pixels = 0.0;
  double mse_taxels = 0.0;
  double l_rep = 0.0;
  double l_clip = 0.0;
  double l_critic = 0.0;
  double entropy = 0.0;
  double total_loss = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
  std::int64_t optimizer_steps = 0;
  std::vector<tok::ModalitySet> rep_forwards;  // modality set of every representation forward
};

struct CycleMetrics {
  std::int64_t step = 0;
  double episode_return_mean = std::numeric_limits<double>::quiet_NaN();
  double success_rate = std::numeric_limits<double>::quiet_NaN();
  int episodes = 0;
  UpdateStats update;
};

inline const char* kMetricsHeader = "step,episode_return_mean,success_rate,mse_pixels,mse_taxels,l_clip,l_critic,entropy,total_loss";

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_row(const CycleMetrics& m) {
  std::ostringstream os;
  os << m.step;
  for (double v : {m.episode_return_mean, m.success_rate, m.update.mse_pixels, m.update.mse_taxels, m.update.l_clip, m.update.l_critic,
                   m.update.entropy, m.update.total_loss}) {
    os << ',' << format_metric(v);
  }
  return os.str();
}

class Trainer {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Trainer(RunConfig cfg, Logger log = {})
      : cfg_((cfg.finalize(), cfg.validate(), std::move(cfg))),
        model_(cfg_.model),
        adam_(nn::AdamConfig{cfg_.ppo.lr}),
        action_rng_(mix_seed(cfg_.seed, kActionStream)),
        shuffle_rng_(mix_seed(cfg_.seed, kShuffleStream)),
        mask_rng_(mix_seed(cfg_.seed, kMaskStream)),
        log_(std::move(log)) {
    model_.init(mix_seed(cfg_.seed, kInitStream));
    reset_envs(0);
  }

  const RunConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  nn::Adam<float>& optimizer() { return adam_; }
  std::int64_t env_steps() const { return env_steps_; }
  std::int64_t cycle() const { return cycle_; }
  env::VecEnv& envs() { return *envs_; }

  tok::ModalitySet policy_mods() const { return policy_modalities(cfg_.trainer.mode); }
  tok::ModalitySet rep_mods() const { return rep_modalities(cfg_.trainer.mode); }
  tok::ModalitySet stored_mods() const { return stored_modalities(cfg_.trainer.mode); }

  /// Runs the frozen policy (sampling actions) for N_PPO transitions across all envs.
  RolloutBuffer collect_rollouts() {
    const int n = cfg_.ppo.n_envs;
    const int steps = cfg_.ppo.rollout_length / n;
    RolloutBuffer buf(n, cfg_.env.frame_stack, stored_mods());
    const tok::ModalitySet pm = policy_mods();
    const auto& log_std = model_.actor_critic.log_std().value;
    for (int t = 0; t < steps; ++t) {
      std::vector<const std::vector<int>*> stacks;
      for (int e = 0; e < n; ++e) {
        stacks.push_back(&buf.observe(e, obs_[static_cast<std::size_t>(e)], fresh_[static_cast<std::size_t>(e)]));
      }
      const auto out = policy_forward(model_, buf.frames().gather<float>(stacks, pm), pm);
      std::vector<Transition> step_tr(static_cast<std::size_t>(n));
      std::vector<std::array<double, 3>> env_actions(static_cast<std::size_t>(n));
      for (int e = 0; e < n; ++e) {
        Transition& tr = step_tr[static_cast<std::size_t>(e)];
        tr.frames = *stacks[static_cast<std::size_t>(e)];
        tr.env = e;
        float a[3];
        for (int j = 0; j < 3; ++j) {
          a[j] = static_cast<float>(out.mean(e, j) + std::exp(static_cast<double>(log_std(0, j))) * action_rng_.normal());
          tr.action[static_cast<std::size_t>(j)] = a[j];
          env_actions[static_cast<std::size_t>(e)][static_cast<std::size_t>(j)] = std::clamp(static_cast<double>(a[j]), -1.0, 1.0);
        }
        tr.log_prob = policy::gaussian_log_prob<float>(a, out.mean.row(e).data(), log_std.data(), 3);
        tr.value = out.value(e, 0);
      }
      env::VecStep res = envs_->step(env_actions);
      std::vector<const env::StackedObs*> timed_out;
      std::vector<int> timed_out_env;
      for (int e = 0; e < n; ++e) {
        Transition& tr = step_tr[static_cast<std::size_t>(e)];
        tr.reward = res.reward[static_cast<std::size_t>(e)];
        tr.done = res.done[static_cast<std::size_t>(e)];
        if (res.reason[static_cast<std::size_t>(e)] == env::DoneReason::timeout) {
          timed_out.push_back(&res.final_obs[static_cast<std::size_t>(e)]);
          timed_out_env.push_back(e);
        }
      }
      if (!timed_out.empty()) {
        // the time limit is not part of the observation: bootstrap through it
        const auto v = policy_forward(model_, tok::gather_obs<float>(timed_out, pm), pm).value;
        for (std::size_t i = 0; i < timed_out_env.size(); ++i) {
          step_tr[static_cast<std::size_t>(timed_out_env[i])].reward += cfg_.ppo.gamma * static_cast<double>(v(static_cast<Index>(i), 0));
        }
      }
      for (auto& tr : step_tr) buf.add(std::move(tr));
      obs_ = std::move(res.obs);
      fresh_ = res.done;
    }
    std::vector<const env::StackedObs*> last;
    for (const auto& o : obs_) last.push_back(&o);
    const auto v = policy_forward(model_, tok::gather_obs<float>(last, pm), pm).value;
    std::vector<double> bootstrap(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) bootstrap[static_cast<std::size_t>(e)] = v(e, 0);
    buf.finish(bootstrap, cfg_.ppo.gamma, cfg_.ppo.lam);
    env_steps_ += static_cast<std::int64_t>(steps) * n;
    return buf;
  }

  UpdateStats update(const RolloutBuffer& buf) {
    if (cfg_.trainer.mode == TrainMode::sequential) return update_sequential(buf);
    if (cfg_.trainer.schedule == Schedule::interleaved) return update_interleaved(buf);
    return update_joint(buf);
  }

  /// One optimizer step per minibatch on l_rep + l_ppo.
  UpdateStats update_joint(const RolloutBuffer& buf) {
    UpdateStats st;
    for_each_minibatch(buf, [&](const std::vector<int>& idx, const PpoBatch& pb) {
      model_.zero_grad();
      const tok::ModalitySet rm = rep_mods();
      if (!rm.empty()) accumulate_rep(st, rep_pass(buf, idx, rm, true), rm);
      accumulate_ppo(st, ppo_pass(buf, idx, pb, true));
      optimizer_step(st);
      ++st.minibatches;
    });
    return finish_stats(st);
  }

  /// Per minibatch: n representation steps on B/n chunks, then one PPO step on B.
  UpdateStats update_interleaved(const RolloutBuffer& buf) {
    const tok::ModalitySet rm = rep_mods();
    if (rm.empty()) throw std::invalid_argument("update_interleaved: mode " + to_string(cfg_.trainer.mode) + " has no representation loss");
    const int n = cfg_.trainer.rep_steps_per_rl;
    const int b = cfg_.ppo.minibatch_size;
    if (b % n != 0) throw std::invalid_argument("update_interleaved: minibatch size " + std::to_string(b) + " not divisible by n=" + std::to_string(n));
    UpdateStats st;
    for_each_minibatch(buf, [&](const std::vector<int>& idx, const PpoBatch& pb) {
      const int c = b / n;
      mae::LossBreakdown mean_rep;
      for (int j = 0; j < n; ++j) {
        model_.zero_grad();
        const std::vector<int> sub(idx.begin() + j * c, idx.begin() + (j + 1) * c);
        const auto l = rep_pass(buf, sub, rm, true);
        mean_rep.mse_pixels += l.mse_pixels / n;
        mean_rep.mse_taxels += l.mse_taxels / n;
        mean_rep.l_rep += l.l_rep / n;
        st.rep_forwards.push_back(rm);
        optimizer_step(st);
      }
      accumulate_rep(st, mean_rep, kNoLog);
      model_.zero_grad();
      accumulate_ppo(st, ppo_pass(buf, idx, pb, true));
      optimizer_step(st);
      ++st.minibatches;
    });
    return finish_stats(st);
  }

  /// Per minibatch: a vision-only MAE step, a touch-only MAE step, then a PPO step.
  UpdateStats update_sequential(const RolloutBuffer& buf) {
    UpdateStats st;
    for_each_minibatch(buf, [&](const std::vector<int>& idx, const PpoBatch& pb) {
      mae::LossBreakdown rep;
      model_.zero_grad();
      rep.mse_pixels = rep_pass(buf, idx, tok::ModalitySet::vision_only(), true).mse_pixels;
      st.rep_forwards.push_back(tok::ModalitySet::vision_only());
      optimizer_step(st);
      model_.zero_grad();
      rep.mse_taxels = rep_pass(buf, idx, tok::ModalitySet::touch_only(), true).mse_taxels;
      st.rep_forwards.push_back(tok::ModalitySet::touch_only());
      optimizer_step(st);
      rep.l_rep = rep.mse_pixels + cfg_.model.mae.beta_T * rep.mse_taxels;
      accumulate_rep(st, rep, kNoLog);
      model_.zero_grad();
      accumulate_ppo(st, ppo_pass(buf, idx, pb, true));
      optimizer_step(st);
      ++st.minibatches;
    });
    return finish_stats(st);
  }

  /// Masked reconstruction on `idx` in micro-batches; gradients accumulate when
  /// `backprop` is set. Denominators span the whole index set.
  mae::LossBreakdown rep_pass(const RolloutBuffer& buf, const std::vector<int>& idx, tok::ModalitySet mods, bool backprop) {
    const tok::TokenizerConfig& tc = cfg_.model.tokenizer;
    const int n_tokens = tc.token_count(mods);
    const auto masks = tok::sample_masks<float>(static_cast<Index>(idx.size()), n_tokens, cfg_.model.mae.mask_ratio, mask_rng_);
    const mae::LossCounts counts = mae::loss_counts(tok::token_layout(tc, mods), static_cast<Index>(idx.size()), masks,
                                                    cfg_.model.mae.loss_on_all_tokens);
    mae::LossBreakdown sum;
    for_each_chunk(idx.size(), [&](std::size_t lo, std::size_t hi) {
      const std::vector<int> chunk(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi));
      const std::vector<tok::MaskIndices> cm(masks.begin() + static_cast<std::ptrdiff_t>(lo), masks.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto l = rep_step(model_, buf.gather<float>(chunk, mods), mods, cm, &counts, backprop);
      sum.mse_pixels += l.mse_pixels;
      sum.mse_taxels += l.mse_taxels;
      sum.l_rep += l.l_rep;
    });
    return sum;
  }

  policy::PpoTerms ppo_pass(const RolloutBuffer& buf, const std::vector<int>& idx, const PpoBatch& pb, bool backprop) {
    policy::PpoTerms sum;
    const double scale = 1.0 / static_cast<double>(idx.size());
    const tok::ModalitySet pm = policy_mods();
    for_each_chunk(idx.size(), [&](std::size_t lo, std::size_t hi) {
      const auto slice = [&](const auto& v) { return std::vector<typename std::decay_t<decltype(v)>::value_type>(v.begin() + static_cast<std::ptrdiff_t>(lo), v.begin() + static_cast<std::ptrdiff_t>(hi)); };
      PpoBatch part{slice(pb.actions), slice(pb.old_log_probs), slice(pb.advantages), slice(pb.value_targets)};
      const auto t = ppo_step(model_, buf.gather<float>(slice(idx), pm), pm, part, cfg_.ppo, scale, backprop);
      sum.l_clip += t.l_clip;
      sum.l_critic += t.l_critic;
      sum.entropy += t.entropy;
      sum.loss += t.loss;
      sum.clip_fraction += t.clip_fraction;
    });
    return sum;
  }

  /// Collect, update, bookkeeping for one cycle. Returns the cycle's metrics.
  CycleMetrics run_cycle() {
    const RolloutBuffer buf = collect_rollouts();
    CycleMetrics m;
    const auto episodes = envs_->take_completed();
    if (!episodes.empty()) {
      double ret = 0.0, succ = 0.0;
      for (const auto& ep : episodes) {
        ret += ep.episode_return;
        succ += ep.success ? 1.0 : 0.0;
      }
      m.episode_return_mean = ret / static_cast<double>(episodes.size());
      m.success_rate = succ / static_cast<double>(episodes.size());
      m.episodes = static_cast<int>(episodes.size());
    }
    m.update = update(buf);
    m.step = env_steps_;
    ++cycle_;
    return m;
  }

  Checkpoint make_checkpoint() {
    Checkpoint c;
    c.config = cfg_;
    c.env_steps = env_steps_;
    c.cycle = cycle_;
    c.parameters = parameter_records(model_.parameters());
    c.adam_steps = adam_.steps();
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < adam_.first_moments().size(); ++i) {
      c.adam_m.push_back(to_record(params[i].name, adam_.first_moments()[i]));
      c.adam_v.push_back(to_record(params[i].name, adam_.second_moments()[i]));
    }
    c.rng_state = {{"action", action_rng_.state()}, {"shuffle", shuffle_rng_.state()}, {"mask", mask_rng_.state()}};
    return c;
  }

  /// Restores parameters, optimizer and generator state; environments restart with a
  /// seed derived from the cycle count.
  void restore(const Checkpoint& c) {
    load_records(c.parameters, model_.parameters());
    auto& m = adam_.first_moments();
    auto& v = adam_.second_moments();
    m.clear();
    v.clear();
    if (!c.adam_m.empty()) {
      const auto& params = model_.parameters();
      if (c.adam_m.size() != params.size() || c.adam_v.size() != params.size()) throw std::runtime_error("checkpoint optimizer state does not match the model");
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto to_matrix = [&](const TensorRecord& r) {
          if (r.rows != params[i].param->value.rows() || r.cols != params[i].param->value.cols()) {
            throw std::runtime_error("checkpoint optimizer tensor " + r.name + " has the wrong shape");
          }
          nn::Matrix<float> x(r.rows, r.cols);
          std::copy(r.values.begin(), r.values.end(), x.data());
          return x;
        };
        m.push_back(to_matrix(c.adam_m[i]));
        v.push_back(to_matrix(c.adam_v[i]));
      }
    }
    adam_.set_steps(c.adam_steps);
    action_rng_.set_state(c.rng_state.at("action").get<std::string>());
    shuffle_rng_.set_state(c.rng_state.at("shuffle").get<std::string>());
    mask_rng_.set_state(c.rng_state.at("mask").get<std::string>());
    env_steps_ = c.env_steps;
    cycle_ = c.cycle;
    reset_envs(cycle_);
  }

  /// Alternates collection and updates until N_max env steps, writing the run
  /// directory (config echo, metrics, task log, checkpoints). With `resume`, continues
  /// from the newest checkpoint in the directory when there is one.
  void train(bool resume = false) {
    namespace fs = std::filesystem;
    const fs::path dir(cfg_.output_dir);
    fs::create_directories(dir / "checkpoints");
    const fs::path metrics_path = dir / "metrics.csv";
    bool resumed = false;
    if (resume) {
      const auto ckpts = list_checkpoints(dir.string());
      if (!ckpts.empty()) {
        const Checkpoint c = load_checkpoint(ckpts.back());
        restore(c);
        truncate_metrics(metrics_path, c.env_steps);
        resumed = true;
        log("resumed from " + ckpts.back() + " at step " + std::to_string(env_steps_));
      }
    }
    write_text(dir / "config.json", to_json(cfg_).dump(2) + "\n");
    if (!resumed) write_text(metrics_path, std::string(kMetricsHeader) + "\n");
    std::size_t logged_tasks = 0;
    while (env_steps_ < cfg_.trainer.total_env_steps) {
      CycleMetrics m;
      try {
        m = run_cycle();
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("cycle " + std::to_string(cycle_) + " (step " + std::to_string(env_steps_) + "): " + e.what());
      }
      append_text(metrics_path, metrics_row(m) + "\n");
      std::string tasks;
      const auto& tl = envs_->task_log();
      for (; logged_tasks < tl.size(); ++logged_tasks) tasks += tl[logged_tasks] + "\n";
      append_text(dir / "tasks.log", tasks);
      const std::string path = (dir / "checkpoints" / checkpoint_name(env_steps_)).string();
      save_checkpoint(make_checkpoint(), path);
      prune_checkpoints(dir.string(), cfg_.trainer.checkpoints_kept);
      log("step " + std::to_string(m.step) + " episodes " + std::to_string(m.episodes) + " return " +
          format_metric(m.episode_return_mean) + " success " + format_metric(m.success_rate) + " l_rep " +
          format_metric(m.update.l_rep) + " l_clip " + format_metric(m.update.l_clip) + " l_critic " +
          format_metric(m.update.l_critic));
    }
  }

 private:
  void reset_envs(std::int64_t cycle) {
    const std::uint64_t base = mix_seed(cfg_.seed, kEnvStream);
    const std::uint64_t seed = cycle == 0 ? base : mix_seed(base, static_cast<std::uint64_t>(cycle));
    envs_.emplace(cfg_.ppo.n_envs, cfg_.env, env::default_library(), env::Split::train, seed);
    obs_ = envs_->reset();
    fresh_.assign(obs_.size(), true);
  }

  template <typename F>
  void for_each_chunk(std::size_t n, F&& f) const {
    const std::size_t micro = static_cast<std::size_t>(cfg_.trainer.micro_batch);
    for (std::size_t lo = 0; lo < n; lo += micro) f(lo, std::min(n, lo + micro));
  }

  /// Shuffled minibatches over M epochs, with advantages normalized per minibatch.
  template <typename F>
  void for_each_minibatch(const RolloutBuffer& buf, F&& f) {
    const int n = static_cast<int>(buf.size());
    const int b = cfg_.ppo.minibatch_size;
    if (n % b != 0) throw std::invalid_argument("rollout of " + std::to_string(n) + " transitions does not split into minibatches of " + std::to_string(b));
    const auto& tr = buf.transitions();
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int epoch = 0; epoch < cfg_.ppo.epochs; ++epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[shuffle_rng_.below(static_cast<std::uint64_t>(i + 1))]);
      for (int start = 0; start < n; start += b) {
        const std::vector<int> idx(perm.begin() + start, perm.begin() + start + b);
        PpoBatch pb;
        for (int i : idx) {
          const Transition& t = tr[static_cast<std::size_t>(i)];
          pb.actions.push_back(t.action);
          pb.old_log_probs.push_back(t.log_prob);
          pb.advantages.push_back(t.advantage);
          pb.value_targets.push_back(t.value_target);
        }
        if (cfg_.ppo.normalize_advantages) pb.advantages = policy::normalize_advantages(pb.advantages);
        f(idx, pb);
      }
    }
  }

  void optimizer_step(UpdateStats& st) {
    adam_.step(model_.parameters());
    ++st.optimizer_steps;
  }

  static void accumulate_rep(UpdateStats& st, const mae::LossBreakdown& l, tok::ModalitySet logged) {
    st.mse_pixels += l.mse_pixels;
    st.mse_taxels += l.mse_taxels;
    st.l_rep += l.l_rep;
    st.total_loss += l.l_rep;
    if (!logged.empty()) st.rep_forwards.push_back(logged);
  }

  static void accumulate_ppo(UpdateStats& st, const policy::PpoTerms& t) {
    st.l_clip += t.l_clip;
    st.l_critic += t.l_critic;
    st.entropy += t.entropy;
    st.clip_fraction += t.clip_fraction;
    st.total_loss += t.loss;
  }

  /// Means over minibatches; reconstruction terms of streams that are not
  /// reconstructed read as NaN.
  UpdateStats finish_stats(UpdateStats st) const {
    if (st.minibatches > 0) {
      const double inv = 1.0 / st.minibatches;
      for (double* v : {&st.mse_pixels, &st.mse_taxels, &st.l_rep, &st.l_clip, &st.l_critic, &st.entropy, &st.total_loss, &st.clip_fraction}) *v *= inv;
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (!rep_mods().vision) st.mse_pixels = nan;
    if (!rep_mods().touch) st.mse_taxels = nan;
    if (rep_mods().empty()) st.l_rep = nan;
    return st;
  }

  static void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream o(p, std::ios::trunc);
    o << s;
    if (!o) throw std::runtime_error("cannot write " + p.string());
  }
  static void append_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream o(p, std::ios::app);
    o << s;
    if (!o) throw std::runtime_error("cannot write " + p.string());
  }

  /// Drops metric rows written after `step` (a cycle that finished its row but not its
  /// checkpoint).
  static void truncate_metrics(const std::filesystem::path& p, std::int64_t step) {
    std::ifstream in(p);
    if (!in) {
      write_text(p, std::string(kMetricsHeader) + "\n");
      return;
    }
    std::string line, kept;
    std::getline(in, line);
    kept = line + "\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= step) kept += line + "\n";
    }
    in.close();
    write_text(p, kept);
  }

  static void prune_checkpoints(const std::string& dir, int keep) {
    auto ckpts = list_checkpoints(dir);
    while (static_cast<int>(ckpts.size()) > keep) {
      std::filesystem::remove(ckpts.front());
      ckpts.erase(ckpts.begin());
    }
  }

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  RunConfig cfg_;
  Model<float> model_;
  nn::Adam<float> adam_;
  Rng action_rng_;
  Rng shuffle_rng_;
  Rng mask_rng_;
  Logger log_;
  std::optional<env::VecEnv> envs_;
  std::vector<env::StackedObs> obs_;
  std::vector<bool> fresh_;
  std::int64_t env_steps_ = 0;
  std::int64_t cycle_ = 0;
};

}  // namespace m3l::train

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/config.hpp"
#include "m3l/env/insertion_env.hpp"
#include "m3l/eval/plot.hpp"
#include "m3l/model.hpp"
#include "m3l/trainer/checkpoint.hpp"
#include "m3l/trainer/trainer.hpp"

namespace m3l::eval {

namespace fs = std::filesystem;

/// Seed stream for evaluation task draws.
inline constexpr std::uint64_t kEvalStream = 7;

struct EvalTask {
  env::TaskSpec task;
  std::uint64_t reset_seed = 0;
};

struct EpisodeResult {
  std::string peg_id;
  double episode_return = 0.0;
  bool success = false;
  int length = 0;
};

/// Fixed task list for a seed: every checkpoint of a run sees the same episodes.
inline std::vector<EvalTask> eval_tasks(const env::EnvConfig& cfg, env::Split split, int count, std::uint64_t seed) {
  const env::ShapeLibrary lib = env::default_library();
  Rng rng(mix_seed(seed, kEvalStream));
  std::vector<EvalTask> out;
  for (int i = 0; i < count; ++i) {
    EvalTask t;
    t.task = env::sample_task(rng, split, lib, cfg);
    t.reset_seed = rng.next_u64();
    out.push_back(std::move(t));
  }
  return out;
}

/// Runs every task with the policy mean (clamped), `lockstep` episodes per batched forward.
inline std::vector<EpisodeResult> run_episodes(const Model<float>& model, const env::EnvConfig& env_cfg, const std::vector<EvalTask>& tasks,
                                               tok::ModalitySet mods, int lockstep = 25) {
  std::vector<EpisodeResult> results(tasks.size());
  for (std::size_t start = 0; start < tasks.size(); start += static_cast<std::size_t>(lockstep)) {
    const std::size_t end = std::min(tasks.size(), start + static_cast<std::size_t>(lockstep));
    std::vector<env::InsertionEnv> envs;
    std::vector<env::StackedObs> obs;
    for (std::size_t i = start; i < end; ++i) {
      envs.emplace_back(env_cfg);
      obs.push_back(envs.back().reset(tasks[i].reset_seed, tasks[i].task));
      results[i].peg_id = tasks[i].task.peg.id;
    }
    std::vector<std::size_t> active(envs.size());
    for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
    while (!active.empty()) {
      std::vector<const env::StackedObs*> batch;
      for (std::size_t i : active) batch.push_back(&obs[i]);
      const auto out = policy_forward(model, tok::gather_obs<float>(batch, mods), mods);
      std::vector<std::size_t> still;
      for (std::size_t r = 0; r < active.size(); ++r) {
        const std::size_t i = active[r];
        std::array<double, 3> a{};
        for (int j = 0; j < 3; ++j) a[static_cast<std::size_t>(j)] = std::clamp(static_cast<double>(out.mean(static_cast<Index>(r), j)), -1.0, 1.0);
        env::StepResult s = envs[i].step(a);
        EpisodeResult& res = results[start + i];
        res.episode_return += s.reward;
        ++res.length;
        if (s.done) {
          res.success = s.info.done_reason == env::DoneReason::success;
        } else {
          obs[i] = std::move(s.obs);
          still.push_back(i);
        }
      }
      active = std::move(still);
    }
  }
  return results;
}

struct CheckpointEval {
  std::string run_dir;
  std::string checkpoint;
  std::int64_t env_steps = 0;
  std::uint64_t seed = 0;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  std::vector<EpisodeResult> results;
};

struct EvalReport {
  std::string mode;
  std::string split;
  std::string modalities;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double standard_error = 0.0;  // across checkpoint success rates; binomial for a single checkpoint
  std::vector<CheckpointEval> per_checkpoint;
  std::vector<std::uint64_t> seeds;

  nlohmann::json to_json(bool with_episodes = false) const {
    nlohmann::json j = {{"mode", mode},         {"split", split},           {"modalities", modalities},
                        {"episodes", episodes}, {"successes", successes},   {"success_rate", success_rate},
                        {"mean_return", mean_return}, {"standard_error", standard_error}, {"seeds", seeds}};
    j["per_checkpoint"] = nlohmann::json::array();
    for (const auto& c : per_checkpoint) {
      nlohmann::json cj = {{"run_dir", c.run_dir},       {"checkpoint", c.checkpoint},     {"env_steps", c.env_steps},
                           {"seed", c.seed},             {"episodes", c.episodes},         {"successes", c.successes},
                           {"success_rate", c.success_rate}, {"mean_return", c.mean_return}};
      if (with_episodes) {
        cj["results"] = nlohmann::json::array();
        for (const auto& r : c.results) cj["results"].push_back({{"peg_id", r.peg_id}, {"return", r.episode_return}, {"success", r.success}, {"length", r.length}});
      }
      j["per_checkpoint"].push_back(std::move(cj));
    }
    return j;
  }
};

struct EvalOptions {
  std::string split = "test";
  int episodes_per_checkpoint = 25;
  int checkpoints = 4;     // newest checkpoints per run directory
  std::string modalities;  // empty: the policy streams of the run's mode
  int lockstep = 25;
};

/// Checkpoint files to evaluate: a run directory contributes its newest `count`; a
/// file path is taken as is.
inline std::vector<std::string> select_checkpoints(const std::vector<std::string>& paths, int count) {
  std::vector<std::string> out;
  for (const auto& p : paths) {
    if (fs::is_regular_file(p)) {
      out.push_back(p);
      continue;
    }
    auto all = train::list_checkpoints(p);
    if (all.empty()) throw std::runtime_error("no checkpoints found under " + p);
    const std::size_t keep = std::min(all.size(), static_cast<std::size_t>(count));
    out.insert(out.end(), all.end() - static_cast<std::ptrdiff_t>(keep), all.end());
  }
  return out;
}

inline nlohmann::json architecture_of(const RunConfig& c) {
  const nlohmann::json j = to_json(c);
  return {{"tokenizer", j.at("tokenizer")},
          {"mae", j.at("mae")},
          {"head_hidden", c.model.head_hidden},
          {"head_heads", c.model.head_heads},
          {"frame_stack", c.env.frame_stack},
          {"mode", to_string(c.trainer.mode)}};
}

/// Deterministic evaluation of checkpoints (run directories or files). All checkpoints
/// must share mode and architecture.
inline EvalReport evaluate(const std::vector<std::string>& paths, const EvalOptions& opt) {
  if (opt.episodes_per_checkpoint < 1) throw std::invalid_argument("evaluate: episodes_per_checkpoint must be >= 1");
  if (opt.checkpoints < 1) throw std::invalid_argument("evaluate: checkpoints must be >= 1");
  const env::Split split = env::parse_split(opt.split);
  const auto files = select_checkpoints(paths, opt.checkpoints);
  if (files.empty()) throw std::runtime_error("evaluate: no checkpoints given");

  EvalReport rep;
  rep.split = opt.split;
  nlohmann::json arch;
  double ret_sum = 0.0;
  for (const auto& file : files) {
    const train::Checkpoint ck = train::load_checkpoint(file);
    const nlohmann::json a = architecture_of(ck.config);
    if (arch.is_null()) {
      arch = a;
      rep.mode = to_string(ck.config.trainer.mode);
      rep.modalities = tok::to_string(opt.modalities.empty() ? policy_modalities(ck.config.trainer.mode) : tok::parse_modalities(opt.modalities));
    } else if (a != arch) {
      throw std::runtime_error("checkpoint " + file + " does not match the architecture or mode of the first checkpoint: " + a.dump() + " vs " + arch.dump());
    }
    const tok::ModalitySet mods = opt.modalities.empty() ? policy_modalities(ck.config.trainer.mode) : tok::parse_modalities(opt.modalities);
    const Model<float> model = train::model_from_checkpoint(ck);

    CheckpointEval ce;
    ce.checkpoint = file;
    ce.run_dir = fs::path(file).parent_path().parent_path().string();
    ce.env_steps = ck.env_steps;
    ce.seed = ck.config.seed;
    ce.results = run_episodes(model, ck.config.env, eval_tasks(ck.config.env, split, opt.episodes_per_checkpoint, ck.config.seed), mods, opt.lockstep);
    ce.episodes = static_cast<int>(ce.results.size());
    for (const auto& r : ce.results) {
      ce.successes += r.success ? 1 : 0;
      ce.mean_return += r.episode_return;
    }
    ret_sum += ce.mean_return;
    ce.mean_return /= ce.episodes;
    ce.success_rate = static_cast<double>(ce.successes) / ce.episodes;
    rep.episodes += ce.episodes;
    rep.successes += ce.successes;
    if (std::find(rep.seeds.begin(), rep.seeds.end(), ce.seed) == rep.seeds.end()) rep.seeds.push_back(ce.seed);
    rep.per_checkpoint.push_back(std::move(ce));
  }
  rep.success_rate = static_cast<double>(rep.successes) / rep.episodes;
  rep.mean_return = ret_sum / rep.episodes;
  const std::size_t n = rep.per_checkpoint.size();
  if (n >= 2) {
    double mean = 0.0, var = 0.0;
    for (const auto& c : rep.per_checkpoint) mean += c.success_rate / static_cast<double>(n);
    for (const auto& c : rep.per_checkpoint) var += (c.success_rate - mean) * (c.success_rate - mean);
    rep.standard_error = std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n));
  } else {
    rep.standard_error = std::sqrt(rep.success_rate * (1.0 - rep.success_rate) / rep.episodes);
  }
  return rep;
}

struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::vector<double> column(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw std::invalid_argument("metrics: no column " + name);
    const std::size_t c = static_cast<std::size_t>(it - columns.begin());
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
};

inline MetricsTable read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  MetricsTable t;
  std::string line;
  std::getline(in, line);
  for (std::size_t a = 0, b; a <= line.size(); a = b + 1) {
    b = line.find(',', a);
    if (b == std::string::npos) b = line.size();
    t.columns.push_back(line.substr(a, b - a));
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    for (std::size_t a = 0, b; a <= line.size(); a = b + 1) {
      b = line.find(',', a);
      if (b == std::string::npos) b = line.size();
      const std::string cell = line.substr(a, b - a);
      row.push_back(cell == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell));
    }
    if (row.size() != t.columns.size()) throw std::runtime_error(path + ": row with " + std::to_string(row.size()) + " cells");
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct AblationRun {
  int k = 0;
  std::string run_dir;
  MetricsTable metrics;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<std::string> plots;
  bool identical_step_grids = true;
};

/// One training run per frame-stack size under `base_dir/k<k>`, otherwise identical,
/// plus success and return curves over env steps.
inline AblationResult ablate_frame_stack(RunConfig cfg, const std::vector<int>& k_values, const std::string& base_dir,
                                         const train::Trainer::Logger& log = {}) {
  if (k_values.empty()) throw std::invalid_argument("ablate_frame_stack: no k values");
  for (int k : k_values) {
    if (k != 1 && k != 2 && k != 4) throw std::invalid_argument("ablate_frame_stack: k must be one of 1, 2, 4 (got " + std::to_string(k) + ")");
  }
  AblationResult out;
  for (int k : k_values) {
    RunConfig c = cfg;
    c.env.frame_stack = k;
    c.output_dir = (fs::path(base_dir) / ("k" + std::to_string(k))).string();
    c.finalize();
    if (log) log("frame stack k=" + std::to_string(k) + " -> " + c.output_dir);
    train::Trainer(c, log).train();
    out.runs.push_back({k, c.output_dir, read_metrics((fs::path(c.output_dir) / "metrics.csv").string())});
  }
  const auto grid = out.runs.front().metrics.column("step");
  for (const auto& r : out.runs) out.identical_step_grids = out.identical_step_grids && r.metrics.column("step") == grid;
  for (const auto& [col, label] : std::vector<std::pair<std::string, std::string>>{{"success_rate", "training success rate"},
                                                                                     {"episode_return_mean", "mean episode return"}}) {
    std::vector<Series> series;
    for (const auto& r : out.runs) series.push_back({"k=" + std::to_string(r.k), r.metrics.column("step"), r.metrics.column(col)});
    const std::string path = (fs::path(base_dir) / ("ablate_stack_" + col + ".svg")).string();
    write_line_plot(path, "Frame-stack ablation", "env steps", label, series);
    out.plots.push_back(path);
  }
  return out;
}

/// Observations for reconstruction dumps: random-action rollouts on training tasks,
/// stopped at varied depths so that contact frames appear.
inline std::vector<env::StackedObs> probe_observations(const env::EnvConfig& cfg, int count, std::uint64_t seed) {
  const env::ShapeLibrary lib = env::default_library();
  Rng rng(seed);
  std::vector<env::StackedObs> out;
  for (int i = 0; i < count; ++i) {
    env::InsertionEnv e(cfg);
    env::StackedObs obs = e.reset(rng.next_u64(), env::sample_task(rng, env::Split::train, lib, cfg));
    const int steps = 4 + static_cast<int>(rng.below(24));
    for (int s = 0; s < steps && !e.done(); ++s) {
      env::StepResult r = e.step({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-1.0, 0.0)});
      if (!r.done) obs = std::move(r.obs);
    }
    out.push_back(std::move(obs));
  }
  return out;
}

struct ReconstructionDump {
  std::vector<std::string> files;
  int rows = 0;
  double l_rep = 0.0;
};

/// Writes vision.ppm (rows of original | masked footprint | reconstruction, newest
/// frame) and touch.ppm (the same triplet per pad and channel as diverging heatmaps).
/// Masked footprints are the input regions of masked tokens; the reconstruction
/// shows predictions on masked tokens and the input elsewhere.
inline ReconstructionDump dump_reconstructions(const std::string& checkpoint_path, int n_samples, const std::string& out_dir, double mask_ratio = -1.0,
                                               std::uint64_t seed = 0) {
  if (n_samples < 1) throw std::invalid_argument("dump_reconstructions: n_samples must be >= 1");
  const train::Checkpoint ck = train::load_checkpoint(checkpoint_path);
  const Model<float> model = train::model_from_checkpoint(ck);
  const tok::TokenizerConfig& tc = ck.config.model.tokenizer;
  tok::ModalitySet mods = rep_modalities(ck.config.trainer.mode);
  if (mods.empty()) mods = tok::ModalitySet::both();
  const double ratio = mask_ratio >= 0.0 ? mask_ratio : ck.config.model.mae.mask_ratio;

  const auto observations = probe_observations(ck.config.env, n_samples, mix_seed(seed, 11));
  std::vector<const env::StackedObs*> ptrs;
  for (const auto& o : observations) ptrs.push_back(&o);
  const tok::ObsBatch<float> obs = tok::gather_obs<float>(ptrs, mods);
  Rng mask_rng(mix_seed(seed, 12));
  const Index b = obs.batch;
  auto tokens = model.tokenizer.forward(obs, mods);
  tok::apply_masks(tokens, tok::sample_masks<float>(b, tc.token_count(mods), ratio, mask_rng));
  const auto pred = model.decoder.decode(model.encoder.encode(tokens, true), tokens);
  const auto target = mae::patchify(obs, tc, mods);
  const auto loss = mae::mae_loss(pred, target, tokens.layout, b, tokens.masks, ck.config.model.mae.beta_T, ck.config.model.mae.loss_on_all_tokens);

  mae::Payloads<float> shaded = target, recon = target;
  for (Index i = 0; i < b; ++i) {
    for (int t : tokens.masks[static_cast<std::size_t>(i)].masked) {
      tok::Modality m;
      const Index row = mae::payload_row(tokens.layout, i, t, &m);
      auto& sh = m == tok::Modality::vision ? shaded.vision : shaded.touch;
      auto& rc = m == tok::Modality::vision ? recon.vision : recon.touch;
      const auto& pr = m == tok::Modality::vision ? pred.vision : pred.touch;
      if (m == tok::Modality::vision) {
        sh.row(row) *= 0.25f;
      } else {
        sh.row(row).setConstant(std::numeric_limits<float>::quiet_NaN());  // drawn grey
      }
      rc.row(row) = pr.row(row);
    }
  }
  const auto shaded_obs = mae::unpatchify(shaded, b, tc);
  const auto recon_obs = mae::unpatchify(recon, b, tc);
  const int newest = 3 * (tc.frames - 1);
  const int gap = 2;

  fs::create_directories(out_dir);
  ReconstructionDump dump;
  dump.rows = static_cast<int>(b);
  dump.l_rep = loss.l_rep;
  if (mods.vision) {
    const int s = tc.image_size;
    Image sheet(3 * s + 2 * gap, static_cast<int>(b) * (s + gap) - gap);
    const tok::ObsBatch<float>* panels[3] = {&obs, &shaded_obs, &recon_obs};
    for (Index i = 0; i < b; ++i) {
      for (int p = 0; p < 3; ++p) {
        Image panel(s, s);
        for (int y = 0; y < s; ++y) {
          for (int x = 0; x < s; ++x) {
            for (int c = 0; c < 3; ++c) panel.at(x, y)[c] = to_byte(panels[p]->image((i * s + y) * s + x, newest + c));
          }
        }
        sheet.blit(panel, p * (s + gap), static_cast<int>(i) * (s + gap));
      }
    }
    dump.files.push_back((fs::path(out_dir) / "vision.ppm").string());
    write_ppm(dump.files.back(), sheet);
  }
  if (mods.touch) {
    const int s = tc.taxel_size;
    const int panels_per_row = 2 * 3 * 3;  // pad x channel x (original, masked, reconstruction)
    Image sheet(panels_per_row * (s + gap) - gap, static_cast<int>(b) * (s + gap) - gap);
    const tok::ObsBatch<float>* panels[3] = {&obs, &shaded_obs, &recon_obs};
    for (Index i = 0; i < b; ++i) {
      int col = 0;
      for (int pad = 0; pad < 2; ++pad) {
        for (int c = 0; c < 3; ++c) {
          for (int p = 0; p < 3; ++p, ++col) {
            Image panel(s, s);
            for (int y = 0; y < s; ++y) {
              for (int x = 0; x < s; ++x) diverging(panels[p]->touch(((pad * b + i) * s + y) * s + x, newest + c), panel.at(x, y));
            }
            sheet.blit(panel, col * (s + gap), static_cast<int>(i) * (s + gap));
          }
        }
      }
    }
    dump.files.push_back((fs::path(out_dir) / "touch.ppm").string());
    write_ppm(dump.files.back(), sheet);
  }
  return dump;
}

}  // namespace m3l::eval

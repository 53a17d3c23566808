// m3l: train, evaluate and inspect visuo-tactile insertion agents.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m3l/config.hpp"
#include "m3l/eval/eval.hpp"
#include "m3l/gradcheck.hpp"
#include "m3l/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace m3l;

namespace {

/// Relative paths live under $M3L_OUTPUT_ROOT when it is set.
std::string under_root(const std::string& path) {
  const char* root = std::getenv("M3L_OUTPUT_ROOT");
  if (!root || !*root || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

void log_line(const std::string& msg) { std::cerr << "[m3l] " << msg << std::endl; }

/// Options shared by train and ablate-stack. Precedence: preset, then config file,
/// then --set overrides, then dedicated flags.
struct RunFlags {
  std::string config_file;
  std::string preset;
  std::string mode;
  std::string schedule;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> total_steps;
  std::string output;
  std::vector<std::string> overrides;

  void add(CLI::App* app) {
    app->add_option("-c,--config", config_file, "JSON config file");
    app->add_option("--preset", preset, "paper or desk (default: the file's preset, else desk)");
    app->add_option("--mode", mode, "m3l, sequential, vision_only_mae, end_to_end or m3l_vision_policy");
    app->add_option("--schedule", schedule, "joint or interleaved");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--total-steps", total_steps, "environment steps budget (N_max)");
    app->add_option("-o,--output", output, "run directory");
    app->add_option("--set", overrides, "override a config value: section.key=json_value")->take_all();
  }

  RunConfig resolve() const {
    nlohmann::json file = nlohmann::json::object();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ConfigError("cannot open config file " + config_file);
      try {
        file = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + config_file + " is not valid JSON: " + e.what());
      }
    }
    if (!preset.empty()) file["preset"] = preset;
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      const auto dot = o.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq) throw ConfigError("--set expects section.key=value, got '" + o + "'");
      const std::string section = o.substr(0, dot), key = o.substr(dot + 1, eq - dot - 1), raw = o.substr(eq + 1);
      nlohmann::json value;
      try {
        value = nlohmann::json::parse(raw);
      } catch (const nlohmann::json::parse_error&) {
        value = raw;
      }
      file[section][key] = value;
    }
    if (!mode.empty()) file["trainer"]["mode"] = mode;
    if (!schedule.empty()) file["trainer"]["schedule"] = schedule;
    if (seed) file["seed"] = *seed;
    if (total_steps) file["trainer"]["total_env_steps"] = *total_steps;
    RunConfig cfg = config_from_json(file);
    if (!output.empty()) {
      cfg.output_dir = output;
    } else if (!file.contains("output_dir")) {
      cfg.output_dir += "/" + to_string(cfg.trainer.mode) + "_seed" + std::to_string(cfg.seed);
    }
    cfg.output_dir = under_root(cfg.output_dir);
    cfg.finalize();
    cfg.validate();
    return cfg;
  }
};

int cmd_train(const RunFlags& flags, bool resume) {
  const RunConfig cfg = flags.resolve();
  log_line("run directory " + cfg.output_dir + " (preset " + cfg.preset + ", mode " + to_string(cfg.trainer.mode) + ", seed " +
           std::to_string(cfg.seed) + ")");
  train::Trainer trainer(cfg, log_line);
  trainer.train(resume);
  log_line("done at " + std::to_string(trainer.env_steps()) + " env steps");
  return 0;
}

struct EvalFlags {
  std::vector<std::string> runs;
  std::string split = "test";
  int episodes = EvalConfig{}.episodes_per_checkpoint;
  int checkpoints = EvalConfig{}.checkpoints;
  std::string modalities;
  std::string report;
  bool episodes_detail = false;
};

int cmd_eval(const EvalFlags& f) {
  eval::EvalOptions opt;
  opt.split = f.split;
  opt.episodes_per_checkpoint = f.episodes;
  opt.checkpoints = f.checkpoints;
  opt.modalities = f.modalities;
  std::vector<std::string> runs;
  for (const auto& r : f.runs) runs.push_back(under_root(r));
  const eval::EvalReport rep = eval::evaluate(runs, opt);
  std::string out = f.report;
  if (out.empty()) {
    const fs::path first = fs::is_regular_file(runs.front()) ? fs::path(runs.front()).parent_path().parent_path() : fs::path(runs.front());
    out = (first / ("eval_" + f.split + (f.modalities.empty() ? "" : "_" + f.modalities) + ".json")).string();
  }
  std::ofstream(out) << rep.to_json(f.episodes_detail).dump(2) << "\n";
  for (const auto& c : rep.per_checkpoint) {
    std::printf("%-60s step %10lld  success %3d/%-3d  return %10.2f\n", c.checkpoint.c_str(), static_cast<long long>(c.env_steps), c.successes,
                c.episodes, c.mean_return);
  }
  std::printf("mode %s split %s modalities %s: success %.4f +- %.4f over %d episodes, mean return %.2f\n", rep.mode.c_str(), rep.split.c_str(),
              rep.modalities.c_str(), rep.success_rate, rep.standard_error, rep.episodes, rep.mean_return);
  std::printf("report: %s\n", out.c_str());
  return 0;
}

int cmd_reconstruct(const std::string& run, int samples, double ratio, const std::string& out_flag, std::uint64_t seed) {
  const std::string path = under_root(run);
  std::string ckpt = path;
  fs::path run_dir = fs::path(path).parent_path().parent_path();
  if (!fs::is_regular_file(path)) {
    const auto all = train::list_checkpoints(path);
    if (all.empty()) throw std::runtime_error("no checkpoints found under " + path);
    ckpt = all.back();
    run_dir = path;
  }
  const std::string out = out_flag.empty() ? (run_dir / "reconstructions").string() : under_root(out_flag);
  const auto dump = eval::dump_reconstructions(ckpt, samples, out, ratio, seed);
  std::printf("checkpoint %s: l_rep %.6g on %d samples\n", ckpt.c_str(), dump.l_rep, dump.rows);
  for (const auto& f : dump.files) std::printf("wrote %s\n", f.c_str());
  return 0;
}

int cmd_gradcheck(const gradcheck::Options& opt) {
  const auto rep = gradcheck::run(opt);
  for (const auto& c : rep.components) {
    std::printf("%-9s max_rel_error %.3e (worst %s)  global %.3e  params %zu  %s\n", c.name.c_str(), c.max_rel_error, c.worst_tensor.c_str(),
                c.global_rel_error, c.parameters, c.passed ? "ok" : "FAILED");
  }
  std::printf("%s precision, tolerance %.0e, %.1f s: %s\n", opt.use_double ? "double" : "single", rep.tolerance, rep.seconds,
              rep.passed ? "PASS" : "FAIL");
  return rep.passed ? 0 : 1;
}

int cmd_ablate(const RunFlags& flags, const std::vector<int>& ks) {
  RunConfig cfg = flags.resolve();
  const std::string base = cfg.output_dir;
  const auto res = eval::ablate_frame_stack(cfg, ks, base, log_line);
  for (const auto& r : res.runs) std::printf("k=%d: %s (%zu metric rows)\n", r.k, r.run_dir.c_str(), r.metrics.rows.size());
  for (const auto& p : res.plots) std::printf("plot: %s\n", p.c_str());
  if (!res.identical_step_grids) {
    std::fprintf(stderr, "error: step grids differ between runs\n");
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visuo-tactile masked autoencoders with PPO on planar peg insertion"};
  app.require_subcommand(1);

  RunFlags train_flags;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "train an agent; writes config.json, metrics.csv, tasks.log and checkpoints/");
  train_flags.add(train_cmd);
  train_cmd->add_flag("--resume", resume, "continue from the newest checkpoint in the run directory");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "deterministic evaluation of the newest checkpoints of one or more runs");
  eval_cmd->add_option("runs", ef.runs, "run directories or checkpoint files")->required();
  eval_cmd->add_option("--split", ef.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--episodes", ef.episodes, "episodes per checkpoint");
  eval_cmd->add_option("--checkpoints", ef.checkpoints, "newest checkpoints per run");
  eval_cmd->add_option("--modalities", ef.modalities, "vision, touch or vision+touch (default: the run's policy streams)");
  eval_cmd->add_option("--report", ef.report, "report path (default: <run>/eval_<split>.json)");
  eval_cmd->add_flag("--episodes-detail", ef.episodes_detail, "include per-episode results in the report");

  std::string recon_run, recon_out;
  int recon_samples = 4;
  double recon_ratio = -1.0;
  std::uint64_t recon_seed = 0;
  auto* recon_cmd = app.add_subcommand("reconstruct", "write original / masked / reconstruction images for both modalities");
  recon_cmd->add_option("run", recon_run, "run directory (newest checkpoint) or checkpoint file")->required();
  recon_cmd->add_option("-n,--samples", recon_samples, "rows per modality");
  recon_cmd->add_option("--ratio", recon_ratio, "mask ratio (default: the run's)");
  recon_cmd->add_option("-o,--output", recon_out, "output directory (default: <run>/reconstructions)");
  recon_cmd->add_option("--seed", recon_seed, "observation and mask seed");

  gradcheck::Options gopt;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient on a tiny model");
  grad_cmd->add_flag("--double", gopt.use_double, "double-precision analytic gradients (tolerance 1e-6)");
  grad_cmd->add_flag("--inject-fault", gopt.inject_fault, "corrupt one analytic gradient (must fail)");
  grad_cmd->add_option("--seed", gopt.seed, "model and data seed");
  grad_cmd->add_option("--tolerance", gopt.tolerance, "override the relative error bound");

  RunFlags ablate_flags;
  std::vector<int> ks = {1, 2, 4};
  auto* ablate_cmd = app.add_subcommand("ablate-stack", "one training run per frame-stack size, with comparison plots");
  ablate_flags.add(ablate_cmd);
  ablate_cmd->add_option("--k", ks, "frame-stack sizes (subset of 1 2 4)")->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(train_flags, resume);
    if (*eval_cmd) return cmd_eval(ef);
    if (*recon_cmd) return cmd_reconstruct(recon_run, recon_samples, recon_ratio, recon_out, recon_seed);
    if (*grad_cmd) return cmd_gradcheck(gopt);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, ks);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

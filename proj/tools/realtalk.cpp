// realtalk: dataset synthesis, training, inference, evaluation and the
// acceptance suite. Exit codes: 0 success, 2 validation error, 3 runtime
// failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <list>

#include "realtalk/acceptance.hpp"
#include "realtalk/pipeline.hpp"

#ifndef REALTALK_DEFAULT_CONFIG
#define REALTALK_DEFAULT_CONFIG "configs/default.json"
#endif

namespace fs = std::filesystem;
using namespace realtalk;

namespace {

constexpr int kValidation = 2;
constexpr int kRuntime = 3;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string data, checkpoints, output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (keys overlay the defaults)");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set ldm.train.steps=100 (repeatable)")
      ->allow_extra_args(false);
  cmd->add_option("--data", c.data, "dataset directory (paths.data)");
  cmd->add_option("--checkpoints", c.checkpoints, "checkpoint directory (paths.checkpoints)");
  cmd->add_option("--output", c.output, "output directory (paths.output)");
}

// Sugar flags become --set assignments so they pass the same validation.
struct Sugar {
  std::list<std::pair<std::string, std::string>> items;  // stable addresses for CLI11
  CLI::Option* add(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    items.emplace_back(key, "");
    auto* slot = &items.back().second;
    return cmd->add_option(flag, *slot, help + " (" + key + ")");
  }
};

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

pipeline::PipelineConfig resolve(const Common& c, const std::list<std::pair<std::string, std::string>>& sugar,
                                 const std::vector<std::string>& string_keys) {
  std::vector<std::string> sets;
  auto push = [&](const std::string& key, const std::string& value, bool as_string) {
    if (!value.empty()) sets.push_back(key + "=" + (as_string ? quoted(value) : value));
  };
  push("paths.data", c.data, true);
  push("paths.checkpoints", c.checkpoints, true);
  push("paths.output", c.output, true);
  for (const auto& [k, v] : sugar)
    push(k, v, std::find(string_keys.begin(), string_keys.end(), k) != string_keys.end());
  sets.insert(sets.end(), c.sets.begin(), c.sets.end());
  std::optional<fs::path> file;
  if (!c.config.empty()) file = c.config;
  return pipeline::parse_config(pipeline::load_config(file, sets, pipeline::seed_from_env()));
}

std::vector<double> parse_deltas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    char* end = nullptr;
    const double v = std::strtod(part.c_str(), &end);
    require(!part.empty() && end && *end == '\0', ErrorCode::invalid_argument, "bad delta value '" + part + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"realtalk: audio-driven emotional talking-face toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "realtalk 0.1");

  Common common;
  Sugar sugar;
  const std::vector<std::string> string_keys = {"infer.emotion", "infer.audio", "infer.pitch", "infer.output",
                                                "eval.external_scorer", "nerf.perceptual"};

  auto* synth = app.add_subcommand("synth-data", "write the synthetic parallel-emotion dataset");
  auto* tvae = app.add_subcommand("train-vae", "train the audio-to-motion VAE on neutral clips");
  auto* tldm = app.add_subcommand("train-ldm", "train the landmark deformation model on neutral/emotional pairs");
  auto* tnerf = app.add_subcommand("train-nerf", "fit the tri-plane NeRF to dataset clips");
  auto* infer = app.add_subcommand("infer", "audio + emotion label -> landmarks -> rendered frames");
  auto* eval = app.add_subcommand("eval", "score inference on a ground-truth clip");
  auto* ablate = app.add_subcommand("ablate-delta", "sweep the deformation magnitude delta");
  auto* accept = app.add_subcommand("accept", "run the acceptance criteria");

  for (auto* cmd : {synth, tvae, tldm, tnerf, infer, eval, ablate, accept}) add_common(cmd, common);

  sugar.add(synth, "--sentences", "synth.sentences", "sentences per emotion");
  sugar.add(synth, "--frames", "synth.frames", "frames per clip");
  sugar.add(synth, "--resolution", "resolution", "frame size: 32, 64 or 128");
  sugar.add(tvae, "--steps", "vae.train.steps", "optimizer steps");
  sugar.add(tldm, "--steps", "ldm.train.steps", "optimizer steps");
  sugar.add(tnerf, "--steps", "nerf.train.coarse_steps", "coarse-stage steps");
  sugar.add(tnerf, "--fine-steps", "nerf.train.fine_steps", "fine-stage steps");
  sugar.add(infer, "--emotion", "infer.emotion", "emotion label");
  sugar.add(infer, "--delta", "delta", "deformation magnitude");
  sugar.add(infer, "--audio", "infer.audio", "content features (RTAF); default: the audio of --clip");
  sugar.add(infer, "--pitch", "infer.pitch", "pitch features (RTAF); default: pitch_features.bin next to --audio");
  sugar.add(infer, "--clip", "infer.clip", "dataset clip whose audio drives inference");
  sugar.add(infer, "--pose-clip", "infer.pose_clip", "dataset clip supplying head poses and blendshapes");
  sugar.add(infer, "--out", "infer.output", "output directory");
  sugar.add(eval, "--clip", "eval.clip", "ground-truth dataset clip");
  sugar.add(eval, "--scorer", "eval.external_scorer", "external scorer command; prints a JSON object");
  sugar.add(ablate, "--clip", "eval.clip", "ground-truth dataset clip");

  std::string deltas;
  ablate->add_option("--deltas", deltas, "comma-separated delta values (default: delta_sweep)");

  std::string suite = "invariants", json_out, workdir;
  accept->add_option("--suite", suite, "invariants, training, full, or ids like 1,5,9");
  accept->add_option("--json", json_out, "also write machine-readable results here");
  accept->add_option("--workdir", workdir, "scratch directory for the end-to-end criterion");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kValidation;
  }

  try {
    if (accept->parsed()) {
      const auto ids = acceptance::select(suite);
      acceptance::Context ctx;
      ctx.config_file = common.config.empty() ? fs::path(REALTALK_DEFAULT_CONFIG) : fs::path(common.config);
      ctx.workdir = workdir.empty() ? fs::temp_directory_path() / "realtalk_accept" : fs::path(workdir);
      ctx.log = &std::cout;
      fs::create_directories(ctx.workdir);
      const auto results = acceptance::run(ids, ctx, std::cout);
      if (!json_out.empty()) io::write_text(json_out, acceptance::to_json(results).dump(2));
      int failed = 0;
      for (const auto& r : results) failed += r.passed ? 0 : 1;
      std::cout << (results.size() - failed) << "/" << results.size() << " criteria passed\n";
      return failed ? kRuntime : 0;
    }

    const auto cfg = resolve(common, sugar.items, string_keys);
    if (synth->parsed()) pipeline::synth_data(cfg, std::cout);
    else if (tvae->parsed()) pipeline::train_vae_stage(cfg, std::cout);
    else if (tldm->parsed()) pipeline::train_ldm_stage(cfg, std::cout);
    else if (tnerf->parsed()) pipeline::train_nerf_stage(cfg, std::cout);
    else if (infer->parsed()) pipeline::infer(cfg, std::cout);
    else if (eval->parsed()) pipeline::evaluate(cfg, std::cout);
    else if (ablate->parsed()) pipeline::ablate_delta(cfg, deltas.empty() ? cfg.delta_sweep : parse_deltas(deltas), std::cout);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.is_validation() ? kValidation : kRuntime;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: config error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

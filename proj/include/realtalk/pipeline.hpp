#pragma once

// End-to-end orchestration shared by the CLI and the acceptance suite:
// dataset synthesis, the three training stages, inference, evaluation and
// the delta sweep. Every stage is a pure function of (config, seeds).

#include <cstdint>
#include <cstdio>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "realtalk/a2m_vae.hpp"
#include "realtalk/data_io.hpp"
#include "realtalk/ldm.hpp"
#include "realtalk/metrics.hpp"
#include "realtalk/triplane_nerf.hpp"

namespace realtalk::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline const std::vector<double> kDefaultDeltaSweep = {0.0, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0};

// ---------------------------------------------------------------------------
// Config

inline json default_config() {
  json emotions = json::array();
  for (auto n : kEmotionNames) emotions.push_back(std::string(n));
  NerfTrainConfig nt;
  LdmTrainConfig lt;
  VaeTrainConfig vt;
  vt.log_every = 50;
  return {
      {"seeds", {{"data", 1}, {"vae", 1}, {"ldm", 1}, {"nerf", 1}, {"infer", 1}}},
      {"resolution", 64},
      {"delta", kDefaultDelta},
      {"delta_sweep", kDefaultDeltaSweep},
      {"paths", {{"data", "runs/data"}, {"checkpoints", "runs/checkpoints"}, {"output", "runs/output"}}},
      {"synth",
       {{"sentences", 2},
        {"frames", 64},
        {"emotions", emotions},
        {"mouth_open_gain", SynthConfig{}.mouth_open_gain},
        {"mouth_width_gain", SynthConfig{}.mouth_width_gain}}},
      {"vae", {{"model", to_json(VaeConfig{})}, {"train", {{"steps", vt.steps}, {"lr", vt.lr}, {"log_every", vt.log_every}}}}},
      {"ldm",
       {{"model", to_json(LdmConfig{})},
        {"train",
         {{"steps", lt.steps},
          {"lr", lt.lr},
          {"batch_windows", lt.batch_windows},
          {"log_every", lt.log_every},
          {"cosine_decay", lt.cosine_decay}}}}},
      {"nerf",
       {{"model", to_json(NerfConfig{})},
        {"train",
         {{"coarse_steps", nt.coarse_steps},
          {"fine_steps", nt.fine_steps},
          {"rays_per_batch", nt.rays_per_batch},
          {"lr", nt.lr},
          {"lr_final_ratio", nt.lr_final_ratio},
          {"eval_every", nt.eval_every},
          {"target_psnr", nt.target_psnr}}},
        {"perceptual", "random_conv"},
        {"clips", json::array()},
        {"frames_per_clip", 16}}},
      {"infer", {{"clip", 0}, {"emotion", "happy"}, {"audio", ""}, {"pitch", ""}, {"pose_clip", 0}, {"output", ""}}},
      {"eval", {{"clip", 1}, {"external_scorer", ""}}},
  };
}

namespace detail {

inline const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

inline void check_type(const json& base, const json& value, const std::string& key) {
  const bool ok = (base.is_number() && value.is_number()) || (base.is_boolean() && value.is_boolean()) ||
                  (base.is_string() && value.is_string()) || (base.is_array() && value.is_array()) ||
                  (base.is_object() && value.is_object());
  require(ok, ErrorCode::config,
          "key '" + key + "' expects " + type_name(base) + ", got " + type_name(value));
  if (base.is_number_integer() && value.is_number_float())
    require(value.get<double>() == std::floor(value.get<double>()), ErrorCode::config,
            "key '" + key + "' expects an integer");
}

}  // namespace detail

// Overlays `patch` on `base`. Every key must already exist in `base`; arrays
// are replaced whole.
inline void merge_strict(json& base, const json& patch, const std::string& prefix = "") {
  require(patch.is_object(), ErrorCode::config, "config must be a JSON object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    require(base.contains(it.key()), ErrorCode::config, "unknown config key '" + key + "'");
    json& slot = base[it.key()];
    detail::check_type(slot, it.value(), key);
    if (slot.is_object()) merge_strict(slot, it.value(), key);
    else slot = it.value();
  }
}

// "a.b.c=value"; the value is parsed as JSON when possible, else taken as a string.
inline void apply_set(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorCode::config, "--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_strict(cfg, patch);
}

inline std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("REALTALK_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  require(end && *end == '\0', ErrorCode::config, std::string("REALTALK_SEED is not an unsigned integer: '") + s + "'");
  return static_cast<std::uint64_t>(v);
}

// Defaults <- config file <- --set overrides <- REALTALK_SEED.
inline json load_config(const std::optional<fs::path>& file, const std::vector<std::string>& sets,
                        std::optional<std::uint64_t> seed_override) {
  json cfg = default_config();
  if (file) {
    require(fs::exists(*file), ErrorCode::missing_file, "config file " + file->string());
    merge_strict(cfg, io::read_json(*file));
  }
  for (const auto& s : sets) apply_set(cfg, s);
  if (seed_override)
    for (auto& [k, v] : cfg["seeds"].items()) v = *seed_override;
  return cfg;
}

struct Seeds {
  std::uint64_t data = 1, vae = 1, ldm = 1, nerf = 1, infer = 1;
};

struct PipelineConfig {
  json raw;
  Seeds seeds;
  int resolution = 64;
  double delta = kDefaultDelta;
  std::vector<double> delta_sweep = kDefaultDeltaSweep;
  fs::path data_dir, checkpoint_dir, output_dir;

  int sentences = 2;
  int frames = 64;
  std::vector<Emotion> emotions;
  SynthConfig synth;

  VaeConfig vae;
  VaeTrainConfig vae_train;
  LdmConfig ldm;
  LdmTrainConfig ldm_train;
  NerfConfig nerf;
  NerfTrainConfig nerf_train;
  std::string perceptual = "random_conv";
  std::vector<int> nerf_clips;
  int nerf_frames_per_clip = 16;

  int infer_clip = 0;
  Emotion infer_emotion = Emotion::happy;
  std::string infer_audio, infer_pitch;
  int pose_clip = 0;
  fs::path infer_output;

  int eval_clip = 1;
  std::string external_scorer;
};

// Typed view of a merged config; all semantic validation happens here.
inline PipelineConfig parse_config(const json& raw) {
  PipelineConfig c;
  c.raw = raw;
  try {
    const auto& s = raw.at("seeds");
    c.seeds = {s.at("data"), s.at("vae"), s.at("ldm"), s.at("nerf"), s.at("infer")};
    c.resolution = raw.at("resolution");
    require(c.resolution == 32 || c.resolution == 64 || c.resolution == 128, ErrorCode::config,
            "resolution must be 32, 64 or 128");
    c.delta = raw.at("delta");
    require(std::isfinite(c.delta) && c.delta >= 0, ErrorCode::config, "delta must be >= 0");
    c.delta_sweep = raw.at("delta_sweep").get<std::vector<double>>();
    for (double d : c.delta_sweep) require(std::isfinite(d) && d >= 0, ErrorCode::config, "delta_sweep values must be >= 0");
    c.data_dir = raw.at("paths").at("data").get<std::string>();
    c.checkpoint_dir = raw.at("paths").at("checkpoints").get<std::string>();
    c.output_dir = raw.at("paths").at("output").get<std::string>();

    const auto& sy = raw.at("synth");
    c.sentences = sy.at("sentences");
    c.frames = sy.at("frames");
    require(c.sentences >= 1 && c.frames >= 1, ErrorCode::config, "synth.sentences and synth.frames must be >= 1");
    for (const auto& e : sy.at("emotions")) c.emotions.push_back(parse_emotion(e.get<std::string>()));
    require(!c.emotions.empty(), ErrorCode::config, "synth.emotions must not be empty");
    c.synth.mouth_open_gain = sy.at("mouth_open_gain");
    c.synth.mouth_width_gain = sy.at("mouth_width_gain");

    c.vae = vae_config_from_json(raw.at("vae").at("model"));
    const auto& vt = raw.at("vae").at("train");
    c.vae_train.steps = vt.at("steps");
    c.vae_train.lr = vt.at("lr");
    c.vae_train.log_every = vt.at("log_every");
    c.vae_train.seed = c.seeds.vae;

    c.ldm = ldm_config_from_json(raw.at("ldm").at("model"));
    const auto& lt = raw.at("ldm").at("train");
    c.ldm_train.steps = lt.at("steps");
    c.ldm_train.lr = lt.at("lr");
    c.ldm_train.batch_windows = lt.at("batch_windows");
    c.ldm_train.log_every = lt.at("log_every");
    c.ldm_train.cosine_decay = lt.at("cosine_decay");
    c.ldm_train.seed = c.seeds.ldm;

    c.nerf = nerf_config_from_json(raw.at("nerf").at("model"));
    const auto& nt = raw.at("nerf").at("train");
    c.nerf_train.coarse_steps = nt.at("coarse_steps");
    c.nerf_train.fine_steps = nt.at("fine_steps");
    c.nerf_train.rays_per_batch = nt.at("rays_per_batch");
    c.nerf_train.lr = nt.at("lr");
    c.nerf_train.lr_final_ratio = nt.at("lr_final_ratio");
    c.nerf_train.eval_every = nt.at("eval_every");
    c.nerf_train.target_psnr = nt.at("target_psnr");
    c.nerf_train.seed = c.seeds.nerf;
    c.perceptual = raw.at("nerf").at("perceptual");
    require(c.perceptual == "random_conv" || c.perceptual == "none", ErrorCode::config,
            "nerf.perceptual must be \"random_conv\" or \"none\"");
    c.nerf_clips = raw.at("nerf").at("clips").get<std::vector<int>>();
    c.nerf_frames_per_clip = raw.at("nerf").at("frames_per_clip");
    require(c.nerf_frames_per_clip >= 1, ErrorCode::config, "nerf.frames_per_clip must be >= 1");

    const auto& in = raw.at("infer");
    c.infer_clip = in.at("clip");
    c.infer_emotion = parse_emotion(in.at("emotion").get<std::string>());
    c.infer_audio = in.at("audio");
    c.infer_pitch = in.at("pitch");
    c.pose_clip = in.at("pose_clip");
    const std::string out = in.at("output");
    c.infer_output = out.empty() ? c.output_dir / "infer" : fs::path(out);

    c.eval_clip = raw.at("eval").at("clip");
    c.external_scorer = raw.at("eval").at("external_scorer");
  } catch (const json::exception& e) {
    fail(ErrorCode::config, e.what());
  }
  return c;
}

// FNV-1a; stable across platforms, used to tie checkpoints to a dataset.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Data

// Clip name for sentence s and emotion e. Clips of one sentence share audio,
// blendshapes and poses, so they pair frame by frame across emotions.
inline std::string clip_name(int sentence, Emotion e) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "s%02d_%s", sentence, std::string(to_string(e)).c_str());
  return buf;
}

inline io::DatasetManifest synth_data(const PipelineConfig& cfg, std::ostream& log) {
  SyntheticFaceGenerator gen(cfg.synth);
  std::vector<SyntheticClip> clips;
  std::vector<std::string> names;
  for (int s = 0; s < cfg.sentences; ++s)
    for (Emotion e : cfg.emotions) {
      clips.push_back(gen.generate_clip(cfg.seeds.data * 1000 + static_cast<std::uint64_t>(s), e, cfg.frames,
                                        cfg.resolution));
      names.push_back(clip_name(s, e));
    }
  fs::remove_all(cfg.data_dir);
  auto m = io::write_dataset(cfg.data_dir, clips, names);
  log << "wrote " << clips.size() << " clips (" << cfg.frames << " frames, " << cfg.resolution << "px) to "
      << cfg.data_dir.string() << "\n";
  return m;
}

inline io::Dataset open_dataset(const PipelineConfig& cfg) {
  require(fs::exists(cfg.data_dir / "manifest.json"), ErrorCode::missing_file,
          "dataset " + (cfg.data_dir / "manifest.json").string() + " (run synth-data first)");
  return io::load_dataset(cfg.data_dir);
}

inline std::string dataset_hash(const PipelineConfig& cfg) {
  const auto bytes = io::read_bytes(cfg.data_dir / "manifest.json");
  return fnv1a_hex(std::string(bytes.begin(), bytes.end()));
}

// Frames [0, max_frames) of each clip, concatenated.
inline SyntheticClip concat_clips(const std::vector<SyntheticClip>& clips, int max_frames) {
  require(!clips.empty(), ErrorCode::invalid_argument, "no clips to concatenate");
  SyntheticClip out;
  out.emotion = clips[0].emotion;
  out.resolution = clips[0].resolution;
  out.intrinsics = clips[0].intrinsics;
  ad::Index rows = 0;
  for (const auto& c : clips) {
    require(c.resolution == out.resolution, ErrorCode::shape_mismatch, "clips differ in resolution");
    rows += std::min<ad::Index>(max_frames, c.length());
  }
  out.landmarks.resize(rows, kLandmarkDim);
  out.mouth_motion = ad::Matrix<double>::Zero(rows, kLandmarkDim);
  out.content.resize(rows, clips[0].content.cols());
  out.pitch.resize(rows, clips[0].pitch.cols());
  out.blendshapes.resize(rows, clips[0].blendshapes.cols());
  ad::Index r = 0;
  for (const auto& c : clips) {
    const ad::Index n = std::min<ad::Index>(max_frames, c.length());
    out.landmarks.middleRows(r, n) = c.landmarks.topRows(n);
    out.content.middleRows(r, n) = c.content.topRows(n);
    out.pitch.middleRows(r, n) = c.pitch.topRows(n);
    out.blendshapes.middleRows(r, n) = c.blendshapes.topRows(n);
    for (ad::Index t = 0; t < n; ++t) {
      out.frames.push_back(c.frames[static_cast<std::size_t>(t)]);
      out.poses.push_back(c.poses[static_cast<std::size_t>(t)]);
    }
    r += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training stages

inline fs::path stage_dir(const PipelineConfig& cfg, const char* stage) { return cfg.checkpoint_dir / stage; }

inline void stamp(io::Checkpoint& ckpt, const std::string& data_hash) {
  ckpt.config["dataset"] = data_hash;
  ckpt.config["landmark_dim"] = kLandmarkDim;
}

inline VaeTrainResult train_vae_stage(const PipelineConfig& cfg, std::ostream& log) {
  auto ds = open_dataset(cfg);
  std::vector<SyntheticClip> clips;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.manifest().clips[i].emotion == Emotion::neutral) clips.push_back(ds.load_clip(i));
  require(!clips.empty(), ErrorCode::invalid_argument, "train-vae needs at least one neutral clip in the dataset");
  VaeConfig vc = cfg.vae;
  vc.content_dim = ds.manifest().content_dim;
  vc.pitch_dim = ds.manifest().pitch_dim;
  VaeModel<float> model(vc, cfg.seeds.vae);
  std::vector<const SyntheticClip*> ptrs;
  for (const auto& c : clips) ptrs.push_back(&c);
  auto r = train_vae(model, ptrs, cfg.vae_train);
  for (const auto& p : r.curve)
    log << "vae step " << p.step << " total " << p.total << " recon_mse " << p.recon_mse << " kl " << p.kl << " sync "
        << p.sync << "\n";
  if (r.diverged) log << "vae: " << r.message << " (last good parameters kept)\n";
  auto ckpt = vae_checkpoint(model);
  stamp(ckpt, dataset_hash(cfg));
  const auto dir = stage_dir(cfg, "vae");
  io::save_checkpoint(ckpt, dir);
  std::ofstream csv(dir / "curve.csv");
  csv << "step,total,recon,recon_mse,kl,sync,scorer\n";
  for (const auto& p : r.curve)
    csv << p.step << "," << p.total << "," << p.recon << "," << p.recon_mse << "," << p.kl << "," << p.sync << ","
        << p.scorer << "\n";
  log << "saved " << dir.string() << "\n";
  return r;
}

// Neutral/emotional pairs: every non-neutral clip with the neutral clip of
// the same sentence; neutral clips pair with themselves.
inline std::vector<LdmPair> dataset_ldm_pairs(const io::Dataset& ds) {
  std::vector<SyntheticClip> clips;
  for (std::size_t i = 0; i < ds.size(); ++i) clips.push_back(ds.load_clip(i));
  std::vector<LdmPair> pairs;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const std::string& name = ds.manifest().clips[i].path;
    const std::string sentence = name.substr(0, name.find('_'));
    const SyntheticClip* neutral = nullptr;
    for (std::size_t j = 0; j < clips.size(); ++j)
      if (clips[j].emotion == Emotion::neutral && ds.manifest().clips[j].path.rfind(sentence + "_", 0) == 0)
        neutral = &clips[j];
    if (!neutral || neutral->length() != clips[i].length()) continue;
    pairs.push_back({neutral->landmarks, clips[i].landmarks, clips[i].emotion});
  }
  require(!pairs.empty(), ErrorCode::invalid_argument,
          "train-ldm needs sentences with a neutral clip (synth.emotions must include neutral)");
  return pairs;
}

inline LdmTrainResult train_ldm_stage(const PipelineConfig& cfg, std::ostream& log) {
  auto ds = open_dataset(cfg);
  auto pairs = dataset_ldm_pairs(ds);
  LdmModel<float> model(cfg.ldm, cfg.seeds.ldm);
  auto r = train_ldm(model, pairs, cfg.ldm_train);
  for (const auto& [step, loss] : r.curve) log << "ldm step " << step << " loss " << loss << "\n";
  if (r.diverged) log << "ldm: " << r.message << " (last good parameters kept)\n";
  auto ckpt = ldm_checkpoint(model);
  stamp(ckpt, dataset_hash(cfg));
  const auto dir = stage_dir(cfg, "ldm");
  io::save_checkpoint(ckpt, dir);
  std::ofstream csv(dir / "curve.csv");
  csv << "step,loss\n";
  for (const auto& [step, loss] : r.curve) csv << step << "," << loss << "\n";
  log << "saved " << dir.string() << " (" << pairs.size() << " pairs)\n";
  return r;
}

inline std::unique_ptr<PerceptualBackend<float>> make_backend(const PipelineConfig& cfg) {
  if (cfg.perceptual == "random_conv") return std::make_unique<RandomConvPerceptual<float>>(cfg.seeds.nerf);
  return nullptr;
}

inline NerfTrainResult train_nerf_stage(const PipelineConfig& cfg, std::ostream& log) {
  auto ds = open_dataset(cfg);
  std::vector<int> ids = cfg.nerf_clips;
  if (ids.empty())
    for (std::size_t i = 0; i < ds.size(); ++i) ids.push_back(static_cast<int>(i));
  std::vector<SyntheticClip> clips;
  for (int i : ids) {
    require(i >= 0 && static_cast<std::size_t>(i) < ds.size(), ErrorCode::config,
            "nerf.clips index " + std::to_string(i) + " out of range");
    clips.push_back(ds.load_clip(static_cast<std::size_t>(i)));
  }
  const auto clip = concat_clips(clips, cfg.nerf_frames_per_clip);
  NerfConfig nc = cfg.nerf;
  nc.blendshape_dim = ds.manifest().blendshape_dim;
  NerfModel<float> model(nc, cfg.seeds.nerf);
  auto backend = make_backend(cfg);
  NerfTrainConfig tc = cfg.nerf_train;
  if (!backend && tc.fine_steps > 0) {
    log << "nerf: no perceptual backend configured, skipping the " << tc.fine_steps << " fine steps\n";
    tc.fine_steps = 0;
  }
  auto r = train_nerf(model, clip, tc, backend.get());
  // The step-0 point is evaluated before any update and has no loss.
  auto loss_text = [](double l) { return std::isfinite(l) ? std::to_string(l) : std::string(); };
  for (const auto& p : r.curve) {
    log << "nerf step " << p.step << " psnr " << p.psnr;
    if (std::isfinite(p.loss)) log << " loss " << p.loss;
    log << "\n";
  }
  if (r.diverged) log << "nerf: " << r.message << " (last good parameters kept)\n";
  auto ckpt = nerf_checkpoint(model);
  stamp(ckpt, dataset_hash(cfg));
  const auto dir = stage_dir(cfg, "nerf");
  io::save_checkpoint(ckpt, dir);
  std::ofstream csv(dir / "curve.csv");
  csv << "step,psnr,loss\n";
  for (const auto& p : r.curve) csv << p.step << "," << p.psnr << "," << loss_text(p.loss) << "\n";
  log << "saved " << dir.string() << " (" << clip.length() << " training frames)\n";
  return r;
}

// ---------------------------------------------------------------------------
// Inference

struct Models {
  VaeModel<float> vae;
  LdmModel<float> ldm;
  NerfModel<float> nerf;
};

inline std::unique_ptr<Models> load_models(const PipelineConfig& cfg) {
  io::Checkpoint ck[3];
  const char* stages[3] = {"vae", "ldm", "nerf"};
  for (int i = 0; i < 3; ++i) {
    const auto dir = stage_dir(cfg, stages[i]);
    require(fs::exists(dir / "index.json"), ErrorCode::missing_file,
            std::string(stages[i]) + " checkpoint " + dir.string() + " (run train-" + stages[i] + " first)");
    ck[i] = io::load_checkpoint(dir);
    require(ck[i].config.value("landmark_dim", 0) == kLandmarkDim, ErrorCode::incompatible_checkpoint,
            std::string(stages[i]) + " checkpoint landmark dimension");
  }
  const std::string h = ck[0].config.value("dataset", std::string());
  for (int i = 1; i < 3; ++i)
    require(ck[i].config.value("dataset", std::string()) == h, ErrorCode::incompatible_checkpoint,
            std::string(stages[i]) + " checkpoint was trained on a different dataset than the vae checkpoint");
  return std::make_unique<Models>(
      Models{vae_from_checkpoint<float>(ck[0]), ldm_from_checkpoint<float>(ck[1]), nerf_from_checkpoint<float>(ck[2])});
}

struct InferRequest {
  ad::Matrix<double> content, pitch;  // T x D audio features
  Emotion emotion = Emotion::neutral;
  double delta = kDefaultDelta;
  SyntheticClip pose_source;  // poses, intrinsics and blendshapes (cycled)
};

struct InferResult {
  ad::Matrix<double> neutral, emotional;
  std::vector<Image> frames;
};

// audio -> neutral landmarks -> emotional landmarks -> frames.
inline InferResult run_inference(Models& m, const InferRequest& req, int resolution, std::uint64_t seed) {
  require(!req.pose_source.poses.empty(), ErrorCode::missing_file, "pose source has no poses");
  require(req.pose_source.blendshapes.rows() == static_cast<ad::Index>(req.pose_source.poses.size()),
          ErrorCode::shape_mismatch, "pose source blendshapes and poses differ in length");
  InferResult r;
  r.neutral = infer_motion(m.vae, req.content, req.pitch, seed);
  r.emotional = deform_sequence(m.ldm, r.neutral, req.emotion, req.delta);
  const auto n = static_cast<ad::Index>(req.pose_source.poses.size());
  for (ad::Index t = 0; t < r.emotional.rows(); ++t)
    r.frames.push_back(render_frame(m.nerf, req.pose_source.poses[static_cast<std::size_t>(t % n)],
                                    req.pose_source.intrinsics, r.emotional.row(t),
                                    req.pose_source.blendshapes.row(t % n), resolution));
  return r;
}

inline SyntheticClip load_clip_checked(const io::Dataset& ds, int index, const char* role) {
  require(index >= 0 && static_cast<std::size_t>(index) < ds.size(), ErrorCode::missing_file,
          std::string(role) + " clip " + std::to_string(index) + " (dataset has " + std::to_string(ds.size()) + ")");
  return ds.load_clip(static_cast<std::size_t>(index));
}

// Request from the infer section: audio files if given, else the audio of
// infer.clip; poses and blendshapes from infer.pose_clip.
inline InferRequest infer_request(const PipelineConfig& cfg, const io::Dataset& ds) {
  InferRequest req;
  req.emotion = cfg.infer_emotion;
  req.delta = cfg.delta;
  req.pose_source = load_clip_checked(ds, cfg.pose_clip, "pose source");
  if (!cfg.infer_audio.empty()) {
    const fs::path audio = cfg.infer_audio;
    const fs::path pitch = cfg.infer_pitch.empty() ? audio.parent_path() / "pitch_features.bin" : fs::path(cfg.infer_pitch);
    require(fs::exists(audio), ErrorCode::missing_file, "audio features " + audio.string());
    require(fs::exists(pitch), ErrorCode::missing_file, "pitch features " + pitch.string());
    req.content = io::read_rtaf(audio);
    req.pitch = io::read_rtaf(pitch);
  } else {
    const auto clip = load_clip_checked(ds, cfg.infer_clip, "audio source");
    req.content = clip.content;
    req.pitch = clip.pitch;
  }
  return req;
}

inline void write_inference(const InferResult& r, const fs::path& dir, const json& manifest) {
  fs::remove_all(dir);
  fs::create_directories(dir / "frames");
  for (std::size_t t = 0; t < r.frames.size(); ++t) write_png(io::frame_path(dir, static_cast<int>(t)), r.frames[t]);
  io::write_csv(dir / "neutral_landmarks.csv", r.neutral);
  io::write_csv(dir / "emotional_landmarks.csv", r.emotional);
  io::write_text(dir / "manifest.json", manifest.dump(2));
}

// Hash of the settings that determine the output; paths are excluded so the
// same run written elsewhere gives the same manifest.
inline std::string config_hash(const json& raw) {
  json j = raw;
  j.erase("paths");
  j["infer"].erase("output");
  return fnv1a_hex(j.dump());
}

inline InferResult infer(const PipelineConfig& cfg, std::ostream& log) {
  auto ds = open_dataset(cfg);
  auto models = load_models(cfg);
  auto req = infer_request(cfg, ds);
  auto r = run_inference(*models, req, cfg.resolution, cfg.seeds.infer);
  json manifest = {{"frames", r.frames.size()},
                   {"resolution", cfg.resolution},
                   {"emotion", std::string(to_string(req.emotion))},
                   {"delta", req.delta},
                   {"seed", cfg.seeds.infer},
                   {"audio", cfg.infer_audio.empty() ? "clip " + std::to_string(cfg.infer_clip) : cfg.infer_audio},
                   {"pose_clip", cfg.pose_clip},
                   {"dataset", dataset_hash(cfg)},
                   {"config_hash", config_hash(cfg.raw)},
                   {"frame_pattern", "frames/%05d.png"}};
  write_inference(r, cfg.infer_output, manifest);
  log << "wrote " << r.frames.size() << " frames to " << cfg.infer_output.string() << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

// Runs `command '<frames_dir>'` and merges the JSON object it prints.
inline std::map<std::string, double> run_external_scorer(const std::string& command, const fs::path& frames) {
  const std::string full = command + " '" + frames.string() + "'";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(full.c_str(), "r"), pclose);
  require(pipe != nullptr, ErrorCode::io, "cannot start external scorer: " + command);
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe.get())) out.append(buf, n);
  const int status = pclose(pipe.release());
  require(status == 0, ErrorCode::io, "external scorer exited with status " + std::to_string(status));
  const json j = json::parse(out, nullptr, false);
  require(j.is_object(), ErrorCode::io, "external scorer must print a JSON object of numbers");
  std::map<std::string, double> values;
  for (auto it = j.begin(); it != j.end(); ++it) {
    require(it.value().is_number(), ErrorCode::io, "external scorer value '" + it.key() + "' is not a number");
    values[it.key()] = it.value().get<double>();
  }
  return values;
}

inline metrics::MetricReport score_frames(const std::vector<Image>& pred, const ad::Matrix<double>& pred_landmarks,
                                          const SyntheticClip& gt) {
  require(static_cast<int>(pred.size()) == gt.length() && pred_landmarks.rows() == gt.length(),
          ErrorCode::shape_mismatch, "prediction and ground truth differ in length");
  metrics::MetricReport r;
  for (int t = 0; t < gt.length(); ++t) {
    r.psnr.push_back(metrics::psnr(pred[static_cast<std::size_t>(t)], gt.frames[static_cast<std::size_t>(t)]));
    r.ssim.push_back(metrics::ssim(pred[static_cast<std::size_t>(t)], gt.frames[static_cast<std::size_t>(t)]));
    r.m_lmd.push_back(metrics::lmd(pred_landmarks.row(t), gt.landmarks.row(t), metrics::Region::mouth));
    r.f_lmd.push_back(metrics::lmd(pred_landmarks.row(t), gt.landmarks.row(t), metrics::Region::face));
  }
  return r;
}

inline double perceptual_mean(const PerceptualBackend<float>& backend, const std::vector<Image>& pred,
                              const std::vector<Image>& gt) {
  ad::NoGradGuard ng;
  double acc = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const int w = pred[t].width, h = pred[t].height;
    ad::Matrix<float> a(static_cast<ad::Index>(w) * h, 3), b(a.rows(), 3);
    for (ad::Index i = 0; i < a.rows(); ++i)
      for (int c = 0; c < 3; ++c) {
        a(i, c) = pred[t].rgb[static_cast<std::size_t>(i) * 3 + c];
        b(i, c) = gt[t].rgb[static_cast<std::size_t>(i) * 3 + c];
      }
    acc += static_cast<double>(backend.distance(ad::constant<float>(a), b, h, w).item());
  }
  return acc / static_cast<double>(std::max<std::size_t>(1, pred.size()));
}

// Inference on eval.clip with its own audio, label and poses, scored
// against its frames and landmarks.
inline metrics::MetricReport evaluate(const PipelineConfig& cfg, std::ostream& log) {
  auto ds = open_dataset(cfg);
  auto models = load_models(cfg);
  const auto gt = load_clip_checked(ds, cfg.eval_clip, "eval");
  InferRequest req{gt.content, gt.pitch, gt.emotion, cfg.delta, gt};
  auto out = run_inference(*models, req, gt.resolution, cfg.seeds.infer);
  auto report = score_frames(out.frames, out.emotional, gt);
  report.clip_id = ds.manifest().clips[static_cast<std::size_t>(cfg.eval_clip)].path;
  report.method = "realtalk";
  if (gt.length() >= models->vae.config().sync_window + 10) {
    SyntheticClip generated = gt;
    generated.landmarks = out.neutral;
    report.sync_gap = sync_gap(models->vae, generated, cfg.seeds.infer);
  }
  if (auto backend = make_backend(cfg)) report.extra["perceptual_" + backend->name()] = perceptual_mean(*backend, out.frames, gt.frames);
  const auto dir = cfg.output_dir / "eval";
  write_inference(out, dir, {{"clip", report.clip_id}, {"delta", cfg.delta}, {"seed", cfg.seeds.infer}});
  if (!cfg.external_scorer.empty()) report.merge_external(run_external_scorer(cfg.external_scorer, dir / "frames"));
  metrics::write_report(report, dir);
  const auto j = report.to_json();
  log << "eval " << report.clip_id << ": " << j["aggregate"].dump() << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// Delta sweep

struct AblationRow {
  double delta = 0;
  double ssim = 0, psnr = 0, m_lmd = 0, f_lmd = 0;
  std::optional<double> perceptual;
  double emotional_vs_neutral = 0;  // mean per-frame ||l_E - l||
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::string perceptual_name;  // empty when no backend is configured
};

inline std::string delta_label(double d) {
  std::ostringstream os;
  os << d;
  if (d == kDefaultDelta) os << " [full]";
  return os.str();
}

inline std::string format_ablation_table(const AblationReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "delta" << std::right << std::setw(9) << "SSIM" << std::setw(9) << "PSNR"
     << std::setw(9) << "LPIPS*" << std::setw(9) << "M-LMD" << std::setw(9) << "F-LMD" << "\n";
  os << std::fixed;
  for (const auto& row : r.rows) {
    os << std::left << std::setw(14) << delta_label(row.delta) << std::right << std::setprecision(3) << std::setw(9)
       << row.ssim << std::setw(9) << row.psnr << std::setw(9);
    if (row.perceptual) os << *row.perceptual;
    else os << "-";
    os << std::setprecision(4) << std::setw(9) << row.m_lmd << std::setw(9) << row.f_lmd << "\n";
  }
  os << "* perceptual column: " << (r.perceptual_name.empty() ? "not configured" : r.perceptual_name) << "\n";
  return os.str();
}

inline AblationReport ablate_delta(const PipelineConfig& cfg, const std::vector<double>& deltas, std::ostream& log) {
  require(!deltas.empty(), ErrorCode::invalid_argument, "ablate-delta needs at least one delta value");
  for (double d : deltas) require(std::isfinite(d) && d >= 0, ErrorCode::invalid_argument, "delta values must be >= 0");
  auto ds = open_dataset(cfg);
  auto models = load_models(cfg);
  const auto gt = load_clip_checked(ds, cfg.eval_clip, "eval");
  auto backend = make_backend(cfg);
  AblationReport report;
  if (backend) report.perceptual_name = backend->name();
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  for (double d : deltas) {
    InferRequest req{gt.content, gt.pitch, gt.emotion, d, gt};
    auto out = run_inference(*models, req, gt.resolution, cfg.seeds.infer);
    auto m = score_frames(out.frames, out.emotional, gt);
    AblationRow row;
    row.delta = d;
    row.ssim = mean(m.ssim);
    row.psnr = mean(m.psnr);
    row.m_lmd = mean(m.m_lmd);
    row.f_lmd = mean(m.f_lmd);
    if (backend) row.perceptual = perceptual_mean(*backend, out.frames, gt.frames);
    for (ad::Index t = 0; t < out.neutral.rows(); ++t)
      row.emotional_vs_neutral += (out.emotional.row(t) - out.neutral.row(t)).norm();
    row.emotional_vs_neutral /= static_cast<double>(std::max<ad::Index>(1, out.neutral.rows()));
    report.rows.push_back(row);
  }
  const auto dir = cfg.output_dir / "ablation";
  fs::create_directories(dir);
  std::ofstream csv(dir / "ablation.csv");
  csv << "delta,ssim,psnr,perceptual,m_lmd,f_lmd,emotional_vs_neutral\n";
  json rows = json::array();
  for (const auto& r : report.rows) {
    csv << r.delta << "," << r.ssim << "," << r.psnr << "," << (r.perceptual ? std::to_string(*r.perceptual) : "")
        << "," << r.m_lmd << "," << r.f_lmd << "," << r.emotional_vs_neutral << "\n";
    rows.push_back({{"delta", r.delta},
                    {"label", delta_label(r.delta)},
                    {"ssim", r.ssim},
                    {"psnr", r.psnr},
                    {"perceptual", r.perceptual ? json(*r.perceptual) : json(nullptr)},
                    {"m_lmd", r.m_lmd},
                    {"f_lmd", r.f_lmd},
                    {"emotional_vs_neutral", r.emotional_vs_neutral}});
  }
  io::write_text(dir / "ablation.json",
                 json{{"clip", ds.manifest().clips[static_cast<std::size_t>(cfg.eval_clip)].path}, {"rows", rows}}.dump(2));
  log << format_ablation_table(report);
  return report;
}

}  // namespace realtalk::pipeline

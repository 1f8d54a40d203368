#include "pv3d/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "pv3d/analysis.hpp"
#include "pv3d/checkpoint.hpp"
#include "pv3d/datapipe.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/extractors.hpp"
#include "pv3d/image_io.hpp"
#include "pv3d/inference.hpp"
#include "pv3d/inversion.hpp"
#include "pv3d/metrics.hpp"

namespace pv3d {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

class OutputLockedError : public Error {
 public:
  using Error::Error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Independent per-subsystem seeds from one root seed (FNV-1a of the stream
// name mixed through splitmix64).
uint64_t derive_seed(uint64_t root, std::string_view stream) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : stream) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
  uint64_t z = root + h + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json_atomic(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".pv3d.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST)
        throw OutputLockedError("output directory " + dir.string() + " is locked (" + path_.string() + ")");
      throw DataError("cannot create lock file " + path_.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

// Everything a subcommand needs besides its own flags.
struct Run {
  std::ostream& out;
  std::string command;
  std::vector<std::string> args;
  json options = json::object();  // effective flag values
  json sources = json::object();  // flag or default, per option
  std::optional<OutputLock> lock;
  fs::path manifest_path;
  json manifest;

  // Locks `dir` and writes the run manifest before any work happens.
  void begin(const fs::path& dir, uint64_t seed, const json& config,
             const std::optional<fs::path>& checkpoint = std::nullopt) {
    lock.emplace(dir);
    manifest_path = dir / "run_manifest.json";
    manifest = {{"command", command},
                {"args", args},
                {"seed", seed},
                {"config", config},
                {"config_sources", sources},
                {"checkpoint_sha1", checkpoint ? json(file_sha1(*checkpoint)) : json()},
                {"started_at", utc_now()},
                {"finished_at", nullptr},
                {"status", "running"}};
    write_json_atomic(manifest_path, manifest);
  }

  void finish(const std::string& status, const json& extra = json::object()) {
    if (manifest_path.empty()) return;
    manifest["status"] = status;
    manifest["finished_at"] = utc_now();
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    write_json_atomic(manifest_path, manifest);
  }
};

// Records every option of `sub` with its effective value and provenance.
void snapshot_options(const CLI::App& sub, Run& run) {
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || name == "--help" || name == "-h") continue;
    std::string key = opt->get_lnames().empty() ? name : opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      run.options[key] = res.size() == 1 ? json(res.front()) : json(res);
      run.sources[key] = "flag";
    } else {
      run.options[key] = opt->get_default_str();
      run.sources[key] = "default";
    }
  }
}

fs::path data_root(const std::string& flag, bool required, Run& run) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PV3D_DATA_ROOT"); env && *env) {
    run.sources["data"] = "env";
    run.options["data"] = env;
    return env;
  }
  if (required) throw ConfigError("no data root: pass --data or set PV3D_DATA_ROOT");
  return {};
}

std::string frame_name(const std::string& stem, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05d.bin", stem.c_str(), index);
  return buf;
}

torch::Tensor as_grid(const torch::Tensor& map) { return map.reshape({map.size(-2), map.size(-1)}); }

void write_maps(const fs::path& dir, const VideoClip& clip) {
  for (int64_t i = 0; i < clip.size(); ++i) {
    write_float_grid(dir / frame_name("depth", static_cast<int>(i)), as_grid(clip.depths[i]));
    write_float_grid(dir / frame_name("opacity", static_cast<int>(i)), as_grid(clip.opacities[i]));
  }
}

// Piecewise-linear yaw sweep through the listed angles.
std::vector<CameraPose> orbit_poses(const std::vector<double>& yaws, int n) {
  std::vector<CameraPose> cams;
  const CameraPose front = frontal_pose();
  for (int i = 0; i < n; ++i) {
    double yaw = yaws.front();
    if (yaws.size() > 1 && n > 1) {
      const double u = static_cast<double>(i) / (n - 1) * static_cast<double>(yaws.size() - 1);
      const size_t k = std::min(static_cast<size_t>(u), yaws.size() - 2);
      yaw = yaws[k] + (u - static_cast<double>(k)) * (yaws[k + 1] - yaws[k]);
    }
    cams.push_back(yaw_pose(yaw, front));
  }
  return cams;
}

std::vector<CameraPose> fit_poses(std::vector<CameraPose> poses, int n, const std::string& what) {
  if (poses.empty()) throw DataError(what + " holds no poses");
  if (poses.size() == 1) return std::vector<CameraPose>(n, poses.front());
  if (static_cast<int>(poses.size()) < n)
    throw DataError(what + " has " + std::to_string(poses.size()) + " poses, need " + std::to_string(n));
  poses.resize(n);
  return poses;
}

torch::Tensor fit_resolution(const torch::Tensor& frames, int res) {
  if (frames.size(-1) == res && frames.size(-2) == res) return frames;
  auto batch = frames.dim() == 3 ? frames.unsqueeze(0) : frames;
  namespace F = torch::nn::functional;
  auto out = F::interpolate(batch, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{res, res})
                                       .mode(torch::kBilinear)
                                       .align_corners(false)
                                       .antialias(true));
  return frames.dim() == 3 ? out[0] : out;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string config, data, out, preset, resume;
  int iterations = 0, batch_size = 0, checkpoint_interval = 0, log_interval = 0;
  uint64_t seed = 0;
  CLI::Option *iterations_opt, *batch_opt, *seed_opt, *ckpt_opt, *log_opt;
};

void cmd_train(const TrainOptions& o, Run& run) {
  json cfg_json = (o.preset.empty() ? TrainConfig{} : TrainConfig::preset(o.preset)).to_json();
  json sources;
  for (const auto& [k, v] : cfg_json.items()) sources[k] = o.preset.empty() ? "default" : "preset";
  GeneratorConfig gcfg;
  DiscriminatorConfig dcfg;
  if (!o.config.empty()) {
    json file = read_config_file(o.config);
    if (file.contains("generator")) {
      gcfg = GeneratorConfig::from_json(file["generator"]);
      file.erase("generator");
    }
    if (file.contains("discriminator")) {
      dcfg = DiscriminatorConfig::from_json(file["discriminator"]);
      file.erase("discriminator");
    }
    for (const auto& [k, v] : file.items()) {
      cfg_json[k] = v;
      sources[k] = "file";
    }
  }
  auto flag = [&](CLI::Option* opt, const char* key, const json& value) {
    if (opt->count() == 0) return;
    cfg_json[key] = value;
    sources[key] = "flag";
  };
  flag(o.iterations_opt, "iterations", o.iterations);
  flag(o.batch_opt, "batch_size", o.batch_size);
  flag(o.seed_opt, "seed", o.seed);
  flag(o.ckpt_opt, "checkpoint_interval", o.checkpoint_interval);
  flag(o.log_opt, "log_interval", o.log_interval);
  const TrainConfig cfg = TrainConfig::from_json(cfg_json);
  cfg.validate();
  gcfg.validate();
  run.sources["train_config"] = sources;

  const fs::path root = data_root(o.data, true, run);
  const fs::path out_dir = o.out;
  const json snapshot = {{"train", cfg.to_json()},
                         {"generator", gcfg.to_json()},
                         {"discriminator", dcfg.to_json()},
                         {"data", root.string()},
                         {"options", run.options}};
  std::optional<fs::path> resume;
  if (!o.resume.empty()) resume = fs::path(o.resume);
  run.begin(out_dir, cfg.seed, snapshot, resume);

  const auto dataset = InMemoryDataset::load(root);
  ModelBundle models;
  if (resume) {
    models = load_checkpoint(*resume).models;
  } else {
    models = make_models(gcfg, dcfg, derive_seed(cfg.seed, "models"));
  }
  Trainer trainer(models.generator, models.image_disc, models.video_disc, cfg, dataset);
  const fs::path log = out_dir / "loss.csv";
  if (resume) {
    restore_trainer_state(*resume, trainer);
  } else {
    fs::remove(log);
  }
  const fs::path ckpt_dir = out_dir / "checkpoints";
  if (cfg.checkpoint_interval > 0) fs::create_directories(ckpt_dir);
  run.out << "training " << dataset.size() << " clips for " << cfg.iterations << " iterations\n";
  trainer.run(log, [&](const LossReport& r) {
    if (r.iteration % cfg.log_interval == 0 || r.iteration + 1 == cfg.iterations)
      run.out << "iter " << r.iteration << " img_d " << r.img_d << " vid_d " << r.vid_d << " img_g "
              << r.img_g << " vid_g " << r.vid_g << " sigma " << r.sigma << '\n';
  }, ckpt_dir);
  const fs::path final_ckpt = out_dir / "final.pt";
  save_training_checkpoint(final_ckpt, trainer);
  run.finish("ok", {{"output_checkpoint_sha1", file_sha1(final_ckpt)}, {"iterations", trainer.iteration()}});
}

// ---- generate --------------------------------------------------------------

struct GenerateOptions {
  std::string checkpoint, poses, mode, out;
  std::vector<double> orbit;
  int frames = 16;
  uint64_t seed = 0;
  CLI::Option* frames_opt;
};

void cmd_generate(const GenerateOptions& o, Run& run) {
  if (o.poses.empty() == o.orbit.empty()) throw ConfigError("pass exactly one of --poses or --orbit");
  if (o.frames < 1) throw ConfigError("--frames must be at least 1");
  run.begin(o.out, o.seed, run.options, fs::path(o.checkpoint));
  auto ckpt = load_checkpoint(o.checkpoint);
  auto& g = ckpt.models.generator;
  g->eval();
  const CameraMode mode = o.mode.empty() ? g->config().camera_mode : camera_mode_from_string(o.mode);
  std::vector<CameraPose> cams;
  int n = o.frames;
  if (!o.poses.empty()) {
    auto poses = read_pose_file(o.poses);
    if (o.frames_opt->count() == 0) n = static_cast<int>(poses.size());
    cams = fit_poses(std::move(poses), n, o.poses);
  } else {
    cams = orbit_poses(o.orbit, n);
  }
  auto gen = at::detail::createCPUGenerator(derive_seed(o.seed, "latents"));
  auto z_a = g->sample_appearance(1, gen);
  auto z_m = g->sample_motion(1, gen);
  const auto clip = synthesize_video(g, z_a, z_m, cams, n, mode);
  write_video(o.out, clip);
  write_maps(o.out, clip);
  run.out << "wrote " << clip.size() << " frames to " << o.out << '\n';
  run.finish("ok");
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateOptions {
  std::string checkpoint, data, extractor = "pool-projection", clip_extractor = "pool-projection-clip", out;
  std::vector<std::string> metrics{"id", "cd", "we", "fvd"};
  std::vector<double> yaws{0.0, 30.0};
  int n_videos = 16, n_fvd = 0;
  uint64_t seed = 0;
};

void cmd_evaluate(const EvaluateOptions& o, Run& run) {
  std::set<std::string> wanted;
  for (const auto& m : o.metrics) {
    if (m != "id" && m != "cd" && m != "we" && m != "fvd") throw ConfigError("unknown metric '" + m + "'");
    wanted.insert(m);
  }
  if (o.n_videos < 1) throw ConfigError("--n-videos must be at least 1");
  const fs::path root = data_root(o.data, false, run);
  run.begin(o.out, o.seed, run.options, fs::path(o.checkpoint));
  auto ckpt = load_checkpoint(o.checkpoint);
  auto& g = ckpt.models.generator;
  g->eval();

  EvalConfig cfg;
  cfg.n_videos = o.n_videos;
  cfg.yaws = o.yaws;
  cfg.seed = o.seed;
  std::unique_ptr<EmbeddingExtractor> id_ext;
  if (wanted.count("id")) id_ext = make_image_extractor(o.extractor);
  std::unique_ptr<ClipExtractor> clip_ext;
  std::optional<InMemoryDataset> real;
  if (wanted.count("fvd")) {
    if (root.empty()) {
      run.out << "fvd skipped: no data root\n";
    } else {
      clip_ext = make_clip_extractor(o.clip_extractor);
      real = InMemoryDataset::load(root);
      cfg.n_fvd = o.n_fvd > 0 ? o.n_fvd : o.n_videos;
    }
  }
  auto report = evaluate_model(g, cfg, id_ext.get(), clip_ext.get(), real ? &*real : nullptr);
  if (!wanted.count("cd")) report.cd.reset();
  if (!wanted.count("we")) report.we.reset();
  const json j = report.to_json();
  write_json_atomic(fs::path(o.out) / "metrics.json", j);
  run.out << j.dump() << '\n';
  run.finish("ok");
}

// ---- invert / animate ------------------------------------------------------

struct InvertOptions {
  std::string checkpoint, target, poses, optimizer = "lbfgs", animate_poses, out;
  int steps = 500, motion_steps = -1, init_samples = 1000, frames = 16;
  double lr = 1.0;
  uint64_t seed = 0, animate_seed = 0;
  CLI::Option* animate_opt;
};

InversionConfig inversion_config(const InvertOptions& o) {
  InversionConfig c;
  if (o.optimizer == "lbfgs") {
    c.optimizer = InversionOptimizer::Lbfgs;
  } else if (o.optimizer == "adam") {
    c.optimizer = InversionOptimizer::Adam;
  } else {
    throw ConfigError("unknown optimizer '" + o.optimizer + "' (expected lbfgs or adam)");
  }
  if (o.steps < 0 || o.init_samples < 1) throw ConfigError("steps must be >= 0 and init samples >= 1");
  c.steps = o.steps;
  c.motion_steps = o.motion_steps >= 0 ? o.motion_steps : o.steps;
  c.lr = o.lr;
  c.motion_lr = o.lr;
  c.init_samples = o.init_samples;
  c.seed = o.seed;
  return c;
}

torch::Tensor fresh_motion(Generator& g, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(derive_seed(seed, "motion"));
  return g->sample_motion(1, gen);
}

void cmd_invert(const InvertOptions& o, Run& run) {
  const auto cfg = inversion_config(o);
  if (!fs::exists(o.target)) throw DataError("target " + o.target + " not found");
  const bool is_clip = fs::is_directory(o.target);
  if (!is_clip && o.poses.empty()) throw ConfigError("an image target needs --poses");
  run.begin(o.out, o.seed, run.options, fs::path(o.checkpoint));
  auto ckpt = load_checkpoint(o.checkpoint);
  auto& g = ckpt.models.generator;
  const int res = g->config().final_resolution;
  const fs::path out = o.out;

  InversionResult result;
  std::vector<CameraPose> target_poses;
  if (is_clip) {
    auto clip = read_video(o.target);
    if (!o.poses.empty()) {
      clip.poses = fit_poses(read_pose_file(o.poses), static_cast<int>(clip.size()), o.poses);
    }
    clip.frames = fit_resolution(clip.frames, res);
    result = invert_video(g, clip, cfg);
    write_video(out / "reconstruction", reconstruct_video(g, result, clip.poses, clip.timesteps));
    target_poses = clip.poses;
  } else {
    const auto poses = read_pose_file(o.poses);
    if (poses.empty()) throw DataError(o.poses + " holds no poses");
    result = invert_image(g, fit_resolution(read_png(o.target), res), poses.front(), cfg);
    target_poses = {poses.front()};
  }
  save_inversion(out / "inversion", result);
  run.out << "inversion loss " << result.initial_loss << " -> " << result.final_loss << '\n';

  if (o.animate_opt->count() > 0) {
    std::vector<CameraPose> cams;
    int n = o.frames;
    if (!o.animate_poses.empty()) {
      cams = fit_poses(read_pose_file(o.animate_poses), n, o.animate_poses);
    } else if (is_clip) {
      n = static_cast<int>(target_poses.size());
      cams = target_poses;
    } else {
      cams = fit_poses(target_poses, n, "target pose");
    }
    const auto clip = animate(g, result.w_plus, fresh_motion(g, o.animate_seed), cams, n);
    write_video(out / "animation", clip);
    run.out << "wrote " << clip.size() << " animated frames\n";
  }
  run.finish("ok", {{"initial_loss", result.initial_loss}, {"final_loss", result.final_loss}});
}

struct AnimateOptions {
  std::string checkpoint, archive, poses, out;
  int frames = 16;
  uint64_t seed = 0;
  CLI::Option *seed_opt, *frames_opt;
};

void cmd_animate(const AnimateOptions& o, Run& run) {
  run.begin(o.out, o.seed, run.options, fs::path(o.checkpoint));
  auto ckpt = load_checkpoint(o.checkpoint);
  auto& g = ckpt.models.generator;
  const auto archive = load_inversion(o.archive);
  auto poses = read_pose_file(o.poses);
  VideoClip clip;
  if (o.seed_opt->count() > 0) {
    const int n = o.frames_opt->count() > 0 ? o.frames : static_cast<int>(poses.size());
    clip = animate(g, archive.w_plus, fresh_motion(g, o.seed), fit_poses(std::move(poses), n, o.poses), n);
  } else {
    // Replays the archived per-frame motion codes.
    const int n = static_cast<int>(archive.z_m_per_frame.size());
    if (n == 0) throw DataError("archive " + o.archive + " has no motion codes; pass --seed");
    std::vector<double> ts;
    for (int i = 0; i < n; ++i) ts.push_back(timestep_for_frame(i, g->config().max_frames));
    clip = reconstruct_video(g, archive, fit_poses(std::move(poses), n, o.poses), ts);
  }
  write_video(o.out, clip);
  run.out << "wrote " << clip.size() << " frames to " << o.out << '\n';
  run.finish("ok");
}

// ---- analyze ---------------------------------------------------------------

struct AnalyzeOptions {
  std::string checkpoint, data, out;
  std::vector<std::string> style_mix;
  int samples = 4, disc_align = 0, histogram_bins = 20;
  double tolerance = 1e-6;
  uint64_t seed = 0;
  CLI::Option *style_opt, *align_opt;
};

void cmd_analyze(const AnalyzeOptions& o, Run& run) {
  const bool do_mix = o.style_opt->count() > 0, do_align = o.align_opt->count() > 0;
  if (!do_mix && !do_align) throw ConfigError("pass --style-mix and/or --disc-align");
  if (do_align && o.disc_align < 1) throw ConfigError("--disc-align needs a positive pair count");
  const fs::path root = data_root(o.data, false, run);
  run.begin(o.out, o.seed, run.options, fs::path(o.checkpoint));
  auto ckpt = load_checkpoint(o.checkpoint);
  const fs::path out = o.out;
  json summary;
  if (do_mix) {
    std::vector<int> ks;
    for (const auto& r : o.style_mix) {
      if (r.empty()) continue;
      try {
        ks.push_back(std::stoi(r));
      } catch (const std::exception&) {
        throw ConfigError("bad --style-mix value '" + r + "'");
      }
    }
    if (ks.empty()) ks = {2, 4, 6};
    const auto grid = style_mix_grid(ckpt.models.generator, ks, o.samples, derive_seed(o.seed, "style-mix"));
    write_png(out / "style_mix.png", tile_style_mix(grid));
    summary["style_mix"] = {{"mix_layers", ks}, {"samples", o.samples},
                            {"columns", "primary, secondary, then one per mix layer count"}};
    run.out << "style-mix grid written for K = " << json(ks).dump() << '\n';
  }
  if (do_align) {
    std::optional<std::vector<ClipRecord>> records;
    if (!root.empty()) records = scan_dataset(root);
    DiscAlignmentConfig cfg;
    cfg.n_pairs = o.disc_align;
    cfg.seed = derive_seed(o.seed, "disc-align");
    cfg.change_tolerance = o.tolerance;
    const auto report = discriminator_alignment(ckpt.models, cfg, records ? &*records : nullptr);
    std::vector<double> sims, diffs;
    {
      std::ofstream csv(out / "disc_align_pairs.csv");
      csv << "pair,embedding_similarity,logit_original,logit_flipped,logit_difference\n";
      for (size_t k = 0; k < report.records.size(); ++k) {
        const auto& r = report.records[k];
        csv << k << ',' << r.embedding_similarity << ',' << r.logit_original << ',' << r.logit_flipped << ','
            << r.logit_difference() << '\n';
        sims.push_back(r.embedding_similarity);
        diffs.push_back(r.logit_difference());
      }
    }
    write_histogram_csv(out / "disc_align_similarity_hist.csv", sims, -1.0, 1.0, o.histogram_bins);
    const double max_diff = *std::max_element(diffs.begin(), diffs.end());
    write_histogram_csv(out / "disc_align_logit_hist.csv", diffs, 0.0, max_diff > 0 ? max_diff : 1.0,
                        o.histogram_bins);
    summary["disc_align"] = report.to_json();
    summary["disc_align"]["pose_source"] = records ? "dataset" : "orbit";
    write_json_atomic(out / "disc_align.json", summary["disc_align"]);
    run.out << "disc-align n_pairs=" << report.records.size() << " fraction_changed=" << report.fraction_changed
            << " mean_similarity=" << report.mean_similarity << '\n';
  }
  run.finish("ok", {{"summary", summary}});
}

// ---- preprocess ------------------------------------------------------------

struct PreprocessOptions {
  std::string data, embeddings, out;
  bool balance = false, verify = false;
  double linkage_threshold = 0.5, similarity_threshold = 0.5;
  int max_per_identity = 2, max_noisy = 2;
};

void cmd_preprocess(const PreprocessOptions& o, Run& run) {
  if (!o.balance && !o.verify) throw ConfigError("pass --balance and/or --verify");
  const fs::path root = data_root(o.data, true, run);
  if (fs::weakly_canonical(root) == fs::weakly_canonical(o.out))
    throw ConfigError("output directory must differ from the dataset root");
  run.begin(o.out, 0, run.options);
  const auto records = scan_dataset(root);
  const fs::path emb_dir = o.embeddings;
  auto emb_path = [&](const ClipRecord& r, const char* suffix) {
    const auto p = emb_dir / (r.clip_id + suffix);
    if (!fs::exists(p)) throw DataError("clip " + r.clip_id + ": missing embedding file " + p.string());
    return p;
  };
  std::set<std::string> kept;
  for (const auto& r : records) kept.insert(r.clip_id);
  const fs::path out = o.out;

  if (o.balance) {
    std::vector<ClipEmbedding> clips;
    for (const auto& r : records) {
      const Eigen::MatrixXd rows = read_embedding_file(emb_path(r, ".emb"));
      if (rows.rows() == 0) throw DataError("clip " + r.clip_id + ": empty embedding file");
      clips.push_back({r.clip_id, rows.colwise().mean().transpose(), r.resolution});
    }
    const auto selected = balance_identities(clips, o.linkage_threshold, o.max_per_identity);
    write_json_atomic(out / "balance.json", {{"linkage_threshold", o.linkage_threshold},
                                             {"max_per_identity", o.max_per_identity},
                                             {"n_input", clips.size()},
                                             {"selected", selected}});
    const std::set<std::string> sel(selected.begin(), selected.end());
    std::erase_if(kept, [&](const std::string& id) { return !sel.count(id); });
    run.out << "balance: kept " << selected.size() << " of " << clips.size() << " clips\n";
  }
  if (o.verify) {
    json report = json::object();
    int discarded = 0;
    for (const auto& r : records) {
      const auto v = verify_clip(read_embedding_file(emb_path(r, ".frames.emb")), o.similarity_threshold, o.max_noisy);
      report[r.clip_id] = {{"keep", v.keep}, {"noisy_frames", v.noisy_frames}, {"mean_similarity", v.mean_similarity}};
      if (!v.keep) {
        kept.erase(r.clip_id);
        ++discarded;
      }
    }
    write_json_atomic(out / "verify.json", {{"similarity_threshold", o.similarity_threshold},
                                            {"max_noisy", o.max_noisy},
                                            {"clips", report}});
    run.out << "verify: discarded " << discarded << " of " << records.size() << " clips\n";
  }
  json clips = json::array();
  for (const auto& r : records) {
    if (!kept.count(r.clip_id)) continue;
    clips.push_back({{"id", r.clip_id},
                     {"identity", r.identity ? json(*r.identity) : json()},
                     {"resolution", r.resolution}});
  }
  write_json_atomic(out / "manifest.json", {{"root", fs::absolute(root).string()}, {"clips", clips}});
  run.finish("ok", {{"kept", clips.size()}});
}

// ---- synth-data ------------------------------------------------------------

struct SynthOptions {
  std::string out;
  SyntheticDatasetConfig cfg;
};

void cmd_synth(const SynthOptions& o, Run& run) {
  run.begin(o.out, o.cfg.seed, run.options);
  const auto records = make_synthetic_dataset(o.out, o.cfg);
  run.out << "wrote " << records.size() << " synthetic clips to " << o.out << '\n';
  run.finish("ok");
}

std::pair<int, std::string> classify(const std::exception& e) {
  if (dynamic_cast<const OutputLockedError*>(&e)) return {kExitLocked, "locked"};
  if (dynamic_cast<const NumericalError*>(&e)) return {kExitNumerical, "numerical"};
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e))
    return {kExitConfig, "config"};
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const IndexError*>(&e))
    return {kExitData, "data"};
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return {kExitData, "data"};
  return {kExitFailure, "internal"};
}

void report_error(std::ostream& err, int code, const std::string& kind, const std::string& command,
                  const std::string& message) {
  err << json{{"error", kind}, {"exit_code", code}, {"command", command}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PV3D portrait video generator", "pv3d"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::function<void(Run&)> action;
  auto bind = [&](CLI::App* sub, auto& opts, auto fn) {
    sub->callback([&action, &opts, fn] { action = [&opts, fn](Run& run) { fn(opts, run); }; });
  };

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Train generator and discriminators");
  t->add_option("--config", train.config, "Config file (JSON or key = value lines)");
  t->add_option("--data", train.data, "Dataset root (default: PV3D_DATA_ROOT)");
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--preset", train.preset, "voxceleb, celebv-hq or talkinghead-1kh");
  t->add_option("--resume", train.resume, "Continue from a training checkpoint");
  train.iterations_opt = t->add_option("--iterations", train.iterations);
  train.batch_opt = t->add_option("--batch-size", train.batch_size);
  train.seed_opt = t->add_option("--seed", train.seed);
  train.ckpt_opt = t->add_option("--checkpoint-interval", train.checkpoint_interval);
  train.log_opt = t->add_option("--log-interval", train.log_interval);
  bind(t, train, cmd_train);

  GenerateOptions generate;
  auto* g = app.add_subcommand("generate", "Render a video from a checkpoint");
  g->add_option("--checkpoint", generate.checkpoint)->required();
  g->add_option("--poses", generate.poses, "Pose file, one camera per line");
  g->add_option("--orbit", generate.orbit, "Yaw angles in degrees swept across the frames")->delimiter(',');
  generate.frames_opt = g->add_option("--frames", generate.frames);
  g->add_option("--mode", generate.mode, "All, Non, Map or MapT (default: checkpoint setting)");
  g->add_option("--seed", generate.seed);
  g->add_option("--out", generate.out)->required();
  bind(g, generate, cmd_generate);

  EvaluateOptions evaluate;
  auto* e = app.add_subcommand("evaluate", "Compute ID, CD, WE and FVD");
  e->add_option("--checkpoint", evaluate.checkpoint)->required();
  e->add_option("--data", evaluate.data, "Real clips for FVD (default: PV3D_DATA_ROOT)");
  e->add_option("--metrics", evaluate.metrics)->delimiter(',');
  e->add_option("--extractor", evaluate.extractor, "Identity embedding extractor");
  e->add_option("--clip-extractor", evaluate.clip_extractor, "Clip feature extractor for FVD");
  e->add_option("--n-videos", evaluate.n_videos);
  e->add_option("--n-fvd", evaluate.n_fvd, "FVD sample count (default: n-videos)");
  e->add_option("--yaws", evaluate.yaws)->delimiter(',');
  e->add_option("--seed", evaluate.seed);
  e->add_option("--out", evaluate.out)->required();
  bind(e, evaluate, cmd_evaluate);

  InvertOptions invert;
  auto* i = app.add_subcommand("invert", "Invert an image or a clip directory");
  i->add_option("--checkpoint", invert.checkpoint)->required();
  i->add_option("--target", invert.target, "PNG image or clip directory")->required();
  i->add_option("--poses", invert.poses, "Target pose file");
  i->add_option("--steps", invert.steps);
  i->add_option("--motion-steps", invert.motion_steps, "Per-frame motion steps (default: --steps)");
  i->add_option("--optimizer", invert.optimizer, "lbfgs or adam");
  i->add_option("--lr", invert.lr);
  i->add_option("--init-samples", invert.init_samples);
  i->add_option("--seed", invert.seed);
  invert.animate_opt = i->add_option("--animate", invert.animate_seed, "Also drive the result with this motion seed");
  i->add_option("--animate-poses", invert.animate_poses);
  i->add_option("--frames", invert.frames, "Animated frame count");
  i->add_option("--out", invert.out)->required();
  bind(i, invert, cmd_invert);

  AnimateOptions anim;
  auto* a = app.add_subcommand("animate", "Drive an inversion archive along a pose file");
  a->add_option("--checkpoint", anim.checkpoint)->required();
  a->add_option("--archive", anim.archive)->required();
  a->add_option("--poses", anim.poses)->required();
  anim.seed_opt = a->add_option("--seed", anim.seed, "Fresh motion seed (default: replay archived motion)");
  anim.frames_opt = a->add_option("--frames", anim.frames);
  a->add_option("--out", anim.out)->required();
  bind(a, anim, cmd_animate);

  AnalyzeOptions analyze;
  auto* z = app.add_subcommand("analyze", "Style-mixing and discriminator-alignment analyses");
  z->add_option("--checkpoint", analyze.checkpoint)->required();
  analyze.style_opt = z->add_option("--style-mix", analyze.style_mix, "Mixed layer counts (default 2,4,6)")
                          ->delimiter(',')
                          ->expected(0, CLI::detail::expected_max_vector_size);
  z->add_option("--samples", analyze.samples);
  analyze.align_opt = z->add_option("--disc-align", analyze.disc_align, "Number of camera pairs");
  z->add_option("--data", analyze.data, "Dataset whose poses seed the pairs (default: PV3D_DATA_ROOT)");
  z->add_option("--tolerance", analyze.tolerance, "Logit change counted as a difference");
  z->add_option("--bins", analyze.histogram_bins);
  z->add_option("--seed", analyze.seed);
  z->add_option("--out", analyze.out)->required();
  bind(z, analyze, cmd_analyze);

  PreprocessOptions pre;
  auto* p = app.add_subcommand("preprocess", "Identity balancing and clip verification");
  p->add_option("--data", pre.data, "Dataset root (default: PV3D_DATA_ROOT)");
  p->add_option("--embeddings", pre.embeddings, "Directory of <clip>.emb / <clip>.frames.emb")->required();
  p->add_flag("--balance", pre.balance);
  p->add_flag("--verify", pre.verify);
  p->add_option("--linkage-threshold", pre.linkage_threshold);
  p->add_option("--max-per-identity", pre.max_per_identity);
  p->add_option("--similarity-threshold", pre.similarity_threshold);
  p->add_option("--max-noisy", pre.max_noisy);
  p->add_option("--out", pre.out)->required();
  bind(p, pre, cmd_preprocess);

  SynthOptions synth;
  auto* s = app.add_subcommand("synth-data", "Render the synthetic moving-ellipsoid dataset");
  s->add_option("--out", synth.out)->required();
  s->add_option("--clips", synth.cfg.n_clips);
  s->add_option("--frames", synth.cfg.frames);
  s->add_option("--resolution", synth.cfg.resolution);
  s->add_option("--render-steps", synth.cfg.render_steps);
  s->add_option("--yaw-range", synth.cfg.yaw_range_degrees);
  s->add_option("--seed", synth.cfg.seed);
  bind(s, synth, cmd_synth);

  std::string command = args.empty() ? "" : args.front();
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, kExitConfig, "usage", command, e.what());
    return kExitConfig;
  }

  Run run{out, command, args, json::object(), json::object(), std::nullopt, {}, {}};
  for (auto* sub : app.get_subcommands()) snapshot_options(*sub, run);
  try {
    action(run);
    return kExitOk;
  } catch (const std::exception& ex) {
    const auto [code, kind] = classify(ex);
    try {
      run.finish("failed", {{"error", {{"kind", kind}, {"message", ex.what()}}}});
    } catch (...) {
    }
    const auto* torch_error = dynamic_cast<const c10::Error*>(&ex);
    report_error(err, code, kind, command, torch_error ? torch_error->what_without_backtrace() : ex.what());
    return code;
  }
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace pv3d

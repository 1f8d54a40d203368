#include "pv3d/inference.hpp"

#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pv3d/datapipe.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/image_io.hpp"

namespace pv3d {

namespace fs = std::filesystem;

void VideoClip::validate() const {
  const int64_t n = size();
  if (static_cast<int64_t>(poses.size()) != n || (frames.defined() && frames.size(0) != n)) {
    throw ValidationError("video clip frame, pose and timestep counts differ");
  }
  for (int64_t i = 1; i < n && !freeview; ++i) {
    if (!(timesteps[i] > timesteps[i - 1])) {
      throw ValidationError("video clip timesteps must be strictly increasing");
    }
  }
}

RenderSettings inference_settings(const Generator& generator, uint64_t seed) {
  RenderSettings s = generator->default_settings();
  s.seed = seed;
  return s;
}

std::pair<CameraPose, CameraPose> inference_cameras(CameraMode mode,
                                                    std::span<const CameraPose> camera_seq,
                                                    size_t index) {
  const CameraPose& first = camera_seq.front();
  const CameraPose& own = camera_seq[index];
  switch (mode) {
    case CameraMode::All:
      return {first, first};
    case CameraMode::Non:
      return {own, own};
    case CameraMode::Map:
    case CameraMode::MapT:
      break;
  }
  return {first, own};
}

namespace {

void check_sequence(std::span<const CameraPose> camera_seq, int n_frames) {
  if (n_frames < 1) throw ParameterError("n_frames must be positive");
  if (static_cast<int>(camera_seq.size()) != n_frames) {
    throw ParameterError("camera sequence has " + std::to_string(camera_seq.size()) +
                         " poses for " + std::to_string(n_frames) + " frames");
  }
}

// Renders one frame per code row and collects them into a clip.
VideoClip collect(Generator& generator, const std::vector<torch::Tensor>& w_plus_per_frame,
                  const torch::Tensor& z_m, const std::vector<double>& ts,
                  const std::vector<CameraPose>& render_poses, const RenderSettings& settings) {
  std::vector<torch::Tensor> frames, raws, depths, opac, codes;
  for (size_t i = 0; i < ts.size(); ++i) {
    auto t = timesteps(1, ts[i], generator->dtype());
    auto out = generator->render_codes(w_plus_per_frame[i], z_m, t,
                                       std::span<const CameraPose>(&render_poses[i], 1), settings);
    frames.push_back(out.frame[0]);
    raws.push_back(out.raw.rgb[0]);
    depths.push_back(out.raw.depth[0]);
    opac.push_back(out.raw.opacity[0]);
    codes.push_back(out.w_plus[0]);
  }
  VideoClip clip;
  clip.frames = torch::stack(frames);
  clip.raw_frames = torch::stack(raws);
  clip.depths = torch::stack(depths);
  clip.opacities = torch::stack(opac);
  clip.appearance_codes = torch::stack(codes);
  clip.timesteps = ts;
  clip.poses = render_poses;
  for (double t : ts) clip.extrapolated = clip.extrapolated || t > 1.0;
  return clip;
}

std::vector<double> frame_times(const Generator& generator, int n_frames) {
  std::vector<double> ts;
  for (int i = 0; i < n_frames; ++i) ts.push_back(timestep_for_frame(i, generator->config().max_frames));
  return ts;
}

}  // namespace

VideoClip synthesize_video(Generator& generator, const torch::Tensor& z_a,
                           const torch::Tensor& z_m, std::span<const CameraPose> camera_seq,
                           int n_frames, CameraMode mode,
                           const std::optional<RenderSettings>& settings) {
  check_sequence(camera_seq, n_frames);
  if (z_a.size(0) != 1 || z_m.size(0) != 1) throw ParameterError("synthesize_video takes one latent pair");
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> codes;
  std::vector<CameraPose> render_poses;
  for (int i = 0; i < n_frames; ++i) {
    const auto [cond, render] = inference_cameras(mode, camera_seq, i);
    codes.push_back(generator->broadcast_w_plus(
        generator->map_appearance(z_a, pose_tensor(std::span<const CameraPose>(&cond, 1)))));
    render_poses.push_back(render);
  }
  auto clip = collect(generator, codes, z_m, frame_times(generator, n_frames), render_poses,
                      settings.value_or(inference_settings(generator)));
  clip.mode = mode;
  return clip;
}

VideoClip synthesize_from_codes(Generator& generator, const torch::Tensor& w_plus,
                                const torch::Tensor& z_m, std::span<const CameraPose> camera_seq,
                                int n_frames, const std::optional<RenderSettings>& settings) {
  check_sequence(camera_seq, n_frames);
  if (w_plus.dim() != 3 || w_plus.size(0) != 1) throw ParameterError("expected W+ codes [1, L, w_dim]");
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> codes(n_frames, w_plus);
  auto clip = collect(generator, codes, z_m, frame_times(generator, n_frames),
                      std::vector<CameraPose>(camera_seq.begin(), camera_seq.end()),
                      settings.value_or(inference_settings(generator)));
  clip.mode = CameraMode::MapT;
  return clip;
}

VideoClip freeview_render(Generator& generator, const torch::Tensor& z_a,
                          const torch::Tensor& z_m, double t, std::span<const double> yaws,
                          const std::optional<RenderSettings>& settings,
                          const CameraPose& reference) {
  if (yaws.empty()) throw ParameterError("freeview orbit is empty");
  torch::NoGradGuard no_grad;
  auto w_plus = generator->broadcast_w_plus(
      generator->map_appearance(z_a, pose_tensor(std::span<const CameraPose>(&reference, 1))));
  std::vector<CameraPose> poses;
  for (double y : yaws) poses.push_back(yaw_pose(y, reference));
  std::vector<torch::Tensor> codes(yaws.size(), w_plus);
  std::vector<double> ts(yaws.size(), t);
  auto clip = collect(generator, codes, z_m, ts, poses,
                      settings.value_or(inference_settings(generator)));
  clip.mode = CameraMode::MapT;
  clip.freeview = true;
  return clip;
}

std::vector<RenderOutput> freeview_field(const RadianceField& field, std::span<const double> yaws,
                                         int resolution, double near, double far,
                                         const RenderSettings& settings,
                                         const CameraPose& reference) {
  std::vector<RenderOutput> out;
  for (double y : yaws) {
    const CameraPose pose = yaw_pose(y, reference);
    auto rays = generate_rays(std::span<const CameraPose>(&pose, 1), resolution, near, far);
    out.push_back(render_field(field, rays, settings, torch::kFloat64));
  }
  return out;
}

void write_video(const fs::path& dir, const VideoClip& clip) {
  clip.validate();
  fs::create_directories(dir);
  for (int64_t i = 0; i < clip.size(); ++i) write_png(dir / frame_filename(static_cast<int>(i)), clip.frames[i]);
  write_pose_file(dir / "poses.txt", clip.poses);
  nlohmann::json meta = {{"fps", clip.fps},
                         {"timesteps", clip.timesteps},
                         {"mode", to_string(clip.mode)},
                         {"n_frames", clip.size()},
                         {"extrapolated", clip.extrapolated},
                         {"freeview", clip.freeview}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

VideoClip read_video(const fs::path& dir) {
  auto record = clip_record(dir);
  if (record.frame_count() == 0) throw DataError("no frames in " + dir.string());
  std::vector<int> all(record.frame_count());
  std::iota(all.begin(), all.end(), 0);
  auto loaded = load_clip(record, all);
  VideoClip clip;
  clip.frames = loaded.frames;
  clip.poses = loaded.poses;
  if (fs::exists(dir / "meta.json")) {
    std::ifstream in(dir / "meta.json");
    nlohmann::json meta;
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad meta.json in " + dir.string() + ": " + e.what());
    }
    clip.fps = meta.value("fps", 25.0);
    clip.timesteps = meta.value("timesteps", std::vector<double>{});
    if (meta.contains("mode")) clip.mode = camera_mode_from_string(meta["mode"].get<std::string>());
    clip.extrapolated = meta.value("extrapolated", false);
    clip.freeview = meta.value("freeview", false);
  }
  if (clip.timesteps.empty()) {
    for (int i = 0; i < record.frame_count(); ++i) clip.timesteps.push_back(timestep_for_frame(i));
  }
  clip.validate();
  return clip;
}

}  // namespace pv3d

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "pv3d/camera.hpp"
#include "pv3d/generator.hpp"
#include "pv3d/renderer.hpp"

namespace pv3d {

// Every inference frame uses this jitter seed so a frame depends only on
// its latents, timestep, pose and the parameters.
inline constexpr uint64_t kInferenceRenderSeed = 0x5eed;

struct VideoClip {
  torch::Tensor frames;            // [N,3,H,W] in [0,1]
  torch::Tensor raw_frames;        // [N,3,h,w]
  torch::Tensor depths;            // [N,h,w] ray distance
  torch::Tensor opacities;         // [N,h,w]
  torch::Tensor appearance_codes;  // [N, layer_count, w_dim]
  std::vector<double> timesteps;
  std::vector<CameraPose> poses;   // rendering cameras
  double fps = 25.0;
  CameraMode mode = CameraMode::MapT;
  bool extrapolated = false;       // some t > 1
  bool freeview = false;           // fixed t, varying camera

  int64_t size() const { return static_cast<int64_t>(timesteps.size()); }
  /// Equal lengths; timesteps strictly increasing unless `freeview`.
  void validate() const;
};

RenderSettings inference_settings(const Generator& generator,
                                  uint64_t seed = kInferenceRenderSeed);

/// Mapping and rendering camera of frame `index` at inference.
std::pair<CameraPose, CameraPose> inference_cameras(CameraMode mode,
                                                    std::span<const CameraPose> camera_seq,
                                                    size_t index);

/// Renders frames t_i = i / (max_frames - 1) for i < n_frames from a single
/// latent pair (z_a, z_m: [1, D]).
VideoClip synthesize_video(Generator& generator, const torch::Tensor& z_a,
                           const torch::Tensor& z_m, std::span<const CameraPose> camera_seq,
                           int n_frames, CameraMode mode,
                           const std::optional<RenderSettings>& settings = std::nullopt);

/// As synthesize_video but with a fixed W+ appearance code ([1, L, w_dim])
/// in place of the mapping network; rendering is per frame.
VideoClip synthesize_from_codes(Generator& generator, const torch::Tensor& w_plus,
                                const torch::Tensor& z_m, std::span<const CameraPose> camera_seq,
                                int n_frames,
                                const std::optional<RenderSettings>& settings = std::nullopt);

/// Scene frozen at timestep t, viewed from yaw_pose(y, reference) for every
/// y in `yaws`; the mapping network always sees `reference`.
VideoClip freeview_render(Generator& generator, const torch::Tensor& z_a,
                          const torch::Tensor& z_m, double t, std::span<const double> yaws,
                          const std::optional<RenderSettings>& settings = std::nullopt,
                          const CameraPose& reference = frontal_pose());

/// Orbit render of an arbitrary radiance field (no super-resolution).
std::vector<RenderOutput> freeview_field(const RadianceField& field, std::span<const double> yaws,
                                         int resolution, double near, double far,
                                         const RenderSettings& settings,
                                         const CameraPose& reference = frontal_pose());

/// frame_%05d.png + poses.txt + meta.json under `dir`.
void write_video(const std::filesystem::path& dir, const VideoClip& clip);
/// Reads frames, poses and (if present) meta.json written by write_video.
VideoClip read_video(const std::filesystem::path& dir);

}  // namespace pv3d

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "pv3d/errors.hpp"
#include "pv3d/generator.hpp"
#include "pv3d/inference.hpp"

namespace pv3d {

// Extra differentiable loss term (prediction, target) -> scalar, e.g. a
// perceptual distance computed in-process.
using ReconstructionTerm = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

enum class InversionOptimizer { Adam, Lbfgs };

struct InversionConfig {
  InversionOptimizer optimizer = InversionOptimizer::Lbfgs;
  int steps = 500;
  double lr = 1.0;
  int motion_steps = 500;
  double motion_lr = 1.0;
  int lbfgs_history = 20;
  int init_samples = 1000;
  uint64_t seed = 0;
  double divergence_factor = 10.0;
  int divergence_patience = 50;
  ReconstructionTerm extra_term;
  double extra_weight = 0.0;
};

// Loss stayed above divergence_factor x initial for divergence_patience steps.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : NumericalError(what), trace(std::move(trace)) {}
  std::vector<double> trace;
};

struct InversionResult {
  torch::Tensor w_plus;                     // [1, layer_count, w_dim]
  std::vector<torch::Tensor> z_m_per_frame;  // each [1, motion_dim]; empty for images
  std::vector<double> losses;               // appearance stage, one per step
  std::vector<std::vector<double>> motion_losses;  // per frame, one per step
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> frame_initial_losses;  // at the mean code and initial z_m
  std::vector<double> frame_final_losses;
};

/// Mean of mapped appearance codes over `samples` random z_a under `pose`,
/// broadcast to [1, layer_count, w_dim].
torch::Tensor mean_w_plus(Generator& generator, const CameraPose& pose, int samples, uint64_t seed);

/// Pixel MSE (+ optional extra term) of the t = 0 render of `w_plus`.
torch::Tensor reconstruction_loss(Generator& generator, const torch::Tensor& w_plus,
                                  const torch::Tensor& z_m, double t, const CameraPose& pose,
                                  const torch::Tensor& target, const InversionConfig& config);

/// Optimizes W+ codes at t = 0 against `target` [3,H,W]. Generator weights
/// stay frozen.
InversionResult invert_image(Generator& generator, const torch::Tensor& target,
                             const CameraPose& pose, const InversionConfig& config = {});

/// Stage 1 inverts frame 0; stage 2 fits an independent z_m per frame with
/// W+ frozen.
InversionResult invert_video(Generator& generator, const VideoClip& video,
                             const InversionConfig& config = {});

/// Drives inverted appearance codes with a motion code along a camera path.
VideoClip animate(Generator& generator, const torch::Tensor& w_plus, const torch::Tensor& z_m,
                  std::span<const CameraPose> camera_seq, int n_frames);

/// Re-renders an inverted video with its per-frame motion codes.
VideoClip reconstruct_video(Generator& generator, const InversionResult& result,
                            std::span<const CameraPose> poses, std::span<const double> timesteps);

/// Archive layout: w_plus.pt, z_m.pt (stacked, optional), losses.csv, meta.json.
void save_inversion(const std::filesystem::path& dir, const InversionResult& result);
InversionResult load_inversion(const std::filesystem::path& dir);

}  // namespace pv3d

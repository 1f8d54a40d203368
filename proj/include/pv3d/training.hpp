#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "pv3d/datapipe.hpp"
#include "pv3d/discriminators.hpp"
#include "pv3d/generator.hpp"

namespace pv3d {

struct TrainConfig {
  double lambda_reg = 0.6;
  double lambda_vid = 0.65;
  double lambda_img = 1.0;
  double lambda_r1 = 2.0;
  int batch_size = 4;
  int iterations = 2000;
  double lr_generator = 2.5e-3;
  double lr_discriminator = 2e-3;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  int frame_span = 16;
  double beta_alpha = 1.0;
  double beta_beta = 2.0;
  int render_steps = 48;
  int render_resolution = 32;
  int r1_interval = 16;
  // Density-regularization perturbation, as a fraction of the scene bounds.
  double density_perturbation = 0.004;
  int density_points = 1000;
  uint64_t seed = 0;
  int log_interval = 50;
  int checkpoint_interval = 0;  // 0 disables periodic checkpoints

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are a ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  /// JSON object, or `key = value` lines with `#` comments.
  static TrainConfig from_file(const std::filesystem::path& path);

  static TrainConfig voxceleb();
  static TrainConfig celebv_hq();
  static TrainConfig talking_head();
  static TrainConfig preset(const std::string& name);
};

/// Raw key/value object of a config file: JSON, or `key = value` lines
/// (values parsed as JSON scalars) with `#` comments.
nlohmann::json read_config_file(const std::filesystem::path& path);

struct TimestepPair {
  int index_i = 0;
  int index_j = 1;
  double t_i = 0.0;
  double t_j = 0.0;
  int gap = 1;
};

/// Picks a frame_span window uniformly inside the clip, then a frame pair
/// inside it whose gap is 1 + floor(u * (frame_span - 1)) with u ~ Beta(α, β).
/// Timesteps are window offsets divided by frame_span - 1.
TimestepPair sample_timestep_pair(int clip_length, int frame_span, double alpha, double beta,
                                  std::mt19937_64& rng);

struct AdversarialLosses {
  torch::Tensor discriminator;  // mean softplus(-real) + softplus(fake)
  torch::Tensor generator;      // mean softplus(-fake)
};

AdversarialLosses nonsaturating_losses(const torch::Tensor& real_logit,
                                       const torch::Tensor& fake_logit);

using LogitFunction = std::function<torch::Tensor(const std::vector<torch::Tensor>&)>;

/// 0.5 * batch mean of the squared gradient norm of the logits with respect
/// to `inputs` (which must require grad). The graph is kept for backprop.
torch::Tensor r1_penalty(const LogitFunction& logits, const std::vector<torch::Tensor>& inputs);

/// Mean |sigma(x) - sigma(x + delta)| over `n_points` uniform points in the
/// scene box, delta ~ N(0, perturbation^2) per axis.
torch::Tensor density_regularization(const TriPlane& triplane, Decoder& decoder,
                                     torch::Generator gen, int n_points, double perturbation);

struct LossReport {
  int iteration = 0;
  double img_g = 0, vid_g = 0, sigma = 0;
  double img_d = 0, vid_d = 0, r1 = 0;
  double real_logit_img = 0, fake_logit_img = 0;
  double real_logit_vid = 0, fake_logit_vid = 0;
  bool r1_applied = false;
  double wall_time_s = 0;

  bool finite() const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct RealBatch {
  torch::Tensor frames_i;  // [B,3,H,W]
  torch::Tensor frames_j;
  std::vector<CameraPose> poses_i;
  std::vector<CameraPose> poses_j;
  torch::Tensor t_i;  // [B]
  torch::Tensor t_j;
};

struct FakePair {
  FrameOutput frame_i;
  FrameOutput frame_j;
  std::vector<CameraPose> render_i;
  std::vector<CameraPose> render_j;
};

/// Mapping and rendering cameras for the two frames of a pair at train time.
struct PairCameras {
  std::vector<CameraPose> cond_i, cond_j, render_i, render_j;
};
PairCameras training_cameras(CameraMode mode, std::span<const CameraPose> poses_i,
                             std::span<const CameraPose> poses_j);

/// Both frames of a pair share (z_a, z_m) and differ in timestep and camera.
FakePair generate_fake_pair(Generator& generator, const torch::Tensor& z_a,
                            const torch::Tensor& z_m, const torch::Tensor& t_i,
                            const torch::Tensor& t_j, std::span<const CameraPose> poses_i,
                            std::span<const CameraPose> poses_j, const RenderSettings& settings);

/// Low-resolution view of a real frame matching the generator's raw render.
torch::Tensor real_raw_frames(const torch::Tensor& frames, int raw_resolution);

class Trainer {
 public:
  Trainer(Generator generator, ImageDiscriminator image_disc, VideoDiscriminator video_disc,
          TrainConfig config, const InMemoryDataset& dataset);

  /// One discriminator update followed by one generator update.
  LossReport step();
  /// Runs until `config.iterations`, logging to `log_csv` if given. Throws
  /// NumericalError as soon as a loss is non-finite.
  void run(const std::optional<std::filesystem::path>& log_csv = std::nullopt,
           const std::function<void(const LossReport&)>& on_step = {},
           const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

  RealBatch sample_real_batch();
  LossReport discriminator_step(LossReport report);
  LossReport generator_step(LossReport report);

  int iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  Generator& generator() { return generator_; }
  ImageDiscriminator& image_discriminator() { return image_disc_; }
  VideoDiscriminator& video_discriminator() { return video_disc_; }
  torch::optim::Adam& generator_optimizer() { return opt_g_; }
  torch::optim::Adam& discriminator_optimizer() { return opt_d_; }
  void set_iteration(int iteration) { iteration_ = iteration; }

 private:
  RenderSettings next_settings();

  Generator generator_;
  ImageDiscriminator image_disc_;
  VideoDiscriminator video_disc_;
  TrainConfig config_;
  const InMemoryDataset& dataset_;
  torch::optim::Adam opt_g_;
  torch::optim::Adam opt_d_;
  std::mt19937_64 rng_;
  torch::Generator torch_gen_;
  int iteration_ = 0;
  double last_r1_ = 0.0;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace pv3d

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "pv3d/camera.hpp"
#include "pv3d/layers.hpp"
#include "pv3d/renderer.hpp"

namespace pv3d {

// Which camera feeds the mapping network and which one renders.
//   All  - first camera for both mapping and rendering
//   Non  - every frame maps and renders with its own camera
//   Map  - mapping always uses the first camera, rendering is per frame
//   MapT - trains like Non; at inference behaves like Map
enum class CameraMode { All, Non, Map, MapT };

std::string to_string(CameraMode mode);
CameraMode camera_mode_from_string(const std::string& name);

struct GeneratorConfig {
  int appearance_dim = 64;
  int motion_dim = 64;
  int w_dim = 64;
  int mapping_layers = 2;
  int mapping_hidden = 64;
  int motion_layers = 4;  // K
  int motion_hidden = 64;
  double motion_slope = kLeakySlope;
  int layer_count = 7;
  int synthesis_channels = 32;
  int const_resolution = 4;
  int plane_channels = 16;
  int plane_resolution = 64;
  int base_resolution = 32;
  int final_resolution = 64;
  int decoder_hidden = 64;
  int decoder_features = 8;
  int sr_channels = 16;
  CameraMode camera_mode = CameraMode::MapT;
  int max_frames = 16;
  double bounds = 0.5;
  double near = 2.25;
  double far = 3.3;
  int render_steps = 48;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);

  // Motion-fusion presets for layer_count 7.
  static GeneratorConfig early();   // K = 2
  static GeneratorConfig middle();  // K = 4
  static GeneratorConfig late();    // K = 7
};

/// Frame index -> normalized timestep i / (max_frames - 1).
double timestep_for_frame(int index, int max_frames = 16);

// z_a ++ flattened pose -> w_a. Hidden layers use leaky ReLU, the output
// layer is linear.
class MappingNetworkImpl : public torch::nn::Module {
 public:
  MappingNetworkImpl(int64_t z_dim, int64_t w_dim, int64_t hidden, int64_t layers);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& pose);

  torch::nn::ModuleList layers;
  std::vector<EqualLinear> linears;
};
TORCH_MODULE(MappingNetwork);

// One motion layer: w_m = MLP_k(H_k(z_m * t)). H_k is a bias-free linear
// projection with leaky ReLU; MLP_k is linear -> leaky ReLU -> linear.
class MotionLayerImpl : public torch::nn::Module {
 public:
  MotionLayerImpl(int64_t z_dim, int64_t hidden, int64_t w_dim, double slope);
  torch::Tensor forward(const torch::Tensor& z_m, const torch::Tensor& t);

  EqualLinear head{nullptr};
  EqualLinear mlp_hidden{nullptr};
  EqualLinear mlp_out{nullptr};
  double slope;
};
TORCH_MODULE(MotionLayer);

// Synthesis layer k: f* = S0(f_prev, w_a); f* += ModConv(f*, w_m) for motion
// layers; return S1(f*, w_a).
class SynthesisLayerImpl : public torch::nn::Module {
 public:
  SynthesisLayerImpl(int64_t index, int64_t in_channels, int64_t out_channels, int64_t w_dim,
                     bool upsample, bool has_motion);
  torch::Tensor forward(const torch::Tensor& f_prev, const torch::Tensor& w_a,
                        const std::optional<torch::Tensor>& w_m = std::nullopt);

  StyledBlock s0{nullptr};
  StyledBlock s1{nullptr};
  ModulatedConv2d motion{nullptr};  // null when index >= K
  int64_t index;
};
TORCH_MODULE(SynthesisLayer);

// Residual super-resolution: bilinear upsample of the raw RGB plus a
// style-modulated correction computed from the raw feature image.
class SuperResolutionImpl : public torch::nn::Module {
 public:
  SuperResolutionImpl(int64_t feature_channels, int64_t channels, int64_t w_dim,
                      int64_t output_resolution);
  torch::Tensor forward(const torch::Tensor& raw_rgb, const torch::Tensor& raw_features,
                        const torch::Tensor& w);

  StyledBlock block{nullptr};
  ModulatedConv2d to_rgb{nullptr};
  int64_t output_resolution;
};
TORCH_MODULE(SuperResolution);

// Per-layer activations of one synthesis pass.
struct SynthesisTrace {
  std::vector<torch::Tensor> inputs;
  std::vector<torch::Tensor> outputs;
  std::vector<bool> received_motion;
};

struct FrameOutput {
  torch::Tensor frame;  // [B, 3, final, final]
  RenderOutput raw;
  torch::Tensor w_plus;  // [B, layer_count, w_dim]
  TriPlane triplane;
};

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorConfig config);

  const GeneratorConfig& config() const { return config_; }
  torch::ScalarType dtype() const { return const_input.scalar_type(); }
  torch::TensorOptions options() const { return torch::TensorOptions().dtype(dtype()); }

  /// [B, w_dim] appearance code from z_a [B, D_a] and cond poses [B, 25].
  torch::Tensor map_appearance(const torch::Tensor& z_a, const torch::Tensor& cond_pose);
  /// Replicates a [B, w_dim] code across every synthesis layer.
  torch::Tensor broadcast_w_plus(const torch::Tensor& w) const;

  torch::Tensor motion_code(const torch::Tensor& z_m, const torch::Tensor& t, int64_t k);
  std::vector<torch::Tensor> motion_codes(const torch::Tensor& z_m, const torch::Tensor& t);

  TriPlane synthesize(const torch::Tensor& w_plus, std::span<const torch::Tensor> motion,
                      SynthesisTrace* trace = nullptr);
  TriPlane generate_triplane(const torch::Tensor& z_a, const torch::Tensor& z_m,
                             const torch::Tensor& t, const torch::Tensor& cond_pose);

  torch::Tensor super_resolve(const torch::Tensor& raw_rgb, const torch::Tensor& raw_features,
                              const torch::Tensor& w);

  FrameOutput render_codes(const torch::Tensor& w_plus, const torch::Tensor& z_m,
                           const torch::Tensor& t, std::span<const CameraPose> render_poses,
                           const RenderSettings& settings);
  FrameOutput generate_frame(const torch::Tensor& z_a, const torch::Tensor& z_m,
                             const torch::Tensor& t, std::span<const CameraPose> render_poses,
                             std::span<const CameraPose> cond_poses,
                             const RenderSettings& settings);

  RenderSettings default_settings() const;

  torch::Tensor sample_appearance(int64_t batch, torch::Generator gen) const;
  torch::Tensor sample_motion(int64_t batch, torch::Generator gen) const;

  MappingNetwork mapping{nullptr};
  torch::nn::ModuleList motion_list;
  std::vector<MotionLayer> motion_layers;
  torch::Tensor const_input;
  torch::nn::ModuleList synthesis_list;
  std::vector<SynthesisLayer> synthesis_layers;
  ModulatedConv2d to_planes{nullptr};
  torch::Tensor plane_bias;
  Decoder decoder{nullptr};
  SuperResolution super_resolution{nullptr};

 private:
  GeneratorConfig config_;
};
TORCH_MODULE(Generator);

/// Layers below `mix_layers` take codes from `secondary`, the rest from `primary`.
torch::Tensor style_mix(const torch::Tensor& primary, const torch::Tensor& secondary,
                        int64_t mix_layers);

/// Convenience: a [B] timestep tensor filled with `t`.
torch::Tensor timesteps(int64_t batch, double t, torch::ScalarType dtype);

}  // namespace pv3d

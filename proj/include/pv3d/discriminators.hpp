#pragma once

#include <json.hpp>
#include <torch/torch.h>

#include "pv3d/layers.hpp"

namespace pv3d {

struct DiscriminatorConfig {
  int resolution = 64;
  int channels = 32;
  int hidden = 64;
  int cmap_dim = 64;

  nlohmann::json to_json() const;
  static DiscriminatorConfig from_json(const nlohmann::json& j);
};

// Conditional critic: conv trunk down to 4x4, then projection conditioning
// logit = head(h) + <proj(h), embed(c)> / sqrt(cmap_dim).
class ConditionalCriticImpl : public torch::nn::Module {
 public:
  ConditionalCriticImpl(int64_t in_channels, int64_t cond_dim, const DiscriminatorConfig& config);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond);
  torch::Tensor features(const torch::Tensor& x);
  // Embedding of the condition vector used by the projection term.
  torch::Tensor embed(const torch::Tensor& cond);

  EqualConv2d from_rgb{nullptr};
  torch::nn::ModuleList trunk_list;
  std::vector<EqualConv2d> trunk;
  EqualLinear fc{nullptr};
  EqualLinear head{nullptr};
  EqualLinear proj{nullptr};
  EqualLinear embed_in{nullptr};
  EqualLinear embed_out{nullptr};
  int64_t in_channels;
  int64_t cond_dim;
  int64_t resolution;
  int64_t cmap_dim;
};
TORCH_MODULE(ConditionalCritic);

// Dual-input image critic: high-resolution frame stacked with the
// bilinearly upsampled raw render (6 channels), conditioned on one pose.
class ImageDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit ImageDiscriminatorImpl(const DiscriminatorConfig& config);
  /// Logits [B]; frames are [B,3,H,W] in [0,1], poses [B,25].
  torch::Tensor forward(const torch::Tensor& frame_hi, const torch::Tensor& frame_raw,
                        const torch::Tensor& pose);
  /// The stacked 6-channel input the critic sees.
  torch::Tensor stack_inputs(const torch::Tensor& frame_hi, const torch::Tensor& frame_raw) const;

  ConditionalCritic critic{nullptr};
  DiscriminatorConfig config;
};
TORCH_MODULE(ImageDiscriminator);

// Dual-frame video critic: [I_i, I_j, Δt-plane] (7 channels), conditioned
// on the 50-dim concatenation [c_i, c_j].
class VideoDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit VideoDiscriminatorImpl(const DiscriminatorConfig& config);
  torch::Tensor forward(const torch::Tensor& frame_i, const torch::Tensor& frame_j,
                        const torch::Tensor& dt, const torch::Tensor& pose_i,
                        const torch::Tensor& pose_j);
  torch::Tensor stack_inputs(const torch::Tensor& frame_i, const torch::Tensor& frame_j,
                             const torch::Tensor& dt) const;
  static torch::Tensor condition(const torch::Tensor& pose_i, const torch::Tensor& pose_j);
  torch::Tensor pose_embedding(const torch::Tensor& pose_i, const torch::Tensor& pose_j);

  ConditionalCritic critic{nullptr};
  DiscriminatorConfig config;
};
TORCH_MODULE(VideoDiscriminator);

}  // namespace pv3d

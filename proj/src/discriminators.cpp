#include "pv3d/discriminators.hpp"

#include <cmath>

#include "pv3d/camera.hpp"
#include "pv3d/errors.hpp"

namespace pv3d {

namespace F = torch::nn::functional;

nlohmann::json DiscriminatorConfig::to_json() const {
  return {{"resolution", resolution},
          {"channels", channels},
          {"hidden", hidden},
          {"cmap_dim", cmap_dim}};
}

DiscriminatorConfig DiscriminatorConfig::from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.channels = j.value("channels", c.channels);
  c.hidden = j.value("hidden", c.hidden);
  c.cmap_dim = j.value("cmap_dim", c.cmap_dim);
  return c;
}

ConditionalCriticImpl::ConditionalCriticImpl(int64_t in_channels, int64_t cond_dim,
                                             const DiscriminatorConfig& config)
    : in_channels(in_channels),
      cond_dim(cond_dim),
      resolution(config.resolution),
      cmap_dim(config.cmap_dim) {
  if (config.resolution < 4) throw ParameterError("discriminator resolution must be >= 4");
  from_rgb = register_module("from_rgb", EqualConv2d(in_channels, config.channels, 1));
  trunk_list = register_module("trunk", torch::nn::ModuleList());
  for (int res = config.resolution; res > 4; res /= 2) {
    trunk.push_back(EqualConv2d(config.channels, config.channels, 3));
    trunk_list->push_back(trunk.back());
  }
  fc = register_module("fc", EqualLinear(config.channels * 16, config.hidden));
  head = register_module("head", EqualLinear(config.hidden, 1));
  proj = register_module("proj", EqualLinear(config.hidden, config.cmap_dim));
  embed_in = register_module("embed_in", EqualLinear(cond_dim, config.cmap_dim));
  embed_out = register_module("embed_out", EqualLinear(config.cmap_dim, config.cmap_dim));
}

torch::Tensor ConditionalCriticImpl::features(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels || x.size(2) != resolution ||
      x.size(3) != resolution) {
    throw ParameterError("critic expects [B, " + std::to_string(in_channels) + ", " +
                         std::to_string(resolution) + ", " + std::to_string(resolution) + "]");
  }
  auto h = scaled_leaky_relu(from_rgb->forward(x));
  for (auto& conv : trunk) {
    h = scaled_leaky_relu(conv->forward(h));
    h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
  }
  return scaled_leaky_relu(fc->forward(h.flatten(1)));
}

torch::Tensor ConditionalCriticImpl::embed(const torch::Tensor& cond) {
  if (cond.dim() != 2 || cond.size(1) != cond_dim) {
    throw ParameterError("critic condition must be [B, " + std::to_string(cond_dim) + "]");
  }
  return embed_out->forward(scaled_leaky_relu(embed_in->forward(cond)));
}

torch::Tensor ConditionalCriticImpl::forward(const torch::Tensor& x, const torch::Tensor& cond) {
  auto h = features(x);
  auto c = embed(cond.to(x.scalar_type()));
  auto projection = (proj->forward(h) * c).sum(1) / std::sqrt(static_cast<double>(cmap_dim));
  return head->forward(h).squeeze(1) + projection;
}

ImageDiscriminatorImpl::ImageDiscriminatorImpl(const DiscriminatorConfig& config)
    : config(config) {
  critic = register_module("critic", ConditionalCritic(6, kPoseDims, config));
}

torch::Tensor ImageDiscriminatorImpl::stack_inputs(const torch::Tensor& frame_hi,
                                                   const torch::Tensor& frame_raw) const {
  const bool integer_factor = frame_raw.dim() == 4 && frame_hi.dim() == 4 &&
                              frame_hi.size(2) % frame_raw.size(2) == 0 &&
                              frame_hi.size(3) % frame_raw.size(3) == 0 &&
                              frame_hi.size(2) / frame_raw.size(2) ==
                                  frame_hi.size(3) / frame_raw.size(3);
  if (!integer_factor) {
    throw ParameterError("raw frame is not an integer downscale of the high-resolution frame");
  }
  auto raw_up = resize_bilinear(frame_raw, frame_hi.size(2), frame_hi.size(3));
  if (raw_up.sizes() != frame_hi.sizes()) {
    throw ParameterError("raw and high-resolution frames disagree after upsampling");
  }
  return torch::cat({frame_hi, raw_up}, 1) * 2.0 - 1.0;
}

torch::Tensor ImageDiscriminatorImpl::forward(const torch::Tensor& frame_hi,
                                              const torch::Tensor& frame_raw,
                                              const torch::Tensor& pose) {
  return critic->forward(stack_inputs(frame_hi, frame_raw), pose);
}

VideoDiscriminatorImpl::VideoDiscriminatorImpl(const DiscriminatorConfig& config)
    : config(config) {
  critic = register_module("critic", ConditionalCritic(7, 2 * kPoseDims, config));
}

torch::Tensor VideoDiscriminatorImpl::stack_inputs(const torch::Tensor& frame_i,
                                                   const torch::Tensor& frame_j,
                                                   const torch::Tensor& dt) const {
  if (frame_i.sizes() != frame_j.sizes()) {
    throw ParameterError("video critic frames must share one resolution");
  }
  auto plane = dt.to(frame_i.scalar_type())
                   .view({-1, 1, 1, 1})
                   .expand({frame_i.size(0), 1, frame_i.size(2), frame_i.size(3)});
  return torch::cat({frame_i * 2.0 - 1.0, frame_j * 2.0 - 1.0, plane}, 1);
}

torch::Tensor VideoDiscriminatorImpl::condition(const torch::Tensor& pose_i,
                                                const torch::Tensor& pose_j) {
  return torch::cat({pose_i, pose_j}, 1);
}

torch::Tensor VideoDiscriminatorImpl::pose_embedding(const torch::Tensor& pose_i,
                                                     const torch::Tensor& pose_j) {
  auto dtype = critic->from_rgb->weight.scalar_type();
  return critic->embed(condition(pose_i, pose_j).to(dtype));
}

torch::Tensor VideoDiscriminatorImpl::forward(const torch::Tensor& frame_i,
                                              const torch::Tensor& frame_j,
                                              const torch::Tensor& dt,
                                              const torch::Tensor& pose_i,
                                              const torch::Tensor& pose_j) {
  return critic->forward(stack_inputs(frame_i, frame_j, dt), condition(pose_i, pose_j));
}

}  // namespace pv3d

#pragma once

#include <torch/torch.h>

namespace pv3d {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kDemodEpsilon = 1e-8;

// Fully connected layer with runtime weight scaling (equalized learning rate).
class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(int64_t in_features, int64_t out_features, bool bias = true,
                  double bias_init = 0.0);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;  // undefined when constructed without bias
  double scale;
};
TORCH_MODULE(EqualLinear);

// Leaky ReLU followed by a sqrt(2) gain, used after every hidden layer.
torch::Tensor scaled_leaky_relu(const torch::Tensor& x, double slope = kLeakySlope);

/// Convolution with per-sample kernels: `weight` [O, I, k, k] is scaled along
/// its input axis by `styles` [B, I] and, when `demodulate` is set, every
/// output kernel is renormalized to unit L2 norm (ε = 1e-8). No bias.
torch::Tensor modulated_conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                               const torch::Tensor& styles, bool demodulate,
                               int64_t padding);

// Style-modulated 3×3 (or k×k) convolution; the style is an affine
// projection of a W-space code. Optionally upsamples its input by 2 first.
class ModulatedConv2dImpl : public torch::nn::Module {
 public:
  ModulatedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                      int64_t w_dim, bool demodulate = true, bool upsample = false);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);
  torch::Tensor styles(const torch::Tensor& w);

  // Kernel after equalized-lr scaling, before modulation.
  torch::Tensor scaled_weight() const { return weight * scale; }

  EqualLinear affine{nullptr};
  torch::Tensor weight;
  double scale;
  int64_t padding;
  bool demodulate;
  bool upsample;
};
TORCH_MODULE(ModulatedConv2d);

// Modulated convolution + bias + activation (one StyleGAN synthesis block).
class StyledBlockImpl : public torch::nn::Module {
 public:
  StyledBlockImpl(int64_t in_channels, int64_t out_channels, int64_t w_dim, bool upsample);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

  ModulatedConv2d conv{nullptr};
  torch::Tensor bias;
};
TORCH_MODULE(StyledBlock);

// Plain conv with equalized learning rate (discriminator building block).
class EqualConv2dImpl : public torch::nn::Module {
 public:
  EqualConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;
  double scale;
  int64_t padding;
};
TORCH_MODULE(EqualConv2d);

// Bilinear resize of an NCHW tensor (align_corners = false).
torch::Tensor resize_bilinear(const torch::Tensor& x, int64_t height, int64_t width);

}  // namespace pv3d

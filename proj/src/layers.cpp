#include "pv3d/layers.hpp"

#include <cmath>

#include "pv3d/errors.hpp"

namespace pv3d {

namespace F = torch::nn::functional;

EqualLinearImpl::EqualLinearImpl(int64_t in_features, int64_t out_features, bool bias,
                                 double bias_init)
    : scale(1.0 / std::sqrt(static_cast<double>(in_features))) {
  weight = register_parameter("weight", torch::randn({out_features, in_features}));
  if (bias) {
    this->bias = register_parameter("bias", torch::full({out_features}, bias_init));
  }
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  return F::linear(x, weight * scale, bias.defined() ? bias : torch::Tensor());
}

torch::Tensor scaled_leaky_relu(const torch::Tensor& x, double slope) {
  return torch::leaky_relu(x, slope) * std::sqrt(2.0);
}

torch::Tensor modulated_conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                               const torch::Tensor& styles, bool demodulate,
                               int64_t padding) {
  if (x.dim() != 4 || weight.dim() != 4 || styles.dim() != 2) {
    throw ParameterError("modulated_conv2d expects x [B,I,H,W], weight [O,I,k,k], styles [B,I]");
  }
  const int64_t batch = x.size(0);
  const int64_t in_ch = x.size(1);
  if (weight.size(1) != in_ch || styles.size(1) != in_ch || styles.size(0) != batch) {
    throw ParameterError("modulated_conv2d: style/input channel mismatch");
  }
  const int64_t out_ch = weight.size(0);
  auto w = weight.unsqueeze(0) * styles.view({batch, 1, in_ch, 1, 1});
  if (demodulate) {
    auto d = torch::rsqrt(w.square().sum({2, 3, 4}) + kDemodEpsilon);
    w = w * d.view({batch, out_ch, 1, 1, 1});
  }
  auto y = F::conv2d(x.reshape({1, batch * in_ch, x.size(2), x.size(3)}),
                     w.reshape({batch * out_ch, in_ch, weight.size(2), weight.size(3)}),
                     F::Conv2dFuncOptions().padding(padding).groups(batch));
  return y.reshape({batch, out_ch, y.size(2), y.size(3)});
}

ModulatedConv2dImpl::ModulatedConv2dImpl(int64_t in_channels, int64_t out_channels,
                                         int64_t kernel, int64_t w_dim, bool demodulate,
                                         bool upsample)
    : scale(1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel))),
      padding(kernel / 2),
      demodulate(demodulate),
      upsample(upsample) {
  affine = register_module("affine", EqualLinear(w_dim, in_channels, true, 1.0));
  weight = register_parameter("weight", torch::randn({out_channels, in_channels, kernel, kernel}));
}

torch::Tensor ModulatedConv2dImpl::styles(const torch::Tensor& w) { return affine->forward(w); }

torch::Tensor ModulatedConv2dImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
  auto input = x;
  if (upsample) input = resize_bilinear(x, x.size(2) * 2, x.size(3) * 2);
  return modulated_conv2d(input, scaled_weight(), styles(w), demodulate, padding);
}

StyledBlockImpl::StyledBlockImpl(int64_t in_channels, int64_t out_channels, int64_t w_dim,
                                 bool upsample) {
  conv = register_module("conv", ModulatedConv2d(in_channels, out_channels, 3, w_dim, true,
                                                 upsample));
  bias = register_parameter("bias", torch::zeros({out_channels}));
}

torch::Tensor StyledBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
  return scaled_leaky_relu(conv->forward(x, w) + bias.view({1, -1, 1, 1}));
}

EqualConv2dImpl::EqualConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                                 bool bias)
    : scale(1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel))),
      padding(kernel / 2) {
  weight = register_parameter("weight", torch::randn({out_channels, in_channels, kernel, kernel}));
  if (bias) this->bias = register_parameter("bias", torch::zeros({out_channels}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
  return F::conv2d(x, weight * scale,
                   F::Conv2dFuncOptions().padding(padding).bias(bias.defined() ? bias
                                                                               : torch::Tensor()));
}

torch::Tensor resize_bilinear(const torch::Tensor& x, int64_t height, int64_t width) {
  if (x.size(2) == height && x.size(3) == width) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{height, width})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace pv3d

#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include <torch/torch.h>

#include "pv3d/camera.hpp"

namespace pv3d {

/// Three axis-aligned feature planes (XY, XZ, YZ), batched:
/// `planes` is [B, 3, C, R, R]. The planes span the cube [-bounds, bounds]³.
struct TriPlane {
  torch::Tensor planes;
  double bounds = 0.5;

  int64_t batch() const { return planes.size(0); }
  int64_t channels() const { return planes.size(2); }
  int64_t resolution() const { return planes.size(3); }
  void validate() const;
};

/// Bilinear lookup of `points` [B, M, 3] on each plane, summed: [B, M, C].
/// Points outside the cube read the plane border.
torch::Tensor sample_triplane(const TriPlane& triplane, const torch::Tensor& points);

/// Decoder/field output for a set of points. `density` has the point shape,
/// `color` and `features` append a channel axis. `features` holds the raw
/// (pre-sigmoid) feature vector whose first three channels produce `color`.
struct RadianceSamples {
  torch::Tensor density;
  torch::Tensor color;
  torch::Tensor features;
};

// Point-feature decoder: C -> hidden (softplus) -> 1 + F.
// density = softplus(raw), color = sigmoid(features[..., :3]).
class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(int64_t in_channels, int64_t hidden, int64_t feature_channels);
  RadianceSamples forward(const torch::Tensor& features);

  torch::nn::Linear hidden{nullptr};
  torch::nn::Linear out{nullptr};
  int64_t in_channels;
  int64_t feature_channels;
};
TORCH_MODULE(Decoder);

struct CompositeResult {
  torch::Tensor pixel;    // [..., Ch]
  torch::Tensor depth;    // [...]
  torch::Tensor opacity;  // [...]
  torch::Tensor transmittance;  // [..., S], transmittance before each sample
  torch::Tensor weights;        // [..., S]
};

inline constexpr double kDepthEpsilon = 1e-8;

/// Emission-absorption quadrature along the last axis.
/// densities [..., S], colors [..., S, Ch], deltas [..., S], distances [..., S].
CompositeResult composite(const torch::Tensor& densities, const torch::Tensor& colors,
                          const torch::Tensor& deltas, const torch::Tensor& distances);

/// Per-pass rendering output. rgb [B,3,H,W], features [B,F,H,W] (may be
/// undefined for fields without features), depth and opacity [B,H,W].
struct RenderOutput {
  torch::Tensor rgb;
  torch::Tensor features;
  torch::Tensor depth;
  torch::Tensor opacity;
};

using RadianceField = std::function<RadianceSamples(const torch::Tensor& points)>;

struct RenderSettings {
  int steps = 48;
  // Jittered (stratified) samples inside each bin; bin midpoints otherwise.
  bool stratified = true;
  // Seed for the jitter; the global torch generator is used when unset.
  std::optional<uint64_t> seed;
};

/// Sample distances [B, N, S] and per-sample interval lengths for a bundle.
std::pair<torch::Tensor, torch::Tensor> sample_distances(const RayBundle& rays,
                                                         const RenderSettings& settings,
                                                         torch::ScalarType dtype);

/// Renders any radiance field along a batched ray bundle ([B, N, 3]).
RenderOutput render_field(const RadianceField& field, const RayBundle& rays,
                          const RenderSettings& settings, torch::ScalarType dtype);

RenderOutput render(const TriPlane& triplane, Decoder& decoder, const RayBundle& rays,
                    const RenderSettings& settings);

RadianceField triplane_field(const TriPlane& triplane, Decoder& decoder);

}  // namespace pv3d

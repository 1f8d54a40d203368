#include "pv3d/renderer.hpp"

#include "pv3d/errors.hpp"

namespace pv3d {

namespace F = torch::nn::functional;

void TriPlane::validate() const {
  if (!planes.defined() || planes.dim() != 5 || planes.size(1) != 3 ||
      planes.size(3) != planes.size(4)) {
    throw ParameterError("tri-plane tensor must be [B, 3, C, R, R]");
  }
  if (!(bounds > 0.0)) throw ParameterError("tri-plane bounds must be positive");
  if (!torch::isfinite(planes).all().item<bool>()) {
    throw ValidationError("tri-plane contains non-finite entries");
  }
}

torch::Tensor sample_triplane(const TriPlane& triplane, const torch::Tensor& points) {
  const auto& planes = triplane.planes;
  if (points.dim() != 3 || points.size(2) != 3 || points.size(0) != planes.size(0)) {
    throw ParameterError("sample_triplane expects points [B, M, 3] matching the plane batch");
  }
  const int64_t b = planes.size(0);
  const int64_t c = planes.size(2);
  const int64_t r = planes.size(3);
  const int64_t m = points.size(1);

  auto coords = (points / triplane.bounds).to(planes.scalar_type());
  auto x = coords.select(2, 0), y = coords.select(2, 1), z = coords.select(2, 2);
  // grid_sample reads (first, second) as (width, height).
  std::array<torch::Tensor, 3> grids = {torch::stack({x, y}, -1), torch::stack({x, z}, -1),
                                        torch::stack({y, z}, -1)};
  auto grid = torch::stack({grids[0], grids[1], grids[2]}, 1).reshape({b * 3, 1, m, 2});
  auto sampled = F::grid_sample(planes.reshape({b * 3, c, r, r}), grid,
                                F::GridSampleFuncOptions()
                                    .mode(torch::kBilinear)
                                    .padding_mode(torch::kBorder)
                                    .align_corners(true));
  // [B*3, C, 1, M] -> [B, 3, C, M] -> sum planes -> [B, M, C]
  return sampled.reshape({b, 3, c, m}).sum(1).transpose(1, 2);
}

DecoderImpl::DecoderImpl(int64_t in_channels, int64_t hidden_width, int64_t feature_channels)
    : in_channels(in_channels), feature_channels(feature_channels) {
  if (feature_channels < 3) throw ParameterError("decoder needs at least 3 feature channels");
  hidden = register_module("hidden", torch::nn::Linear(in_channels, hidden_width));
  out = register_module("out", torch::nn::Linear(hidden_width, 1 + feature_channels));
}

RadianceSamples DecoderImpl::forward(const torch::Tensor& features) {
  if (features.size(-1) != in_channels) {
    throw ParameterError("decoder expects " + std::to_string(in_channels) +
                         " input channels, got " + std::to_string(features.size(-1)));
  }
  auto h = F::softplus(hidden->forward(features));
  auto raw = out->forward(h);
  auto density = F::softplus(raw.select(-1, 0));
  auto feats = raw.narrow(-1, 1, feature_channels);
  auto color = torch::sigmoid(feats.narrow(-1, 0, 3));
  return {density, color, feats};
}

CompositeResult composite(const torch::Tensor& densities, const torch::Tensor& colors,
                          const torch::Tensor& deltas, const torch::Tensor& distances) {
  auto optical = densities * deltas;
  auto alpha = 1.0 - torch::exp(-optical);
  // exclusive cumulative optical depth
  auto before = torch::cumsum(optical, -1) - optical;
  auto transmittance = torch::exp(-before);
  auto weights = transmittance * alpha;
  auto pixel = (weights.unsqueeze(-1) * colors).sum(-2);
  auto opacity = weights.sum(-1);
  auto depth = (weights * distances).sum(-1) / torch::clamp_min(opacity, kDepthEpsilon);
  return {pixel, depth, opacity, transmittance, weights};
}

std::pair<torch::Tensor, torch::Tensor> sample_distances(const RayBundle& rays,
                                                         const RenderSettings& settings,
                                                         torch::ScalarType dtype) {
  if (settings.steps < 1) throw ParameterError("render steps must be >= 1");
  if (!(rays.near < rays.far)) throw ParameterError("near bound must be smaller than far bound");
  const auto opts = torch::TensorOptions().dtype(dtype);
  const int64_t b = rays.origins.size(0);
  const int64_t n = rays.origins.size(1);
  const int64_t s = settings.steps;
  const double bin = (rays.far - rays.near) / static_cast<double>(s);

  torch::Tensor offsets;
  if (settings.stratified) {
    if (settings.seed) {
      auto gen = at::detail::createCPUGenerator(*settings.seed);
      offsets = torch::rand({b, n, s}, gen, opts);
    } else {
      offsets = torch::rand({b, n, s}, opts);
    }
  } else {
    offsets = torch::full({b, n, s}, 0.5, opts);
  }
  auto starts = torch::arange(s, opts).mul(bin).add(rays.near);
  auto distances = starts.view({1, 1, s}) + offsets * bin;
  auto deltas = torch::full({b, n, s}, bin, opts);
  return {distances, deltas};
}

RenderOutput render_field(const RadianceField& field, const RayBundle& rays,
                          const RenderSettings& settings, torch::ScalarType dtype) {
  if (rays.origins.dim() != 3) throw ParameterError("render expects a batched ray bundle");
  const int64_t b = rays.origins.size(0);
  const int64_t n = rays.origins.size(1);
  const int64_t s = settings.steps;
  const int64_t res = rays.resolution;
  if (res * res != n) throw ParameterError("ray count does not match resolution");

  auto [distances, deltas] = sample_distances(rays, settings, dtype);
  auto origins = rays.origins.to(dtype);
  auto dirs = rays.directions.to(dtype);
  auto points = origins.unsqueeze(2) + dirs.unsqueeze(2) * distances.unsqueeze(-1);  // [B,N,S,3]

  auto samples = field(points.reshape({b, n * s, 3}));
  auto density = samples.density.reshape({b, n, s});
  auto color = samples.color.reshape({b, n, s, -1});
  auto result = composite(density, color, deltas, distances);

  RenderOutput out;
  out.rgb = result.pixel.reshape({b, res, res, -1}).permute({0, 3, 1, 2});
  if (samples.features.defined()) {
    auto feats = samples.features.reshape({b, n, s, -1});
    auto fpix = (result.weights.unsqueeze(-1) * feats).sum(-2);
    out.features = fpix.reshape({b, res, res, -1}).permute({0, 3, 1, 2});
  }
  out.depth = result.depth.reshape({b, res, res});
  out.opacity = result.opacity.reshape({b, res, res});
  return out;
}

RadianceField triplane_field(const TriPlane& triplane, Decoder& decoder) {
  return [triplane, decoder](const torch::Tensor& points) mutable {
    return decoder->forward(sample_triplane(triplane, points));
  };
}

RenderOutput render(const TriPlane& triplane, Decoder& decoder, const RayBundle& rays,
                    const RenderSettings& settings) {
  return render_field(triplane_field(triplane, decoder), rays, settings,
                      triplane.planes.scalar_type());
}

}  // namespace pv3d

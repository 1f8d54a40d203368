#include "pv3d/generator.hpp"

#include <cmath>

#include "pv3d/errors.hpp"

namespace pv3d {

std::string to_string(CameraMode mode) {
  switch (mode) {
    case CameraMode::All: return "All";
    case CameraMode::Non: return "Non";
    case CameraMode::Map: return "Map";
    case CameraMode::MapT: return "MapT";
  }
  return "MapT";
}

CameraMode camera_mode_from_string(const std::string& name) {
  if (name == "All") return CameraMode::All;
  if (name == "Non") return CameraMode::Non;
  if (name == "Map") return CameraMode::Map;
  if (name == "MapT") return CameraMode::MapT;
  throw ParameterError("unknown camera mode '" + name + "' (expected All, Non, Map or MapT)");
}

void GeneratorConfig::validate() const {
  if (motion_layers < 0 || motion_layers > layer_count) {
    throw ParameterError("motion layer count K must lie in [0, layer_count]");
  }
  if (layer_count < 1) throw ParameterError("layer_count must be >= 1");
  if (base_resolution > final_resolution) {
    throw ParameterError("base_resolution must not exceed final_resolution");
  }
  if (base_resolution < 1 || plane_resolution < const_resolution) {
    throw ParameterError("invalid resolutions in generator config");
  }
  if (decoder_features < 3) throw ParameterError("decoder_features must be >= 3");
  if (max_frames < 2) throw ParameterError("max_frames must be >= 2");
  if (!(near < far)) throw ParameterError("near must be smaller than far");
  if (appearance_dim < 1 || motion_dim < 1 || w_dim < 1 || mapping_layers < 1) {
    throw ParameterError("latent dimensions must be positive");
  }
  // every doubling must land on the plane resolution
  int res = const_resolution;
  int ups = 0;
  while (res < plane_resolution) {
    res *= 2;
    ++ups;
  }
  if (res != plane_resolution) {
    throw ParameterError("plane_resolution must be const_resolution times a power of two");
  }
  if (ups > layer_count) throw ParameterError("not enough synthesis layers to reach plane size");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"appearance_dim", appearance_dim},
          {"motion_dim", motion_dim},
          {"w_dim", w_dim},
          {"mapping_layers", mapping_layers},
          {"mapping_hidden", mapping_hidden},
          {"motion_layers", motion_layers},
          {"motion_hidden", motion_hidden},
          {"motion_slope", motion_slope},
          {"layer_count", layer_count},
          {"synthesis_channels", synthesis_channels},
          {"const_resolution", const_resolution},
          {"plane_channels", plane_channels},
          {"plane_resolution", plane_resolution},
          {"base_resolution", base_resolution},
          {"final_resolution", final_resolution},
          {"decoder_hidden", decoder_hidden},
          {"decoder_features", decoder_features},
          {"sr_channels", sr_channels},
          {"camera_mode", to_string(camera_mode)},
          {"max_frames", max_frames},
          {"bounds", bounds},
          {"near", near},
          {"far", far},
          {"render_steps", render_steps}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("appearance_dim", c.appearance_dim);
  get("motion_dim", c.motion_dim);
  get("w_dim", c.w_dim);
  get("mapping_layers", c.mapping_layers);
  get("mapping_hidden", c.mapping_hidden);
  get("motion_layers", c.motion_layers);
  get("motion_hidden", c.motion_hidden);
  get("motion_slope", c.motion_slope);
  get("layer_count", c.layer_count);
  get("synthesis_channels", c.synthesis_channels);
  get("const_resolution", c.const_resolution);
  get("plane_channels", c.plane_channels);
  get("plane_resolution", c.plane_resolution);
  get("base_resolution", c.base_resolution);
  get("final_resolution", c.final_resolution);
  get("decoder_hidden", c.decoder_hidden);
  get("decoder_features", c.decoder_features);
  get("sr_channels", c.sr_channels);
  if (j.contains("camera_mode")) {
    c.camera_mode = camera_mode_from_string(j.at("camera_mode").get<std::string>());
  }
  get("max_frames", c.max_frames);
  get("bounds", c.bounds);
  get("near", c.near);
  get("far", c.far);
  get("render_steps", c.render_steps);
  c.validate();
  return c;
}

GeneratorConfig GeneratorConfig::early() {
  GeneratorConfig c;
  c.motion_layers = 2;
  return c;
}

GeneratorConfig GeneratorConfig::middle() { return GeneratorConfig{}; }

GeneratorConfig GeneratorConfig::late() {
  GeneratorConfig c;
  c.motion_layers = 7;
  return c;
}

double timestep_for_frame(int index, int max_frames) {
  return static_cast<double>(index) / static_cast<double>(max_frames - 1);
}

torch::Tensor timesteps(int64_t batch, double t, torch::ScalarType dtype) {
  return torch::full({batch}, t, torch::TensorOptions().dtype(dtype));
}

MappingNetworkImpl::MappingNetworkImpl(int64_t z_dim, int64_t w_dim, int64_t hidden,
                                       int64_t n_layers) {
  layers = register_module("layers", torch::nn::ModuleList());
  int64_t in = z_dim + kPoseDims;
  for (int64_t i = 0; i < n_layers; ++i) {
    const int64_t out = (i + 1 == n_layers) ? w_dim : hidden;
    linears.push_back(EqualLinear(in, out));
    layers->push_back(linears.back());
    in = out;
  }
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z, const torch::Tensor& pose) {
  auto x = torch::cat({z, pose.to(z.scalar_type())}, 1);
  for (size_t i = 0; i < linears.size(); ++i) {
    x = linears[i]->forward(x);
    if (i + 1 < linears.size()) x = scaled_leaky_relu(x);
  }
  return x;
}

MotionLayerImpl::MotionLayerImpl(int64_t z_dim, int64_t hidden, int64_t w_dim, double slope)
    : slope(slope) {
  head = register_module("head", EqualLinear(z_dim, hidden, /*bias=*/false));
  mlp_hidden = register_module("mlp_hidden", EqualLinear(hidden, hidden));
  mlp_out = register_module("mlp_out", EqualLinear(hidden, w_dim));
}

torch::Tensor MotionLayerImpl::forward(const torch::Tensor& z_m, const torch::Tensor& t) {
  auto x = z_m * t.to(z_m.scalar_type()).view({-1, 1});
  x = torch::leaky_relu(head->forward(x), slope);
  x = torch::leaky_relu(mlp_hidden->forward(x), slope);
  return mlp_out->forward(x);
}

SynthesisLayerImpl::SynthesisLayerImpl(int64_t index, int64_t in_channels, int64_t out_channels,
                                       int64_t w_dim, bool upsample, bool has_motion)
    : index(index) {
  s0 = register_module("s0", StyledBlock(in_channels, out_channels, w_dim, upsample));
  if (has_motion) {
    motion = register_module("motion",
                             ModulatedConv2d(out_channels, out_channels, 3, w_dim, true, false));
  }
  s1 = register_module("s1", StyledBlock(out_channels, out_channels, w_dim, false));
}

torch::Tensor SynthesisLayerImpl::forward(const torch::Tensor& f_prev, const torch::Tensor& w_a,
                                          const std::optional<torch::Tensor>& w_m) {
  auto f = s0->forward(f_prev, w_a);
  if (w_m) {
    if (!motion) {
      throw ParameterError("synthesis layer " + std::to_string(index) +
                           " is not a motion layer but received a motion code");
    }
    f = f + motion->forward(f, *w_m);
  }
  return s1->forward(f, w_a);
}

SuperResolutionImpl::SuperResolutionImpl(int64_t feature_channels, int64_t channels,
                                         int64_t w_dim, int64_t output_resolution)
    : output_resolution(output_resolution) {
  block = register_module("block", StyledBlock(feature_channels, channels, w_dim, false));
  to_rgb = register_module("to_rgb", ModulatedConv2d(channels, 3, 1, w_dim, false, false));
  torch::NoGradGuard guard;
  to_rgb->weight.zero_();
}

torch::Tensor SuperResolutionImpl::forward(const torch::Tensor& raw_rgb,
                                           const torch::Tensor& raw_features,
                                           const torch::Tensor& w) {
  auto base = resize_bilinear(raw_rgb, output_resolution, output_resolution);
  auto feats = resize_bilinear(raw_features, output_resolution, output_resolution);
  return base + to_rgb->forward(block->forward(feats, w), w);
}

GeneratorImpl::GeneratorImpl(GeneratorConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  mapping = register_module("mapping", MappingNetwork(c.appearance_dim, c.w_dim,
                                                      c.mapping_hidden, c.mapping_layers));
  motion_list = register_module("motion", torch::nn::ModuleList());
  for (int k = 0; k < c.motion_layers; ++k) {
    motion_layers.push_back(MotionLayer(c.motion_dim, c.motion_hidden, c.w_dim, c.motion_slope));
    motion_list->push_back(motion_layers.back());
  }
  const_input = register_parameter(
      "const_input",
      torch::randn({1, c.synthesis_channels, c.const_resolution, c.const_resolution}));
  synthesis_list = register_module("synthesis", torch::nn::ModuleList());
  int res = c.const_resolution;
  for (int k = 0; k < c.layer_count; ++k) {
    const bool up = res < c.plane_resolution;
    if (up) res *= 2;
    synthesis_layers.push_back(SynthesisLayer(k, c.synthesis_channels, c.synthesis_channels,
                                              c.w_dim, up, k < c.motion_layers));
    synthesis_list->push_back(synthesis_layers.back());
  }
  to_planes = register_module(
      "to_planes",
      ModulatedConv2d(c.synthesis_channels, 3 * c.plane_channels, 1, c.w_dim, false, false));
  plane_bias = register_parameter("plane_bias", torch::zeros({3 * c.plane_channels}));
  decoder = register_module("decoder",
                            Decoder(c.plane_channels, c.decoder_hidden, c.decoder_features));
  super_resolution = register_module(
      "super_resolution",
      SuperResolution(c.decoder_features, c.sr_channels, c.w_dim, c.final_resolution));
}

torch::Tensor GeneratorImpl::map_appearance(const torch::Tensor& z_a,
                                            const torch::Tensor& cond_pose) {
  return mapping->forward(z_a.to(dtype()), cond_pose.to(dtype()));
}

torch::Tensor GeneratorImpl::broadcast_w_plus(const torch::Tensor& w) const {
  return w.unsqueeze(1).expand({w.size(0), config_.layer_count, w.size(1)});
}

torch::Tensor GeneratorImpl::motion_code(const torch::Tensor& z_m, const torch::Tensor& t,
                                         int64_t k) {
  if (k < 0 || k >= config_.motion_layers) {
    throw IndexError("motion layer index " + std::to_string(k) + " outside [0, " +
                     std::to_string(config_.motion_layers) + ")");
  }
  return motion_layers[k]->forward(z_m.to(dtype()), t.to(dtype()));
}

std::vector<torch::Tensor> GeneratorImpl::motion_codes(const torch::Tensor& z_m,
                                                       const torch::Tensor& t) {
  std::vector<torch::Tensor> codes;
  for (int k = 0; k < config_.motion_layers; ++k) codes.push_back(motion_code(z_m, t, k));
  return codes;
}

TriPlane GeneratorImpl::synthesize(const torch::Tensor& w_plus,
                                   std::span<const torch::Tensor> motion,
                                   SynthesisTrace* trace) {
  const auto& c = config_;
  if (w_plus.dim() != 3 || w_plus.size(1) != c.layer_count || w_plus.size(2) != c.w_dim) {
    throw ParameterError("w_plus must be [B, layer_count, w_dim]");
  }
  if (static_cast<int>(motion.size()) != c.motion_layers) {
    throw ParameterError("expected one motion code per motion layer");
  }
  const int64_t b = w_plus.size(0);
  auto x = const_input.expand({b, -1, -1, -1});
  for (int k = 0; k < c.layer_count; ++k) {
    std::optional<torch::Tensor> w_m;
    if (k < c.motion_layers) w_m = motion[k];
    if (trace) {
      trace->inputs.push_back(x);
      trace->received_motion.push_back(w_m.has_value());
    }
    x = synthesis_layers[k]->forward(x, w_plus.select(1, k), w_m);
    if (trace) trace->outputs.push_back(x);
  }
  auto planes = to_planes->forward(x, w_plus.select(1, c.layer_count - 1)) +
                plane_bias.view({1, -1, 1, 1});
  return TriPlane{planes.reshape({b, 3, c.plane_channels, c.plane_resolution,
                                  c.plane_resolution}),
                  c.bounds};
}

TriPlane GeneratorImpl::generate_triplane(const torch::Tensor& z_a, const torch::Tensor& z_m,
                                          const torch::Tensor& t,
                                          const torch::Tensor& cond_pose) {
  auto w_plus = broadcast_w_plus(map_appearance(z_a, cond_pose));
  auto codes = motion_codes(z_m, t);
  return synthesize(w_plus, codes);
}

torch::Tensor GeneratorImpl::super_resolve(const torch::Tensor& raw_rgb,
                                           const torch::Tensor& raw_features,
                                           const torch::Tensor& w) {
  return super_resolution->forward(raw_rgb, raw_features, w);
}

RenderSettings GeneratorImpl::default_settings() const {
  RenderSettings s;
  s.steps = config_.render_steps;
  return s;
}

FrameOutput GeneratorImpl::render_codes(const torch::Tensor& w_plus, const torch::Tensor& z_m,
                                        const torch::Tensor& t,
                                        std::span<const CameraPose> render_poses,
                                        const RenderSettings& settings) {
  if (static_cast<int64_t>(render_poses.size()) != w_plus.size(0)) {
    throw ParameterError("need one render pose per batch entry");
  }
  auto codes = motion_codes(z_m, t);
  auto triplane = synthesize(w_plus, codes);
  auto rays = generate_rays(render_poses, config_.base_resolution, config_.near, config_.far);
  auto raw = render(triplane, decoder, rays, settings);
  auto frame = super_resolve(raw.rgb, raw.features, w_plus.select(1, config_.layer_count - 1));
  return FrameOutput{frame, raw, w_plus, triplane};
}

FrameOutput GeneratorImpl::generate_frame(const torch::Tensor& z_a, const torch::Tensor& z_m,
                                          const torch::Tensor& t,
                                          std::span<const CameraPose> render_poses,
                                          std::span<const CameraPose> cond_poses,
                                          const RenderSettings& settings) {
  auto w_plus = broadcast_w_plus(map_appearance(z_a, pose_tensor(cond_poses)));
  return render_codes(w_plus, z_m, t, render_poses, settings);
}

torch::Tensor GeneratorImpl::sample_appearance(int64_t batch, torch::Generator gen) const {
  return torch::randn({batch, config_.appearance_dim}, gen, options());
}

torch::Tensor GeneratorImpl::sample_motion(int64_t batch, torch::Generator gen) const {
  return torch::randn({batch, config_.motion_dim}, gen, options());
}

torch::Tensor style_mix(const torch::Tensor& primary, const torch::Tensor& secondary,
                        int64_t mix_layers) {
  const int64_t layers = primary.size(1);
  if (mix_layers < 0 || mix_layers > layers) {
    throw ParameterError("style-mix layer count must lie in [0, layer_count]");
  }
  if (primary.sizes() != secondary.sizes()) throw ParameterError("style-mix shape mismatch");
  if (mix_layers == 0) return primary;
  if (mix_layers == layers) return secondary;
  return torch::cat({secondary.narrow(1, 0, mix_layers),
                     primary.narrow(1, mix_layers, layers - mix_layers)},
                    1);
}

}  // namespace pv3d

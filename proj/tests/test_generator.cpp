#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/generator.hpp"
#include "scenes.hpp"
#include "small_config.hpp"

using namespace pv3d;
using namespace pv3d::testing;

namespace F = torch::nn::functional;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

Generator make_generator(GeneratorConfig cfg = small_generator_config(), uint64_t seed = 1) {
  torch::manual_seed(seed);
  Generator g(cfg);
  g->to(torch::kFloat64);
  return g;
}

RenderSettings fixed_settings(int steps = 12) { return RenderSettings{steps, true, 17}; }

double max_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().max().item<double>();
}

}  // namespace

TEST(MapAppearance, PoseSensitiveAndDeterministic) {
  auto g = make_generator();
  auto z = torch::randn({1, 8}, kF64);
  auto c0 = pose_tensor(frontal_pose());
  auto c1 = pose_tensor(yaw_pose(20.0, frontal_pose()));
  auto w0 = g->map_appearance(z, c0);
  EXPECT_GT(max_diff(w0, g->map_appearance(z, c1)), 1e-6);
  EXPECT_TRUE(torch::equal(w0, g->map_appearance(z, c0)));
}

TEST(MapAppearance, DegenerateNetworkReturnsBias) {
  auto g = make_generator();
  auto bias = torch::randn({8}, kF64);
  {
    torch::NoGradGuard guard;
    for (auto& p : g->mapping->parameters()) p.zero_();
    g->mapping->linears.back()->bias.copy_(bias);
  }
  auto w = g->map_appearance(torch::randn({3, 8}, kF64), pose_tensor(frontal_pose()).expand({3, 25}));
  EXPECT_LT(max_diff(w, bias.expand({3, 8})), 1e-15);
}

TEST(MotionLayer, ZeroTimeCollapses) {
  auto g = make_generator();
  auto t0 = timesteps(1, 0.0, torch::kFloat64);
  auto a = g->motion_code(torch::randn({1, 8}, kF64), t0, 1);
  auto b = g->motion_code(torch::randn({1, 8}, kF64), t0, 1);
  EXPECT_TRUE(torch::equal(a, b));
  auto z = torch::randn({1, 8}, kF64);
  EXPECT_GT(max_diff(g->motion_code(z, timesteps(1, 1.0, torch::kFloat64), 0),
                     g->motion_code(z, timesteps(1, 0.5, torch::kFloat64), 0)),
            1e-6);
  EXPECT_THROW(g->motion_code(z, t0, 4), IndexError);
  EXPECT_THROW(g->motion_code(z, t0, -1), IndexError);
}

TEST(MotionLayer, LinearConfigurationMatchesMatrixProducts) {
  auto cfg = small_generator_config();
  cfg.motion_slope = 1.0;  // leaky ReLU becomes the identity
  auto g = make_generator(cfg);
  auto& layer = g->motion_layers[2];
  auto z = torch::randn({2, 8}, kF64);
  const double t = 0.4;
  auto w1 = layer->head->weight * layer->head->scale;
  auto w2 = layer->mlp_hidden->weight * layer->mlp_hidden->scale;
  auto w3 = layer->mlp_out->weight * layer->mlp_out->scale;
  auto first = torch::matmul(z * t, w1.t());
  auto expected = torch::matmul(torch::matmul(first, w2.t()) + layer->mlp_hidden->bias, w3.t()) +
                  layer->mlp_out->bias;
  auto out = g->motion_code(z, timesteps(2, t, torch::kFloat64), 2);
  EXPECT_LT(max_diff(out, expected), 1e-12);
  // the first stage scales with t
  auto first_at_one = torch::matmul(z, w1.t());
  EXPECT_LT(max_diff(layer->head->forward(z * t), first_at_one * t), 1e-12);
}

TEST(ModulatedConv, UnitStyleIsDemodulatedConvolution) {
  torch::manual_seed(2);
  ModulatedConv2d conv(4, 6, 3, 8, true, false);
  conv->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    conv->affine->weight.zero_();
    conv->affine->bias.fill_(1.0);
  }
  auto x = torch::randn({2, 4, 7, 7}, kF64);
  auto w = conv->scaled_weight();
  auto demod = w / torch::sqrt(w.square().sum({1, 2, 3}, true) + 1e-8);
  auto expected = F::conv2d(x, demod, F::Conv2dFuncOptions().padding(1));
  EXPECT_LT(max_diff(conv->forward(x, torch::randn({2, 8}, kF64)), expected), 1e-12);
}

TEST(ModulatedConv, MatchesExplicitScaleConvolveNormalize) {
  torch::manual_seed(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t b = 1 + trial % 3, in = 2 + trial % 5, out = 1 + trial % 4;
    auto x = torch::randn({b, in, 6, 5}, kF64);
    auto weight = torch::randn({out, in, 3, 3}, kF64);
    auto styles = torch::randn({b, in}, kF64);
    auto fused = modulated_conv2d(x, weight, styles, true, 1);
    for (int64_t i = 0; i < b; ++i) {
      // scale input channels -> plain convolution -> per-output normalization
      auto scaled = x[i].unsqueeze(0) * styles[i].view({1, in, 1, 1});
      auto y = F::conv2d(scaled, weight, F::Conv2dFuncOptions().padding(1));
      auto norm = torch::rsqrt(
          (weight * styles[i].view({1, in, 1, 1})).square().sum({1, 2, 3}) + 1e-8);
      auto expected = y * norm.view({1, out, 1, 1});
      worst = std::max(worst, max_diff(fused[i].unsqueeze(0), expected));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(ModulatedConv, ZeroInputGivesZeroAndShapesChecked) {
  ModulatedConv2d conv(3, 5, 3, 8);
  conv->to(torch::kFloat64);
  auto y = conv->forward(torch::zeros({2, 3, 4, 4}, kF64), torch::randn({2, 8}, kF64));
  EXPECT_EQ(y.abs().max().item<double>(), 0.0);
  EXPECT_THROW(modulated_conv2d(torch::zeros({1, 3, 4, 4}), torch::zeros({2, 4, 3, 3}),
                                torch::zeros({1, 3}), true, 1),
               ParameterError);
}

TEST(SynthesisLayer, MotionBypassAndComposition) {
  auto g = make_generator();
  auto& layer = g->synthesis_layers[1];
  auto f = torch::randn({2, 8, 8, 8}, kF64);
  auto wa = torch::randn({2, 8}, kF64);
  auto wm = torch::randn({2, 8}, kF64);

  auto bypass = layer->forward(f, wa);
  EXPECT_LT(max_diff(bypass, layer->s1->forward(layer->s0->forward(f, wa), wa)), 1e-15);

  auto fstar = layer->s0->forward(f, wa);
  auto composed = layer->s1->forward(fstar + layer->motion->forward(fstar, wm), wa);
  EXPECT_LT(max_diff(layer->forward(f, wa, wm), composed), 1e-6);

  {
    torch::NoGradGuard guard;
    layer->motion->weight.zero_();
  }
  EXPECT_LT(max_diff(layer->forward(f, wa, wm), bypass), 1e-15);
}

TEST(SynthesisLayer, MotionCodeRejectedAboveK) {
  auto g = make_generator();
  auto& layer = g->synthesis_layers[5];
  EXPECT_FALSE(layer->motion);
  auto f = torch::randn({1, 8, 16, 16}, kF64);
  EXPECT_THROW(layer->forward(f, torch::randn({1, 8}, kF64), torch::randn({1, 8}, kF64)),
               ParameterError);
}

TEST(GenerateTriplane, DeterminismAndInputSensitivity) {
  auto g = make_generator();
  auto za = torch::randn({1, 8}, kF64), zm = torch::randn({1, 8}, kF64);
  auto c = pose_tensor(frontal_pose());
  auto t = timesteps(1, 0.6, torch::kFloat64);
  auto a = g->generate_triplane(za, zm, t, c);
  EXPECT_TRUE(torch::equal(a.planes, g->generate_triplane(za, zm, t, c).planes));
  EXPECT_GT(max_diff(a.planes, g->generate_triplane(torch::randn({1, 8}, kF64), zm, t, c).planes),
            1e-6);
  auto t0 = timesteps(1, 0.0, torch::kFloat64);
  EXPECT_TRUE(torch::equal(g->generate_triplane(za, zm, t0, c).planes,
                           g->generate_triplane(za, torch::randn({1, 8}, kF64), t0, c).planes));
  EXPECT_EQ(a.planes.sizes(), (std::vector<int64_t>{1, 3, 4, 16, 16}));
}

TEST(GenerateTriplane, LayersAtOrAboveKIgnoreMotion) {
  auto g = make_generator();
  auto za = torch::randn({1, 8}, kF64);
  auto c = pose_tensor(frontal_pose());
  auto t = timesteps(1, 0.8, torch::kFloat64);
  auto w_plus = g->broadcast_w_plus(g->map_appearance(za, c));
  SynthesisTrace trace_a, trace_b;
  auto codes_a = g->motion_codes(torch::randn({1, 8}, kF64), t);
  auto codes_b = g->motion_codes(torch::randn({1, 8}, kF64), t);
  g->synthesize(w_plus, codes_a, &trace_a);
  g->synthesize(w_plus, codes_b, &trace_b);
  const int k_motion = g->config().motion_layers;
  for (int k = 0; k < g->config().layer_count; ++k) {
    EXPECT_EQ(trace_a.received_motion[k], k < k_motion);
    if (k < k_motion) continue;
    // same input activation, different motion codes: identical output bits
    auto out_b = g->synthesis_layers[k]->forward(trace_a.inputs[k], w_plus.select(1, k));
    EXPECT_TRUE(torch::equal(out_b, trace_a.outputs[k])) << "layer " << k;
  }
  EXPECT_GT(max_diff(trace_a.outputs.back(), trace_b.outputs.back()), 0.0);
}

TEST(SuperResolve, ResidualIdentityAtInit) {
  auto g = make_generator();
  auto rgb = torch::rand({2, 3, 8, 8}, kF64);
  auto feats = torch::randn({2, 4, 8, 8}, kF64);
  auto w = torch::randn({2, 8}, kF64);
  auto out = g->super_resolve(rgb, feats, w);
  auto up = F::interpolate(rgb, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{16, 16})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  EXPECT_LT(max_diff(out, up), 1e-15);

  SuperResolution same(4, 4, 8, 8);
  same->to(torch::kFloat64);
  EXPECT_LT(max_diff(same->forward(rgb, feats, w), rgb), 1e-15);
}

TEST(SuperResolve, GradientReachesRawFeatures) {
  auto g = make_generator();
  {
    torch::NoGradGuard guard;
    g->super_resolution->to_rgb->weight.normal_();
  }
  auto rgb = torch::rand({1, 3, 8, 8}, kF64);
  auto feats = torch::randn({1, 4, 8, 8}, kF64).requires_grad_(true);
  auto w = torch::randn({1, 8}, kF64);
  auto f = [&] { return g->super_resolve(rgb, feats, w).square().mean(); };
  for (int64_t idx : {3, 77, 200}) {
    const double fd = finite_difference([&] { return f().item<double>(); }, feats, idx);
    const double ad = autograd_entry(f, feats, idx);
    EXPECT_GT(std::abs(ad), 0.0);
    EXPECT_LT(relative_error(fd, ad), 1e-3);
  }
}

TEST(GenerateFrame, DeterministicShapeAndZeroTimeInvariance) {
  auto g = make_generator();
  auto za = torch::randn({1, 8}, kF64), zm = torch::randn({1, 8}, kF64);
  std::vector<CameraPose> pose{frontal_pose()};
  auto a = g->generate_frame(za, zm, timesteps(1, 0.3, torch::kFloat64), pose, pose,
                             fixed_settings());
  auto b = g->generate_frame(za, zm, timesteps(1, 0.3, torch::kFloat64), pose, pose,
                             fixed_settings());
  EXPECT_TRUE(torch::equal(a.frame, b.frame));
  EXPECT_EQ(a.frame.sizes(), (std::vector<int64_t>{1, 3, 16, 16}));
  EXPECT_EQ(a.raw.rgb.sizes(), (std::vector<int64_t>{1, 3, 8, 8}));

  auto t0 = timesteps(1, 0.0, torch::kFloat64);
  auto ref = g->generate_frame(za, zm, t0, pose, pose, fixed_settings()).frame;
  for (int i = 0; i < 5; ++i) {
    auto other = g->generate_frame(za, torch::randn({1, 8}, kF64), t0, pose, pose,
                                   fixed_settings());
    EXPECT_LT(max_diff(ref, other.frame), 1e-5);
  }
}

TEST(GenerateFrame, OutputShapeForEveryPreset) {
  for (auto cfg : {GeneratorConfig::early(), GeneratorConfig::middle(), GeneratorConfig::late()}) {
    cfg.synthesis_channels = 4;
    cfg.plane_channels = 2;
    cfg.decoder_hidden = 8;
    cfg.render_steps = 4;
    cfg.base_resolution = 8;
    torch::manual_seed(0);
    Generator g(cfg);
    torch::NoGradGuard guard;
    std::vector<CameraPose> pose{frontal_pose()};
    auto out = g->generate_frame(torch::randn({1, 64}), torch::randn({1, 64}),
                                 timesteps(1, 0.5, torch::kFloat32), pose, pose,
                                 g->default_settings());
    EXPECT_EQ(out.frame.sizes(), (std::vector<int64_t>{1, 3, 64, 64}));
  }
}

TEST(GenerateFrame, YawedSphereKeepsOpacityMass) {
  auto g = make_generator();
  auto front = generate_rays(std::vector<CameraPose>{frontal_pose()}, 32, 2.25, 3.3);
  auto side = generate_rays(std::vector<CameraPose>{yaw_pose(30.0, frontal_pose())}, 32, 2.25,
                            3.3);
  auto field = sphere_field(0.35, 200.0, 4);
  auto a = render_field(field, front, fixed_settings(48), torch::kFloat64);
  auto b = render_field(field, side, fixed_settings(48), torch::kFloat64);
  auto w = torch::randn({1, 8}, kF64);
  auto fa = g->super_resolve(a.rgb, a.features, w);
  auto fb = g->super_resolve(b.rgb, b.features, w);
  EXPECT_GT(max_diff(fa, fb), 1e-3);
  const double ma = a.opacity.sum().item<double>(), mb = b.opacity.sum().item<double>();
  EXPECT_LT(std::abs(ma - mb) / ma, 0.2);
}

TEST(GenerateFrame, EndToEndGradientsMatchFiniteDifferences) {
  auto cfg = small_generator_config();
  cfg.base_resolution = 8;
  auto g = make_generator(cfg, 5);
  {
    torch::NoGradGuard guard;
    g->super_resolution->to_rgb->weight.normal_();
  }
  auto za = torch::randn({1, 8}, kF64).requires_grad_(true);
  auto zm = torch::randn({1, 8}, kF64).requires_grad_(true);
  std::vector<CameraPose> pose{frontal_pose()};
  auto t = timesteps(1, 0.7, torch::kFloat64);
  auto f = [&] {
    return g->generate_frame(za, zm, t, pose, pose, fixed_settings(8)).frame.mean();
  };
  auto check = [&](torch::Tensor param, int64_t idx) {
    const double fd = finite_difference([&] { return f().item<double>(); }, param, idx);
    const double ad = autograd_entry(f, param, idx);
    EXPECT_LT(relative_error(fd, ad, 1e-9), 1e-3) << fd << " vs " << ad;
  };
  check(za, 1);
  check(za, 6);
  check(zm, 0);
  check(zm, 5);
  check(g->decoder->hidden->weight, 3);
  check(g->decoder->out->bias, 0);
}

TEST(StyleMix, SelectsLayers) {
  auto a = torch::randn({2, 7, 8}, kF64), b = torch::randn({2, 7, 8}, kF64);
  EXPECT_TRUE(torch::equal(style_mix(a, b, 0), a));
  EXPECT_TRUE(torch::equal(style_mix(a, b, 7), b));
  auto mixed = style_mix(a, b, 4);
  for (int k = 0; k < 7; ++k) {
    EXPECT_TRUE(torch::equal(mixed.select(1, k), (k < 4 ? b : a).select(1, k))) << k;
  }
  EXPECT_THROW(style_mix(a, b, 8), ParameterError);
}

TEST(GeneratorConfig, JsonRoundTripAndValidation) {
  auto cfg = small_generator_config();
  cfg.camera_mode = CameraMode::Map;
  auto back = GeneratorConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  cfg.motion_layers = 9;
  EXPECT_THROW(cfg.validate(), ParameterError);
  EXPECT_THROW(camera_mode_from_string("Sideways"), ParameterError);
  EXPECT_DOUBLE_EQ(timestep_for_frame(15), 1.0);
  EXPECT_DOUBLE_EQ(timestep_for_frame(0), 0.0);
}

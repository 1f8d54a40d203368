#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/renderer.hpp"
#include "scenes.hpp"

using namespace pv3d;
using namespace pv3d::testing;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

TriPlane random_planes(int64_t c, int64_t r, uint64_t seed) {
  torch::manual_seed(seed);
  return TriPlane{torch::randn({1, 3, c, r, r}, kF64), 0.5};
}

}  // namespace

TEST(SampleTriplane, ZeroAndConstantPlanes) {
  TriPlane zero{torch::zeros({1, 3, 4, 8, 8}, kF64), 0.5};
  auto pts = torch::rand({1, 20, 3}, kF64) - 0.5;
  EXPECT_EQ(sample_triplane(zero, pts).abs().max().item<double>(), 0.0);

  TriPlane constant{torch::full({1, 3, 4, 8, 8}, 0.7, kF64), 0.5};
  auto feats = sample_triplane(constant, pts);
  EXPECT_LT((feats - 2.1).abs().max().item<double>(), 1e-12);
}

TEST(SampleTriplane, GridNodeMatchesDirectIndexing) {
  auto tp = random_planes(3, 4, 1);
  auto p = tp.planes[0];
  auto coord = [](int i) { return -0.5 + i / 3.0; };
  for (int ix = 0; ix < 4; ++ix)
    for (int iy = 0; iy < 4; ++iy)
      for (int iz = 0; iz < 4; ++iz) {
        auto pt = torch::tensor({coord(ix), coord(iy), coord(iz)}, kF64).view({1, 1, 3});
        auto f = sample_triplane(tp, pt)[0][0];
        for (int c = 0; c < 3; ++c) {
          // XY plane indexed [y][x], XZ [z][x], YZ [z][y]
          const double expected = p[0][c][iy][ix].item<double>() +
                                  p[1][c][iz][ix].item<double>() +
                                  p[2][c][iz][iy].item<double>();
          EXPECT_NEAR(f[c].item<double>(), expected, 1e-12);
        }
      }
}

TEST(SampleTriplane, OutOfBoundsClampsToBorder) {
  auto tp = random_planes(2, 5, 2);
  auto inside = torch::tensor({0.5, 0.5, 0.5}, kF64).view({1, 1, 3});
  auto outside = torch::tensor({3.0, 0.9, 7.5}, kF64).view({1, 1, 3});
  EXPECT_LT((sample_triplane(tp, inside) - sample_triplane(tp, outside)).abs().max().item<double>(),
            1e-12);
}

TEST(Decoder, ZeroWeightsGiveLn2Density) {
  Decoder dec(4, 8, 4);
  dec->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    for (auto& p : dec->parameters()) p.zero_();
  }
  auto out = dec->forward(torch::randn({10, 4}, kF64));
  EXPECT_LT((out.density - std::log(2.0)).abs().max().item<double>(), 1e-12);
  EXPECT_NEAR(std::log(2.0), 0.6931, 1e-4);
  EXPECT_LT((out.color - 0.5).abs().max().item<double>(), 1e-12);
}

TEST(Decoder, DeterministicAndShapeChecked) {
  Decoder dec(4, 8, 5);
  dec->to(torch::kFloat64);
  auto row = torch::randn({1, 4}, kF64);
  auto out = dec->forward(row.expand({6, 4}));
  EXPECT_EQ((out.density - out.density[0]).abs().max().item<double>(), 0.0);
  EXPECT_EQ(out.features.size(-1), 5);
  EXPECT_TRUE((out.density >= 0).all().item<bool>());
  EXPECT_THROW(dec->forward(torch::randn({3, 5}, kF64)), ParameterError);
  EXPECT_THROW(Decoder(4, 8, 2), ParameterError);
}

TEST(Decoder, DensityGradientMatchesFiniteDifferences) {
  torch::manual_seed(3);
  Decoder dec(4, 8, 4);
  dec->to(torch::kFloat64);
  auto x = torch::randn({5, 4}, kF64);
  auto w = dec->hidden->weight;
  auto f = [&] { return dec->forward(x).density.sum(); };
  for (int64_t idx : {0, 7, 19}) {
    const double fd = finite_difference([&] { return f().item<double>(); }, w, idx);
    const double ad = autograd_entry(f, w, idx);
    EXPECT_LT(relative_error(fd, ad), 1e-3) << fd << " vs " << ad;
  }
}

TEST(Composite, EmptyMedium) {
  auto r = composite(torch::zeros({4}, kF64), torch::ones({4, 3}, kF64),
                     torch::full({4}, 0.25, kF64), torch::arange(4, kF64));
  EXPECT_EQ(r.pixel.abs().max().item<double>(), 0.0);
  EXPECT_EQ(r.opacity.item<double>(), 0.0);
}

TEST(Composite, ConstantMediumClosedForm) {
  const int s = 48;
  auto dist = (torch::arange(s, kF64) + 0.5) / s;
  auto colors = torch::zeros({s, 3}, kF64);
  colors.select(1, 0).fill_(1.0);
  auto r = composite(torch::ones({s}, kF64), colors, torch::full({s}, 1.0 / s, kF64), dist);
  EXPECT_NEAR(r.pixel[0].item<double>(), 1.0 - std::exp(-1.0), 1e-5);
  EXPECT_NEAR(r.pixel[0].item<double>(), 0.63212, 1e-5);
  EXPECT_EQ(r.pixel[1].item<double>(), 0.0);
}

TEST(Composite, OpaqueLimit) {
  auto color = torch::tensor({{0.2, 0.4, 0.9}}, kF64);
  auto r = composite(torch::full({1}, 1e6, kF64), color, torch::ones({1}, kF64),
                     torch::full({1}, 0.3, kF64));
  EXPECT_NEAR(r.opacity.item<double>(), 1.0, 1e-12);
  EXPECT_LT((r.pixel - color[0]).abs().max().item<double>(), 1e-12);
  EXPECT_NEAR(r.depth.item<double>(), 0.3, 1e-12);
}

TEST(Composite, PropertiesOnRandomRays) {
  torch::manual_seed(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int s = 16;
    auto dens = torch::rand({8, s}, kF64) * 5;
    auto colors = torch::rand({8, s, 3}, kF64);
    auto deltas = torch::full({8, s}, 0.1, kF64);
    auto dist = 2.0 + torch::arange(s, kF64).mul(0.1).expand({8, s});
    auto r = composite(dens, colors, deltas, dist);
    // transmittance non-increasing
    auto diffs = r.transmittance.narrow(1, 1, s - 1) - r.transmittance.narrow(1, 0, s - 1);
    EXPECT_LE(diffs.max().item<double>(), 0.0);
    EXPECT_GE(r.opacity.min().item<double>(), 0.0);
    EXPECT_LE(r.opacity.max().item<double>(), 1.0);
    EXPECT_TRUE((r.pixel <= std::get<0>(colors.max(1)) + 1e-12).all().item<bool>());
    EXPECT_TRUE((r.depth >= 2.0 - 1e-12).all().item<bool>());
    EXPECT_TRUE((r.depth <= 2.0 + 0.1 * (s - 1) + 1e-12).all().item<bool>());

    // appending empty samples changes nothing
    auto r2 = composite(torch::cat({dens, torch::zeros({8, 4}, kF64)}, 1),
                        torch::cat({colors, torch::rand({8, 4, 3}, kF64)}, 1),
                        torch::cat({deltas, torch::full({8, 4}, 0.1, kF64)}, 1),
                        torch::cat({dist, 4.0 + torch::arange(4, kF64).expand({8, 4})}, 1));
    EXPECT_LT((r2.pixel - r.pixel).abs().max().item<double>(), 1e-14);
    EXPECT_LT((r2.opacity - r.opacity).abs().max().item<double>(), 1e-14);
  }
}

TEST(Render, ZeroDensityScene) {
  auto rays = generate_rays(std::vector<CameraPose>{frontal_pose()}, 8, 2.25, 3.3);
  RadianceField empty = [](const torch::Tensor& pts) {
    auto shape = pts.sizes().vec();
    shape.pop_back();
    return RadianceSamples{torch::zeros(shape, pts.options()),
                           torch::ones(pts.sizes(), pts.options()), torch::Tensor()};
  };
  auto out = render_field(empty, rays, RenderSettings{}, torch::kFloat64);
  EXPECT_EQ(out.opacity.abs().max().item<double>(), 0.0);
  EXPECT_EQ(out.rgb.abs().max().item<double>(), 0.0);
}

TEST(Render, ConstantMediumMatchesClosedFormAndConverges) {
  auto rays = generate_rays(std::vector<CameraPose>{frontal_pose()}, 4, 2.25, 3.3);
  const double sigma = 1.3;
  RadianceField medium = [sigma](const torch::Tensor& pts) {
    auto shape = pts.sizes().vec();
    shape.pop_back();
    auto color = torch::zeros(pts.sizes(), pts.options());
    color.select(-1, 1).fill_(0.8);
    return RadianceSamples{torch::full(shape, sigma, pts.options()), color, torch::Tensor()};
  };
  RenderSettings s48{48, true, 5};
  RenderSettings s96{96, true, 5};
  auto a = render_field(medium, rays, s48, torch::kFloat64);
  auto b = render_field(medium, rays, s96, torch::kFloat64);
  const double expected = 0.8 * (1.0 - std::exp(-sigma * (3.3 - 2.25)));
  EXPECT_LT((a.rgb.select(1, 1) - expected).abs().max().item<double>(), 1e-5);
  EXPECT_LT((a.rgb - b.rgb).abs().max().item<double>(), 1e-4);
}

TEST(Render, SphereSilhouetteMatchesAnalyticProjection) {
  const double radius = 0.4;
  const int res = 64;
  auto rays = generate_rays(std::vector<CameraPose>{frontal_pose()}, res, 2.25, 3.3);
  auto out = render_field(sphere_field(radius, 1e3), rays, RenderSettings{48, true, 1},
                          torch::kFloat64);
  auto closest = ray_origin_distance(rays).view({1, res, res});
  auto analytic = closest < radius;
  auto rendered = out.opacity > 0.5;
  // world size of one pixel at the sphere centre
  const double pixel = kDefaultOrbitRadius / (kDefaultFocal * res);
  auto near_boundary = (closest - radius).abs() < pixel;
  auto mismatch = (analytic != rendered) & ~near_boundary;
  EXPECT_EQ(mismatch.sum().item<int64_t>(), 0);
  EXPECT_GT(analytic.sum().item<int64_t>(), 100);
}

TEST(Render, DeterministicGivenSeed) {
  auto tp = random_planes(4, 8, 6);
  Decoder dec(4, 8, 4);
  dec->to(torch::kFloat64);
  auto rays = generate_rays(std::vector<CameraPose>{frontal_pose()}, 4, 2.25, 3.3);
  RenderSettings s{12, true, 99};
  auto a = render(tp, dec, rays, s);
  auto b = render(tp, dec, rays, s);
  EXPECT_TRUE(torch::equal(a.rgb, b.rgb));
  EXPECT_TRUE(torch::equal(a.depth, b.depth));
}

TEST(Render, PlaneGradientMatchesFiniteDifferences) {
  auto tp = random_planes(4, 4, 7);
  tp.planes = tp.planes * 0.5;
  tp.planes.requires_grad_(true);
  torch::manual_seed(8);
  Decoder dec(4, 8, 4);
  dec->to(torch::kFloat64);
  auto rays = generate_rays(std::vector<CameraPose>{frontal_pose()}, 4, 2.25, 3.3);
  RenderSettings s{8, true, 3};
  auto f = [&] { return render(tp, dec, rays, s).rgb.mean(); };
  const int64_t n = tp.planes.numel();
  for (int64_t idx : {int64_t{5}, n / 3, n / 2 + 1, n - 7}) {
    const double fd = finite_difference([&] { return f().item<double>(); }, tp.planes, idx);
    const double ad = autograd_entry(f, tp.planes, idx);
    EXPECT_LT(relative_error(fd, ad, 1e-9), 1e-3) << idx << ": " << fd << " vs " << ad;
  }
}

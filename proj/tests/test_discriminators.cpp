#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "pv3d/camera.hpp"
#include "pv3d/discriminators.hpp"
#include "pv3d/errors.hpp"
#include "small_config.hpp"

using namespace pv3d;
using namespace pv3d::testing;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

struct Fixture {
  ImageDiscriminator image{nullptr};
  VideoDiscriminator video{nullptr};
  torch::Tensor hi, raw, hi2, c0, c1;
  Fixture() {
    torch::manual_seed(12);
    image = ImageDiscriminator(small_discriminator_config());
    video = VideoDiscriminator(small_discriminator_config());
    image->to(torch::kFloat64);
    video->to(torch::kFloat64);
    hi = torch::rand({2, 3, 16, 16}, kF64);
    hi2 = torch::rand({2, 3, 16, 16}, kF64);
    raw = torch::rand({2, 3, 8, 8}, kF64);
    c0 = pose_tensor(std::vector<CameraPose>(2, frontal_pose()));
    c1 = pose_tensor(std::vector<CameraPose>(2, yaw_pose(25.0, frontal_pose())));
  }
};

}  // namespace

TEST(ImageDiscriminator, DeterministicAndConditioned) {
  Fixture fx;
  auto a = fx.image->forward(fx.hi, fx.raw, fx.c0);
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{2}));
  EXPECT_TRUE(torch::equal(a, fx.image->forward(fx.hi, fx.raw, fx.c0)));
  EXPECT_GT((a - fx.image->forward(fx.hi, fx.raw, fx.c1)).abs().min().item<double>(), 1e-9);
  // raw branch matters
  EXPECT_GT((a - fx.image->forward(fx.hi, torch::zeros_like(fx.raw), fx.c0)).abs().min().item<double>(),
            1e-9);
}

TEST(ImageDiscriminator, ZeroHeadReturnsBias) {
  Fixture fx;
  {
    torch::NoGradGuard guard;
    auto& critic = fx.image->critic;
    critic->head->weight.zero_();
    critic->head->bias.fill_(0.37);
    critic->proj->weight.zero_();
    critic->proj->bias.zero_();
  }
  auto logits = fx.image->forward(fx.hi, fx.raw, fx.c1);
  EXPECT_LT((logits - 0.37).abs().max().item<double>(), 1e-15);
}

TEST(ImageDiscriminator, ResolutionMismatchRejected) {
  Fixture fx;
  EXPECT_THROW(fx.image->forward(torch::rand({2, 3, 12, 12}, kF64), fx.raw, fx.c0),
               ParameterError);
  EXPECT_THROW(fx.image->stack_inputs(fx.hi, torch::rand({2, 3, 8, 4}, kF64)), ParameterError);
}

TEST(VideoDiscriminator, OrderEncodingAndTimeSensitivity) {
  Fixture fx;
  auto dt = torch::full({2}, 0.4, kF64);
  auto fwd = VideoDiscriminatorImpl::condition(fx.c0, fx.c1);
  auto rev = VideoDiscriminatorImpl::condition(fx.c1, fx.c0);
  EXPECT_FALSE(torch::equal(fwd, rev));
  EXPECT_EQ(fwd.size(1), 50);

  auto a = fx.video->forward(fx.hi, fx.hi2, dt, fx.c0, fx.c1);
  auto b = fx.video->forward(fx.hi, fx.hi2, -dt, fx.c0, fx.c1);
  EXPECT_GT((a - b).abs().min().item<double>(), 1e-9);
  EXPECT_TRUE(torch::equal(a, fx.video->forward(fx.hi, fx.hi2, dt, fx.c0, fx.c1)));

  auto flipped = fx.video->forward(fx.hi, fx.hi2, dt, fx.c1, fx.c0);
  EXPECT_GT((a - flipped).abs().min().item<double>(), 1e-9);
}

TEST(VideoDiscriminator, DegeneratePairIsFinite) {
  Fixture fx;
  auto logit = fx.video->forward(fx.hi, fx.hi, torch::zeros({2}, kF64), fx.c0, fx.c0);
  EXPECT_TRUE(torch::isfinite(logit).all().item<bool>());
  EXPECT_EQ(fx.video->stack_inputs(fx.hi, fx.hi, torch::zeros({2}, kF64)).size(1), 7);
}

TEST(Discriminators, InputGradientsMatchFiniteDifferences) {
  Fixture fx;
  auto hi = fx.hi.clone().requires_grad_(true);
  auto hi2 = fx.hi2.clone().requires_grad_(true);
  auto dt = torch::full({2}, 0.2, kF64);
  auto fi = [&] { return fx.image->forward(hi, fx.raw, fx.c0).sum(); };
  auto fv = [&] { return fx.video->forward(hi, hi2, dt, fx.c0, fx.c1).sum(); };
  for (int64_t idx : {0, 111, 700, 1500}) {
    double fd = finite_difference([&] { return fi().item<double>(); }, hi, idx);
    double ad = autograd_entry(fi, hi, idx);
    EXPECT_LT(relative_error(fd, ad, 1e-9), 1e-3) << fd << " vs " << ad;
    fd = finite_difference([&] { return fv().item<double>(); }, hi2, idx);
    ad = autograd_entry(fv, hi2, idx);
    EXPECT_LT(relative_error(fd, ad, 1e-9), 1e-3) << fd << " vs " << ad;
  }
}

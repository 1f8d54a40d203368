#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "pv3d/checkpoint.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/training.hpp"
#include "small_config.hpp"

namespace fs = std::filesystem;
using namespace pv3d;
using pv3d::testing::small_discriminator_config;
using pv3d::testing::small_generator_config;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pv3d_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const InMemoryDataset& small_dataset() {
  static const InMemoryDataset ds = [] {
    SyntheticDatasetConfig cfg;
    cfg.n_clips = 2;
    cfg.frames = 16;
    cfg.resolution = 16;
    cfg.render_steps = 16;
    auto root = scratch_dir("dataset");
    make_synthetic_dataset(root, cfg);
    return InMemoryDataset::load(root);
  }();
  return ds;
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.batch_size = 2;
  c.iterations = 2;
  c.render_steps = 8;
  c.render_resolution = 8;
  c.density_points = 64;
  return c;
}

Trainer make_trainer(uint64_t seed = 0) {
  auto models = make_models(small_generator_config(), small_discriminator_config(), 123);
  auto cfg = small_train_config();
  cfg.seed = seed;
  return Trainer(models.generator, models.image_disc, models.video_disc, cfg, small_dataset());
}

std::vector<torch::Tensor> snapshot(torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

bool unchanged(torch::nn::Module& m, const std::vector<torch::Tensor>& before) {
  auto params = m.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    if (!torch::equal(params[i].detach(), before[i])) return false;
  }
  return true;
}

}  // namespace

TEST(TimestepPair, SpanTwoForcesUnitGap) {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 200; ++k) {
    auto p = sample_timestep_pair(10, 2, 1.0, 2.0, rng);
    EXPECT_EQ(p.gap, 1);
    EXPECT_EQ(p.index_j - p.index_i, 1);
    EXPECT_DOUBLE_EQ(p.t_i, 0.0);
    EXPECT_DOUBLE_EQ(p.t_j, 1.0);
  }
}

TEST(TimestepPair, UniformBetaGivesUniformGap) {
  std::mt19937_64 rng(2);
  const int draws = 100000;
  std::vector<int> counts(16, 0);
  for (int k = 0; k < draws; ++k) ++counts[sample_timestep_pair(16, 16, 1.0, 1.0, rng).gap];
  EXPECT_EQ(counts[0], 0);
  const double expected = draws / 15.0;
  double chi2 = 0.0;
  for (int g = 1; g <= 15; ++g) chi2 += std::pow(counts[g] - expected, 2) / expected;
  // 14 degrees of freedom, p = 0.001 critical value.
  EXPECT_LT(chi2, 36.12);
}

TEST(TimestepPair, OrderingAndRange) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 5000; ++k) {
    const int length = 16 + k % 20;
    auto p = sample_timestep_pair(length, 16, 1.0, 2.0, rng);
    EXPECT_GT(p.t_j - p.t_i, 0.0);
    EXPECT_LE(p.t_j - p.t_i, 1.0);
    EXPECT_GE(p.t_i, 0.0);
    EXPECT_LE(p.t_j, 1.0);
    EXPECT_GE(p.index_i, 0);
    EXPECT_LT(p.index_j, length);
    EXPECT_EQ(p.index_j - p.index_i, p.gap);
  }
}

TEST(TimestepPair, ShortClipIsDataError) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(sample_timestep_pair(15, 16, 1.0, 2.0, rng), DataError);
}

TEST(NonsaturatingLosses, ZeroLogits) {
  auto l = nonsaturating_losses(torch::zeros({4}, torch::kFloat64), torch::zeros({4}, torch::kFloat64));
  EXPECT_NEAR(l.discriminator.item<double>(), 2.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(l.generator.item<double>(), std::log(2.0), 1e-12);
}

TEST(NonsaturatingLosses, PerfectDiscriminatorLimit) {
  auto l = nonsaturating_losses(torch::full({2}, 60.0, torch::kFloat64),
                                torch::full({2}, -60.0, torch::kFloat64));
  EXPECT_LT(l.discriminator.item<double>(), 1e-20);
}

TEST(NonsaturatingLosses, GeneratorLossDecreasesInFakeLogit) {
  auto fake = torch::linspace(-10, 10, 101, torch::kFloat64);
  auto g = torch::nn::functional::softplus(-fake);
  EXPECT_TRUE((g.slice(0, 1) < g.slice(0, 0, -1)).all().item<bool>());
  auto real = torch::zeros({1}, torch::kFloat64);
  double prev = 1e9;
  for (double f = -10; f <= 10; f += 0.5) {
    auto l = nonsaturating_losses(real, torch::full({1}, f, torch::kFloat64)).generator.item<double>();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(R1Penalty, ConstantDiscriminatorIsZero) {
  auto cfg = small_discriminator_config();
  ImageDiscriminator d(cfg);
  d->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    for (auto& p : d->parameters()) p.zero_();
  }
  auto hi = torch::rand({2, 3, 16, 16}, torch::kFloat64).requires_grad_(true);
  auto raw = torch::rand({2, 3, 8, 8}, torch::kFloat64).requires_grad_(true);
  auto pose = torch::rand({2, 25}, torch::kFloat64);
  auto r1 = r1_penalty([&](const std::vector<torch::Tensor>& x) { return d->forward(x[0], x[1], pose); },
                       {hi, raw});
  EXPECT_EQ(r1.item<double>(), 0.0);
}

TEST(R1Penalty, LinearLogitGivesHalfSquaredNorm) {
  auto w = torch::randn({3, 5, 5}, torch::kFloat64);
  auto x = torch::randn({4, 3, 5, 5}, torch::kFloat64).requires_grad_(true);
  auto r1 = r1_penalty(
      [&](const std::vector<torch::Tensor>& in) { return (in[0] * w).flatten(1).sum(1); }, {x});
  EXPECT_NEAR(r1.item<double>(), 0.5 * w.square().sum().item<double>(), 1e-10);
}

TEST(R1Penalty, NonNegativeOnVideoDiscriminator) {
  VideoDiscriminator d(small_discriminator_config());
  for (int trial = 0; trial < 5; ++trial) {
    auto a = torch::rand({2, 3, 16, 16}).requires_grad_(true);
    auto b = torch::rand({2, 3, 16, 16}).requires_grad_(true);
    auto dt = torch::rand({2});
    auto p = torch::rand({2, 25});
    auto r1 = r1_penalty(
        [&](const std::vector<torch::Tensor>& x) { return d->forward(x[0], x[1], dt, p, p); },
        {a, b});
    EXPECT_GE(r1.item<double>(), 0.0);
  }
}

TEST(DensityRegularization, ConstantFieldIsZero) {
  Decoder dec(4, 16, 4);
  {
    torch::NoGradGuard g;
    for (auto& p : dec->parameters()) p.zero_();
  }
  TriPlane tp{torch::randn({1, 3, 4, 16, 16}), 0.5};
  auto gen = at::detail::createCPUGenerator(0);
  EXPECT_EQ(density_regularization(tp, dec, gen, 256, 0.002).item<double>(), 0.0);
}

TEST(DensityRegularization, ScalesWithPerturbation) {
  torch::manual_seed(9);
  for (int trial = 0; trial < 5; ++trial) {
    Decoder dec(4, 16, 4);
    dec->to(torch::kFloat64);
    TriPlane tp{torch::randn({1, 3, 4, 16, 16}, torch::kFloat64), 0.5};
    auto g1 = at::detail::createCPUGenerator(trial);
    auto g2 = at::detail::createCPUGenerator(trial);
    const double big = density_regularization(tp, dec, g1, 4000, 0.002).item<double>();
    const double small = density_regularization(tp, dec, g2, 4000, 0.0002).item<double>();
    EXPECT_GT(big, 0.0);
    EXPECT_GE(small, 0.0);
    const double ratio = big / small;
    EXPECT_GT(ratio, 5.0);
    EXPECT_LT(ratio, 20.0);
  }
}

TEST(TrainConfig, DatasetPresets) {
  auto v = TrainConfig::voxceleb();
  EXPECT_DOUBLE_EQ(v.lambda_reg, 0.6);
  EXPECT_DOUBLE_EQ(v.lambda_vid, 0.65);
  EXPECT_DOUBLE_EQ(v.lambda_img, 1.0);
  EXPECT_DOUBLE_EQ(v.lambda_r1, 2.0);
  auto c = TrainConfig::celebv_hq();
  EXPECT_DOUBLE_EQ(c.lambda_reg, 0.05);
  EXPECT_DOUBLE_EQ(c.lambda_r1, 4.0);
  EXPECT_DOUBLE_EQ(TrainConfig::preset("talkinghead-1kh").lambda_reg, 0.5);
  EXPECT_THROW(TrainConfig::preset("ffhq"), ConfigError);
}

TEST(TrainConfig, FileFormats) {
  auto dir = scratch_dir("config");
  std::ofstream(dir / "a.json") << R"({"lambda_reg": 0.1, "batch_size": 3})";
  auto a = TrainConfig::from_file(dir / "a.json");
  EXPECT_DOUBLE_EQ(a.lambda_reg, 0.1);
  EXPECT_EQ(a.batch_size, 3);
  std::ofstream(dir / "b.cfg") << "# comment\nlambda_r1 = 4.0\niterations=7  # inline\n";
  auto b = TrainConfig::from_file(dir / "b.cfg");
  EXPECT_DOUBLE_EQ(b.lambda_r1, 4.0);
  EXPECT_EQ(b.iterations, 7);
  std::ofstream(dir / "c.cfg") << "lambda_typo = 1\n";
  EXPECT_THROW(TrainConfig::from_file(dir / "c.cfg"), ConfigError);
  std::ofstream(dir / "d.cfg") << "lambda_vid = -1\n";
  EXPECT_THROW(TrainConfig::from_file(dir / "d.cfg"), ConfigError);
  EXPECT_EQ(TrainConfig::from_json(a.to_json()).to_json(), a.to_json());
}

TEST(TrainingCameras, ModeTable) {
  std::vector<CameraPose> pi{yaw_pose(10, frontal_pose())}, pj{yaw_pose(-10, frontal_pose())};
  auto all = training_cameras(CameraMode::All, pi, pj);
  EXPECT_EQ(all.cond_j[0], pi[0]);
  EXPECT_EQ(all.render_j[0], pi[0]);
  auto map = training_cameras(CameraMode::Map, pi, pj);
  EXPECT_EQ(map.cond_j[0], pi[0]);
  EXPECT_EQ(map.render_j[0], pj[0]);
  for (auto mode : {CameraMode::Non, CameraMode::MapT}) {
    auto c = training_cameras(mode, pi, pj);
    EXPECT_EQ(c.cond_j[0], pj[0]);
    EXPECT_EQ(c.render_j[0], pj[0]);
  }
}

TEST(FakePair, SharedLatentsCoincideAtTimeZero) {
  auto models = make_models(small_generator_config(), small_discriminator_config(), 5);
  auto gen = at::detail::createCPUGenerator(1);
  auto z_a = models.generator->sample_appearance(2, gen);
  auto z_m = models.generator->sample_motion(2, gen);
  std::vector<CameraPose> poses{frontal_pose(), yaw_pose(15, frontal_pose())};
  RenderSettings settings{8, false, std::nullopt};
  torch::NoGradGuard g;
  auto t0 = torch::zeros({2});
  auto pair = generate_fake_pair(models.generator, z_a, z_m, t0, t0, poses, poses, settings);
  EXPECT_TRUE(torch::equal(pair.frame_i.frame, pair.frame_j.frame));
  auto moved = generate_fake_pair(models.generator, z_a, z_m, t0, torch::ones({2}), poses, poses,
                                  settings);
  EXPECT_FALSE(torch::equal(moved.frame_i.frame, moved.frame_j.frame));
}

TEST(Trainer, StepIsBitReproducible) {
  auto a = make_trainer(7);
  auto b = make_trainer(7);
  auto ra = a.step();
  auto rb = b.step();
  EXPECT_EQ(ra.csv_row().substr(0, ra.csv_row().rfind(',')),
            rb.csv_row().substr(0, rb.csv_row().rfind(',')));
  auto pa = a.generator()->parameters();
  auto pb = b.generator()->parameters();
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
}

TEST(Trainer, StepsTouchOnlyTheirOwnParameters) {
  auto t = make_trainer();
  auto g_before = snapshot(*t.generator());
  auto di_before = snapshot(*t.image_discriminator());
  auto dv_before = snapshot(*t.video_discriminator());
  LossReport r;
  r = t.discriminator_step(r);
  EXPECT_TRUE(unchanged(*t.generator(), g_before));
  EXPECT_FALSE(unchanged(*t.image_discriminator(), di_before));
  di_before = snapshot(*t.image_discriminator());
  dv_before = snapshot(*t.video_discriminator());
  r = t.generator_step(r);
  EXPECT_TRUE(unchanged(*t.image_discriminator(), di_before));
  EXPECT_TRUE(unchanged(*t.video_discriminator(), dv_before));
  EXPECT_FALSE(unchanged(*t.generator(), g_before));
}

TEST(Trainer, LazyR1Cadence) {
  auto t = make_trainer();
  auto first = t.step();
  auto second = t.step();
  EXPECT_TRUE(first.r1_applied);
  EXPECT_FALSE(second.r1_applied);
  EXPECT_GE(first.r1, 0.0);
}

TEST(Trainer, NanAbortsWithNumericalError) {
  auto t = make_trainer();
  {
    torch::NoGradGuard g;
    t.generator()->plane_bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  EXPECT_THROW(t.step(), NumericalError);
}

TEST(Trainer, RejectsMismatchedRenderResolution) {
  auto models = make_models(small_generator_config(), small_discriminator_config(), 1);
  auto cfg = small_train_config();
  cfg.render_resolution = 32;
  EXPECT_THROW(Trainer(models.generator, models.image_disc, models.video_disc, cfg, small_dataset()),
               ConfigError);
}

TEST(Trainer, RunWritesCsvLog) {
  auto t = make_trainer();
  auto dir = scratch_dir("log");
  t.run(dir / "loss.csv");
  std::ifstream in(dir / "loss.csv");
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, LossReport::csv_header());
  int rows = 0;
  while (std::getline(in, row)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_EQ(t.iteration(), 2);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  auto t = make_trainer();
  t.step();
  auto dir = scratch_dir("ckpt");
  save_training_checkpoint(dir / "model.pt", t);
  auto ck = load_checkpoint(dir / "model.pt");
  EXPECT_EQ(ck.iteration, 1);
  ASSERT_TRUE(ck.train_config.has_value());
  EXPECT_EQ(ck.train_config->to_json(), t.config().to_json());
  auto pa = t.generator()->parameters();
  auto pb = ck.models.generator->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
  EXPECT_THROW(load_checkpoint(dir / "missing.pt"), DataError);

  auto resumed = make_trainer();
  restore_trainer_state(dir / "model.pt", resumed);
  EXPECT_EQ(resumed.iteration(), 1);
}

TEST(Checkpoint, Sha1KnownVector) {
  auto dir = scratch_dir("sha");
  std::ofstream(dir / "abc", std::ios::binary) << "abc";
  EXPECT_EQ(file_sha1(dir / "abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
}

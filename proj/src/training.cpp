#include "pv3d/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pv3d/checkpoint.hpp"
#include "pv3d/errors.hpp"

namespace pv3d {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid train config: " + what);
  };
  require(lambda_reg >= 0 && lambda_vid >= 0 && lambda_img >= 0 && lambda_r1 >= 0,
          "loss weights must be non-negative");
  require(batch_size >= 1, "batch_size must be positive");
  require(iterations >= 0, "iterations must be non-negative");
  require(lr_generator > 0 && lr_discriminator > 0, "learning rates must be positive");
  require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1,
          "adam betas must lie in [0, 1)");
  require(frame_span >= 2, "frame_span must be at least 2");
  require(beta_alpha > 0 && beta_beta > 0, "beta parameters must be positive");
  require(render_steps >= 1 && render_resolution >= 1, "render settings must be positive");
  require(r1_interval >= 1, "r1_interval must be positive");
  require(density_perturbation > 0, "density_perturbation must be positive");
  require(density_points >= 1, "density_points must be positive");
  require(log_interval >= 1 && checkpoint_interval >= 0, "bad logging intervals");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lambda_reg", lambda_reg},
          {"lambda_vid", lambda_vid},
          {"lambda_img", lambda_img},
          {"lambda_r1", lambda_r1},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"lr_generator", lr_generator},
          {"lr_discriminator", lr_discriminator},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"frame_span", frame_span},
          {"beta_alpha", beta_alpha},
          {"beta_beta", beta_beta},
          {"render_steps", render_steps},
          {"render_resolution", render_resolution},
          {"r1_interval", r1_interval},
          {"density_perturbation", density_perturbation},
          {"density_points", density_points},
          {"seed", seed},
          {"log_interval", log_interval},
          {"checkpoint_interval", checkpoint_interval}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  const auto known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
    if (!value.is_number()) throw ConfigError("train config key '" + key + "' must be numeric");
  }
  try {
    auto get = [&j](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lambda_reg", c.lambda_reg);
    get("lambda_vid", c.lambda_vid);
    get("lambda_img", c.lambda_img);
    get("lambda_r1", c.lambda_r1);
    get("batch_size", c.batch_size);
    get("iterations", c.iterations);
    get("lr_generator", c.lr_generator);
    get("lr_discriminator", c.lr_discriminator);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("frame_span", c.frame_span);
    get("beta_alpha", c.beta_alpha);
    get("beta_beta", c.beta_beta);
    get("render_steps", c.render_steps);
    get("render_resolution", c.render_resolution);
    get("r1_interval", c.r1_interval);
    get("density_perturbation", c.density_perturbation);
    get("density_points", c.density_points);
    get("seed", c.seed);
    get("log_interval", c.log_interval);
    get("checkpoint_interval", c.checkpoint_interval);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config value: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      auto j = nlohmann::json::parse(text);
      if (!j.is_object()) throw ConfigError(path.string() + ": top level must be an object");
      return j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  nlohmann::json j = nlohmann::json::object();
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      j[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": bad value for " + key);
    }
  }
  return j;
}

TrainConfig TrainConfig::from_file(const fs::path& path) { return from_json(read_config_file(path)); }

TrainConfig TrainConfig::voxceleb() { return TrainConfig{}; }

TrainConfig TrainConfig::celebv_hq() {
  TrainConfig c;
  c.lambda_reg = 0.05;
  c.lambda_r1 = 4.0;
  return c;
}

TrainConfig TrainConfig::talking_head() {
  TrainConfig c;
  c.lambda_reg = 0.5;
  c.lambda_r1 = 2.0;
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "voxceleb") return voxceleb();
  if (name == "celebv-hq") return celebv_hq();
  if (name == "talkinghead-1kh") return talking_head();
  throw ConfigError("unknown preset '" + name + "' (voxceleb, celebv-hq, talkinghead-1kh)");
}

TimestepPair sample_timestep_pair(int clip_length, int frame_span, double alpha, double beta,
                                  std::mt19937_64& rng) {
  if (frame_span < 2) throw ParameterError("frame_span must be at least 2");
  if (clip_length < frame_span) {
    throw DataError("clip of " + std::to_string(clip_length) + " frames is shorter than span " +
                    std::to_string(frame_span));
  }
  std::gamma_distribution<double> ga(alpha, 1.0), gb(beta, 1.0);
  const double x = ga(rng), y = gb(rng);
  const double u = x + y > 0 ? x / (x + y) : 0.0;
  int gap = 1 + static_cast<int>(std::floor(u * (frame_span - 1)));
  gap = std::clamp(gap, 1, frame_span - 1);

  const int window = std::uniform_int_distribution<int>(0, clip_length - frame_span)(rng);
  const int offset = std::uniform_int_distribution<int>(0, frame_span - 1 - gap)(rng);
  TimestepPair p;
  p.gap = gap;
  p.index_i = window + offset;
  p.index_j = window + offset + gap;
  p.t_i = static_cast<double>(offset) / (frame_span - 1);
  p.t_j = static_cast<double>(offset + gap) / (frame_span - 1);
  return p;
}

AdversarialLosses nonsaturating_losses(const torch::Tensor& real_logit,
                                       const torch::Tensor& fake_logit) {
  namespace F = torch::nn::functional;
  return {(F::softplus(-real_logit) + F::softplus(fake_logit)).mean(),
          F::softplus(-fake_logit).mean()};
}

torch::Tensor r1_penalty(const LogitFunction& logits, const std::vector<torch::Tensor>& inputs) {
  auto out = logits(inputs);
  auto grads = torch::autograd::grad({out.sum()}, inputs, {}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true);
  torch::Tensor total;
  for (size_t k = 0; k < grads.size(); ++k) {
    if (!grads[k].defined()) continue;
    auto sq = grads[k].square().flatten(1).sum(1);
    total = total.defined() ? total + sq : sq;
  }
  if (!total.defined()) return torch::zeros({}, inputs.front().options());
  return 0.5 * total.mean();
}

torch::Tensor density_regularization(const TriPlane& triplane, Decoder& decoder,
                                     torch::Generator gen, int n_points, double perturbation) {
  if (n_points < 1) throw ParameterError("density regularization needs at least one point");
  const auto opts = triplane.planes.options().requires_grad(false);
  const int64_t b = triplane.planes.size(0);
  auto points = (torch::rand({b, n_points, 3}, gen, opts) * 2.0 - 1.0) * triplane.bounds;
  auto twins = points + torch::randn({b, n_points, 3}, gen, opts) * perturbation;
  auto both = torch::cat({points, twins}, 1);
  auto density = decoder->forward(sample_triplane(triplane, both)).density;
  auto d = density.reshape({b, 2, n_points});
  return (d.select(1, 0) - d.select(1, 1)).abs().mean();
}

bool LossReport::finite() const {
  for (double v : {img_g, vid_g, sigma, img_d, vid_d, r1, real_logit_img, fake_logit_img,
                   real_logit_vid, fake_logit_vid}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string LossReport::csv_header() {
  return "iteration,L_img_G,L_vid_G,L_sigma,L_img_D,L_vid_D,L_R1,real_logit_img,fake_logit_img,"
         "real_logit_vid,fake_logit_vid,wall_time_s";
}

std::string LossReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(9) << iteration << ',' << img_g << ',' << vid_g << ',' << sigma << ','
     << img_d << ',' << vid_d << ',' << r1 << ',' << real_logit_img << ',' << fake_logit_img
     << ',' << real_logit_vid << ',' << fake_logit_vid << ',' << wall_time_s;
  return os.str();
}

PairCameras training_cameras(CameraMode mode, std::span<const CameraPose> poses_i,
                             std::span<const CameraPose> poses_j) {
  PairCameras c;
  c.cond_i.assign(poses_i.begin(), poses_i.end());
  c.render_i = c.cond_i;
  switch (mode) {
    case CameraMode::All:
      c.cond_j = c.cond_i;
      c.render_j = c.cond_i;
      break;
    case CameraMode::Map:
      c.cond_j = c.cond_i;
      c.render_j.assign(poses_j.begin(), poses_j.end());
      break;
    case CameraMode::Non:
    case CameraMode::MapT:
      c.cond_j.assign(poses_j.begin(), poses_j.end());
      c.render_j = c.cond_j;
      break;
  }
  return c;
}

FakePair generate_fake_pair(Generator& generator, const torch::Tensor& z_a,
                            const torch::Tensor& z_m, const torch::Tensor& t_i,
                            const torch::Tensor& t_j, std::span<const CameraPose> poses_i,
                            std::span<const CameraPose> poses_j, const RenderSettings& settings) {
  const int64_t b = z_a.size(0);
  if (static_cast<int64_t>(poses_i.size()) != b || static_cast<int64_t>(poses_j.size()) != b) {
    throw ParameterError("fake pair needs one pose per batch entry for each frame");
  }
  const auto cams = training_cameras(generator->config().camera_mode, poses_i, poses_j);
  std::vector<CameraPose> cond = cams.cond_i, render = cams.render_i;
  cond.insert(cond.end(), cams.cond_j.begin(), cams.cond_j.end());
  render.insert(render.end(), cams.render_j.begin(), cams.render_j.end());

  // Both frames go through one batched pass with shared latents.
  auto out = generator->generate_frame(torch::cat({z_a, z_a}), torch::cat({z_m, z_m}),
                                       torch::cat({t_i, t_j}), render, cond, settings);
  auto half = [b](const FrameOutput& f, int64_t start) {
    FrameOutput h;
    h.frame = f.frame.narrow(0, start, b);
    h.raw.rgb = f.raw.rgb.narrow(0, start, b);
    if (f.raw.features.defined()) h.raw.features = f.raw.features.narrow(0, start, b);
    h.raw.depth = f.raw.depth.narrow(0, start, b);
    h.raw.opacity = f.raw.opacity.narrow(0, start, b);
    h.w_plus = f.w_plus.narrow(0, start, b);
    h.triplane = TriPlane{f.triplane.planes.narrow(0, start, b), f.triplane.bounds};
    return h;
  };
  FakePair pair{half(out, 0), half(out, b), cams.render_i, cams.render_j};
  return pair;
}

torch::Tensor real_raw_frames(const torch::Tensor& frames, int raw_resolution) {
  if (frames.size(-1) == raw_resolution && frames.size(-2) == raw_resolution) return frames;
  namespace F = torch::nn::functional;
  return F::interpolate(frames, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{raw_resolution, raw_resolution})
                                    .mode(torch::kBilinear)
                                    .align_corners(false)
                                    .antialias(true));
}

namespace {

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, double lr, double b1, double b2) {
  return torch::optim::Adam(std::move(params),
                            torch::optim::AdamOptions(lr).betas({b1, b2}).eps(1e-8));
}

void set_requires_grad(torch::nn::Module& module, bool flag) {
  for (auto& p : module.parameters()) p.requires_grad_(flag);
}

torch::Tensor stack_pose_tensor(std::span<const CameraPose> poses, torch::ScalarType dtype) {
  return pose_tensor(poses).to(dtype);
}

void check_finite(const torch::Tensor& loss, const std::string& name, int iteration) {
  if (!std::isfinite(loss.item<double>())) {
    throw NumericalError("non-finite " + name + " at iteration " + std::to_string(iteration));
  }
}

}  // namespace

Trainer::Trainer(Generator generator, ImageDiscriminator image_disc,
                 VideoDiscriminator video_disc, TrainConfig config,
                 const InMemoryDataset& dataset)
    : generator_(std::move(generator)),
      image_disc_(std::move(image_disc)),
      video_disc_(std::move(video_disc)),
      config_(config),
      dataset_(dataset),
      opt_g_(make_adam(generator_->parameters(), config.lr_generator, config.adam_beta1,
                       config.adam_beta2)),
      opt_d_(make_adam(
          [&] {
            auto p = image_disc_->parameters();
            auto v = video_disc_->parameters();
            p.insert(p.end(), v.begin(), v.end());
            return p;
          }(),
          config.lr_discriminator, config.adam_beta1, config.adam_beta2)),
      rng_(config.seed),
      torch_gen_(at::detail::createCPUGenerator(config.seed)),
      start_(std::chrono::steady_clock::now()) {
  config_.validate();
  const auto& g = generator_->config();
  if (g.base_resolution != config_.render_resolution) {
    throw ConfigError("render_resolution " + std::to_string(config_.render_resolution) +
                      " does not match the generator's raw resolution " +
                      std::to_string(g.base_resolution));
  }
  if (image_disc_->config.resolution != g.final_resolution) {
    throw ConfigError("image discriminator resolution does not match generator output");
  }
  for (size_t i = 0; i < dataset_.size(); ++i) {
    if (!dataset_.records()[i].trainable(config_.frame_span)) {
      throw DataError("clip " + dataset_.records()[i].clip_id + " has fewer than " +
                      std::to_string(config_.frame_span) + " frames");
    }
  }
}

RenderSettings Trainer::next_settings() {
  RenderSettings s;
  s.steps = config_.render_steps;
  s.stratified = true;
  s.seed = rng_();
  return s;
}

RealBatch Trainer::sample_real_batch() {
  const int b = config_.batch_size;
  const int res = generator_->config().final_resolution;
  std::uniform_int_distribution<size_t> pick(0, dataset_.size() - 1);
  std::vector<torch::Tensor> fi, fj;
  std::vector<double> ti, tj;
  RealBatch batch;
  for (int k = 0; k < b; ++k) {
    const size_t c = pick(rng_);
    const auto& clip = dataset_.clip(c);
    const auto pair = sample_timestep_pair(static_cast<int>(clip.frames.size(0)),
                                           config_.frame_span, config_.beta_alpha,
                                           config_.beta_beta, rng_);
    fi.push_back(clip.frames[pair.index_i]);
    fj.push_back(clip.frames[pair.index_j]);
    batch.poses_i.push_back(clip.poses[pair.index_i]);
    batch.poses_j.push_back(clip.poses[pair.index_j]);
    ti.push_back(pair.t_i);
    tj.push_back(pair.t_j);
  }
  const auto dtype = generator_->dtype();
  batch.frames_i = real_raw_frames(torch::stack(fi), res).to(dtype);
  batch.frames_j = real_raw_frames(torch::stack(fj), res).to(dtype);
  batch.t_i = torch::tensor(ti, torch::kFloat64).to(dtype);
  batch.t_j = torch::tensor(tj, torch::kFloat64).to(dtype);
  return batch;
}

LossReport Trainer::discriminator_step(LossReport report) {
  const auto dtype = generator_->dtype();
  const int raw_res = generator_->config().base_resolution;
  auto real = sample_real_batch();
  const int64_t b = config_.batch_size;

  FakePair fake;
  {
    torch::NoGradGuard no_grad;
    auto z_a = generator_->sample_appearance(b, torch_gen_);
    auto z_m = generator_->sample_motion(b, torch_gen_);
    fake = generate_fake_pair(generator_, z_a, z_m, real.t_i, real.t_j, real.poses_i,
                              real.poses_j, next_settings());
  }
  set_requires_grad(*image_disc_, true);
  set_requires_grad(*video_disc_, true);
  opt_d_.zero_grad();

  const bool apply_r1 = iteration_ % config_.r1_interval == 0 && config_.lambda_r1 > 0;
  auto real_hi = torch::cat({real.frames_i, real.frames_j}).detach();
  auto real_raw = real_raw_frames(real_hi, raw_res).detach();
  auto real_fi = real.frames_i.detach().clone();
  auto real_fj = real.frames_j.detach().clone();
  if (apply_r1) {
    real_hi.requires_grad_(true);
    real_raw.requires_grad_(true);
    real_fi.requires_grad_(true);
    real_fj.requires_grad_(true);
  }
  std::vector<CameraPose> real_poses = real.poses_i;
  real_poses.insert(real_poses.end(), real.poses_j.begin(), real.poses_j.end());
  auto real_pose_t = stack_pose_tensor(real_poses, dtype);
  auto pose_i_t = stack_pose_tensor(real.poses_i, dtype);
  auto pose_j_t = stack_pose_tensor(real.poses_j, dtype);
  auto dt = real.t_j - real.t_i;

  auto img_logit = [&](const std::vector<torch::Tensor>& x) {
    return image_disc_->forward(x[0], x[1], real_pose_t);
  };
  auto vid_logit = [&](const std::vector<torch::Tensor>& x) {
    return video_disc_->forward(x[0], x[1], dt, pose_i_t, pose_j_t);
  };
  auto real_img = img_logit({real_hi, real_raw});
  auto real_vid = vid_logit({real_fi, real_fj});

  std::vector<CameraPose> fake_poses = fake.render_i;
  fake_poses.insert(fake_poses.end(), fake.render_j.begin(), fake.render_j.end());
  auto fake_img = image_disc_->forward(torch::cat({fake.frame_i.frame, fake.frame_j.frame}),
                                       torch::cat({fake.frame_i.raw.rgb, fake.frame_j.raw.rgb}),
                                       stack_pose_tensor(fake_poses, dtype));
  auto fake_vid = video_disc_->forward(fake.frame_i.frame, fake.frame_j.frame, dt,
                                       stack_pose_tensor(fake.render_i, dtype),
                                       stack_pose_tensor(fake.render_j, dtype));

  auto img = nonsaturating_losses(real_img, fake_img);
  auto vid = nonsaturating_losses(real_vid, fake_vid);
  auto total = config_.lambda_img * img.discriminator + config_.lambda_vid * vid.discriminator;
  if (apply_r1) {
    auto r1 = r1_penalty(img_logit, {real_hi, real_raw}) + r1_penalty(vid_logit, {real_fi, real_fj});
    check_finite(r1, "L_R1", iteration_);
    last_r1_ = r1.item<double>();
    // Lazy regularization: scale by the interval so the expected weight matches.
    total = total + config_.lambda_r1 * config_.r1_interval * r1;
  }
  check_finite(img.discriminator, "L_img_D", iteration_);
  check_finite(vid.discriminator, "L_vid_D", iteration_);
  total.backward();
  opt_d_.step();

  report.img_d = img.discriminator.item<double>();
  report.vid_d = vid.discriminator.item<double>();
  report.r1 = last_r1_;
  report.r1_applied = apply_r1;
  report.real_logit_img = real_img.mean().item<double>();
  report.fake_logit_img = fake_img.mean().item<double>();
  report.real_logit_vid = real_vid.mean().item<double>();
  report.fake_logit_vid = fake_vid.mean().item<double>();
  return report;
}

LossReport Trainer::generator_step(LossReport report) {
  const auto dtype = generator_->dtype();
  auto real = sample_real_batch();
  const int64_t b = config_.batch_size;

  set_requires_grad(*image_disc_, false);
  set_requires_grad(*video_disc_, false);
  opt_g_.zero_grad();
  auto z_a = generator_->sample_appearance(b, torch_gen_);
  auto z_m = generator_->sample_motion(b, torch_gen_);
  auto fake = generate_fake_pair(generator_, z_a, z_m, real.t_i, real.t_j, real.poses_i,
                                 real.poses_j, next_settings());
  std::vector<CameraPose> fake_poses = fake.render_i;
  fake_poses.insert(fake_poses.end(), fake.render_j.begin(), fake.render_j.end());
  auto fake_img = image_disc_->forward(torch::cat({fake.frame_i.frame, fake.frame_j.frame}),
                                       torch::cat({fake.frame_i.raw.rgb, fake.frame_j.raw.rgb}),
                                       stack_pose_tensor(fake_poses, dtype));
  auto fake_vid = video_disc_->forward(fake.frame_i.frame, fake.frame_j.frame,
                                       real.t_j - real.t_i,
                                       stack_pose_tensor(fake.render_i, dtype),
                                       stack_pose_tensor(fake.render_j, dtype));
  namespace F = torch::nn::functional;
  auto img_g = F::softplus(-fake_img).mean();
  auto vid_g = F::softplus(-fake_vid).mean();
  const auto& gcfg = generator_->config();
  TriPlane both{torch::cat({fake.frame_i.triplane.planes, fake.frame_j.triplane.planes}),
                gcfg.bounds};
  auto sigma = density_regularization(both, generator_->decoder, torch_gen_,
                                      config_.density_points,
                                      config_.density_perturbation * gcfg.bounds);
  check_finite(img_g, "L_img_G", iteration_);
  check_finite(vid_g, "L_vid_G", iteration_);
  check_finite(sigma, "L_sigma", iteration_);
  auto total = config_.lambda_img * img_g + config_.lambda_vid * vid_g + config_.lambda_reg * sigma;
  total.backward();
  opt_g_.step();
  set_requires_grad(*image_disc_, true);
  set_requires_grad(*video_disc_, true);

  report.img_g = img_g.item<double>();
  report.vid_g = vid_g.item<double>();
  report.sigma = sigma.item<double>();
  return report;
}

LossReport Trainer::step() {
  LossReport report;
  report.iteration = iteration_;
  generator_->train();
  image_disc_->train();
  video_disc_->train();
  report = discriminator_step(report);
  report = generator_step(report);
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  if (!report.finite()) {
    throw NumericalError("non-finite loss report at iteration " + std::to_string(iteration_));
  }
  ++iteration_;
  return report;
}

void Trainer::run(const std::optional<fs::path>& log_csv,
                  const std::function<void(const LossReport&)>& on_step,
                  const std::optional<fs::path>& checkpoint_dir) {
  std::ofstream log;
  if (log_csv) {
    const bool fresh = !fs::exists(*log_csv) || fs::file_size(*log_csv) == 0;
    log.open(*log_csv, std::ios::app);
    if (!log) throw DataError("cannot open loss log " + log_csv->string());
    if (fresh) log << LossReport::csv_header() << '\n';
  }
  while (iteration_ < config_.iterations) {
    const auto report = step();
    if (log) log << report.csv_row() << '\n' << std::flush;
    if (on_step) on_step(report);
    if (checkpoint_dir && config_.checkpoint_interval > 0 &&
        iteration_ % config_.checkpoint_interval == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.pt", iteration_);
      save_training_checkpoint(*checkpoint_dir / name, *this);
    }
  }
}

}  // namespace pv3d

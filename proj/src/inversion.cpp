#include "pv3d/inversion.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace pv3d {

namespace fs = std::filesystem;

namespace {

// Disables parameter gradients for the lifetime of the guard.
class FrozenGenerator {
 public:
  explicit FrozenGenerator(Generator& g) : g_(g) {
    for (auto& p : g_->parameters()) {
      flags_.push_back(p.requires_grad());
      p.requires_grad_(false);
    }
    was_training_ = g_->is_training();
    g_->eval();
  }
  ~FrozenGenerator() {
    auto params = g_->parameters();
    for (size_t i = 0; i < params.size(); ++i) params[i].requires_grad_(flags_[i]);
    g_->train(was_training_);
  }

 private:
  Generator& g_;
  std::vector<bool> flags_;
  bool was_training_ = true;
};

void check_target(const Generator& g, const torch::Tensor& target) {
  const int res = g->config().final_resolution;
  if (target.dim() != 3 || target.size(0) != 3 || target.size(1) != res || target.size(2) != res) {
    throw ParameterError("inversion target must be [3, " + std::to_string(res) + ", " +
                         std::to_string(res) + "]");
  }
}

// Optimizer loop over one tensor with divergence and NaN checks.
std::vector<double> optimize(torch::Tensor& variable, double lr, int steps,
                             const std::function<torch::Tensor()>& loss_fn,
                             const InversionConfig& config, const std::string& what) {
  std::vector<double> trace;
  if (steps <= 0) return trace;
  variable.requires_grad_(true);
  double initial = 0.0;
  int above = 0;
  auto record = [&](double value, int step) {
    if (!std::isfinite(value)) {
      throw NumericalError(what + ": non-finite reconstruction loss at step " + std::to_string(step));
    }
    trace.push_back(value);
    if (step == 0) initial = value;
    above = value > config.divergence_factor * initial ? above + 1 : 0;
    if (above >= config.divergence_patience) {
      throw DivergenceError(what + ": loss above " + std::to_string(config.divergence_factor) +
                                "x initial for " + std::to_string(above) + " steps",
                            trace);
    }
  };
  if (config.optimizer == InversionOptimizer::Lbfgs) {
    torch::optim::LBFGS opt({variable}, torch::optim::LBFGSOptions(lr)
                                            .max_iter(1)
                                            .history_size(config.lbfgs_history)
                                            // Reconstruction losses are ~1e-5 with tiny gradients;
                                            // the stock absolute tolerances stop the solve early.
                                            .tolerance_grad(1e-30)
                                            .tolerance_change(1e-30)
                                            .line_search_fn("strong_wolfe"));
    for (int step = 0; step < steps; ++step) {
      // The first closure call evaluates the loss at the current iterate.
      std::optional<double> value;
      auto closure = [&] {
        opt.zero_grad();
        auto loss = loss_fn();
        if (!value) value = loss.item<double>();
        loss.backward();
        return loss;
      };
      opt.step(closure);
      record(*value, step);
    }
  } else {
    torch::optim::Adam opt({variable}, torch::optim::AdamOptions(lr).betas({0.9, 0.999}));
    for (int step = 0; step < steps; ++step) {
      // Cosine ramp-down over the final quarter of the schedule.
      const double progress = static_cast<double>(step) / steps;
      const double ramp = progress < 0.75
                              ? 1.0
                              : 0.5 * (1.0 + std::cos(std::numbers::pi * (progress - 0.75) / 0.25));
      static_cast<torch::optim::AdamOptions&>(opt.param_groups()[0].options()).lr(lr * ramp);
      opt.zero_grad();
      auto loss = loss_fn();
      record(loss.item<double>(), step);
      loss.backward();
      opt.step();
    }
  }
  variable.requires_grad_(false);
  return trace;
}

}  // namespace

torch::Tensor mean_w_plus(Generator& generator, const CameraPose& pose, int samples, uint64_t seed) {
  if (samples < 1) throw ParameterError("need at least one sample for the mean code");
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(seed);
  auto z = generator->sample_appearance(samples, gen);
  std::vector<CameraPose> poses(samples, pose);
  auto w = generator->map_appearance(z, pose_tensor(poses));
  return generator->broadcast_w_plus(w.mean(0, true)).detach().clone();
}

torch::Tensor reconstruction_loss(Generator& generator, const torch::Tensor& w_plus,
                                  const torch::Tensor& z_m, double t, const CameraPose& pose,
                                  const torch::Tensor& target, const InversionConfig& config) {
  auto out = generator->render_codes(w_plus, z_m, timesteps(1, t, generator->dtype()),
                                     std::span<const CameraPose>(&pose, 1),
                                     inference_settings(generator));
  auto pred = out.frame[0];
  auto loss = torch::mse_loss(pred, target);
  if (config.extra_term && config.extra_weight != 0.0) {
    loss = loss + config.extra_weight * config.extra_term(pred, target);
  }
  return loss;
}

InversionResult invert_image(Generator& generator, const torch::Tensor& target,
                             const CameraPose& pose, const InversionConfig& config) {
  check_target(generator, target);
  FrozenGenerator frozen(generator);
  const auto tgt = target.to(generator->dtype()).detach();
  auto z_m = torch::zeros({1, generator->config().motion_dim}, generator->options());
  InversionResult result;
  result.w_plus = mean_w_plus(generator, pose, config.init_samples, config.seed);
  auto loss_fn = [&] { return reconstruction_loss(generator, result.w_plus, z_m, 0.0, pose, tgt, config); };
  {
    torch::NoGradGuard g;
    result.initial_loss = loss_fn().item<double>();
  }
  result.losses = optimize(result.w_plus, config.lr, config.steps, loss_fn, config, "image inversion");
  result.w_plus = result.w_plus.detach();
  torch::NoGradGuard g;
  result.final_loss = loss_fn().item<double>();
  return result;
}

InversionResult invert_video(Generator& generator, const VideoClip& video,
                             const InversionConfig& config) {
  const int64_t n = video.size();
  if (n < 1 || video.frames.size(0) != n || static_cast<int64_t>(video.poses.size()) != n) {
    throw ParameterError("video inversion needs frames, poses and timesteps of equal length");
  }
  FrozenGenerator frozen(generator);
  auto gen = at::detail::createCPUGenerator(config.seed + 1);
  std::vector<torch::Tensor> z_init;
  for (int64_t i = 0; i < n; ++i) z_init.push_back(generator->sample_motion(1, gen));

  InversionResult result;
  {
    torch::NoGradGuard g;
    auto w0 = mean_w_plus(generator, video.poses[0], config.init_samples, config.seed);
    for (int64_t i = 0; i < n; ++i) {
      auto tgt = video.frames[i].to(generator->dtype());
      result.frame_initial_losses.push_back(
          reconstruction_loss(generator, w0, z_init[i], video.timesteps[i], video.poses[i], tgt, config)
              .item<double>());
    }
  }
  auto stage1 = invert_image(generator, video.frames[0], video.poses[0], config);
  result.w_plus = stage1.w_plus;
  result.losses = stage1.losses;
  result.initial_loss = stage1.initial_loss;
  result.final_loss = stage1.final_loss;

  for (int64_t i = 0; i < n; ++i) {
    auto tgt = video.frames[i].to(generator->dtype()).detach();
    auto z = z_init[i].clone();
    const double t = video.timesteps[i];
    const auto& pose = video.poses[i];
    auto loss_fn = [&] { return reconstruction_loss(generator, result.w_plus, z, t, pose, tgt, config); };
    // Frame content at t = 0 does not depend on z_m.
    const int steps = t == 0.0 ? 0 : config.motion_steps;
    result.motion_losses.push_back(
        optimize(z, config.motion_lr, steps, loss_fn, config, "motion inversion frame " + std::to_string(i)));
    torch::NoGradGuard g;
    result.frame_final_losses.push_back(loss_fn().item<double>());
    result.z_m_per_frame.push_back(z.detach());
  }
  return result;
}

VideoClip animate(Generator& generator, const torch::Tensor& w_plus, const torch::Tensor& z_m,
                  std::span<const CameraPose> camera_seq, int n_frames) {
  return synthesize_from_codes(generator, w_plus, z_m, camera_seq, n_frames);
}

VideoClip reconstruct_video(Generator& generator, const InversionResult& result,
                            std::span<const CameraPose> poses, std::span<const double> timesteps_in) {
  const size_t n = result.z_m_per_frame.size();
  if (poses.size() != n || timesteps_in.size() != n) {
    throw ParameterError("need one pose and timestep per inverted motion code");
  }
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> frames, raws, depths, opac, codes;
  for (size_t i = 0; i < n; ++i) {
    auto out = generator->render_codes(result.w_plus, result.z_m_per_frame[i],
                                       timesteps(1, timesteps_in[i], generator->dtype()),
                                       poses.subspan(i, 1), inference_settings(generator));
    frames.push_back(out.frame[0]);
    raws.push_back(out.raw.rgb[0]);
    depths.push_back(out.raw.depth[0]);
    opac.push_back(out.raw.opacity[0]);
    codes.push_back(out.w_plus[0]);
  }
  VideoClip clip;
  clip.frames = torch::stack(frames);
  clip.raw_frames = torch::stack(raws);
  clip.depths = torch::stack(depths);
  clip.opacities = torch::stack(opac);
  clip.appearance_codes = torch::stack(codes);
  clip.timesteps.assign(timesteps_in.begin(), timesteps_in.end());
  clip.poses.assign(poses.begin(), poses.end());
  return clip;
}

void save_inversion(const fs::path& dir, const InversionResult& result) {
  fs::create_directories(dir);
  torch::save(result.w_plus, (dir / "w_plus.pt").string());
  if (!result.z_m_per_frame.empty()) {
    torch::save(torch::cat(result.z_m_per_frame), (dir / "z_m.pt").string());
  }
  std::ofstream csv(dir / "losses.csv");
  csv << "stage,frame,step,loss\n";
  csv.precision(9);
  for (size_t s = 0; s < result.losses.size(); ++s) csv << "appearance,0," << s << ',' << result.losses[s] << '\n';
  for (size_t f = 0; f < result.motion_losses.size(); ++f)
    for (size_t s = 0; s < result.motion_losses[f].size(); ++s)
      csv << "motion," << f << ',' << s << ',' << result.motion_losses[f][s] << '\n';
  nlohmann::json meta = {{"initial_loss", result.initial_loss},
                         {"final_loss", result.final_loss},
                         {"frame_initial_losses", result.frame_initial_losses},
                         {"frame_final_losses", result.frame_final_losses},
                         {"frames", result.z_m_per_frame.size()}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

InversionResult load_inversion(const fs::path& dir) {
  if (!fs::exists(dir / "w_plus.pt")) throw DataError("no inversion archive at " + dir.string());
  InversionResult r;
  try {
    torch::load(r.w_plus, (dir / "w_plus.pt").string());
    if (fs::exists(dir / "z_m.pt")) {
      torch::Tensor z;
      torch::load(z, (dir / "z_m.pt").string());
      for (int64_t i = 0; i < z.size(0); ++i) r.z_m_per_frame.push_back(z.narrow(0, i, 1));
    }
  } catch (const c10::Error& e) {
    throw DataError("cannot read inversion archive " + dir.string() + ": " + e.what_without_backtrace());
  }
  if (fs::exists(dir / "meta.json")) {
    std::ifstream in(dir / "meta.json");
    nlohmann::json meta;
    in >> meta;
    r.initial_loss = meta.value("initial_loss", 0.0);
    r.final_loss = meta.value("final_loss", 0.0);
    r.frame_initial_losses = meta.value("frame_initial_losses", std::vector<double>{});
    r.frame_final_losses = meta.value("frame_final_losses", std::vector<double>{});
  }
  return r;
}

}  // namespace pv3d

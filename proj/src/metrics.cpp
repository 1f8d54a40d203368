#include "pv3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pv3d/errors.hpp"
#include "pv3d/inference.hpp"

namespace pv3d {

KdTree::KdTree(const PointCloud& points) : points_(points) {
  std::vector<int> order(points_.rows());
  std::iota(order.begin(), order.end(), 0);
  nodes_.reserve(order.size());
  root_ = build(order, 0, static_cast<int>(order.size()), 0);
}

int KdTree::build(std::vector<int>& order, int begin, int end, int depth) {
  if (begin >= end) return -1;
  const int axis = depth % 3;
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end,
                   [&](int a, int b) { return points_(a, axis) < points_(b, axis); });
  const int index = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{order[mid], axis, -1, -1});
  const int left = build(order, begin, mid, depth + 1);
  const int right = build(order, mid + 1, end, depth + 1);
  nodes_[index].left = left;
  nodes_[index].right = right;
  return index;
}

void KdTree::search(int node, const Eigen::Vector3d& q, double& best) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const Eigen::Vector3d p = points_.row(n.point).transpose();
  best = std::min(best, (p - q).squaredNorm());
  const double diff = q[n.axis] - p[n.axis];
  const int near = diff < 0 ? n.left : n.right;
  const int far = diff < 0 ? n.right : n.left;
  search(near, q, best);
  if (diff * diff < best) search(far, q, best);
}

double KdTree::nearest_squared(const Eigen::Vector3d& query) const {
  double best = std::numeric_limits<double>::infinity();
  search(root_, query, best);
  return best;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ParameterError("median of an empty list");
  const size_t n = values.size();
  const size_t mid = n / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

namespace {

double directed_median(const PointCloud& from, const KdTree& to) {
  std::vector<double> d(from.rows());
  for (Eigen::Index i = 0; i < from.rows(); ++i) d[i] = to.nearest_squared(from.row(i).transpose());
  return median(std::move(d));
}

}  // namespace

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  if (a.rows() == 0 || b.rows() == 0) throw EmptyCloudError("chamfer distance of an empty cloud");
  const KdTree ta(a), tb(b);
  return directed_median(a, tb) + directed_median(b, ta);
}

namespace {

torch::Tensor resize_map(const torch::Tensor& map, int resolution) {
  if (map.size(-1) == resolution && map.size(-2) == resolution) return map.to(torch::kFloat64);
  namespace F = torch::nn::functional;
  auto x = map.to(torch::kFloat64);
  const bool planar = x.dim() == 2;
  if (planar) x = x.unsqueeze(0);
  x = F::interpolate(x.unsqueeze(0), F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{resolution, resolution})
                                         .mode(torch::kBilinear)
                                         .align_corners(false))[0];
  return planar ? x[0] : x;
}

}  // namespace

PointCloud depth_to_pointcloud(const torch::Tensor& depth, const torch::Tensor& opacity,
                               const CameraPose& pose, const PointCloudOptions& options) {
  const int res = options.resolution;
  auto d = resize_map(depth, res).contiguous();
  auto o = resize_map(opacity, res).contiguous();
  auto rays = generate_rays(pose, res, options.near, options.far);
  auto da = d.accessor<double, 2>();
  auto oa = o.accessor<double, 2>();
  auto origins = rays.origins.accessor<double, 2>();
  auto dirs = rays.directions.accessor<double, 2>();
  const double scale = options.normalize && options.render_steps > 0
                           ? (options.far - options.near) / options.render_steps
                           : 1.0;
  std::vector<Eigen::Vector3d> pts;
  for (int v = 0; v < res; ++v) {
    for (int u = 0; u < res; ++u) {
      if (!(oa[v][u] >= options.opacity_threshold)) continue;
      const int64_t i = static_cast<int64_t>(v) * res + u;
      Eigen::Vector3d p;
      for (int c = 0; c < 3; ++c) p[c] = (origins[i][c] + da[v][u] * dirs[i][c]) / scale;
      pts.push_back(p);
    }
  }
  if (pts.empty()) throw EmptyCloudError("no pixel reaches the opacity threshold");
  PointCloud cloud(pts.size(), 3);
  for (size_t i = 0; i < pts.size(); ++i) cloud.row(i) = pts[i].transpose();
  return cloud;
}

namespace {

// World point -> continuous pixel coordinates; nullopt behind the camera.
std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& world, const CameraPose& pose,
                                       int resolution) {
  const Eigen::Vector3d cam = pose.rotation().transpose() * (world - pose.center());
  if (cam.z() <= 0.0) return std::nullopt;
  const Eigen::Vector3d p = pose.intrinsic * (cam / cam.z());
  return Eigen::Vector2d(p.x() * resolution, p.y() * resolution);
}

Eigen::Vector3d lift(double px, double py, double depth, const CameraPose& pose, int resolution) {
  const Eigen::Vector3d pixel(px / resolution, py / resolution, 1.0);
  const Eigen::Vector3d dir = (pose.rotation() * (pose.intrinsic.inverse() * pixel)).normalized();
  return pose.center() + depth * dir;
}

}  // namespace

Eigen::Vector2d reproject_pixel(double px, double py, double depth, const CameraPose& pose_src,
                                const CameraPose& pose_dst, int resolution) {
  auto p = project(lift(px, py, depth, pose_src, resolution), pose_dst, resolution);
  if (!p) throw ParameterError("point lies behind the destination camera");
  return *p;
}

WarpResult warp_image(const torch::Tensor& image, const torch::Tensor& depth,
                      const CameraPose& pose_src, const CameraPose& pose_dst,
                      const std::optional<torch::Tensor>& opacity) {
  if (image.dim() != 3 || depth.dim() != 2) throw ParameterError("warp expects [C,H,W] and [H,W]");
  const int64_t ch = image.size(0);
  const int h = static_cast<int>(image.size(1));
  const int w = static_cast<int>(image.size(2));
  if (h != w || depth.size(0) != h || depth.size(1) != w) {
    throw ParameterError("warp expects square images with matching depth");
  }
  auto src = image.to(torch::kFloat64).contiguous();
  auto dep = depth.to(torch::kFloat64).contiguous();
  torch::Tensor opa;
  const double* opa_data = nullptr;
  if (opacity) {
    opa = opacity->to(torch::kFloat64).contiguous();
    opa_data = opa.data_ptr<double>();
  }
  auto sa = src.accessor<double, 3>();
  auto da = dep.accessor<double, 2>();

  WarpResult out;
  out.image = torch::zeros({ch, h, w}, torch::kFloat64);
  out.mask = torch::zeros({h, w}, torch::kBool);
  auto ia = out.image.accessor<double, 3>();
  auto ma = out.mask.accessor<bool, 2>();
  std::vector<double> zbuf(static_cast<size_t>(h) * w, std::numeric_limits<double>::infinity());

  const Eigen::Matrix3d k_inv = pose_src.intrinsic.inverse();
  const Eigen::Matrix3d rot = pose_src.rotation();
  const Eigen::Vector3d center = pose_src.center();
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double d = da[v][u];
      if (!std::isfinite(d) || d <= 0.0) continue;
      if (opa_data && !(opa_data[static_cast<size_t>(v) * w + u] >= 0.5)) continue;
      const Eigen::Vector3d pixel((u + 0.5) / w, (v + 0.5) / h, 1.0);
      const Eigen::Vector3d world = center + d * (rot * (k_inv * pixel)).normalized();
      const auto p = project(world, pose_dst, w);
      if (!p) continue;
      const double fx = std::floor(p->x()), fy = std::floor(p->y());
      if (fx < 0 || fy < 0 || fx >= w || fy >= h) continue;
      const int x = static_cast<int>(fx), y = static_cast<int>(fy);
      double& z = zbuf[static_cast<size_t>(y) * w + x];
      if (d >= z) continue;
      z = d;
      ma[y][x] = true;
      for (int64_t c = 0; c < ch; ++c) ia[c][y][x] = sa[c][v][u];
    }
  }
  out.visible = out.mask.sum().item<int64_t>();
  return out;
}

double warping_error(const torch::Tensor& frame0, const torch::Tensor& frame1,
                     const torch::Tensor& depth1, const CameraPose& pose0,
                     const CameraPose& pose1, const std::optional<torch::Tensor>& opacity1) {
  auto i0 = resize_map(frame0, kWarpResolution);
  auto i1 = resize_map(frame1, kWarpResolution);
  auto d1 = resize_map(depth1, kWarpResolution);
  std::optional<torch::Tensor> o1;
  if (opacity1) o1 = resize_map(*opacity1, kWarpResolution);
  auto warped = warp_image(i1, d1, pose1, pose0, o1);
  if (warped.visible == 0) throw UndefinedPairError("no pixel is visible after warping");
  auto diff = (i0 - warped.image).abs() * 255.0;
  auto masked = diff * warped.mask.unsqueeze(0).to(torch::kFloat64);
  return masked.sum().item<double>() / (static_cast<double>(warped.visible) * i0.size(0));
}

double frechet_distance(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b,
                        double epsilon) {
  if (feats_a.rows() < 2 || feats_b.rows() < 2) {
    throw ParameterError("Frechet distance needs at least two samples per set");
  }
  if (feats_a.cols() != feats_b.cols()) throw ParameterError("feature dimensions differ");
  const Eigen::Index dim = feats_a.cols();
  auto stats = [dim, epsilon](const Eigen::MatrixXd& x) {
    const Eigen::VectorXd mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    if (x.rows() <= dim) cov += epsilon * Eigen::MatrixXd::Identity(dim, dim);
    return std::make_pair(mu, cov);
  };
  const auto [mu_a, cov_a] = stats(feats_a);
  const auto [mu_b, cov_b] = stats(feats_b);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd sqrt_vals = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * sqrt_vals.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd product = sqrt_a * cov_b * sqrt_a;
  product = 0.5 * (product + product.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(product, Eigen::EigenvaluesOnly);
  const double trace_sqrt = ep.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value =
      (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
  return std::max(value, 0.0);
}

std::array<double, 2> sample_eval_timesteps(std::mt19937_64& rng, int max_frames) {
  if (max_frames < 2) throw ParameterError("need at least two frames to draw two timesteps");
  std::uniform_int_distribution<int> pick(0, max_frames - 1);
  int a = pick(rng), b = pick(rng);
  while (b == a) b = pick(rng);
  if (a > b) std::swap(a, b);
  return {timestep_for_frame(a, max_frames), timestep_for_frame(b, max_frames)};
}

namespace {

// Sum of inner products over all view pairs plus the pair count.
std::pair<double, int> score_embeddings(const std::vector<Eigen::VectorXd>& embeddings) {
  double sum = 0.0;
  int pairs = 0;
  for (size_t i = 0; i < embeddings.size(); ++i) {
    for (size_t j = i + 1; j < embeddings.size(); ++j) {
      sum += embeddings[i].dot(embeddings[j]);
      ++pairs;
    }
  }
  return {sum, pairs};
}

Eigen::VectorXd normalized(Eigen::VectorXd v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw DataError("extractor returned a zero or non-finite vector");
  return v / n;
}

}  // namespace

IdentityResult identity_consistency(const ViewRenderer& render, EmbeddingExtractor& extractor,
                                    std::span<const double> yaws, int n_videos,
                                    std::mt19937_64& rng, int max_frames) {
  IdentityResult result;
  double sum = 0.0;
  for (int v = 0; v < n_videos; ++v) {
    const auto ts = sample_eval_timesteps(rng, max_frames);
    std::vector<Eigen::VectorXd> embeddings;
    try {
      for (double t : ts)
        for (double y : yaws) embeddings.push_back(normalized(extractor.embed(render(v, t, y))));
    } catch (const Error&) {
      ++result.skipped_videos;
      continue;
    }
    const auto [s, p] = score_embeddings(embeddings);
    sum += s;
    result.pairs += p;
  }
  result.value = result.pairs > 0 ? sum / result.pairs : 0.0;
  return result;
}

nlohmann::json MetricsReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"fvd", opt(fvd)},         {"id", opt(id)},
          {"cd", opt(cd)},           {"we", opt(we)},
          {"n_videos", n_videos},    {"skipped_pairs", skipped_pairs},
          {"skipped_videos", skipped_videos}};
}

std::vector<std::pair<int, int>> front_side_pairs(int n_timesteps, int n_yaws) {
  std::vector<std::pair<int, int>> pairs;
  for (int ta = 0; ta < n_timesteps; ++ta)
    for (int tb = 0; tb < n_timesteps; ++tb)
      for (int y = 1; y < n_yaws; ++y) pairs.emplace_back(ta * n_yaws, tb * n_yaws + y);
  return pairs;
}

std::vector<EvalView> render_eval_views(Generator& generator, const torch::Tensor& z_a,
                                        const torch::Tensor& z_m, std::span<const double> ts,
                                        std::span<const double> yaws) {
  std::vector<EvalView> views;
  for (double t : ts) {
    auto clip = freeview_render(generator, z_a, z_m, t, yaws);
    for (size_t k = 0; k < yaws.size(); ++k) {
      views.push_back(EvalView{t, yaws[k], clip.poses[k], clip.frames[k], clip.depths[k],
                               clip.opacities[k]});
    }
  }
  return views;
}

MetricsReport evaluate_model(Generator& generator, const EvalConfig& config,
                             EmbeddingExtractor* id_extractor, ClipExtractor* clip_extractor,
                             const InMemoryDataset* real) {
  if (config.n_videos < 1) throw ParameterError("evaluation needs at least one video");
  if (config.yaws.size() < 2) throw ParameterError("evaluation needs a front and a side yaw");
  torch::NoGradGuard no_grad;
  const auto& gcfg = generator->config();
  auto torch_gen = at::detail::createCPUGenerator(config.seed);
  std::mt19937_64 rng(config.seed);
  PointCloudOptions pc;
  pc.render_steps = gcfg.render_steps;
  pc.near = gcfg.near;
  pc.far = gcfg.far;

  MetricsReport report;
  double id_sum = 0.0, cd_sum = 0.0, we_sum = 0.0;
  int id_pairs = 0, cd_pairs = 0, we_pairs = 0;
  const auto pairs = front_side_pairs(2, static_cast<int>(config.yaws.size()));
  for (int v = 0; v < config.n_videos; ++v) {
    auto z_a = generator->sample_appearance(1, torch_gen);
    auto z_m = generator->sample_motion(1, torch_gen);
    const auto ts = sample_eval_timesteps(rng, config.max_frames);
    const auto views = render_eval_views(generator, z_a, z_m, ts, config.yaws);
    ++report.n_videos;

    if (id_extractor) {
      try {
        std::vector<Eigen::VectorXd> embeddings;
        for (const auto& view : views) embeddings.push_back(normalized(id_extractor->embed(view.frame)));
        const auto [s, p] = score_embeddings(embeddings);
        id_sum += s;
        id_pairs += p;
      } catch (const Error&) {
        ++report.skipped_videos;
      }
    }
    std::vector<std::optional<PointCloud>> clouds(views.size());
    for (size_t k = 0; k < views.size(); ++k) {
      try {
        clouds[k] = depth_to_pointcloud(views[k].depth, views[k].opacity, views[k].pose, pc);
      } catch (const EmptyCloudError&) {
      }
    }
    for (const auto& [front, side] : pairs) {
      if (clouds[front] && clouds[side]) {
        cd_sum += chamfer_distance(*clouds[front], *clouds[side]);
        ++cd_pairs;
      } else {
        ++report.skipped_pairs;
      }
      try {
        we_sum += warping_error(views[front].frame, views[side].frame, views[side].depth,
                                views[front].pose, views[side].pose, views[side].opacity);
        ++we_pairs;
      } catch (const UndefinedPairError&) {
        ++report.skipped_pairs;
      }
    }
  }
  if (id_extractor && id_pairs > 0) report.id = id_sum / id_pairs;
  if (cd_pairs > 0) report.cd = cd_sum / cd_pairs;
  if (we_pairs > 0) report.we = we_sum / we_pairs;

  if (clip_extractor && real && config.n_fvd >= 2) {
    Eigen::MatrixXd fake_feats, real_feats;
    for (int k = 0; k < config.n_fvd; ++k) {
      const auto& clip = real->clip(static_cast<size_t>(k) % real->size());
      const int n = std::min<int>(config.max_frames, static_cast<int>(clip.frames.size(0)));
      std::vector<CameraPose> cams(clip.poses.begin(), clip.poses.begin() + n);
      auto z_a = generator->sample_appearance(1, torch_gen);
      auto z_m = generator->sample_motion(1, torch_gen);
      auto video = synthesize_video(generator, z_a, z_m, cams, n, CameraMode::MapT);
      Eigen::VectorXd f = clip_extractor->embed_clip(video.frames);
      Eigen::VectorXd r = clip_extractor->embed_clip(clip.frames.narrow(0, 0, n));
      if (k == 0) {
        fake_feats.resize(config.n_fvd, f.size());
        real_feats.resize(config.n_fvd, r.size());
      }
      fake_feats.row(k) = f.transpose();
      real_feats.row(k) = r.transpose();
    }
    report.fvd = frechet_distance(real_feats, fake_feats);
  }
  return report;
}

}  // namespace pv3d

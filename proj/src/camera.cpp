#include "pv3d/camera.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "pv3d/errors.hpp"

namespace pv3d {

namespace {

constexpr double kOrthonormalTolerance = 1e-5;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void CameraPose::validate() const {
  if (!extrinsic.allFinite() || !intrinsic.allFinite()) {
    throw ValidationError("camera pose contains non-finite values");
  }
  if (extrinsic(3, 0) != 0.0 || extrinsic(3, 1) != 0.0 || extrinsic(3, 2) != 0.0 ||
      extrinsic(3, 3) != 1.0) {
    throw ValidationError("extrinsic bottom row must be (0, 0, 0, 1)");
  }
  const Eigen::Matrix3d r = rotation();
  const double err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > kOrthonormalTolerance) {
    throw ValidationError("extrinsic rotation is not orthonormal (error " + std::to_string(err) +
                          ")");
  }
  if (intrinsic(1, 0) != 0.0 || intrinsic(2, 0) != 0.0 || intrinsic(2, 1) != 0.0) {
    throw ValidationError("intrinsic matrix must be upper-triangular");
  }
  if (!(intrinsic(0, 0) > 0.0) || !(intrinsic(1, 1) > 0.0)) {
    throw ValidationError("intrinsic focal entries must be positive");
  }
}

CameraPose parse_pose(std::span<const double> flat) {
  if (flat.size() != kPoseDims) {
    throw FormatError("camera pose needs " + std::to_string(kPoseDims) + " values, got " +
                      std::to_string(flat.size()));
  }
  for (double v : flat) {
    if (!std::isfinite(v)) throw FormatError("camera pose contains a non-finite value");
  }
  CameraPose pose;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose.extrinsic(r, c) = flat[r * 4 + c];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) pose.intrinsic(r, c) = flat[16 + r * 3 + c];
  pose.validate();
  return pose;
}

std::array<double, kPoseDims> serialize_pose(const CameraPose& pose) {
  std::array<double, kPoseDims> flat{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) flat[r * 4 + c] = pose.extrinsic(r, c);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) flat[16 + r * 3 + c] = pose.intrinsic(r, c);
  return flat;
}

torch::Tensor pose_tensor(std::span<const CameraPose> poses) {
  auto out = torch::empty({static_cast<int64_t>(poses.size()), kPoseDims}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (size_t i = 0; i < poses.size(); ++i) {
    const auto flat = serialize_pose(poses[i]);
    for (int k = 0; k < kPoseDims; ++k) acc[i][k] = flat[k];
  }
  return out;
}

torch::Tensor pose_tensor(const CameraPose& pose) {
  return pose_tensor(std::span<const CameraPose>(&pose, 1));
}

RayBundle generate_rays(const CameraPose& pose, int resolution, double near, double far) {
  if (resolution < 1) throw ParameterError("ray resolution must be >= 1");
  if (!(near < far)) throw ParameterError("near bound must be smaller than far bound");

  const Eigen::Matrix3d k_inv = pose.intrinsic.inverse();
  const Eigen::Matrix3d rot = pose.rotation();
  const Eigen::Vector3d center = pose.center();
  const int64_t n = static_cast<int64_t>(resolution) * resolution;

  auto origins = torch::empty({n, 3}, torch::kFloat64);
  auto dirs = torch::empty({n, 3}, torch::kFloat64);
  auto o = origins.accessor<double, 2>();
  auto d = dirs.accessor<double, 2>();
  for (int v = 0; v < resolution; ++v) {
    for (int u = 0; u < resolution; ++u) {
      const int64_t i = static_cast<int64_t>(v) * resolution + u;
      const Eigen::Vector3d pixel((u + 0.5) / resolution, (v + 0.5) / resolution, 1.0);
      const Eigen::Vector3d dir = (rot * (k_inv * pixel)).normalized();
      for (int c = 0; c < 3; ++c) {
        o[i][c] = center[c];
        d[i][c] = dir[c];
      }
    }
  }
  return RayBundle{origins, dirs, near, far, resolution};
}

RayBundle generate_rays(std::span<const CameraPose> poses, int resolution, double near,
                        double far) {
  if (poses.empty()) throw ParameterError("generate_rays needs at least one pose");
  std::vector<torch::Tensor> origins, dirs;
  for (const auto& p : poses) {
    auto b = generate_rays(p, resolution, near, far);
    origins.push_back(b.origins);
    dirs.push_back(b.directions);
  }
  return RayBundle{torch::stack(origins), torch::stack(dirs), near, far, resolution};
}

Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

std::vector<CameraPose> smooth_pose_sequence(std::span<const CameraPose> poses, double sigma) {
  if (poses.empty()) throw ParameterError("cannot smooth an empty pose sequence");
  if (!(sigma > 0.0)) throw ParameterError("smoothing sigma must be positive");

  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * (k * k) / (sigma * sigma));
    total += kernel[k + radius];
  }
  for (double& w : kernel) w /= total;

  const int n = static_cast<int>(poses.size());
  std::vector<std::array<double, kPoseDims>> flat(n);
  for (int i = 0; i < n; ++i) flat[i] = serialize_pose(poses[i]);

  std::vector<CameraPose> out(n);
  for (int i = 0; i < n; ++i) {
    std::array<double, kPoseDims> acc{};
    for (int k = -radius; k <= radius; ++k) {
      const int j = std::clamp(i + k, 0, n - 1);
      for (int c = 0; c < kPoseDims; ++c) acc[c] += kernel[k + radius] * flat[j][c];
    }
    CameraPose p;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) p.extrinsic(r, c) = acc[r * 4 + c];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.intrinsic(r, c) = acc[16 + r * 3 + c];
    p.extrinsic.row(3) << 0.0, 0.0, 0.0, 1.0;
    p.extrinsic.topLeftCorner<3, 3>() = nearest_rotation(p.rotation());
    out[i] = p;
  }
  return out;
}

CameraPose yaw_pose(double yaw_degrees, const CameraPose& reference) {
  const double a = yaw_degrees * std::numbers::pi / 180.0;
  Eigen::Matrix4d yaw = Eigen::Matrix4d::Identity();
  yaw(0, 0) = std::cos(a);
  yaw(0, 2) = std::sin(a);
  yaw(2, 0) = -std::sin(a);
  yaw(2, 2) = std::cos(a);
  CameraPose out = reference;
  out.extrinsic = yaw * reference.extrinsic;
  out.extrinsic.row(3) << 0.0, 0.0, 0.0, 1.0;
  return out;
}

CameraPose look_at_origin(const Eigen::Vector3d& position, double focal) {
  const Eigen::Vector3d forward = (-position).normalized();
  const Eigen::Vector3d down(0.0, -1.0, 0.0);
  Eigen::Vector3d right = down.cross(forward);
  if (right.norm() < 1e-12) throw ParameterError("look_at_origin: camera on the vertical axis");
  right.normalize();
  const Eigen::Vector3d cam_down = forward.cross(right);

  CameraPose pose;
  pose.extrinsic.block<3, 1>(0, 0) = right;
  pose.extrinsic.block<3, 1>(0, 1) = cam_down;
  pose.extrinsic.block<3, 1>(0, 2) = forward;
  pose.extrinsic.block<3, 1>(0, 3) = position;
  pose.intrinsic << focal, 0.0, 0.5, 0.0, focal, 0.5, 0.0, 0.0, 1.0;
  return pose;
}

CameraPose frontal_pose(double radius, double focal) {
  return look_at_origin(Eigen::Vector3d(0.0, 0.0, radius), focal);
}

std::vector<CameraPose> read_pose_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pose file " + path.string());
  std::vector<CameraPose> poses;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::vector<double> values;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      double v = 0.0;
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad number '" +
                          tok + "'");
      }
      values.push_back(v);
    }
    try {
      poses.push_back(parse_pose(values));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return poses;
}

void write_pose_file(const std::filesystem::path& path, std::span<const CameraPose> poses) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pose file " + path.string());
  for (const auto& p : poses) {
    const auto flat = serialize_pose(p);
    for (int i = 0; i < kPoseDims; ++i) out << (i ? " " : "") << format_double(flat[i]);
    out << '\n';
  }
}

}  // namespace pv3d

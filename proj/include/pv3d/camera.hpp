#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

namespace pv3d {

inline constexpr int kPoseDims = 25;

/// Camera pose as used throughout the renderer and metrics.
///
/// `extrinsic` is camera-to-world: its rotation block maps camera axes
/// (x right, y down, z forward) into world space and its translation is the
/// camera center. `intrinsic` is normalized by image size, so the principal
/// point of a centered camera is (0.5, 0.5) at every resolution.
struct CameraPose {
  Eigen::Matrix4d extrinsic = Eigen::Matrix4d::Identity();
  Eigen::Matrix3d intrinsic = Eigen::Matrix3d::Identity();

  Eigen::Matrix3d rotation() const { return extrinsic.topLeftCorner<3, 3>(); }
  Eigen::Vector3d center() const { return extrinsic.topRightCorner<3, 1>(); }

  // Throws ValidationError when an invariant is broken.
  void validate() const;

  bool operator==(const CameraPose& other) const {
    return extrinsic == other.extrinsic && intrinsic == other.intrinsic;
  }
};

CameraPose parse_pose(std::span<const double> flat);
std::array<double, kPoseDims> serialize_pose(const CameraPose& pose);

/// Stacks poses into a [B, 25] float64 tensor in serialization order.
torch::Tensor pose_tensor(std::span<const CameraPose> poses);
torch::Tensor pose_tensor(const CameraPose& pose);

/// Rays through pixel centers. Tensors are float64; `origins` and
/// `directions` are [N, 3] for a single pose or [B, N, 3] for a batch,
/// with N = resolution².
struct RayBundle {
  torch::Tensor origins;
  torch::Tensor directions;
  double near = 0.0;
  double far = 1.0;
  int resolution = 1;
};

RayBundle generate_rays(const CameraPose& pose, int resolution, double near, double far);
RayBundle generate_rays(std::span<const CameraPose> poses, int resolution, double near, double far);

/// Gaussian low-pass over every pose channel (truncated at ±3σ, edge
/// replication), followed by projection of the rotation block back onto SO(3).
std::vector<CameraPose> smooth_pose_sequence(std::span<const CameraPose> poses, double sigma);

/// Rotates the reference camera about the world vertical (y) axis through the
/// origin. Intrinsics are copied.
CameraPose yaw_pose(double yaw_degrees, const CameraPose& reference);

/// Camera at `position` looking at the world origin with world +y up.
CameraPose look_at_origin(const Eigen::Vector3d& position, double focal);

inline constexpr double kDefaultOrbitRadius = 2.7;
inline constexpr double kDefaultFocal = 4.2647;

/// Frontal canonical camera on the +z axis.
CameraPose frontal_pose(double radius = kDefaultOrbitRadius, double focal = kDefaultFocal);

/// Nearest rotation matrix (Frobenius sense) with determinant +1.
Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m);

/// Pose file: one 25-value line per frame, `#` lines are comments.
std::vector<CameraPose> read_pose_file(const std::filesystem::path& path);
void write_pose_file(const std::filesystem::path& path, std::span<const CameraPose> poses);

}  // namespace pv3d

#pragma once

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include "pv3d/camera.hpp"
#include "pv3d/datapipe.hpp"
#include "pv3d/extractors.hpp"
#include "pv3d/generator.hpp"

namespace pv3d {

using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Exact nearest-neighbour queries over a fixed 3D point set.
class KdTree {
 public:
  explicit KdTree(const PointCloud& points);
  /// Squared distance to the nearest stored point.
  double nearest_squared(const Eigen::Vector3d& query) const;

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1;
    int right = -1;
  };
  int build(std::vector<int>& order, int begin, int end, int depth);
  void search(int node, const Eigen::Vector3d& q, double& best) const;

  PointCloud points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Median of the values (mean of the two central values for even counts).
double median(std::vector<double> values);

/// Symmetric median-of-minima squared distance. Throws EmptyCloudError.
double chamfer_distance(const PointCloud& a, const PointCloud& b);

struct PointCloudOptions {
  int resolution = 64;
  double opacity_threshold = 0.5;
  // Divide coordinates by (far - near) / render_steps; disabled when <= 0.
  int render_steps = 48;
  double near = 2.25;
  double far = 3.3;
  bool normalize = true;
};

/// Unprojects a ray-distance depth map [H,W] with its opacity [H,W] after
/// bilinear resampling to options.resolution. Throws EmptyCloudError when no
/// pixel reaches the opacity threshold.
PointCloud depth_to_pointcloud(const torch::Tensor& depth, const torch::Tensor& opacity,
                               const CameraPose& pose, const PointCloudOptions& options = {});

struct WarpResult {
  torch::Tensor image;  // [C,H,W] float64
  torch::Tensor mask;   // [H,W] bool
  int64_t visible = 0;
};

/// Lifts every valid source pixel (finite positive depth, and opacity >= 0.5
/// when given) to 3D and splats it to the nearest destination pixel; the
/// smaller source depth wins collisions.
WarpResult warp_image(const torch::Tensor& image, const torch::Tensor& depth,
                      const CameraPose& pose_src, const CameraPose& pose_dst,
                      const std::optional<torch::Tensor>& opacity = std::nullopt);

/// Continuous destination pixel coordinates (u, v) of source pixel centre
/// (px, py) at ray distance `depth`, in pixels of a `resolution` image.
Eigen::Vector2d reproject_pixel(double px, double py, double depth, const CameraPose& pose_src,
                                const CameraPose& pose_dst, int resolution);

inline constexpr int kWarpResolution = 256;

/// Mean absolute difference on the [0,255] scale between frame0 and frame1
/// warped into view 0 (depth1 belongs to frame1), over visible pixels after
/// resizing everything to 256x256. Throws UndefinedPairError if nothing is
/// visible.
double warping_error(const torch::Tensor& frame0, const torch::Tensor& frame1,
                     const torch::Tensor& depth1, const CameraPose& pose0,
                     const CameraPose& pose1,
                     const std::optional<torch::Tensor>& opacity1 = std::nullopt);

/// Frechet distance between Gaussians fitted to the rows of each set.
/// Covariances use the unbiased (n - 1) estimator; epsilon * I is added when
/// a set has at most `dim` rows.
double frechet_distance(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b,
                        double epsilon = 1e-6);

struct IdentityResult {
  double value = 0.0;
  int pairs = 0;
  int skipped_videos = 0;
};

/// Renders video `v` at timestep t from yaw y: returns a [3,H,W] frame.
using ViewRenderer = std::function<torch::Tensor(int video, double t, double yaw)>;

/// Mean inner product of normalized embeddings over all qualifying pairs of
/// (timestep, yaw) views per video. Two frame-grid timesteps are drawn per
/// video. Videos whose extractor call throws are skipped and counted.
IdentityResult identity_consistency(const ViewRenderer& render, EmbeddingExtractor& extractor,
                                    std::span<const double> yaws, int n_videos,
                                    std::mt19937_64& rng, int max_frames = 16);

struct MetricsReport {
  std::optional<double> fvd, id, cd, we;
  int n_videos = 0;
  int skipped_pairs = 0;
  int skipped_videos = 0;

  nlohmann::json to_json() const;
};

struct EvalConfig {
  int n_videos = 16;
  std::vector<double> yaws{0.0, 30.0};
  int n_fvd = 0;
  uint64_t seed = 0;
  int max_frames = 16;
};

/// One rendered view inside evaluate_model.
struct EvalView {
  double t = 0.0;
  double yaw = 0.0;
  CameraPose pose;
  torch::Tensor frame;    // [3,H,W]
  torch::Tensor depth;    // [h,w]
  torch::Tensor opacity;  // [h,w]
};

/// Two distinct frame-grid timesteps i / (max_frames - 1), ascending.
std::array<double, 2> sample_eval_timesteps(std::mt19937_64& rng, int max_frames = 16);

/// Front/side index pairs among the 4 views of a video (front views come first).
std::vector<std::pair<int, int>> front_side_pairs(int n_timesteps, int n_yaws);

/// Renders the 2 x |yaws| views of one video using MapT inference cameras.
std::vector<EvalView> render_eval_views(Generator& generator, const torch::Tensor& z_a,
                                        const torch::Tensor& z_m, std::span<const double> ts,
                                        std::span<const double> yaws);

/// ID, CD and WE over generated videos. Video v draws z_a then z_m from a
/// torch generator seeded with config.seed, and its timesteps from an
/// mt19937_64 seeded with config.seed; FVD against `real` clips when a clip
/// extractor and data are supplied. Absent extractors give absent metrics.
MetricsReport evaluate_model(Generator& generator, const EvalConfig& config,
                             EmbeddingExtractor* id_extractor, ClipExtractor* clip_extractor,
                             const InMemoryDataset* real);

}  // namespace pv3d

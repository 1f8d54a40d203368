#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "pv3d/camera.hpp"

namespace pv3d {

inline constexpr int kDefaultFrameSpan = 16;

// One clip directory: <root>/<clip_id>/frame_%05d.png + poses.txt.
struct ClipRecord {
  std::string clip_id;
  std::vector<std::filesystem::path> frame_paths;
  std::filesystem::path pose_path;
  std::optional<std::string> identity;
  int resolution = 0;

  int frame_count() const { return static_cast<int>(frame_paths.size()); }
  bool trainable(int frame_span = kDefaultFrameSpan) const { return frame_count() >= frame_span; }
};

std::string frame_filename(int index);

/// Builds a record from a clip directory. Manifest fields are not applied.
ClipRecord clip_record(const std::filesystem::path& clip_dir);

/// All clip directories under `root`, sorted by id, with identity labels and
/// resolutions from `<root>/manifest.json` when present.
std::vector<ClipRecord> scan_dataset(const std::filesystem::path& root);

struct ClipFrames {
  torch::Tensor frames;  // [n, 3, H, W] float32 in [0, 1]
  std::vector<CameraPose> poses;
};

/// Decodes the requested frames (in order) and their pose lines. Throws
/// DataError naming the clip on missing files or a pose/frame count mismatch.
ClipFrames load_clip(const ClipRecord& record, std::span<const int> indices);

/// Average-linkage agglomerative clustering over a symmetric distance matrix.
/// Merging stops once the closest pair of clusters is farther apart than
/// `threshold`. Returns one cluster label per item (labels are 0..k-1 in
/// order of first appearance).
std::vector<int> average_linkage_clusters(const Eigen::MatrixXd& distances, double threshold);

/// Pairwise cosine distance 1 - cos between rows.
Eigen::MatrixXd cosine_distances(const Eigen::MatrixXd& embeddings);

struct ClipEmbedding {
  std::string clip_id;
  Eigen::VectorXd embedding;
  int resolution = 0;
};

/// Pseudo-identity balancing: cluster clip embeddings and keep at most
/// `max_per_identity` clips per cluster (highest resolution first, then
/// lexicographic id). Returned ids are sorted.
std::vector<std::string> balance_identities(std::span<const ClipEmbedding> clips,
                                            double linkage_threshold, int max_per_identity = 2);

struct ClipVerification {
  bool keep = true;
  std::vector<int> noisy_frames;
  std::vector<double> mean_similarity;
};

/// A sampled frame is noisy when its mean cosine similarity to all other
/// sampled frames is below `threshold`; the clip is discarded when more than
/// `max_noisy` frames are noisy.
ClipVerification verify_clip(const Eigen::MatrixXd& frame_embeddings, double threshold = 0.5,
                             int max_noisy = 2);

/// Embedding file: one whitespace-separated vector per line.
Eigen::MatrixXd read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const Eigen::MatrixXd& rows);

struct SyntheticDatasetConfig {
  int n_clips = 8;
  int frames = 16;
  int resolution = 64;
  int render_steps = 64;
  uint64_t seed = 0;
  double yaw_range_degrees = 20.0;
};

/// Renders clips of a textured, deforming ellipsoid under known camera
/// orbits into `root` using the repository layout. Bitwise reproducible for
/// a given seed.
std::vector<ClipRecord> make_synthetic_dataset(const std::filesystem::path& root,
                                               const SyntheticDatasetConfig& config);

// Every clip fully decoded into memory (small datasets only).
class InMemoryDataset {
 public:
  static InMemoryDataset load(const std::filesystem::path& root);
  explicit InMemoryDataset(std::vector<ClipRecord> records);

  const std::vector<ClipRecord>& records() const { return records_; }
  const ClipFrames& clip(size_t i) const { return clips_.at(i); }
  size_t size() const { return clips_.size(); }
  int resolution() const;

 private:
  std::vector<ClipRecord> records_;
  std::vector<ClipFrames> clips_;
};

}  // namespace pv3d

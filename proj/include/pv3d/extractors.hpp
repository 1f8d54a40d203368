#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

namespace pv3d {

// Maps one frame [3,H,W] in [0,1] to a fixed-length vector.
class EmbeddingExtractor {
 public:
  virtual ~EmbeddingExtractor() = default;
  virtual std::string name() const = 0;
  virtual Eigen::VectorXd embed(const torch::Tensor& image) = 0;
};

// Maps a clip [N,3,H,W] in [0,1] to a fixed-length vector.
class ClipExtractor {
 public:
  virtual ~ClipExtractor() = default;
  virtual std::string name() const = 0;
  virtual Eigen::VectorXd embed_clip(const torch::Tensor& frames) = 0;
};

/// Always returns the first basis vector.
class ConstantExtractor : public EmbeddingExtractor {
 public:
  explicit ConstantExtractor(int dim = 8) : dim_(dim) {}
  std::string name() const override { return "constant"; }
  Eigen::VectorXd embed(const torch::Tensor& image) override;

 private:
  int dim_;
};

/// Average-pools to a small grid, then applies a fixed random projection
/// (seeded) and L2-normalizes.
class PoolProjectionExtractor : public EmbeddingExtractor {
 public:
  PoolProjectionExtractor(int dim = 64, int grid = 8, uint64_t seed = 0);
  std::string name() const override { return "pool-projection"; }
  Eigen::VectorXd embed(const torch::Tensor& image) override;

 private:
  int grid_;
  Eigen::MatrixXd projection_;
};

/// Clip stub: 3D average pool over (time, height, width) then a fixed random
/// projection. Not normalized, so Frechet statistics keep scale.
class PoolProjectionClipExtractor : public ClipExtractor {
 public:
  PoolProjectionClipExtractor(int dim = 32, int time_bins = 4, int grid = 4, uint64_t seed = 0);
  std::string name() const override { return "pool-projection-clip"; }
  Eigen::VectorXd embed_clip(const torch::Tensor& frames) override;

 private:
  int time_bins_;
  int grid_;
  Eigen::MatrixXd projection_;
};

// Out-of-process extractor. For each call the inputs are written as PNG files
// (frame_%05d.png) into a fresh directory and the command is run as
//   <command> <input_dir> <output_file>
// It must exit 0 and write one whitespace-separated vector to output_file.
class ExternalExtractor : public EmbeddingExtractor, public ClipExtractor {
 public:
  ExternalExtractor(std::string name, std::string command);
  std::string name() const override { return name_; }
  Eigen::VectorXd embed(const torch::Tensor& image) override;
  Eigen::VectorXd embed_clip(const torch::Tensor& frames) override;

 private:
  std::string name_;
  std::string command_;
  int calls_ = 0;
};

/// Command registered for `name` in the JSON object file named by the
/// PV3D_PLUGINS environment variable ({"arcface": "/path/to/tool", ...}).
std::optional<std::string> plugin_command(const std::string& name);

/// "constant", "pool-projection", "external:<command>" or a PV3D_PLUGINS
/// entry. Unknown names throw ConfigError.
std::unique_ptr<EmbeddingExtractor> make_image_extractor(const std::string& name);
/// "pool-projection-clip", "external:<command>" or a PV3D_PLUGINS entry.
std::unique_ptr<ClipExtractor> make_clip_extractor(const std::string& name);

}  // namespace pv3d

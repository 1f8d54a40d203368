#include "pv3d/extractors.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "pv3d/datapipe.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/image_io.hpp"

namespace pv3d {

namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd random_projection(int rows, int cols, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

Eigen::VectorXd to_eigen(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kFloat64).contiguous().view({-1});
  return Eigen::Map<const Eigen::VectorXd>(flat.data_ptr<double>(), flat.numel());
}

}  // namespace

Eigen::VectorXd ConstantExtractor::embed(const torch::Tensor&) {
  return Eigen::VectorXd::Unit(dim_, 0);
}

PoolProjectionExtractor::PoolProjectionExtractor(int dim, int grid, uint64_t seed)
    : grid_(grid), projection_(random_projection(dim, 3 * grid * grid, seed)) {}

Eigen::VectorXd PoolProjectionExtractor::embed(const torch::Tensor& image) {
  auto pooled = torch::adaptive_avg_pool2d(image.unsqueeze(0).to(torch::kFloat64), {grid_, grid_});
  Eigen::VectorXd x = to_eigen(pooled);
  x.array() -= 0.5;
  Eigen::VectorXd y = projection_ * x;
  const double n = y.norm();
  return n > 0 ? Eigen::VectorXd(y / n) : Eigen::VectorXd(Eigen::VectorXd::Unit(y.size(), 0));
}

PoolProjectionClipExtractor::PoolProjectionClipExtractor(int dim, int time_bins, int grid,
                                                         uint64_t seed)
    : time_bins_(time_bins),
      grid_(grid),
      projection_(random_projection(dim, 3 * time_bins * grid * grid, seed)) {}

Eigen::VectorXd PoolProjectionClipExtractor::embed_clip(const torch::Tensor& frames) {
  // [N,3,H,W] -> [1,3,N,H,W]
  auto volume = frames.to(torch::kFloat64).permute({1, 0, 2, 3}).unsqueeze(0);
  auto pooled = torch::adaptive_avg_pool3d(volume, {time_bins_, grid_, grid_});
  return projection_ * to_eigen(pooled);
}

ExternalExtractor::ExternalExtractor(std::string name, std::string command)
    : name_(std::move(name)), command_(std::move(command)) {}

Eigen::VectorXd ExternalExtractor::embed(const torch::Tensor& image) {
  return embed_clip(image.unsqueeze(0));
}

Eigen::VectorXd ExternalExtractor::embed_clip(const torch::Tensor& frames) {
  const auto dir = fs::temp_directory_path() /
                   ("pv3d_extract_" + std::to_string(::getpid()) + "_" + std::to_string(calls_++));
  fs::remove_all(dir);
  fs::create_directories(dir / "input");
  for (int64_t i = 0; i < frames.size(0); ++i) {
    write_png(dir / "input" / frame_filename(static_cast<int>(i)), frames[i]);
  }
  const auto output = dir / "embedding.txt";
  const std::string cmd = command_ + " '" + (dir / "input").string() + "' '" + output.string() + "'";
  const int status = std::system(cmd.c_str());
  if (status != 0) {
    fs::remove_all(dir);
    throw DataError("extractor '" + name_ + "' exited with status " + std::to_string(status));
  }
  Eigen::MatrixXd rows;
  try {
    rows = read_embedding_file(output);
  } catch (const Error& e) {
    fs::remove_all(dir);
    throw DataError("extractor '" + name_ + "': " + e.what());
  }
  fs::remove_all(dir);
  return rows.row(0).transpose();
}

std::optional<std::string> plugin_command(const std::string& name) {
  const char* env = std::getenv("PV3D_PLUGINS");
  if (!env || !*env) return std::nullopt;
  std::filesystem::path path(env);
  // A directory holds either a plugins.json registry or executables named after the plugin.
  if (std::filesystem::is_directory(path)) {
    auto exe = path / name;
    if (std::filesystem::is_regular_file(exe) && ::access(exe.c_str(), X_OK) == 0) return exe.string();
    path /= "plugins.json";
    if (!std::filesystem::exists(path)) return std::nullopt;
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read PV3D_PLUGINS registry " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad PV3D_PLUGINS registry: ") + e.what());
  }
  if (!j.is_object() || !j.contains(name)) return std::nullopt;
  return j[name].get<std::string>();
}

std::unique_ptr<EmbeddingExtractor> make_image_extractor(const std::string& name) {
  if (name == "constant") return std::make_unique<ConstantExtractor>();
  if (name == "pool-projection") return std::make_unique<PoolProjectionExtractor>();
  if (name.rfind("external:", 0) == 0) {
    return std::make_unique<ExternalExtractor>(name, name.substr(9));
  }
  if (auto cmd = plugin_command(name)) return std::make_unique<ExternalExtractor>(name, *cmd);
  throw ConfigError("unknown image extractor '" + name + "'");
}

std::unique_ptr<ClipExtractor> make_clip_extractor(const std::string& name) {
  if (name == "pool-projection-clip") return std::make_unique<PoolProjectionClipExtractor>();
  if (name.rfind("external:", 0) == 0) {
    return std::make_unique<ExternalExtractor>(name, name.substr(9));
  }
  if (auto cmd = plugin_command(name)) return std::make_unique<ExternalExtractor>(name, *cmd);
  throw ConfigError("unknown clip extractor '" + name + "'");
}

}  // namespace pv3d

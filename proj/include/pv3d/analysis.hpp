#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "pv3d/checkpoint.hpp"
#include "pv3d/datapipe.hpp"

namespace pv3d {

// Style mixing: the first `mix_layers` synthesis layers take a second
// appearance code. Frames are rendered at t = 0 from the frontal camera.
struct StyleMixGrid {
  std::vector<int> mix_layers;
  torch::Tensor primary;    // [S,3,H,W]
  torch::Tensor secondary;  // [S,3,H,W]
  torch::Tensor mixed;      // [K,S,3,H,W], one row per entry of mix_layers
};

StyleMixGrid style_mix_grid(Generator& generator, std::vector<int> mix_layers, int samples,
                            uint64_t seed);
/// Tiles the grid into one image: a row per sample, columns primary, secondary, mixes.
torch::Tensor tile_style_mix(const StyleMixGrid& grid);

struct DiscAlignmentRecord {
  double embedding_similarity = 0.0;  // cosine between [c_i,c_j] and [c_j,c_i] embeddings
  double logit_original = 0.0;
  double logit_flipped = 0.0;
  double logit_difference() const { return std::abs(logit_original - logit_flipped); }
};

struct DiscAlignmentConfig {
  int n_pairs = 500;
  uint64_t seed = 0;
  int chunk = 25;
  // A logit counts as changed when it moves by more than this.
  double change_tolerance = 1e-6;
  int histogram_bins = 20;
};

struct DiscAlignmentReport {
  std::vector<DiscAlignmentRecord> records;
  double fraction_changed = 0.0;
  double mean_similarity = 0.0;
  double mean_logit_difference = 0.0;
  nlohmann::json to_json() const;
};

/// Camera pairs come from the dataset's pose files (two frames of one clip)
/// or, without a dataset, from a random yaw orbit. Generated frame pairs
/// are scored with the original and the swapped pose order.
DiscAlignmentReport discriminator_alignment(ModelBundle& models, const DiscAlignmentConfig& config,
                                            const std::vector<ClipRecord>* dataset);

/// `lo,hi,count` rows over [lo, hi] split into `bins` equal bins.
void write_histogram_csv(const std::filesystem::path& path, const std::vector<double>& values,
                         double lo, double hi, int bins);

}  // namespace pv3d

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "pv3d/discriminators.hpp"
#include "pv3d/generator.hpp"
#include "pv3d/training.hpp"

namespace pv3d {

struct ModelBundle {
  GeneratorConfig generator_config;
  DiscriminatorConfig discriminator_config;
  Generator generator{nullptr};
  ImageDiscriminator image_disc{nullptr};
  VideoDiscriminator video_disc{nullptr};
};

/// Fresh models with parameters drawn from a seeded generator.
ModelBundle make_models(const GeneratorConfig& generator_config,
                        const DiscriminatorConfig& discriminator_config, uint64_t seed);

struct Checkpoint {
  ModelBundle models;
  std::optional<TrainConfig> train_config;
  int iteration = 0;
};

// A checkpoint is a torch archive at `path` plus a JSON sidecar
// `<path>.json` holding the configs and iteration count.
std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, ModelBundle& models,
                     const std::optional<TrainConfig>& train_config, int iteration);
void save_training_checkpoint(const std::filesystem::path& path, Trainer& trainer);

/// Throws DataError for missing or unreadable checkpoints.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Restores optimizer state (if present) and the iteration counter.
void restore_trainer_state(const std::filesystem::path& path, Trainer& trainer);

/// Hex SHA-1 digest of a file's bytes.
std::string file_sha1(const std::filesystem::path& path);

}  // namespace pv3d

#pragma once

#include "pv3d/discriminators.hpp"
#include "pv3d/generator.hpp"

namespace pv3d::testing {

// Tiny but structurally complete generator for unit tests.
inline GeneratorConfig small_generator_config() {
  GeneratorConfig c;
  c.appearance_dim = 8;
  c.motion_dim = 8;
  c.w_dim = 8;
  c.mapping_hidden = 16;
  c.motion_hidden = 16;
  c.synthesis_channels = 8;
  c.plane_channels = 4;
  c.plane_resolution = 16;
  c.base_resolution = 8;
  c.final_resolution = 16;
  c.decoder_hidden = 16;
  c.decoder_features = 4;
  c.sr_channels = 4;
  c.render_steps = 12;
  return c;
}

inline DiscriminatorConfig small_discriminator_config() {
  DiscriminatorConfig c;
  c.resolution = 16;
  c.channels = 8;
  c.hidden = 16;
  c.cmap_dim = 8;
  return c;
}

}  // namespace pv3d::testing

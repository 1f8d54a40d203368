#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace pv3d {

/// Reads an 8-bit RGB/RGBA/gray PNG as a float32 [3, H, W] tensor in [0, 1].
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a [3, H, W] tensor (values clamped to [0, 1]) as an 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Flat float32 grid: int32 H, int32 W (little-endian), then H*W row-major values.
void write_float_grid(const std::filesystem::path& path, const torch::Tensor& grid);
torch::Tensor read_float_grid(const std::filesystem::path& path);

}  // namespace pv3d

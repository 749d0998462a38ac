#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "incseg/core_data.hpp"

namespace incseg {

struct Window {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  [[nodiscard]] bool contains(std::size_t y, std::size_t x) const {
    return y >= row0 && y < row0 + height && x >= col0 && x < col0 + width;
  }
  friend bool operator==(const Window&, const Window&) = default;
  friend auto operator<=>(const Window&, const Window&) = default;
};

/// Square windows covering an extent, sorted row-major by (row0, col0).
struct PatchGrid {
  std::vector<Window> windows;
  std::size_t extent_height = 0;
  std::size_t extent_width = 0;
  std::size_t patch_size = 0;
  std::size_t overlap = 0;
};

/// A crop of a source raster together with its tags.
struct Patch {
  RasterImage image;
  std::optional<MaskStack> masks;
  Window window;
  int stage_id = 0;
  std::string country;
  std::string city;
  std::size_t item_index = 0;  // source item within its manifest

  friend bool operator==(const Patch&, const Patch&) = default;
};

/// Starts advance by (patch_size - overlap); the last window on each axis is
/// clamped so it ends on the extent edge. Throws ParameterError unless
/// 0 <= overlap < patch_size <= min(H, W).
[[nodiscard]] PatchGrid compute_grid(std::size_t height, std::size_t width, std::size_t patch_size,
                                     std::size_t overlap);

[[nodiscard]] RasterImage crop_image(const RasterImage& img, const Window& w);
[[nodiscard]] MaskStack crop_masks(const MaskStack& masks, const Window& w);

[[nodiscard]] std::vector<Patch> extract_patches(const RasterImage& img, const MaskStack* masks,
                                                 const PatchGrid& grid);

/// Per-pixel arithmetic mean of every window prediction covering the pixel.
/// `probs_per_window[i]` belongs to `grid.windows[i]`.
[[nodiscard]] MaskStack stitch_predictions(const std::vector<MaskStack>& probs_per_window,
                                           const PatchGrid& grid);

// Patch cache: one little-endian binary file per patch, named
// `{stage}_{city}_{index}.patch`.
[[nodiscard]] std::string patch_file_name(const Patch& p, std::size_t index);
void write_patch(const Patch& p, const std::filesystem::path& file);
[[nodiscard]] Patch read_patch(const std::filesystem::path& file);
/// Writes every patch into `dir` and returns the file names in order.
std::vector<std::string> write_patch_cache(const std::vector<Patch>& patches, const std::filesystem::path& dir);

}  // namespace incseg

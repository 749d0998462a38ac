#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "incseg/core_data.hpp"
#include "incseg/tiling.hpp"

namespace incseg {

using Rng = std::mt19937_64;

/// Luxcarta draws flips, quarter rotations, contrast and gamma; benchmark
/// draws flips and rotations only.
enum class AugmentProfile { kLuxcarta, kBenchmark, kNone };

[[nodiscard]] AugmentProfile parse_augment_profile(const std::string& s);
[[nodiscard]] std::string to_string(AugmentProfile p);

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  int rot_quarter = 0;  // counter-clockwise quarter turns, 0..3
  double contrast_k = 1.0;
  double gamma = 1.0;
  bool radiometric_enabled = false;
};

inline constexpr double kContrastMin = 0.75;
inline constexpr double kContrastMax = 1.5;
inline constexpr double kGammaMin = 0.75;
inline constexpr double kGammaMax = 1.25;

[[nodiscard]] AugmentParams sample_params(Rng& rng, AugmentProfile profile);

/// Independent per-patch random stream derived from (seed, patch index).
[[nodiscard]] Rng patch_substream(std::uint64_t seed, std::uint64_t patch_index);

/// Flips then rotates image and every mask plane identically. Order: hflip,
/// vflip, rotation. Throws ParameterError for odd quarter turns on
/// non-square patches.
[[nodiscard]] Patch apply_geometric(const Patch& patch, const AugmentParams& p);
[[nodiscard]] RasterImage apply_geometric(const RasterImage& img, const AugmentParams& p);
[[nodiscard]] MaskStack apply_geometric(const MaskStack& masks, const AugmentParams& p);

/// x <- (x - mu) * k + mu per channel, mu being the channel mean of `img`;
/// result clamped to [0, 1]. Expects a unit-interval image.
[[nodiscard]] RasterImage contrast_change(const RasterImage& img, double k);
/// x <- x^gamma elementwise on a unit-interval image.
[[nodiscard]] RasterImage gamma_correct(const RasterImage& img, double gamma);

/// Full online augmentation of an 8-bit patch: geometry on image and masks,
/// then (if enabled) contrast and gamma on a [0,1] view of the image only.
/// `contrast`/`gamma` toggles allow disabling either radiometric op.
struct RadiometricToggles {
  bool contrast = true;
  bool gamma = true;
};
[[nodiscard]] Patch augment_patch(const Patch& patch, const AugmentParams& p,
                                  RadiometricToggles toggles = {});

}  // namespace incseg

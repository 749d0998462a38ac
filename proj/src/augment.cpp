#include "incseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace incseg {

AugmentProfile parse_augment_profile(const std::string& s) {
  if (s == "luxcarta") return AugmentProfile::kLuxcarta;
  if (s == "benchmark") return AugmentProfile::kBenchmark;
  if (s == "none") return AugmentProfile::kNone;
  throw ConfigError("unknown augmentation profile '" + s + "'");
}

std::string to_string(AugmentProfile p) {
  switch (p) {
    case AugmentProfile::kLuxcarta: return "luxcarta";
    case AugmentProfile::kBenchmark: return "benchmark";
    case AugmentProfile::kNone: return "none";
  }
  return "none";
}

AugmentParams sample_params(Rng& rng, AugmentProfile profile) {
  AugmentParams p;
  if (profile == AugmentProfile::kNone) return p;
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> quarter(0, 3);
  p.hflip = coin(rng) == 1;
  p.vflip = coin(rng) == 1;
  p.rot_quarter = quarter(rng);
  if (profile == AugmentProfile::kLuxcarta) {
    p.radiometric_enabled = true;
    p.contrast_k = std::uniform_real_distribution<double>(kContrastMin, kContrastMax)(rng);
    p.gamma = std::uniform_real_distribution<double>(kGammaMin, kGammaMax)(rng);
  }
  return p;
}

Rng patch_substream(std::uint64_t seed, std::uint64_t patch_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(patch_index), static_cast<std::uint32_t>(patch_index >> 32)};
  return Rng(seq);
}

namespace {

// Maps output coordinates to source coordinates for one plane of size h x w
// (already known square when rotating by an odd number of quarters).
struct GeometricMap {
  std::size_t src_h, src_w, out_h, out_w;
  AugmentParams p;

  [[nodiscard]] std::pair<std::size_t, std::size_t> source(std::size_t y, std::size_t x) const {
    // Undo rotation first (it was applied last), then flips.
    std::size_t ry = y;
    std::size_t rx = x;
    // Counter-clockwise quarter turn on an n x m plane: out(y, x) = in(x, m-1-y).
    const std::size_t fh = src_h;  // flipped plane has source shape
    const std::size_t fw = src_w;
    switch (p.rot_quarter & 3) {
      case 0: break;
      case 1: ry = x; rx = fw - 1 - y; break;
      case 2: ry = fh - 1 - y; rx = fw - 1 - x; break;
      case 3: ry = fh - 1 - x; rx = y; break;
    }
    if (p.vflip) ry = fh - 1 - ry;
    if (p.hflip) rx = fw - 1 - rx;
    return {ry, rx};
  }
};

GeometricMap make_map(std::size_t h, std::size_t w, const AugmentParams& p) {
  const int q = p.rot_quarter;
  if (q < 0 || q > 3) throw ParameterError("rot_quarter must be in 0..3");
  if ((q % 2) == 1 && h != w) throw ParameterError("odd quarter rotations need a square patch");
  return {h, w, (q % 2) ? w : h, (q % 2) ? h : w, p};
}

void check_unit(const RasterImage& img) {
  for (float v : img.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ParameterError("expected pixel values in [0, 1]");
  }
}

}  // namespace

RasterImage apply_geometric(const RasterImage& img, const AugmentParams& p) {
  const auto map = make_map(img.height, img.width, p);
  RasterImage out(map.out_h, map.out_w, img.channels, img.domain);
  for (std::size_t y = 0; y < map.out_h; ++y) {
    for (std::size_t x = 0; x < map.out_w; ++x) {
      const auto [sy, sx] = map.source(y, x);
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

MaskStack apply_geometric(const MaskStack& masks, const AugmentParams& p) {
  const auto map = make_map(masks.height, masks.width, p);
  MaskStack out(masks.planes, map.out_h, map.out_w);
  for (std::size_t y = 0; y < map.out_h; ++y) {
    for (std::size_t x = 0; x < map.out_w; ++x) {
      const auto [sy, sx] = map.source(y, x);
      for (std::size_t k = 0; k < masks.planes; ++k) out.at(k, y, x) = masks.at(k, sy, sx);
    }
  }
  return out;
}

Patch apply_geometric(const Patch& patch, const AugmentParams& p) {
  Patch out = patch;
  out.image = apply_geometric(patch.image, p);
  if (patch.masks) out.masks = apply_geometric(*patch.masks, p);
  return out;
}

RasterImage contrast_change(const RasterImage& img, double k) {
  if (!(k > 0.0)) throw ParameterError("contrast factor must be positive");
  check_unit(img);
  const std::size_t c = img.channels;
  const std::size_t n = img.height * img.width;
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) mean[i % c] += img.pixels[i];
  for (auto& m : mean) m /= static_cast<double>(n);
  RasterImage out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double mu = mean[i % c];
    const double v = (static_cast<double>(img.pixels[i]) - mu) * k + mu;
    out.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

RasterImage gamma_correct(const RasterImage& img, double gamma) {
  if (!(gamma > 0.0)) throw ParameterError("gamma must be positive");
  check_unit(img);
  RasterImage out = img;
  for (auto& v : out.pixels) v = static_cast<float>(std::pow(static_cast<double>(v), gamma));
  return out;
}

Patch augment_patch(const Patch& patch, const AugmentParams& p, RadiometricToggles toggles) {
  Patch out = apply_geometric(patch, p);
  if (!p.radiometric_enabled || (!toggles.contrast && !toggles.gamma)) return out;
  if (out.image.domain != ValueDomain::kUint8) {
    throw ParameterError("radiometric augmentation expects an 8-bit patch");
  }
  RasterImage unit = out.image;
  unit.domain = ValueDomain::kUnitFloat;
  for (auto& v : unit.pixels) v = std::clamp(v / 255.0f, 0.0f, 1.0f);
  if (toggles.contrast) unit = contrast_change(unit, p.contrast_k);
  if (toggles.gamma) unit = gamma_correct(unit, p.gamma);
  for (std::size_t i = 0; i < unit.pixels.size(); ++i) out.image.pixels[i] = unit.pixels[i] * 255.0f;
  return out;
}

}  // namespace incseg

#include "incseg/tiling.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"

namespace incseg {

namespace {

std::vector<std::size_t> axis_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0;; s += stride) {
    if (s + patch >= extent) {
      starts.push_back(extent - patch);
      break;
    }
    starts.push_back(s);
  }
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
  return starts;
}

constexpr char kPatchMagic[8] = {'I', 'S', 'P', 'A', 'T', 'C', 'H', '1'};
constexpr std::uint32_t kPatchVersion = 1;

}  // namespace

PatchGrid compute_grid(std::size_t height, std::size_t width, std::size_t patch_size, std::size_t overlap) {
  if (patch_size == 0) throw ParameterError("patch size must be positive");
  if (overlap >= patch_size) throw ParameterError("overlap must be smaller than the patch size");
  if (patch_size > height || patch_size > width) {
    throw ParameterError("patch size " + std::to_string(patch_size) + " exceeds extent " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  PatchGrid grid;
  grid.extent_height = height;
  grid.extent_width = width;
  grid.patch_size = patch_size;
  grid.overlap = overlap;
  const std::size_t stride = patch_size - overlap;
  const auto rows = axis_starts(height, patch_size, stride);
  const auto cols = axis_starts(width, patch_size, stride);
  for (auto r : rows) {
    for (auto c : cols) grid.windows.push_back({r, c, patch_size, patch_size});
  }
  return grid;
}

RasterImage crop_image(const RasterImage& img, const Window& w) {
  if (w.row0 + w.height > img.height || w.col0 + w.width > img.width) {
    throw DimensionError("window exceeds image extent");
  }
  RasterImage out(w.height, w.width, img.channels, img.domain);
  const std::size_t row_len = w.width * img.channels;
  for (std::size_t y = 0; y < w.height; ++y) {
    const auto src = img.pixels.begin() +
                     static_cast<std::ptrdiff_t>(((w.row0 + y) * img.width + w.col0) * img.channels);
    std::copy_n(src, row_len, out.pixels.begin() + static_cast<std::ptrdiff_t>(y * row_len));
  }
  return out;
}

MaskStack crop_masks(const MaskStack& masks, const Window& w) {
  if (w.row0 + w.height > masks.height || w.col0 + w.width > masks.width) {
    throw DimensionError("window exceeds mask extent");
  }
  MaskStack out(masks.planes, w.height, w.width);
  for (std::size_t k = 0; k < masks.planes; ++k) {
    for (std::size_t y = 0; y < w.height; ++y) {
      for (std::size_t x = 0; x < w.width; ++x) out.at(k, y, x) = masks.at(k, w.row0 + y, w.col0 + x);
    }
  }
  return out;
}

std::vector<Patch> extract_patches(const RasterImage& img, const MaskStack* masks, const PatchGrid& grid) {
  if (img.height != grid.extent_height || img.width != grid.extent_width) {
    throw DimensionError("grid extent does not match image shape");
  }
  if (masks != nullptr && (masks->height != img.height || masks->width != img.width)) {
    throw DimensionError("mask stack is not aligned with the image");
  }
  std::vector<Patch> out;
  out.reserve(grid.windows.size());
  for (const auto& w : grid.windows) {
    Patch p;
    p.image = crop_image(img, w);
    if (masks != nullptr) p.masks = crop_masks(*masks, w);
    p.window = w;
    out.push_back(std::move(p));
  }
  return out;
}

MaskStack stitch_predictions(const std::vector<MaskStack>& probs_per_window, const PatchGrid& grid) {
  if (probs_per_window.size() != grid.windows.size()) {
    throw DimensionError("got " + std::to_string(probs_per_window.size()) + " predictions for " +
                         std::to_string(grid.windows.size()) + " windows");
  }
  if (probs_per_window.empty()) throw DimensionError("nothing to stitch");
  const std::size_t k = probs_per_window.front().planes;
  // Accumulate in canonical window order so the result does not depend on
  // the order windows were listed in.
  std::vector<std::size_t> order(grid.windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return grid.windows[a] < grid.windows[b]; });

  const std::size_t h = grid.extent_height;
  const std::size_t w = grid.extent_width;
  std::vector<double> sum(k * h * w, 0.0);
  std::vector<std::uint32_t> count(h * w, 0);
  for (auto i : order) {
    const auto& win = grid.windows[i];
    const auto& pred = probs_per_window[i];
    if (pred.planes != k) throw DimensionError("class count differs between window predictions");
    if (pred.height != win.height || pred.width != win.width) {
      throw DimensionError("prediction shape does not match its window");
    }
    for (std::size_t y = 0; y < win.height; ++y) {
      for (std::size_t x = 0; x < win.width; ++x) {
        const std::size_t px = (win.row0 + y) * w + win.col0 + x;
        ++count[px];
        for (std::size_t c = 0; c < k; ++c) sum[c * h * w + px] += pred.at(c, y, x);
      }
    }
  }
  MaskStack out(k, h, w);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t px = 0; px < h * w; ++px) {
      if (count[px] == 0) throw DimensionError("grid leaves pixels uncovered");
      out.values[c * h * w + px] = static_cast<float>(sum[c * h * w + px] / count[px]);
    }
  }
  return out;
}

std::string patch_file_name(const Patch& p, std::size_t index) {
  const std::string city = p.city.empty() ? "nocity" : p.city;
  return std::to_string(p.stage_id) + "_" + city + "_" + std::to_string(index) + ".patch";
}

void write_patch(const Patch& p, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write patch " + file.string());
  detail::BinaryWriter w(out);
  w.bytes(kPatchMagic, sizeof(kPatchMagic));
  w.pod<std::uint32_t>(kPatchVersion);
  w.pod<std::int32_t>(p.stage_id);
  w.pod<std::uint64_t>(p.window.row0);
  w.pod<std::uint64_t>(p.window.col0);
  w.pod<std::uint64_t>(p.window.height);
  w.pod<std::uint64_t>(p.window.width);
  w.str(p.country);
  w.str(p.city);
  w.pod<std::uint64_t>(p.item_index);
  w.pod<std::uint64_t>(p.image.height);
  w.pod<std::uint64_t>(p.image.width);
  w.pod<std::uint64_t>(p.image.channels);
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(p.image.domain));
  w.floats(p.image.pixels);
  w.pod<std::uint8_t>(p.masks ? 1 : 0);
  if (p.masks) {
    w.pod<std::uint64_t>(p.masks->planes);
    w.pod<std::uint64_t>(p.masks->height);
    w.pod<std::uint64_t>(p.masks->width);
    w.floats(p.masks->values);
  }
  if (!out) throw IoError("failed writing patch " + file.string());
}

Patch read_patch(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open patch " + file.string());
  detail::BinaryReader r(in, "patch " + file.string());
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kPatchMagic))) {
    throw FormatError("patch " + file.string() + ": bad magic");
  }
  if (r.pod<std::uint32_t>() != kPatchVersion) throw FormatError("patch " + file.string() + ": unsupported version");
  constexpr std::uint64_t kMaxDim = 1u << 20;
  auto dim = [&](const char* what) {
    const auto v = r.pod<std::uint64_t>();
    if (v > kMaxDim) throw FormatError(std::string("patch: implausible ") + what);
    return static_cast<std::size_t>(v);
  };
  Patch p;
  p.stage_id = r.pod<std::int32_t>();
  p.window.row0 = dim("row0");
  p.window.col0 = dim("col0");
  p.window.height = dim("height");
  p.window.width = dim("width");
  p.country = r.str();
  p.city = r.str();
  p.item_index = static_cast<std::size_t>(r.pod<std::uint64_t>());
  p.image.height = dim("image height");
  p.image.width = dim("image width");
  p.image.channels = dim("channels");
  p.image.domain = static_cast<ValueDomain>(r.pod<std::uint8_t>());
  p.image.pixels = r.floats(p.image.height * p.image.width * p.image.channels);
  if (r.pod<std::uint8_t>() != 0) {
    MaskStack m;
    m.planes = dim("planes");
    m.height = dim("mask height");
    m.width = dim("mask width");
    m.values = r.floats(m.planes * m.height * m.width);
    p.masks = std::move(m);
  }
  return p;
}

std::vector<std::string> write_patch_cache(const std::vector<Patch>& patches, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  names.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    names.push_back(patch_file_name(patches[i], i));
    write_patch(patches[i], dir / names.back());
  }
  return names;
}

}  // namespace incseg

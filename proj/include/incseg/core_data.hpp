#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "incseg/error.hpp"
#include "json.hpp"

namespace incseg {

/// Ordered set of class names. The order fixes output-channel order
/// everywhere downstream (mask planes, classifier heads, reports).
class ClassSet {
 public:
  ClassSet() = default;
  /// Throws ValidationError on duplicate or empty names.
  explicit ClassSet(std::vector<std::string> names);

  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }
  [[nodiscard]] std::size_t size() const { return names_.size(); }
  [[nodiscard]] bool empty() const { return names_.empty(); }
  [[nodiscard]] bool contains(const std::string& name) const;
  /// Index of `name`; throws ValidationError when absent.
  [[nodiscard]] std::size_t index_of(const std::string& name) const;
  [[nodiscard]] const std::string& operator[](std::size_t i) const { return names_[i]; }

  [[nodiscard]] bool disjoint_from(const ClassSet& other) const;
  /// This order followed by `other`'s order. Throws on overlap.
  [[nodiscard]] ClassSet concat(const ClassSet& other) const;

  friend bool operator==(const ClassSet&, const ClassSet&) = default;

 private:
  std::vector<std::string> names_;
};

enum class ValueDomain { kUint8, kUnitFloat, kNormalized };

/// H x W x C image, channel-interleaved (row-major, channels fastest).
struct RasterImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  ValueDomain domain = ValueDomain::kUint8;
  std::vector<float> pixels;

  RasterImage() = default;
  RasterImage(std::size_t h, std::size_t w, std::size_t c, ValueDomain d = ValueDomain::kUint8);

  [[nodiscard]] float& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  [[nodiscard]] float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// K planes of H x W values aligned to a ClassSet. Binary stacks hold {0,1},
/// soft stacks hold probabilities in [0,1]. Planes may overlap.
struct MaskStack {
  std::size_t planes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;  // [plane][y][x]

  MaskStack() = default;
  MaskStack(std::size_t k, std::size_t h, std::size_t w, float fill = 0.0f);

  [[nodiscard]] float& at(std::size_t k, std::size_t y, std::size_t x) {
    return values[(k * height + y) * width + x];
  }
  [[nodiscard]] float at(std::size_t k, std::size_t y, std::size_t x) const {
    return values[(k * height + y) * width + x];
  }
  [[nodiscard]] std::size_t plane_size() const { return height * width; }
  [[nodiscard]] bool is_binary() const;
  /// Copy of a subset of planes, in the given order.
  [[nodiscard]] MaskStack select(const std::vector<std::size_t>& plane_indices) const;

  friend bool operator==(const MaskStack&, const MaskStack&) = default;
};

inline constexpr std::int32_t kBackgroundLabel = -1;

/// Integer class-id raster; kBackgroundLabel marks pixels of no class.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;
};

struct SubtractConstant {
  double value = 127.0;
  friend bool operator==(const SubtractConstant&, const SubtractConstant&) = default;
};
struct PerChannelMean {
  std::vector<double> means;
  friend bool operator==(const PerChannelMean&, const PerChannelMean&) = default;
};
using Normalization = std::variant<SubtractConstant, PerChannelMean>;

struct ManifestItem {
  std::filesystem::path image;
  std::map<std::string, std::filesystem::path> masks;  // class -> mask path
  std::string country;
  std::string city;
};

/// One training (or validation) stage: images, declared classes and tags.
struct DatasetManifest {
  int stage_id = 0;
  ClassSet class_set;
  Normalization normalization = SubtractConstant{};
  std::vector<ManifestItem> items;
  std::filesystem::path source;  // file the manifest was read from, if any
};

/// Reads and validates a JSON manifest. Relative paths resolve against the
/// manifest's directory. Throws SchemaError or IoError (naming the path).
[[nodiscard]] DatasetManifest load_manifest(const std::filesystem::path& path);
[[nodiscard]] DatasetManifest parse_manifest(const std::string& json_text,
                                             const std::filesystem::path& base_dir);
/// Paths are written relative to `base_dir` when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// {"mode": "subtract", "value": c} or {"mode": "mean", "values": [...]};
/// throws SchemaError.
[[nodiscard]] Normalization parse_normalization(const nlohmann::json& j);
[[nodiscard]] nlohmann::json normalization_to_json(const Normalization& n);

/// Throws ValidationError when stage ids are not strictly increasing.
void check_stage_order(const std::vector<DatasetManifest>& stages);

/// Streaming mode subtracts a constant, static mode subtracts per-channel
/// means. Output domain is kNormalized.
[[nodiscard]] RasterImage normalize_image(const RasterImage& img, const Normalization& mode);
/// Inverse of normalize_image.
[[nodiscard]] RasterImage denormalize_image(const RasterImage& img, const Normalization& mode,
                                            ValueDomain restored = ValueDomain::kUint8);

[[nodiscard]] MaskStack labels_to_mask_stack(const LabelMap& label_map, const ClassSet& class_set,
                                             std::int32_t background_id = kBackgroundLabel);

/// 8-bit image file (PNG/TIFF) in RGB(A) channel order.
[[nodiscard]] RasterImage read_image(const std::filesystem::path& path);
void write_image(const RasterImage& img, const std::filesystem::path& path);
/// Single-channel {0,255} mask file; pixels >= 128 are positive.
[[nodiscard]] std::vector<float> read_mask_plane(const std::filesystem::path& path,
                                                 std::size_t expected_h, std::size_t expected_w);
void write_mask_plane(const MaskStack& stack, std::size_t plane, const std::filesystem::path& path);

/// Image plus its masks for `manifest.class_set`, in class order.
struct LoadedItem {
  RasterImage image;
  MaskStack masks;
  std::string country;
  std::string city;
};
[[nodiscard]] LoadedItem load_item(const DatasetManifest& manifest, std::size_t index);

}  // namespace incseg

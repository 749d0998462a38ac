#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "incseg/core_data.hpp"
#include "incseg/tiling.hpp"
#include "json.hpp"

namespace incseg {

inline constexpr float kDecisionThreshold = 0.5f;

/// Positive iff p >= 0.5.
[[nodiscard]] MaskStack threshold_probs(const MaskStack& probs);

struct Counts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;
};

/// Counts over binary planes; pixels with ignore >= 0.5 are skipped.
/// Throws DimensionError on size mismatch.
[[nodiscard]] Counts count_plane(std::span<const float> pred, std::span<const float> gt,
                                 std::span<const float> ignore = {});

/// tp / (tp + fp + fn); 1 when all three are zero.
[[nodiscard]] double iou(const Counts& c);
/// 2tp / (2tp + fp + fn); 1 when all three are zero.
[[nodiscard]] double f1(const Counts& c);
[[nodiscard]] double iou(std::span<const float> pred, std::span<const float> gt, std::span<const float> ignore = {});
[[nodiscard]] double f1(std::span<const float> pred, std::span<const float> gt, std::span<const float> ignore = {});

/// H x W plane marking pixels within Chebyshev distance `radius` of a pixel
/// whose label vector differs (background included).
[[nodiscard]] std::vector<float> erode_gt(const MaskStack& gt, int radius);

using Rgb = std::array<std::uint8_t, 3>;

struct Palette {
  std::map<std::string, Rgb> colors;
  Rgb background{0, 0, 0};
};

/// Fixed colours for the synthetic class names, a hue ramp for others.
[[nodiscard]] Palette default_palette(const ClassSet& classes);
/// JSON object class -> "#RRGGBB", with a "background" entry. Throws
/// ConfigError on malformed content.
[[nodiscard]] Palette parse_palette(const nlohmann::json& j);
[[nodiscard]] nlohmann::json palette_to_json(const Palette& p);

/// Colour of the most probable class where its probability is >= 0.5,
/// background elsewhere; ties go to the lower class index. Throws
/// ConfigError when a class has no colour.
[[nodiscard]] RasterImage render_multiclass(const MaskStack& probs, const ClassSet& classes, const Palette& palette);

struct ClassMetrics {
  double iou = 1.0;
  double f1 = 1.0;
  Counts counts;
};

struct MetricReport {
  std::map<std::string, ClassMetrics> per_class;
  std::vector<std::string> class_order;
  double overall_iou = 0.0;
  double overall_f1 = 0.0;
  int stage = 0;
  std::size_t epoch = 0;

  [[nodiscard]] nlohmann::json to_json() const;
  [[nodiscard]] std::string to_csv() const;
  [[nodiscard]] double mean_iou(const std::vector<std::string>& classes) const;
};

struct EvalOptions {
  int erode_radius = 3;
  /// Drops tiles where a class is absent from the ground truth from that
  /// class's aggregate.
  bool skip_absent = false;
  /// Averages per-tile scores instead of pooling counts.
  bool macro = false;
  /// Tiling used for full-image prediction; 0 predicts each image whole.
  std::size_t patch_size = 0;
  std::size_t overlap = 0;
};

/// Accumulates per-class results over tiles.
class MetricAccumulator {
 public:
  MetricAccumulator(std::vector<std::string> classes, EvalOptions opts);
  /// `pred` and `gt` are binary stacks in `classes` order.
  void add(const MaskStack& pred, const MaskStack& gt);
  [[nodiscard]] MetricReport report() const;

 private:
  std::vector<std::string> classes_;
  EvalOptions opts_;
  std::vector<Counts> totals_;
  std::vector<double> macro_iou_;
  std::vector<double> macro_f1_;
  std::vector<std::size_t> macro_n_;
};

using Predictor = std::function<MaskStack(const RasterImage& normalized)>;

/// Tiles, predicts each window and stitches the probabilities.
[[nodiscard]] MaskStack predict_tiled(const Predictor& predict, const RasterImage& normalized, std::size_t patch_size,
                                      std::size_t overlap);

/// Scores the classes shared by the model and the ground truth. Patches
/// carry masks in `patch_classes` order and 8-bit images.
[[nodiscard]] MetricReport evaluate_patches(const Predictor& predict, const ClassSet& model_classes,
                                            const std::vector<Patch>& patches, const ClassSet& patch_classes,
                                            const Normalization& norm, const EvalOptions& opts);
/// Same over the full images of a manifest.
[[nodiscard]] MetricReport evaluate_manifest(const Predictor& predict, const ClassSet& model_classes,
                                             const DatasetManifest& manifest, const EvalOptions& opts);

/// Scores predicted mask files `{stem}_{class}.png` in `pred_dir` against
/// the manifest. Throws DimensionError on shape mismatch, IoError on
/// missing files.
[[nodiscard]] MetricReport evaluate_mask_files(const std::filesystem::path& pred_dir, const DatasetManifest& manifest,
                                               const EvalOptions& opts);

}  // namespace incseg

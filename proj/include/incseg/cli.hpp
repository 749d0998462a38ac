#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "incseg/core_data.hpp"
#include "incseg/eval.hpp"
#include "incseg/trainer.hpp"
#include "json.hpp"

namespace incseg {

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class ShapeKind { kRectangle, kPolyline, kBlob, kDisc };

[[nodiscard]] ShapeKind parse_shape_kind(const std::string& s);
[[nodiscard]] std::string to_string(ShapeKind k);

struct SyntheticClass {
  std::string name;
  ShapeKind shape = ShapeKind::kRectangle;
  double density = 0.1;  // target fraction of image pixels
  Rgb color{128, 128, 128};
};

struct SyntheticSplit {
  std::string name;
  std::size_t images_per_city = 1;
  /// Index of the split's first city within each country; splits with
  /// disjoint ranges cover different cities.
  std::size_t first_city = 0;
  /// Per-class multiplier on the class density within this split.
  std::map<std::string, double> density_scale{};
};

/// One manifest written over one split, annotating `classes` only.
struct SyntheticManifest {
  std::string file;
  std::string split;
  int stage_id = 1;
  std::vector<std::string> classes;
};

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t image_size = 128;
  std::size_t countries = 2;
  std::size_t cities_per_country = 2;
  /// Per-country colour offset applied to every class and the background.
  int country_shift = 30;
  /// Standard deviation of a per-city colour offset, drawn separately for
  /// the background and each class.
  double city_shift = 0.0;
  double noise_sigma = 8.0;
  Rgb background{120, 110, 90};
  std::vector<SyntheticClass> classes;
  std::vector<SyntheticSplit> splits;
  std::vector<SyntheticManifest> manifests;
  Normalization normalization = SubtractConstant{};

  /// Throws ConfigError on malformed specs.
  [[nodiscard]] static SyntheticSpec from_json(const nlohmann::json& j);
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Four-class default corpus: building rectangles, road polylines,
/// vegetation blobs and water discs over two countries.
[[nodiscard]] SyntheticSpec default_synthetic_spec(std::uint64_t seed);

/// Writes `images/`, `masks/` (one full-resolution mask per class and
/// image) and the requested manifests under `out_dir`. Returns the
/// manifests in spec order. Throws IoError when `out_dir` is unwritable.
std::vector<DatasetManifest> synth_generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Experiment configuration

struct TilingProfile {
  std::size_t patch_size = 64;
  std::size_t overlap = 0;
  std::size_t val_patch_size = 0;  // 0 predicts validation images whole
  std::size_t val_overlap = 0;
};

/// "luxcarta" (384/32 training, 2240/64 validation), "benchmark" (512/64,
/// 2016/120) or "desk" (64/0, 64/16).
[[nodiscard]] TilingProfile tiling_profile(const std::string& name);

struct StageConfig {
  std::filesystem::path manifest;    // either a manifest ...
  std::filesystem::path patch_cache; // ... or a `prepare` output directory
  std::string schedule;
};

struct ExperimentConfig {
  Strategy strategy = Strategy::kIncremental;
  std::vector<StageConfig> stages;
  std::vector<std::filesystem::path> validation;
  OptimizerConfig optimizer;
  std::size_t epochs = 500;
  std::size_t iters_per_epoch = 100;
  std::string tiling_name = "luxcarta";
  TilingProfile tiling;
  AugmentConfig augment;
  double frac_importance = 0.15;
  double frac_random = 0.15;
  double width_scale = 1.0 / 8.0;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  bool desk_scale = false;
  EvalOptions eval;
  std::size_t eval_every = 1;
  std::size_t checkpoint_every = 0;

  /// Applies defaults (desk-scale ones when `desk_scale` is set) and
  /// validates. Relative paths resolve against `base_dir`; a relative
  /// output directory resolves against $INCSEG_OUTPUT_ROOT when set.
  /// Throws ConfigError.
  [[nodiscard]] static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  /// Effective configuration with every default spelled out.
  [[nodiscard]] nlohmann::json to_json() const;
  [[nodiscard]] TrainSettings train_settings() const;
};

[[nodiscard]] ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Loads manifests or patch caches, merging them for the static strategy.
[[nodiscard]] std::vector<StageData> prepare_stage_data(const ExperimentConfig& cfg);

/// Runs an experiment; writes effective_config.json, metrics.jsonl,
/// checkpoints/, buffers/ and reports/ under the output directory, guarded
/// by a lock file.
void run_experiment(const ExperimentConfig& cfg);

/// Tiles a manifest into a patch cache directory with an `index.json`.
void prepare_patch_cache(const DatasetManifest& manifest, std::size_t patch_size, std::size_t overlap,
                         const std::filesystem::path& out_dir);
[[nodiscard]] StageData load_patch_cache(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Plots

/// Draws one IoU-versus-epoch figure per class plus `overall_iou.png`, one
/// series per (file, strategy), with dashed markers at stage transitions.
/// Returns the written files. Throws DataError when no eval record exists.
std::vector<std::filesystem::path> plot_metrics(const std::vector<std::filesystem::path>& metrics_files,
                                                const std::filesystem::path& out_dir);

/// Entry point of the command-line tool.
int run_command(int argc, char** argv);

}  // namespace incseg

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "incseg/augment.hpp"
#include "incseg/core_data.hpp"
#include "incseg/rehearsal.hpp"
#include "incseg/segnet.hpp"
#include "incseg/tiling.hpp"
#include "json.hpp"

namespace incseg {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 12;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Adam moments of one parameter tensor.
struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
  std::uint64_t t = 0;
};

/// Per-parameter moments keyed by parameter name.
struct OptimizerState {
  std::map<std::string, AdamMoments> moments;
};

/// One bias-corrected Adam update of a single tensor.
void adam_update(std::span<float> param, std::span<const float> grad, AdamMoments& state,
                 const OptimizerConfig& opt);

/// Updates every parameter allowed by `mask` (empty gradient vectors are
/// skipped); excluded parameters and their moments are left untouched.
/// Throws NumericError naming the iteration and parameter on a non-finite
/// gradient, ValidationError on a frozen network.
void optimizer_step(SegNetwork& net, const std::vector<std::vector<float>>& grads, const FreezeMask& mask,
                    OptimizerState& state, const OptimizerConfig& opt, std::uint64_t iteration);

struct ScheduleStep {
  enum class Kind { kAdapt, kRem };
  Kind kind = Kind::kAdapt;
  int stage_id = 0;  // rem steps only
  std::size_t iterations = 1;
  friend bool operator==(const ScheduleStep&, const ScheduleStep&) = default;
};

/// Interleaving program, e.g. "rem(1):1,adapt:4". The cycle repeats across
/// epoch boundaries; every optimization step counts toward
/// `iters_per_epoch`.
struct StageSchedule {
  std::vector<ScheduleStep> cycle;
  std::size_t epochs = 1;
  std::size_t iters_per_epoch = 1;

  /// Throws ConfigError on malformed text.
  [[nodiscard]] static StageSchedule parse(const std::string& dsl, std::size_t epochs, std::size_t iters_per_epoch);
  [[nodiscard]] std::string to_string() const;
  [[nodiscard]] std::size_t cycle_length() const;
  /// Step kind active at global iteration `it` (0-based).
  [[nodiscard]] const ScheduleStep& step_at(std::size_t it) const;
  [[nodiscard]] std::size_t total_iterations() const { return epochs * iters_per_epoch; }
  /// Copy with every rem step removed.
  [[nodiscard]] StageSchedule without_rem() const;
};

/// Default cycle for the stage at position `stage_index` (0-based) of a
/// sequence with the given earlier stage ids: one rem step per earlier stage
/// and four adapt steps per cycle in total.
[[nodiscard]] std::string default_schedule(const std::vector<int>& earlier_stage_ids);

enum class Strategy { kStatic, kMultiple, kFixedRepresentation, kFineTuning, kIncremental, kIncrementalNoRem };

/// Throws ConfigError on an unknown name.
[[nodiscard]] Strategy parse_strategy(const std::string& s);
[[nodiscard]] std::string to_string(Strategy s);

/// Country -> city -> patch sampler over patches carrying masks.
class PatchPool {
 public:
  PatchPool() = default;
  explicit PatchPool(std::vector<Patch> patches);

  [[nodiscard]] std::size_t size() const { return patches_.size(); }
  [[nodiscard]] bool empty() const { return patches_.empty(); }
  [[nodiscard]] const std::vector<Patch>& patches() const { return patches_; }
  /// Index of a hierarchically drawn patch. Throws DataError when empty.
  [[nodiscard]] std::size_t sample_index(Rng& rng) const;

 private:
  std::vector<Patch> patches_;
  // countries[i].second[j].second lists the patch indices of one city.
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::vector<std::size_t>>>>> countries_;
};

struct AugmentConfig {
  AugmentProfile profile = AugmentProfile::kLuxcarta;
  RadiometricToggles radiometric;
  bool on_buffers = true;
};

/// `batch_size` independent hierarchical draws, each augmented with freshly
/// sampled parameters.
[[nodiscard]] std::vector<Patch> sample_batch(const PatchPool& pool, std::size_t batch_size, Rng& rng,
                                              AugmentProfile profile, RadiometricToggles toggles = {});

/// Tiles every manifest item and tags patches with stage, country and city.
[[nodiscard]] std::vector<Patch> load_stage_patches(const DatasetManifest& manifest, std::size_t patch_size,
                                                    std::size_t overlap);

/// Manifest over the union of classes where each image carries every
/// stage's annotations. Throws DataError when an image lacks a class.
[[nodiscard]] DatasetManifest merge_for_static(const std::vector<DatasetManifest>& stages);

/// Normalized N x C x H x W batch of patch images.
[[nodiscard]] Tensor4<float> batch_images(const std::vector<Patch>& batch, const Normalization& norm);
/// N x K x H x W targets for the given mask planes of each patch.
[[nodiscard]] Tensor4<float> batch_masks(const std::vector<Patch>& batch, const std::vector<std::size_t>& planes);

/// What is evaluated after a stage: one network, or several whose class
/// sets are concatenated (multiple learning).
struct Model {
  std::vector<SegNetwork> networks;

  [[nodiscard]] ClassSet class_set() const;
  [[nodiscard]] MaskStack predict(const RasterImage& normalized) const;
};

/// Append-only JSON-lines stream.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::filesystem::path& file);
  void write(const nlohmann::json& record);
  [[nodiscard]] const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::vector<nlohmann::json> records_;
};

struct StageData {
  DatasetManifest manifest;
  std::vector<Patch> patches;
};

struct TrainSettings {
  OptimizerConfig optimizer;
  std::size_t epochs = 20;
  std::size_t iters_per_epoch = 50;
  /// Cycle DSL per stage position; missing or empty entries use
  /// default_schedule.
  std::vector<std::string> schedules;
  AugmentConfig augment;
  double frac_importance = 0.15;
  double frac_random = 0.15;
  double width_scale = 1.0 / 8.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;        // epochs; 0 evaluates only at stage ends
  std::size_t checkpoint_every = 0;  // epochs; 0 writes stage-end checkpoints only
  std::optional<std::filesystem::path> out_dir;
};

struct EpochInfo {
  Strategy strategy = Strategy::kIncremental;
  std::size_t stage_index = 0;
  int stage_id = 0;
  std::size_t epoch = 0;         // 1-based within the stage
  std::size_t global_epoch = 0;  // 1-based across stages
  bool stage_end = false;
};

/// Returns an evaluation record (or null) that is appended to the metrics
/// stream with the epoch tags.
using EpochHook = std::function<nlohmann::json(const EpochInfo&, const Model&)>;

/// Runs one strategy stage by stage. Stage-one training does not depend on
/// the strategy (except static), so a runner that finished its first stage
/// may be forked into any other non-static strategy.
class StrategyRunner {
 public:
  StrategyRunner(Strategy strategy, std::vector<StageData> stages, TrainSettings settings);

  [[nodiscard]] Strategy strategy() const { return strategy_; }
  [[nodiscard]] bool done() const { return next_stage_ >= stages_.size(); }
  [[nodiscard]] std::size_t next_stage() const { return next_stage_; }
  /// Checks the stage sequence, schedules and buffer references up front.
  void validate() const;
  void run_stage(MetricsSink& sink, const EpochHook& hook = {});
  void run_all(MetricsSink& sink, const EpochHook& hook = {});

  /// Copy continuing as `other`. Throws ValidationError unless exactly one
  /// stage has run and neither strategy is static.
  [[nodiscard]] StrategyRunner fork(Strategy other) const;

  [[nodiscard]] const Model& model() const { return model_; }
  /// The network trained in each finished stage.
  [[nodiscard]] const std::vector<SegNetwork>& stage_networks() const { return stage_nets_; }
  [[nodiscard]] const std::map<int, RehearsalBuffer>& buffers() const { return buffers_; }
  [[nodiscard]] StageSchedule schedule_for(std::size_t stage_index) const;

 private:
  void train(SegNetwork& net, const SegNetwork* memory, std::size_t stage_index, const FreezeMask& adapt_mask,
             const StageSchedule& schedule, MetricsSink& sink, const EpochHook& hook);
  void refresh_model(const SegNetwork& current);

  Strategy strategy_;
  std::vector<StageData> stages_;
  TrainSettings settings_;
  std::size_t next_stage_ = 0;
  std::size_t global_epoch_ = 0;
  std::vector<SegNetwork> stage_nets_;
  std::map<int, RehearsalBuffer> buffers_;
  Model model_;
};

/// Runs every stage of `strategy`; returns the per-stage networks.
std::vector<SegNetwork> run_strategy(Strategy strategy, std::vector<StageData> stages, const TrainSettings& settings,
                                     MetricsSink& sink, const EpochHook& hook = {});

}  // namespace incseg

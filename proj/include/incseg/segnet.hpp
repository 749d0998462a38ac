#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "incseg/augment.hpp"
#include "incseg/core_data.hpp"
#include "incseg/tensor.hpp"

namespace incseg {

/// Encoder filter counts per pooling stage before width scaling.
inline constexpr std::size_t kBaseWidths[5] = {64, 128, 256, 512, 512};
/// Convolutions per encoder stage (the 13 convolutions of VGG16).
inline constexpr std::size_t kStageConvs[5] = {2, 2, 3, 3, 3};
inline constexpr std::size_t kCenterConvs = 2;
inline constexpr std::size_t kSpatialDivisor = 32;

struct NetworkSpec {
  std::size_t in_channels = 3;
  ClassSet class_set;
  double width_scale = 1.0 / 8.0;

  /// Scaled widths for the five stages; throws ParameterError if any is 0.
  [[nodiscard]] std::vector<std::size_t> widths() const;
};

struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t size() const;
};

template <typename T>
struct ParameterValues {
  Parameter meta;
  std::vector<T> value;
};

/// Record of one stage that contributed classes to a network.
struct StageRecord {
  int stage_id = 0;
  std::vector<std::string> classes;
  friend bool operator==(const StageRecord&, const StageRecord&) = default;
};

/// Names of the parameters an optimizer may update.
struct FreezeMask {
  std::set<std::string> trainable;
  [[nodiscard]] bool allows(const std::string& name) const { return trainable.contains(name); }
};

enum class NetworkMode { kTrainable, kFrozenMemory };

template <typename T>
struct ForwardCache;

struct ForwardOptions {
  /// Node names whose output is replaced with zeros after it is computed.
  std::set<std::string> ablate;
};

/// Encoder-decoder with per-pooling-stage skip concatenations and one 3x3
/// classification filter per class. Forward returns logits; apply
/// `sigmoid` for probabilities.
template <typename T>
class BasicSegNetwork {
 public:
  BasicSegNetwork() = default;

  /// Xavier-uniform weights, zero biases. Throws ParameterError for specs
  /// whose width scale leaves a layer without filters.
  static BasicSegNetwork build(const NetworkSpec& spec, Rng& rng);

  [[nodiscard]] const NetworkSpec& spec() const { return spec_; }
  [[nodiscard]] const ClassSet& class_set() const { return spec_.class_set; }
  [[nodiscard]] NetworkMode mode() const { return mode_; }
  [[nodiscard]] bool frozen() const { return mode_ == NetworkMode::kFrozenMemory; }
  void freeze() { mode_ = NetworkMode::kFrozenMemory; }
  [[nodiscard]] const std::vector<StageRecord>& stage_history() const { return history_; }
  void record_stage(StageRecord r) { history_.push_back(std::move(r)); }

  [[nodiscard]] const std::vector<ParameterValues<T>>& parameters() const { return params_; }
  /// Mutable access; throws ValidationError on a frozen network.
  [[nodiscard]] std::vector<ParameterValues<T>>& mutable_parameters();
  [[nodiscard]] const ParameterValues<T>& parameter(const std::string& name) const;
  [[nodiscard]] std::size_t parameter_index(const std::string& name) const;
  [[nodiscard]] std::size_t parameter_count() const;
  /// Shared-layer parameter names (everything except classification heads).
  [[nodiscard]] std::vector<std::string> shared_parameter_names() const;
  [[nodiscard]] static std::string head_weight_name(const std::string& cls) { return "head." + cls + ".weight"; }
  [[nodiscard]] static std::string head_bias_name(const std::string& cls) { return "head." + cls + ".bias"; }

  /// `x` is N x C x H x W with H, W divisible by 32; returns N x K x H x W
  /// logits. Throws DimensionError on shape violations.
  [[nodiscard]] Tensor4<T> forward(const Tensor4<T>& x, ForwardCache<T>* cache = nullptr,
                                   const ForwardOptions& opts = {}) const;

  /// Back-propagates `dlogits` through the cached forward pass. Returns one
  /// gradient vector per parameter; gradients are only computed (others
  /// stay empty) for parameters flagged in `wanted` (all when empty).
  [[nodiscard]] std::vector<std::vector<T>> backward(const ForwardCache<T>& cache, const Tensor4<T>& dlogits,
                                                     const std::vector<bool>& wanted = {}) const;

  /// Appends Xavier-initialized heads for `new_classes`; everything else is
  /// copied. The result is trainable. Throws ValidationError on overlap.
  [[nodiscard]] BasicSegNetwork expand_classifier(const ClassSet& new_classes, Rng& rng) const;

  /// Shared layers copied, heads replaced by fresh ones for `classes`.
  [[nodiscard]] BasicSegNetwork replace_classifier(const ClassSet& classes, Rng& rng) const;

  /// Shared layers of `shared` topped with the heads of every source, in
  /// source order. Throws ValidationError on class overlap or when a source
  /// has a different shared architecture.
  [[nodiscard]] static BasicSegNetwork graft(const BasicSegNetwork& shared,
                                             const std::vector<const BasicSegNetwork*>& head_sources);

  template <typename U>
  [[nodiscard]] BasicSegNetwork<U> cast() const;

  /// Names of graph nodes in execution order (activation probes).
  [[nodiscard]] std::vector<std::string> node_names() const;

 private:
  template <typename U>
  friend class BasicSegNetwork;

  enum class Op { kInput, kConv, kDeconv, kPool, kConcat, kHead };
  struct Node {
    Op op = Op::kInput;
    std::string name;
    int in0 = -1, in1 = -1;
    std::size_t cin = 0, cout = 0;
    int weight = -1, bias = -1;
    bool relu = false;
  };

  void build_graph();
  void add_head(const std::string& cls, Rng& rng);

  NetworkSpec spec_;
  NetworkMode mode_ = NetworkMode::kTrainable;
  std::vector<ParameterValues<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<Node> nodes_;
  std::vector<StageRecord> history_;
};

template <typename T>
struct ForwardCache {
  std::vector<Tensor4<T>> activations;              // one per graph node
  std::vector<std::vector<std::uint8_t>> argmax;    // pooling nodes only
  std::vector<std::string> names;

  [[nodiscard]] const Tensor4<T>& probe(const std::string& name) const;
  /// Hash of every ReLU on/off state and pooling choice.
  [[nodiscard]] std::uint64_t activation_pattern() const;
};

using SegNetwork = BasicSegNetwork<float>;
using SegNetwork64 = BasicSegNetwork<double>;

[[nodiscard]] inline SegNetwork build_network(const NetworkSpec& spec, Rng& rng) {
  return SegNetwork::build(spec, rng);
}

/// Closed-form Xavier-uniform bound sqrt(6 / (fan_in + fan_out)).
[[nodiscard]] double xavier_bound(std::size_t fan_in, std::size_t fan_out);

/// Trainable set for remembering stage `stage_classes`: all shared layers
/// plus the heads of those classes. Throws ValidationError on an unknown
/// class.
[[nodiscard]] FreezeMask freeze_for_remembering(const SegNetwork& net, const ClassSet& stage_classes);
/// Everything trainable.
[[nodiscard]] FreezeMask full_mask(const SegNetwork& net);
/// Heads of `classes` only (fixed-representation training).
[[nodiscard]] FreezeMask heads_only_mask(const SegNetwork& net, const ClassSet& classes);
/// Shared layers plus heads of `classes` (fine-tuning).
[[nodiscard]] FreezeMask shared_and_heads_mask(const SegNetwork& net, const ClassSet& classes);

template <typename T>
[[nodiscard]] Tensor4<T> sigmoid(const Tensor4<T>& logits);

/// Stacks normalized HWC images into an N x C x H x W batch.
template <typename T>
[[nodiscard]] Tensor4<T> images_to_batch(std::span<const RasterImage> images);
/// Stacks mask stacks into an N x K x H x W tensor.
template <typename T>
[[nodiscard]] Tensor4<T> masks_to_batch(std::span<const MaskStack> masks);
/// Sample `i` of a batch as a MaskStack.
template <typename T>
[[nodiscard]] MaskStack batch_sample_to_masks(const Tensor4<T>& t, std::size_t i);

/// Probabilities for one normalized image of any size whose sides are
/// multiples of 32.
[[nodiscard]] MaskStack predict_image(const SegNetwork& net, const RasterImage& normalized);

// Checkpoint container: magic, version, JSON metadata block, then one
// record per parameter (name, dtype, shape, raw little-endian float32).
[[nodiscard]] std::string save_checkpoint(const SegNetwork& net);
[[nodiscard]] SegNetwork load_checkpoint(const std::string& bytes);
void save_checkpoint_file(const SegNetwork& net, const std::filesystem::path& path);
[[nodiscard]] SegNetwork load_checkpoint_file(const std::filesystem::path& path);

}  // namespace incseg

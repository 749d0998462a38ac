#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "incseg/augment.hpp"
#include "incseg/core_data.hpp"
#include "incseg/tiling.hpp"

namespace incseg {

/// Median-frequency balancing weights for one stage's classes.
struct ClassWeights {
  std::map<std::string, double> weights;
};

enum class Provenance { kImportance, kRandom };

/// Stored fraction of a finished stage. Patches carry masks for `class_set`
/// only; `importance`, `provenance` and `source_index` are parallel arrays.
struct RehearsalBuffer {
  int stage_id = 0;
  ClassSet class_set;
  std::vector<Patch> patches;
  std::vector<double> importance;
  std::vector<Provenance> provenance;
  std::vector<std::size_t> source_index;  // index into the stage's patch list

  [[nodiscard]] std::size_t size() const { return patches.size(); }
};

/// Per-class pixel count of a patch (mask value >= 0.5 counts as labelled).
[[nodiscard]] std::map<std::string, double> patch_class_counts(const Patch& patch, const ClassSet& class_set);

/// f_c = labelled pixels of c / all pixels, over every patch.
[[nodiscard]] std::map<std::string, double> class_frequencies(const std::vector<Patch>& patches,
                                                              const ClassSet& class_set);

/// Labelled pixels per class summed over every patch.
[[nodiscard]] std::map<std::string, double> class_pixel_totals(const std::vector<Patch>& patches,
                                                               const ClassSet& class_set);

/// w_c = median(f) / f_c, for frequencies or pixel totals alike. Absent
/// classes (f_c = 0) get weight 0 and a warning on stderr. Even class counts use the mean of the middle pair.
[[nodiscard]] ClassWeights class_weights(const std::map<std::string, double>& freqs);

/// I = sum_c w_c * n_c, n_c the pixel count of class c in the patch.
[[nodiscard]] double patch_importance(const std::map<std::string, double>& patch_counts, const ClassWeights& w);

/// ceil(frac * n) with a guard against representation error (0.15 * 20 -> 3).
[[nodiscard]] std::size_t fraction_count(double frac, std::size_t n);

/// Keeps the ceil(frac_importance * N) highest-importance patches (ties by
/// ascending index) and ceil(frac_random * N) uniformly drawn ones from the
/// rest. Throws ParameterError when the fractions sum above 1.
[[nodiscard]] RehearsalBuffer select_rehearsal(const std::vector<Patch>& patches, const ClassSet& class_set,
                                               int stage_id, double frac_importance, double frac_random,
                                               Rng& rng);

/// Directory layout: `buffer.json` plus one patch cache file per patch.
void save_buffer(const RehearsalBuffer& buffer, const std::filesystem::path& dir);
[[nodiscard]] RehearsalBuffer load_buffer(const std::filesystem::path& dir);

}  // namespace incseg

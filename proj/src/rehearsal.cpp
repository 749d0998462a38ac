#include "incseg/rehearsal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace incseg {

using nlohmann::json;

std::map<std::string, double> patch_class_counts(const Patch& patch, const ClassSet& class_set) {
  if (!patch.masks) throw ValidationError("patch carries no masks");
  const auto& m = *patch.masks;
  if (m.planes != class_set.size()) {
    throw ValidationError("patch has " + std::to_string(m.planes) + " mask planes for " +
                          std::to_string(class_set.size()) + " classes");
  }
  std::map<std::string, double> counts;
  const std::size_t n = m.plane_size();
  for (std::size_t k = 0; k < m.planes; ++k) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c += m.values[k * n + i] >= 0.5f ? 1 : 0;
    counts[class_set[k]] = static_cast<double>(c);
  }
  return counts;
}

std::map<std::string, double> class_pixel_totals(const std::vector<Patch>& patches, const ClassSet& class_set) {
  if (patches.empty()) throw ParameterError("class frequencies need at least one patch");
  std::map<std::string, double> labelled;
  for (const auto& name : class_set.names()) labelled[name] = 0.0;
  for (const auto& p : patches) {
    for (const auto& [cls, c] : patch_class_counts(p, class_set)) labelled[cls] += c;
  }
  return labelled;
}

std::map<std::string, double> class_frequencies(const std::vector<Patch>& patches, const ClassSet& class_set) {
  auto labelled = class_pixel_totals(patches, class_set);
  double total = 0.0;
  for (const auto& p : patches) total += static_cast<double>(p.masks->plane_size());
  for (auto& [cls, v] : labelled) v /= total;
  return labelled;
}

ClassWeights class_weights(const std::map<std::string, double>& freqs) {
  if (freqs.empty()) throw DegenerateDataError("no class frequencies given");
  std::vector<double> f;
  for (const auto& [cls, v] : freqs) {
    if (v < 0.0) throw ValidationError("negative frequency for class '" + cls + "'");
    f.push_back(v);
  }
  if (std::all_of(f.begin(), f.end(), [](double v) { return v == 0.0; })) {
    throw DegenerateDataError("every class frequency is zero");
  }
  std::sort(f.begin(), f.end());
  const std::size_t n = f.size();
  const double median = (n % 2 == 1) ? f[n / 2] : 0.5 * (f[n / 2 - 1] + f[n / 2]);
  ClassWeights w;
  for (const auto& [cls, v] : freqs) {
    if (v == 0.0) {
      std::cerr << "warning: class '" << cls << "' has no labelled pixels; weight set to 0\n";
      w.weights[cls] = 0.0;
    } else {
      w.weights[cls] = median / v;
    }
  }
  return w;
}

double patch_importance(const std::map<std::string, double>& patch_counts, const ClassWeights& w) {
  double sum = 0.0;
  for (const auto& [cls, count] : patch_counts) {
    if (count < 0.0) throw ValidationError("negative pixel count for class '" + cls + "'");
    auto it = w.weights.find(cls);
    if (it == w.weights.end()) throw ValidationError("no weight for class '" + cls + "'");
    sum += it->second * count;
  }
  return sum;
}

std::size_t fraction_count(double frac, std::size_t n) {
  const double x = frac * static_cast<double>(n);
  return static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

RehearsalBuffer select_rehearsal(const std::vector<Patch>& patches, const ClassSet& class_set, int stage_id,
                                 double frac_importance, double frac_random, Rng& rng) {
  if (frac_importance < 0.0 || frac_random < 0.0) throw ParameterError("rehearsal fractions must be >= 0");
  if (frac_importance + frac_random > 1.0 + 1e-12) throw ParameterError("rehearsal fractions sum above 1");
  RehearsalBuffer buf;
  buf.stage_id = stage_id;
  buf.class_set = class_set;
  const std::size_t n = patches.size();
  const std::size_t k_imp = std::min(n, fraction_count(frac_importance, n));
  const std::size_t k_rand = std::min(n - k_imp, fraction_count(frac_random, n));
  if (k_imp + k_rand == 0) return buf;

  const auto weights = class_weights(class_pixel_totals(patches, class_set));
  std::vector<double> importance(n);
  for (std::size_t i = 0; i < n; ++i) importance[i] = patch_importance(patch_class_counts(patches[i], class_set), weights);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });

  auto take = [&](std::size_t idx, Provenance prov) {
    buf.patches.push_back(patches[idx]);
    buf.importance.push_back(importance[idx]);
    buf.provenance.push_back(prov);
    buf.source_index.push_back(idx);
  };
  for (std::size_t i = 0; i < k_imp; ++i) take(order[i], Provenance::kImportance);

  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(k_imp), order.end());
  std::sort(rest.begin(), rest.end());
  // Partial Fisher-Yates: the first k_rand entries become the sample.
  for (std::size_t i = 0; i < k_rand; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rest.size() - 1);
    std::swap(rest[i], rest[pick(rng)]);
    take(rest[i], Provenance::kRandom);
  }
  return buf;
}

void save_buffer(const RehearsalBuffer& buffer, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto names = write_patch_cache(buffer.patches, dir);
  json entries = json::array();
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    entries.push_back({{"file", names[i]},
                       {"importance", buffer.importance[i]},
                       {"provenance", buffer.provenance[i] == Provenance::kImportance ? "importance" : "random"},
                       {"source_index", buffer.source_index[i]}});
  }
  json j{{"stage_id", buffer.stage_id}, {"classes", buffer.class_set.names()}, {"patches", entries}};
  std::ofstream out(dir / "buffer.json");
  if (!out) throw IoError("cannot write " + (dir / "buffer.json").string());
  out << j.dump(2) << '\n';
}

RehearsalBuffer load_buffer(const std::filesystem::path& dir) {
  const auto file = dir / "buffer.json";
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  RehearsalBuffer buf;
  try {
    buf.stage_id = j.at("stage_id").get<int>();
    buf.class_set = ClassSet(j.at("classes").get<std::vector<std::string>>());
    for (const auto& e : j.at("patches")) {
      buf.patches.push_back(read_patch(dir / e.at("file").get<std::string>()));
      buf.importance.push_back(e.at("importance").get<double>());
      const auto prov = e.at("provenance").get<std::string>();
      if (prov != "importance" && prov != "random") throw FormatError("unknown provenance '" + prov + "'");
      buf.provenance.push_back(prov == "importance" ? Provenance::kImportance : Provenance::kRandom);
      buf.source_index.push_back(e.at("source_index").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  return buf;
}

}  // namespace incseg

#include "incseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

namespace incseg {

using nlohmann::json;

MaskStack threshold_probs(const MaskStack& probs) {
  MaskStack out = probs;
  for (auto& v : out.values) v = v >= kDecisionThreshold ? 1.0f : 0.0f;
  return out;
}

Counts count_plane(std::span<const float> pred, std::span<const float> gt, std::span<const float> ignore) {
  if (pred.size() != gt.size()) throw DimensionError("prediction and ground truth sizes differ");
  if (!ignore.empty() && ignore.size() != gt.size()) throw DimensionError("ignore plane size differs");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!ignore.empty() && ignore[i] >= 0.5f) continue;
    const bool p = pred[i] >= 0.5f;
    const bool g = gt[i] >= 0.5f;
    c.tp += static_cast<std::uint64_t>(p && g);
    c.fp += static_cast<std::uint64_t>(p && !g);
    c.fn += static_cast<std::uint64_t>(!p && g);
  }
  return c;
}

double iou(const Counts& c) {
  const auto denom = c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double f1(const Counts& c) {
  const auto denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double iou(std::span<const float> pred, std::span<const float> gt, std::span<const float> ignore) {
  return iou(count_plane(pred, gt, ignore));
}

double f1(std::span<const float> pred, std::span<const float> gt, std::span<const float> ignore) {
  return f1(count_plane(pred, gt, ignore));
}

std::vector<float> erode_gt(const MaskStack& gt, int radius) {
  if (radius < 0) throw ParameterError("erode radius must be >= 0");
  if (gt.planes > 64) throw ParameterError("erode_gt supports at most 64 classes");
  const std::size_t h = gt.height;
  const std::size_t w = gt.width;
  std::vector<float> ignore(h * w, 0.0f);
  if (radius == 0 || h == 0 || w == 0) return ignore;
  std::vector<std::uint64_t> code(h * w, 0);
  for (std::size_t k = 0; k < gt.planes; ++k) {
    for (std::size_t i = 0; i < h * w; ++i) {
      if (gt.values[k * h * w + i] >= 0.5f) code[i] |= std::uint64_t{1} << k;
    }
  }
  // Separable min/max filters over the (2r+1)^2 window; a pixel lies near a
  // boundary when the window holds more than one label vector.
  const auto r = static_cast<std::size_t>(radius);
  std::vector<std::uint64_t> rmin(h * w);
  std::vector<std::uint64_t> rmax(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0;
      const std::size_t x1 = std::min(w - 1, x + r);
      std::uint64_t lo = code[y * w + x0];
      std::uint64_t hi = lo;
      for (std::size_t xx = x0 + 1; xx <= x1; ++xx) {
        lo = std::min(lo, code[y * w + xx]);
        hi = std::max(hi, code[y * w + xx]);
      }
      rmin[y * w + x] = lo;
      rmax[y * w + x] = hi;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t y0 = y >= r ? y - r : 0;
    const std::size_t y1 = std::min(h - 1, y + r);
    for (std::size_t x = 0; x < w; ++x) {
      std::uint64_t lo = rmin[y0 * w + x];
      std::uint64_t hi = rmax[y0 * w + x];
      for (std::size_t yy = y0 + 1; yy <= y1; ++yy) {
        lo = std::min(lo, rmin[yy * w + x]);
        hi = std::max(hi, rmax[yy * w + x]);
      }
      if (lo != hi) ignore[y * w + x] = 1.0f;
    }
  }
  return ignore;
}

// ---------------------------------------------------------------------------
// Rendering

Palette default_palette(const ClassSet& classes) {
  static const std::map<std::string, Rgb> known = {
      {"building", {230, 25, 75}}, {"road", {128, 128, 128}}, {"vegetation", {60, 180, 75}},
      {"high_veg", {60, 180, 75}}, {"water", {0, 130, 200}},   {"railway", {245, 130, 48}},
  };
  Palette p;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& name = classes[i];
    if (auto it = known.find(name); it != known.end()) {
      p.colors[name] = it->second;
      continue;
    }
    const double hue = 360.0 * static_cast<double>(i) / static_cast<double>(classes.size());
    const double hp = hue / 60.0;
    const double xv = 1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0);
    double rgb[3] = {0, 0, 0};
    switch (static_cast<int>(hp)) {
      case 0: rgb[0] = 1; rgb[1] = xv; break;
      case 1: rgb[0] = xv; rgb[1] = 1; break;
      case 2: rgb[1] = 1; rgb[2] = xv; break;
      case 3: rgb[1] = xv; rgb[2] = 1; break;
      case 4: rgb[0] = xv; rgb[2] = 1; break;
      default: rgb[0] = 1; rgb[2] = xv; break;
    }
    p.colors[name] = {static_cast<std::uint8_t>(rgb[0] * 255), static_cast<std::uint8_t>(rgb[1] * 255),
                      static_cast<std::uint8_t>(rgb[2] * 255)};
  }
  return p;
}

namespace {

Rgb parse_hex(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError("palette entry '" + key + "' must be a \"#RRGGBB\" string");
  const auto s = v.get<std::string>();
  if (s.size() != 7 || s[0] != '#' ||
      !std::all_of(s.begin() + 1, s.end(), [](unsigned char c) { return std::isxdigit(c); })) {
    throw ConfigError("palette entry '" + key + "' is not #RRGGBB: " + s);
  }
  Rgb c;
  for (int i = 0; i < 3; ++i) c[i] = static_cast<std::uint8_t>(std::stoi(s.substr(1 + 2 * i, 2), nullptr, 16));
  return c;
}

std::string to_hex(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

}  // namespace

Palette parse_palette(const json& j) {
  if (!j.is_object()) throw ConfigError("palette must be a JSON object");
  if (!j.contains("background")) throw ConfigError("palette lacks a 'background' entry");
  Palette p;
  for (const auto& [k, v] : j.items()) {
    if (k == "background") {
      p.background = parse_hex(k, v);
    } else {
      p.colors[k] = parse_hex(k, v);
    }
  }
  return p;
}

json palette_to_json(const Palette& p) {
  json j = json::object();
  j["background"] = to_hex(p.background);
  for (const auto& [k, c] : p.colors) j[k] = to_hex(c);
  return j;
}

RasterImage render_multiclass(const MaskStack& probs, const ClassSet& classes, const Palette& palette) {
  if (probs.planes != classes.size()) throw DimensionError("probability planes do not match class set");
  std::vector<Rgb> colors;
  for (const auto& cls : classes.names()) {
    auto it = palette.colors.find(cls);
    if (it == palette.colors.end()) throw ConfigError("palette has no colour for class '" + cls + "'");
    colors.push_back(it->second);
  }
  RasterImage out(probs.height, probs.width, 3, ValueDomain::kUint8);
  const std::size_t n = probs.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    int best = -1;
    float best_p = kDecisionThreshold;
    for (std::size_t k = 0; k < probs.planes; ++k) {
      const float p = probs.values[k * n + i];
      if (p >= kDecisionThreshold && (best < 0 || p > best_p)) {
        best = static_cast<int>(k);
        best_p = p;
      }
    }
    const Rgb& c = best < 0 ? palette.background : colors[static_cast<std::size_t>(best)];
    for (std::size_t ch = 0; ch < 3; ++ch) out.pixels[i * 3 + ch] = c[ch];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

json MetricReport::to_json() const {
  json pc = json::object();
  for (const auto& [cls, m] : per_class) {
    pc[cls] = {{"iou", m.iou}, {"f1", m.f1}, {"tp", m.counts.tp}, {"fp", m.counts.fp}, {"fn", m.counts.fn}};
  }
  return {{"per_class", pc},
          {"classes", class_order},
          {"overall", {{"iou", overall_iou}, {"f1", overall_f1}}},
          {"stage", stage},
          {"epoch", epoch}};
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "class,iou,f1,tp,fp,fn\n";
  for (const auto& cls : class_order) {
    const auto& m = per_class.at(cls);
    os << cls << ',' << m.iou << ',' << m.f1 << ',' << m.counts.tp << ',' << m.counts.fp << ',' << m.counts.fn << '\n';
  }
  os << "overall," << overall_iou << ',' << overall_f1 << ",,,\n";
  return os.str();
}

double MetricReport::mean_iou(const std::vector<std::string>& classes) const {
  if (classes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : classes) s += per_class.at(c).iou;
  return s / static_cast<double>(classes.size());
}

MetricAccumulator::MetricAccumulator(std::vector<std::string> classes, EvalOptions opts)
    : classes_(std::move(classes)),
      opts_(opts),
      totals_(classes_.size()),
      macro_iou_(classes_.size(), 0.0),
      macro_f1_(classes_.size(), 0.0),
      macro_n_(classes_.size(), 0) {}

void MetricAccumulator::add(const MaskStack& pred, const MaskStack& gt) {
  if (pred.planes != classes_.size() || gt.planes != classes_.size() || pred.height != gt.height ||
      pred.width != gt.width) {
    throw DimensionError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) + "x" +
                         std::to_string(pred.planes) + " does not match ground truth " + std::to_string(gt.height) +
                         "x" + std::to_string(gt.width) + "x" + std::to_string(gt.planes));
  }
  const auto ignore = erode_gt(gt, opts_.erode_radius);
  const std::size_t n = gt.plane_size();
  for (std::size_t k = 0; k < classes_.size(); ++k) {
    std::span<const float> p(pred.values.data() + k * n, n);
    std::span<const float> g(gt.values.data() + k * n, n);
    const Counts c = count_plane(p, g, ignore);
    if (opts_.skip_absent && c.tp + c.fn == 0) continue;
    totals_[k] += c;
    macro_iou_[k] += iou(c);
    macro_f1_[k] += f1(c);
    ++macro_n_[k];
  }
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.class_order = classes_;
  for (std::size_t k = 0; k < classes_.size(); ++k) {
    ClassMetrics m;
    m.counts = totals_[k];
    if (opts_.macro) {
      m.iou = macro_n_[k] == 0 ? 1.0 : macro_iou_[k] / static_cast<double>(macro_n_[k]);
      m.f1 = macro_n_[k] == 0 ? 1.0 : macro_f1_[k] / static_cast<double>(macro_n_[k]);
    } else {
      m.iou = iou(m.counts);
      m.f1 = f1(m.counts);
    }
    r.overall_iou += m.iou;
    r.overall_f1 += m.f1;
    r.per_class[classes_[k]] = m;
  }
  if (!classes_.empty()) {
    r.overall_iou /= static_cast<double>(classes_.size());
    r.overall_f1 /= static_cast<double>(classes_.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation drivers

MaskStack predict_tiled(const Predictor& predict, const RasterImage& normalized, std::size_t patch_size,
                        std::size_t overlap) {
  if (patch_size == 0) return predict(normalized);
  const auto grid = compute_grid(normalized.height, normalized.width, patch_size, overlap);
  std::vector<MaskStack> parts;
  parts.reserve(grid.windows.size());
  for (const auto& w : grid.windows) parts.push_back(predict(crop_image(normalized, w)));
  return stitch_predictions(parts, grid);
}

namespace {

struct ChannelMap {
  std::vector<std::string> classes;
  std::vector<std::size_t> model_planes;
  std::vector<std::size_t> gt_planes;
};

ChannelMap shared_channels(const ClassSet& model_classes, const ClassSet& gt_classes) {
  ChannelMap m;
  for (std::size_t k = 0; k < gt_classes.size(); ++k) {
    if (!model_classes.contains(gt_classes[k])) continue;
    m.classes.push_back(gt_classes[k]);
    m.model_planes.push_back(model_classes.index_of(gt_classes[k]));
    m.gt_planes.push_back(k);
  }
  return m;
}

}  // namespace

MetricReport evaluate_patches(const Predictor& predict, const ClassSet& model_classes,
                              const std::vector<Patch>& patches, const ClassSet& patch_classes,
                              const Normalization& norm, const EvalOptions& opts) {
  const auto map = shared_channels(model_classes, patch_classes);
  MetricAccumulator acc(map.classes, opts);
  for (const auto& p : patches) {
    if (!p.masks) throw DataError("evaluation patch has no masks");
    const auto probs = predict_tiled(predict, normalize_image(p.image, norm), opts.patch_size, opts.overlap);
    if (probs.planes != model_classes.size()) throw DimensionError("predictor output does not match its class set");
    acc.add(threshold_probs(probs.select(map.model_planes)), p.masks->select(map.gt_planes));
  }
  auto r = acc.report();
  return r;
}

MetricReport evaluate_manifest(const Predictor& predict, const ClassSet& model_classes,
                               const DatasetManifest& manifest, const EvalOptions& opts) {
  const auto map = shared_channels(model_classes, manifest.class_set);
  MetricAccumulator acc(map.classes, opts);
  for (std::size_t i = 0; i < manifest.items.size(); ++i) {
    const auto item = load_item(manifest, i);
    const auto probs = predict_tiled(predict, normalize_image(item.image, manifest.normalization), opts.patch_size,
                                     opts.overlap);
    acc.add(threshold_probs(probs.select(map.model_planes)), item.masks.select(map.gt_planes));
  }
  auto r = acc.report();
  r.stage = manifest.stage_id;
  return r;
}

MetricReport evaluate_mask_files(const std::filesystem::path& pred_dir, const DatasetManifest& manifest,
                                 const EvalOptions& opts) {
  MetricAccumulator acc(manifest.class_set.names(), opts);
  for (std::size_t i = 0; i < manifest.items.size(); ++i) {
    const auto item = load_item(manifest, i);
    MaskStack pred(manifest.class_set.size(), item.masks.height, item.masks.width);
    const std::string stem = manifest.items[i].image.stem().string();
    for (std::size_t k = 0; k < manifest.class_set.size(); ++k) {
      const auto file = pred_dir / (stem + "_" + manifest.class_set[k] + ".png");
      if (!std::filesystem::exists(file)) throw IoError("missing prediction " + file.string());
      const auto plane = read_mask_plane(file, item.masks.height, item.masks.width);
      std::copy(plane.begin(), plane.end(), pred.values.begin() + static_cast<std::ptrdiff_t>(k * pred.plane_size()));
    }
    acc.add(pred, item.masks);
  }
  auto r = acc.report();
  r.stage = manifest.stage_id;
  return r;
}

}  // namespace incseg

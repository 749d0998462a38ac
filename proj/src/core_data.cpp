#include "incseg/core_data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

ClassSet::ClassSet(std::vector<std::string> names) : names_(std::move(names)) {
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw ValidationError("class name must not be empty");
    if (!seen.insert(n).second) throw ValidationError("duplicate class name '" + n + "'");
  }
}

bool ClassSet::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ClassSet::index_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ValidationError("unknown class '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

bool ClassSet::disjoint_from(const ClassSet& other) const {
  return std::none_of(names_.begin(), names_.end(),
                      [&](const std::string& n) { return other.contains(n); });
}

ClassSet ClassSet::concat(const ClassSet& other) const {
  for (const auto& n : other.names_) {
    if (contains(n)) throw ValidationError("class '" + n + "' already present");
  }
  auto merged = names_;
  merged.insert(merged.end(), other.names_.begin(), other.names_.end());
  return ClassSet(std::move(merged));
}

RasterImage::RasterImage(std::size_t h, std::size_t w, std::size_t c, ValueDomain d)
    : height(h), width(w), channels(c), domain(d), pixels(h * w * c, 0.0f) {}

MaskStack::MaskStack(std::size_t k, std::size_t h, std::size_t w, float fill)
    : planes(k), height(h), width(w), values(k * h * w, fill) {}

bool MaskStack::is_binary() const {
  return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f || v == 1.0f; });
}

MaskStack MaskStack::select(const std::vector<std::size_t>& plane_indices) const {
  MaskStack out(plane_indices.size(), height, width);
  const std::size_t n = plane_size();
  for (std::size_t i = 0; i < plane_indices.size(); ++i) {
    const std::size_t src = plane_indices[i];
    if (src >= planes) throw DimensionError("plane index out of range");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(src * n), n,
                out.values.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string relative_or_absolute(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  auto rel = fs::relative(p, base, ec);
  if (ec || rel.empty()) return p.string();
  return rel.generic_string();
}

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw SchemaError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": key '" + key + "' has wrong type (" + e.what() + ")");
  }
}

}  // namespace

Normalization parse_normalization(const json& j) {
  const auto mode = require<std::string>(j, "mode", "normalization");
  if (mode == "subtract") {
    return SubtractConstant{j.value("value", 127.0)};
  }
  if (mode == "mean") {
    auto values = require<std::vector<double>>(j, "values", "normalization");
    if (values.empty()) throw SchemaError("normalization: 'values' must not be empty");
    return PerChannelMean{std::move(values)};
  }
  throw SchemaError("normalization: unknown mode '" + mode + "'");
}

json normalization_to_json(const Normalization& n) {
  if (const auto* s = std::get_if<SubtractConstant>(&n)) {
    return json{{"mode", "subtract"}, {"value", s->value}};
  }
  return json{{"mode", "mean"}, {"values", std::get<PerChannelMean>(n).means}};
}

DatasetManifest parse_manifest(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("manifest parse error: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("manifest must be a JSON object");

  DatasetManifest m;
  m.stage_id = require<int>(j, "stage_id", "manifest");
  try {
    m.class_set = ClassSet(require<std::vector<std::string>>(j, "classes", "manifest"));
  } catch (const ValidationError& e) {
    throw SchemaError(std::string("manifest classes: ") + e.what());
  }
  if (m.class_set.empty()) throw SchemaError("manifest: 'classes' must not be empty");
  if (j.contains("normalization")) m.normalization = parse_normalization(j.at("normalization"));

  const auto& items = j.contains("items") ? j.at("items") : json::array();
  if (!items.is_array()) throw SchemaError("manifest: 'items' must be an array");
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const std::string where = "manifest item " + std::to_string(i);
    ManifestItem item;
    item.image = resolve(base_dir, require<std::string>(it, "image", where));
    item.country = it.value("country", std::string{});
    item.city = it.value("city", std::string{});
    if (it.contains("masks")) {
      if (!it.at("masks").is_object()) throw SchemaError(where + ": 'masks' must be an object");
      for (const auto& [cls, path] : it.at("masks").items()) {
        if (!m.class_set.contains(cls)) {
          throw SchemaError(where + ": mask class '" + cls + "' is not in the manifest classes");
        }
        if (!path.is_string()) throw SchemaError(where + ": mask path must be a string");
        item.masks[cls] = resolve(base_dir, path.get<std::string>());
      }
    }
    for (const auto& cls : m.class_set.names()) {
      if (!item.masks.contains(cls)) {
        throw SchemaError(where + ": no mask for class '" + cls + "'");
      }
    }
    if (!fs::exists(item.image)) missing.push_back(item.image.string());
    for (const auto& [cls, path] : item.masks) {
      if (!fs::exists(path)) missing.push_back(path.string());
    }
    m.items.push_back(std::move(item));
  }
  if (!missing.empty()) {
    std::ostringstream os;
    os << "manifest references missing files:";
    for (const auto& p : missing) os << ' ' << p;
    throw IoError(os.str());
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto m = parse_manifest(ss.str(), path.parent_path());
  m.source = path;
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  json items = json::array();
  for (const auto& it : m.items) {
    json masks = json::object();
    for (const auto& [cls, p] : it.masks) masks[cls] = relative_or_absolute(p, base);
    items.push_back({{"image", relative_or_absolute(it.image, base)},
                     {"masks", masks},
                     {"country", it.country},
                     {"city", it.city}});
  }
  json j{{"stage_id", m.stage_id},
         {"classes", m.class_set.names()},
         {"normalization", normalization_to_json(m.normalization)},
         {"items", items}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

void check_stage_order(const std::vector<DatasetManifest>& stages) {
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (stages[i].stage_id <= stages[i - 1].stage_id) {
      throw ValidationError("stage ids must strictly increase (" +
                            std::to_string(stages[i - 1].stage_id) + " then " +
                            std::to_string(stages[i].stage_id) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

std::vector<double> channel_offsets(const Normalization& mode, std::size_t channels) {
  if (const auto* s = std::get_if<SubtractConstant>(&mode)) {
    return std::vector<double>(channels, s->value);
  }
  const auto& means = std::get<PerChannelMean>(mode).means;
  if (means.size() != channels) {
    throw DimensionError("per-channel mean has " + std::to_string(means.size()) +
                         " entries for an image with " + std::to_string(channels) + " channels");
  }
  return means;
}

}  // namespace

RasterImage normalize_image(const RasterImage& img, const Normalization& mode) {
  if (std::holds_alternative<SubtractConstant>(mode) && img.domain != ValueDomain::kUint8) {
    throw ParameterError("subtract-constant normalization expects an 8-bit image");
  }
  const auto offsets = channel_offsets(mode, img.channels);
  RasterImage out = img;
  out.domain = ValueDomain::kNormalized;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(static_cast<double>(img.pixels[i]) - offsets[i % img.channels]);
  }
  return out;
}

RasterImage denormalize_image(const RasterImage& img, const Normalization& mode, ValueDomain restored) {
  const auto offsets = channel_offsets(mode, img.channels);
  RasterImage out = img;
  out.domain = restored;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(static_cast<double>(img.pixels[i]) + offsets[i % img.channels]);
  }
  return out;
}

MaskStack labels_to_mask_stack(const LabelMap& label_map, const ClassSet& class_set,
                               std::int32_t background_id) {
  if (label_map.labels.size() != label_map.height * label_map.width) {
    throw DimensionError("label map size does not match its extent");
  }
  MaskStack out(class_set.size(), label_map.height, label_map.width);
  const std::size_t n = out.plane_size();
  const auto k = static_cast<std::int32_t>(class_set.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t id = label_map.labels[i];
    if (id == background_id) continue;
    if (id < 0 || id >= k) throw ValidationError("unknown label id " + std::to_string(id));
    out.values[static_cast<std::size_t>(id) * n + i] = 1.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raster files

RasterImage read_image(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  if (m.depth() != CV_8U) throw FormatError("image " + path.string() + " is not 8-bit");
  const int c = m.channels();
  RasterImage img(static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols),
                  static_cast<std::size_t>(c), ValueDomain::kUint8);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        // OpenCV stores colour images as BGR(A); expose RGB(A).
        int src = ch;
        if ((c == 3 || c == 4) && ch < 3) src = 2 - ch;
        img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(ch)) =
            row[x * c + src];
      }
    }
  }
  return img;
}

void write_image(const RasterImage& img, const fs::path& path) {
  const int c = static_cast<int>(img.channels);
  cv::Mat m(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC(c));
  for (int y = 0; y < m.rows; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        int dst = ch;
        if ((c == 3 || c == 4) && ch < 3) dst = 2 - ch;
        const float v = img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(ch));
        row[x * c + dst] = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f) + 0.5f);
      }
    }
  }
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image " + path.string());
}

std::vector<float> read_mask_plane(const fs::path& path, std::size_t expected_h, std::size_t expected_w) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("cannot read mask " + path.string());
  if (static_cast<std::size_t>(m.rows) != expected_h || static_cast<std::size_t>(m.cols) != expected_w) {
    throw DimensionError("mask " + path.string() + " is " + std::to_string(m.rows) + "x" +
                         std::to_string(m.cols) + ", expected " + std::to_string(expected_h) + "x" +
                         std::to_string(expected_w));
  }
  std::vector<float> plane(expected_h * expected_w);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      plane[static_cast<std::size_t>(y) * expected_w + static_cast<std::size_t>(x)] = row[x] >= 128 ? 1.0f : 0.0f;
    }
  }
  return plane;
}

void write_mask_plane(const MaskStack& stack, std::size_t plane, const fs::path& path) {
  cv::Mat m(static_cast<int>(stack.height), static_cast<int>(stack.width), CV_8UC1);
  for (int y = 0; y < m.rows; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      row[x] = stack.at(plane, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) >= 0.5f ? 255 : 0;
    }
  }
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write mask " + path.string());
}

LoadedItem load_item(const DatasetManifest& manifest, std::size_t index) {
  const auto& item = manifest.items.at(index);
  LoadedItem out;
  out.image = read_image(item.image);
  out.country = item.country;
  out.city = item.city;
  const auto& classes = manifest.class_set;
  out.masks = MaskStack(classes.size(), out.image.height, out.image.width);
  const std::size_t n = out.masks.plane_size();
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto plane = read_mask_plane(item.masks.at(classes[k]), out.image.height, out.image.width);
    std::copy(plane.begin(), plane.end(), out.masks.values.begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return out;
}

}  // namespace incseg

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <opencv2/imgproc.hpp>

#include "incseg/cli.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::pair<ShapeKind, std::string>>& shape_names() {
  static const std::vector<std::pair<ShapeKind, std::string>> names = {
      {ShapeKind::kRectangle, "rectangle"},
      {ShapeKind::kPolyline, "polyline"},
      {ShapeKind::kBlob, "blob"},
      {ShapeKind::kDisc, "disc"},
  };
  return names;
}

Rgb rgb_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(what + " must be an [r, g, b] array");
  Rgb c;
  for (std::size_t i = 0; i < 3; ++i) {
    const int v = j[i].get<int>();
    if (v < 0 || v > 255) throw ConfigError(what + " components must lie in [0, 255]");
    c[i] = static_cast<std::uint8_t>(v);
  }
  return c;
}

}  // namespace

ShapeKind parse_shape_kind(const std::string& s) {
  for (const auto& [k, n] : shape_names()) {
    if (n == s) return k;
  }
  throw ConfigError("unknown shape '" + s + "'");
}

std::string to_string(ShapeKind k) {
  for (const auto& [kind, n] : shape_names()) {
    if (kind == k) return n;
  }
  return "unknown";
}

SyntheticSpec default_synthetic_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.seed = seed;
  s.classes = {
      {"building", ShapeKind::kRectangle, 0.12, {200, 70, 60}},
      {"road", ShapeKind::kPolyline, 0.06, {210, 210, 200}},
      {"vegetation", ShapeKind::kBlob, 0.18, {40, 140, 50}},
      {"water", ShapeKind::kDisc, 0.08, {40, 70, 170}},
  };
  s.splits = {{"train1", 2}, {"train2", 2}, {"val", 1}};
  s.manifests = {
      {"stage1.json", "train1", 1, {"building", "vegetation"}},
      {"stage2.json", "train2", 2, {"water"}},
      {"val.json", "val", 1, {"building", "road", "vegetation", "water"}},
  };
  return s;
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  try {
    SyntheticSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.image_size = j.value("image_size", s.image_size);
    s.countries = j.value("countries", s.countries);
    s.cities_per_country = j.value("cities_per_country", s.cities_per_country);
    s.country_shift = j.value("country_shift", s.country_shift);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.city_shift = j.value("city_shift", s.city_shift);
    if (j.contains("background")) s.background = rgb_from_json(j["background"], "background");
    for (const auto& c : j.at("classes")) {
      SyntheticClass sc;
      sc.name = c.at("name").get<std::string>();
      sc.shape = parse_shape_kind(c.at("shape").get<std::string>());
      sc.density = c.at("density").get<double>();
      if (c.contains("color")) sc.color = rgb_from_json(c["color"], "class color");
      if (sc.density < 0.0 || sc.density > 1.0) throw ConfigError("class density must lie in [0, 1]");
      s.classes.push_back(sc);
    }
    for (const auto& sp : j.at("splits")) {
      SyntheticSplit split{sp.at("name").get<std::string>(), sp.at("images_per_city").get<std::size_t>(),
                           sp.value("first_city", std::size_t{0}), {}};
      if (sp.contains("density_scale")) split.density_scale = sp["density_scale"].get<std::map<std::string, double>>();
      for (const auto& [name, f] : split.density_scale) {
        if (f < 0.0) throw ConfigError("density_scale for '" + name + "' must be >= 0");
      }
      s.splits.push_back(std::move(split));
    }
    for (const auto& m : j.at("manifests")) {
      s.manifests.push_back({m.at("file").get<std::string>(), m.at("split").get<std::string>(),
                             m.at("stage_id").get<int>(), m.at("classes").get<std::vector<std::string>>()});
    }
    if (j.contains("normalization")) {
      const auto& n = j["normalization"];
      const auto mode = n.at("mode").get<std::string>();
      if (mode == "subtract") {
        s.normalization = SubtractConstant{n.value("value", 127.0)};
      } else if (mode == "mean") {
        s.normalization = PerChannelMean{n.at("values").get<std::vector<double>>()};
      } else {
        throw ConfigError("unknown normalization mode '" + mode + "'");
      }
    }
    if (s.city_shift < 0.0) throw ConfigError("city_shift must be >= 0");
    if (s.image_size < 32 || s.countries == 0 || s.cities_per_country == 0) {
      throw ConfigError("synthetic spec needs image_size >= 32 and at least one country and city");
    }
    std::vector<std::string> names;
    for (const auto& c : s.classes) names.push_back(c.name);
    const ClassSet all(names);
    for (const auto& sp : s.splits) {
      for (const auto& [name, f] : sp.density_scale) {
        if (!all.contains(name)) throw ConfigError("split " + sp.name + " scales unknown class '" + name + "'");
      }
    }
    for (const auto& m : s.manifests) {
      if (std::none_of(s.splits.begin(), s.splits.end(), [&](const SyntheticSplit& sp) { return sp.name == m.split; })) {
        throw ConfigError("manifest " + m.file + " names unknown split '" + m.split + "'");
      }
      for (const auto& c : m.classes) {
        if (!all.contains(c)) throw ConfigError("manifest " + m.file + " names unknown class '" + c + "'");
      }
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
}

json SyntheticSpec::to_json() const {
  json classes_j = json::array();
  for (const auto& c : classes) {
    classes_j.push_back({{"name", c.name}, {"shape", to_string(c.shape)}, {"density", c.density}, {"color", c.color}});
  }
  json splits_j = json::array();
  for (const auto& s : splits) {
    json sj{{"name", s.name}, {"images_per_city", s.images_per_city}, {"first_city", s.first_city}};
    if (!s.density_scale.empty()) sj["density_scale"] = s.density_scale;
    splits_j.push_back(std::move(sj));
  }
  json manifests_j = json::array();
  for (const auto& m : manifests) {
    manifests_j.push_back({{"file", m.file}, {"split", m.split}, {"stage_id", m.stage_id}, {"classes", m.classes}});
  }
  json norm;
  if (const auto* sc = std::get_if<SubtractConstant>(&normalization)) {
    norm = {{"mode", "subtract"}, {"value", sc->value}};
  } else {
    norm = {{"mode", "mean"}, {"values", std::get<PerChannelMean>(normalization).means}};
  }
  return {{"seed", seed},
          {"image_size", image_size},
          {"countries", countries},
          {"cities_per_country", cities_per_country},
          {"country_shift", country_shift},
          {"noise_sigma", noise_sigma},
          {"city_shift", city_shift},
          {"background", background},
          {"classes", classes_j},
          {"splits", splits_j},
          {"manifests", manifests_j},
          {"normalization", norm}};
}

namespace {

struct ImageTag {
  std::string stem;
  std::string country;
  std::string city;
  std::size_t country_index = 0;
};

// Draws one shape of `kind` into `canvas` (cleared first).
void draw_shape(cv::Mat1b& canvas, ShapeKind kind, double scale, Rng& rng) {
  canvas.setTo(0);
  const int n = canvas.rows;
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto pt = [&] { return cv::Point(static_cast<int>(uni(0, n)), static_cast<int>(uni(0, n))); };
  switch (kind) {
    case ShapeKind::kRectangle: {
      const cv::Point c = pt();
      const int w = static_cast<int>(uni(6, 16) * scale);
      const int h = static_cast<int>(uni(6, 16) * scale);
      cv::rectangle(canvas, cv::Rect(c.x - w / 2, c.y - h / 2, w, h), 255, cv::FILLED);
      break;
    }
    case ShapeKind::kPolyline: {
      std::vector<cv::Point> pts{pt()};
      double angle = uni(0, 2 * std::numbers::pi);
      const int segments = static_cast<int>(uni(2, 5));
      for (int s = 0; s < segments; ++s) {
        angle += uni(-0.6, 0.6);
        const double len = uni(15, 40) * scale;
        pts.emplace_back(pts.back().x + static_cast<int>(len * std::cos(angle)),
                         pts.back().y + static_cast<int>(len * std::sin(angle)));
      }
      const int thickness = std::max(1, static_cast<int>(std::lround(uni(2, 3.5) * scale)));
      cv::polylines(canvas, pts, false, 255, thickness, cv::LINE_8);
      break;
    }
    case ShapeKind::kBlob: {
      const cv::Point c = pt();
      const int lobes = static_cast<int>(uni(3, 7));
      for (int l = 0; l < lobes; ++l) {
        const cv::Point o(c.x + static_cast<int>(uni(-8, 8) * scale), c.y + static_cast<int>(uni(-8, 8) * scale));
        const cv::Size axes(static_cast<int>(uni(4, 11) * scale), static_cast<int>(uni(4, 11) * scale));
        cv::ellipse(canvas, o, axes, uni(0, 180), 0, 360, 255, cv::FILLED);
      }
      break;
    }
    case ShapeKind::kDisc: {
      cv::circle(canvas, pt(), static_cast<int>(uni(5, 12) * scale), 255, cv::FILLED);
      break;
    }
  }
}

// Paints classes in order; each class only claims background pixels and
// stops exactly at its pixel budget.
std::vector<std::int32_t> paint_labels(const SyntheticSpec& spec, const SyntheticSplit& split, Rng& rng) {
  const int n = static_cast<int>(spec.image_size);
  const double scale = static_cast<double>(spec.image_size) / 128.0;
  std::vector<std::int32_t> labels(spec.image_size * spec.image_size, kBackgroundLabel);
  cv::Mat1b canvas(n, n);
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const auto& cls = spec.classes[k];
    const auto it = split.density_scale.find(cls.name);
    const double density = std::min(1.0, cls.density * (it == split.density_scale.end() ? 1.0 : it->second));
    const auto budget = static_cast<std::size_t>(std::llround(density * static_cast<double>(labels.size())));
    std::size_t claimed = 0;
    for (int attempt = 0; attempt < 2000 && claimed < budget; ++attempt) {
      draw_shape(canvas, cls.shape, scale, rng);
      for (int y = 0; y < n && claimed < budget; ++y) {
        const auto* row = canvas.ptr<std::uint8_t>(y);
        for (int x = 0; x < n && claimed < budget; ++x) {
          auto& l = labels[static_cast<std::size_t>(y * n + x)];
          if (row[x] != 0 && l == kBackgroundLabel) {
            l = static_cast<std::int32_t>(k);
            ++claimed;
          }
        }
      }
    }
  }
  return labels;
}

// Per-city colour offsets: row 0 for the background, row k + 1 for class k.
std::vector<std::array<double, 3>> city_offsets(const SyntheticSpec& spec, std::size_t country, std::size_t city) {
  std::vector<std::array<double, 3>> out(spec.classes.size() + 1, {0.0, 0.0, 0.0});
  if (spec.city_shift <= 0.0) return out;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x63697479u,
                    static_cast<std::uint32_t>(country), static_cast<std::uint32_t>(city)};
  Rng rng(seq);
  std::normal_distribution<double> d(0.0, spec.city_shift);
  for (auto& o : out) o = {d(rng), d(rng), d(rng)};
  return out;
}

RasterImage paint_image(const SyntheticSpec& spec, const std::vector<std::int32_t>& labels, std::size_t country,
                        const std::vector<std::array<double, 3>>& city, Rng& rng) {
  const std::size_t n = spec.image_size;
  RasterImage img(n, n, 3, ValueDomain::kUint8);
  const double shift = static_cast<double>(spec.country_shift) * static_cast<double>(country);
  const double offset[3] = {shift, 0.5 * shift, -shift};
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  const double px = phase(rng);
  const double py = phase(rng);
  std::vector<std::array<double, 3>> jitter(spec.classes.size());
  std::normal_distribution<double> jit(0.0, 8.0);
  for (auto& j : jitter) j = {jit(rng), jit(rng), jit(rng)};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const std::int32_t l = labels[y * n + x];
      const Rgb& base = l == kBackgroundLabel ? spec.background : spec.classes[static_cast<std::size_t>(l)].color;
      const double shade = l == kBackgroundLabel ? 14.0 * std::sin(static_cast<double>(x) / 11.0 + px) *
                                                       std::cos(static_cast<double>(y) / 15.0 + py)
                                                 : 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c] + offset[c] + city[static_cast<std::size_t>(l + 1)][c] + shade + noise(rng);
        if (l != kBackgroundLabel) v += jitter[static_cast<std::size_t>(l)][c];
        img.at(y, x, c) = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return img;
}

}  // namespace

std::vector<DatasetManifest> synth_generate(const SyntheticSpec& spec, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "masks")) throw IoError("cannot create output directory " + out_dir.string());

  std::vector<std::string> names;
  for (const auto& c : spec.classes) names.push_back(c.name);
  const ClassSet all(names);

  std::map<std::string, std::vector<ImageTag>> split_images;
  for (std::size_t si = 0; si < spec.splits.size(); ++si) {
    const auto& split = spec.splits[si];
    for (std::size_t c = 0; c < spec.countries; ++c) {
      for (std::size_t k = split.first_city; k < split.first_city + spec.cities_per_country; ++k) {
        const auto city = city_offsets(spec, c, k);
        for (std::size_t i = 0; i < split.images_per_city; ++i) {
          ImageTag tag;
          tag.country = "country" + std::to_string(c);
          tag.city = tag.country + "_city" + std::to_string(k);
          tag.stem = split.name + "_" + tag.city + "_" + std::to_string(i);
          tag.country_index = c;
          std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                            static_cast<std::uint32_t>(si), static_cast<std::uint32_t>(c),
                            static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(i)};
          Rng rng(seq);
          const auto labels = paint_labels(spec, split, rng);
          const auto img = paint_image(spec, labels, c, city, rng);
          write_image(img, out_dir / "images" / (tag.stem + ".png"));
          const LabelMap lm{spec.image_size, spec.image_size, labels};
          const auto masks = labels_to_mask_stack(lm, all);
          for (std::size_t p = 0; p < all.size(); ++p) {
            write_mask_plane(masks, p, out_dir / "masks" / (tag.stem + "_" + all[p] + ".png"));
          }
          split_images[split.name].push_back(tag);
        }
      }
    }
  }

  std::vector<DatasetManifest> out;
  for (const auto& m : spec.manifests) {
    DatasetManifest dm;
    dm.stage_id = m.stage_id;
    dm.class_set = ClassSet(m.classes);
    dm.normalization = spec.normalization;
    for (const auto& tag : split_images.at(m.split)) {
      ManifestItem item;
      item.image = out_dir / "images" / (tag.stem + ".png");
      for (const auto& c : m.classes) item.masks[c] = out_dir / "masks" / (tag.stem + "_" + c + ".png");
      item.country = tag.country;
      item.city = tag.city;
      dm.items.push_back(std::move(item));
    }
    dm.source = out_dir / m.file;
    save_manifest(dm, dm.source);
    out.push_back(std::move(dm));
  }
  std::ofstream spec_out(out_dir / "synth_spec.json");
  spec_out << spec.to_json().dump(2) << '\n';
  return out;
}

}  // namespace incseg

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "incseg/cli.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

TilingProfile tiling_profile(const std::string& name) {
  if (name == "luxcarta") return {384, 32, 2240, 64};
  if (name == "benchmark") return {512, 64, 2016, 120};
  if (name == "desk") return {64, 0, 64, 16};
  throw ConfigError("unknown tiling profile '" + name + "'");
}

namespace {

const std::set<std::string> kTopLevelKeys = {
    "strategy", "stages",     "validation",      "optimizer", "epochs",          "iters_per_epoch",
    "tiling",   "augmentation", "rehearsal",     "network",   "seed",            "output_dir",
    "desk_scale", "eval",     "checkpoint_every",
};

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!kTopLevelKeys.contains(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  try {
    if (!j.contains("seed")) throw ConfigError("config must set 'seed' explicitly");
    c.seed = j.at("seed").get<std::uint64_t>();
    if (!j.contains("strategy")) throw ConfigError("config must set 'strategy'");
    c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.desk_scale = get_or(j, "desk_scale", false);
    if (c.desk_scale) {
      c.width_scale = 1.0 / 8.0;
      c.tiling_name = "desk";
      c.epochs = 20;
      c.iters_per_epoch = 50;
      c.optimizer.batch_size = 8;
    }
    c.tiling = tiling_profile(c.tiling_name);

    if (!j.contains("stages") || !j["stages"].is_array() || j["stages"].empty()) {
      throw ConfigError("config needs a non-empty 'stages' list");
    }
    for (const auto& s : j["stages"]) {
      StageConfig sc;
      if (s.contains("manifest")) sc.manifest = resolve(base_dir, s["manifest"].get<std::string>());
      if (s.contains("patches")) sc.patch_cache = resolve(base_dir, s["patches"].get<std::string>());
      if (sc.manifest.empty() == sc.patch_cache.empty()) {
        throw ConfigError("each stage needs exactly one of 'manifest' or 'patches'");
      }
      sc.schedule = get_or<std::string>(s, "schedule", "");
      c.stages.push_back(std::move(sc));
    }
    for (const auto& v : get_or(j, "validation", json::array())) {
      c.validation.push_back(resolve(base_dir, v.get<std::string>()));
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.optimizer.lr = get_or(o, "lr", c.optimizer.lr);
      c.optimizer.beta1 = get_or(o, "beta1", c.optimizer.beta1);
      c.optimizer.beta2 = get_or(o, "beta2", c.optimizer.beta2);
      c.optimizer.eps = get_or(o, "eps", c.optimizer.eps);
      c.optimizer.batch_size = get_or(o, "batch_size", c.optimizer.batch_size);
    }
    c.optimizer.validate();
    c.epochs = get_or(j, "epochs", c.epochs);
    c.iters_per_epoch = get_or(j, "iters_per_epoch", c.iters_per_epoch);
    if (c.epochs == 0 || c.iters_per_epoch == 0) throw ConfigError("epochs and iters_per_epoch must be >= 1");
    if (j.contains("tiling")) {
      const auto& t = j["tiling"];
      if (t.contains("profile")) {
        c.tiling_name = t["profile"].get<std::string>();
        c.tiling = tiling_profile(c.tiling_name);
      }
      c.tiling.patch_size = get_or(t, "patch_size", c.tiling.patch_size);
      c.tiling.overlap = get_or(t, "overlap", c.tiling.overlap);
      c.tiling.val_patch_size = get_or(t, "val_patch_size", c.tiling.val_patch_size);
      c.tiling.val_overlap = get_or(t, "val_overlap", c.tiling.val_overlap);
    }
    if (c.tiling.patch_size % kSpatialDivisor != 0 || c.tiling.val_patch_size % kSpatialDivisor != 0) {
      throw ConfigError("patch sizes must be multiples of 32");
    }
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      if (a.contains("profile")) {
        try {
          c.augment.profile = parse_augment_profile(a["profile"].get<std::string>());
        } catch (const Error& e) {
          throw ConfigError(e.what());
        }
      }
      c.augment.radiometric.contrast = get_or(a, "contrast", c.augment.radiometric.contrast);
      c.augment.radiometric.gamma = get_or(a, "gamma", c.augment.radiometric.gamma);
      c.augment.on_buffers = get_or(a, "on_buffers", c.augment.on_buffers);
    }
    if (j.contains("rehearsal")) {
      c.frac_importance = get_or(j["rehearsal"], "frac_importance", c.frac_importance);
      c.frac_random = get_or(j["rehearsal"], "frac_random", c.frac_random);
    }
    if (c.frac_importance < 0 || c.frac_random < 0 || c.frac_importance + c.frac_random > 1.0) {
      throw ConfigError("rehearsal fractions must be non-negative and sum to at most 1");
    }
    if (j.contains("network")) c.width_scale = get_or(j["network"], "width_scale", c.width_scale);
    try {
      static_cast<void>(NetworkSpec{3, ClassSet(), c.width_scale}.widths());
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      c.eval.erode_radius = get_or(e, "erode_radius", c.eval.erode_radius);
      c.eval.skip_absent = get_or(e, "skip_absent", c.eval.skip_absent);
      c.eval.macro = get_or(e, "macro", c.eval.macro);
      c.eval_every = get_or(e, "every", c.eval_every);
    }
    if (c.eval.erode_radius < 0) throw ConfigError("eval.erode_radius must be >= 0");
    c.checkpoint_every = get_or(j, "checkpoint_every", c.checkpoint_every);

    fs::path out = get_or<std::string>(j, "output_dir", "runs/" + to_string(c.strategy));
    if (out.is_relative()) {
      const char* root = std::getenv("INCSEG_OUTPUT_ROOT");
      out = (root != nullptr && *root != '\0') ? fs::path(root) / out : base_dir / out;
    }
    c.output_dir = out.lexically_normal();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    if (c.stages[i].schedule.empty()) continue;
    const auto sched = StageSchedule::parse(c.stages[i].schedule, c.epochs, c.iters_per_epoch);
    for (const auto& st : sched.cycle) {
      if (st.kind == ScheduleStep::Kind::kRem && i == 0) {
        throw ConfigError("the first stage cannot rehearse rem(" + std::to_string(st.stage_id) + ")");
      }
    }
  }
  return c;
}

json ExperimentConfig::to_json() const {
  json stages_j = json::array();
  for (const auto& s : stages) {
    json e;
    if (!s.manifest.empty()) e["manifest"] = s.manifest.string();
    if (!s.patch_cache.empty()) e["patches"] = s.patch_cache.string();
    e["schedule"] = s.schedule;
    stages_j.push_back(e);
  }
  json val = json::array();
  for (const auto& v : validation) val.push_back(v.string());
  return {{"strategy", incseg::to_string(strategy)},
          {"stages", stages_j},
          {"validation", val},
          {"optimizer",
           {{"lr", optimizer.lr},
            {"beta1", optimizer.beta1},
            {"beta2", optimizer.beta2},
            {"eps", optimizer.eps},
            {"batch_size", optimizer.batch_size}}},
          {"epochs", epochs},
          {"iters_per_epoch", iters_per_epoch},
          {"tiling",
           {{"profile", tiling_name},
            {"patch_size", tiling.patch_size},
            {"overlap", tiling.overlap},
            {"val_patch_size", tiling.val_patch_size},
            {"val_overlap", tiling.val_overlap}}},
          {"augmentation",
           {{"profile", incseg::to_string(augment.profile)},
            {"contrast", augment.radiometric.contrast},
            {"gamma", augment.radiometric.gamma},
            {"on_buffers", augment.on_buffers}}},
          {"rehearsal", {{"frac_importance", frac_importance}, {"frac_random", frac_random}}},
          {"network", {{"width_scale", width_scale}}},
          {"seed", seed},
          {"output_dir", output_dir.string()},
          {"desk_scale", false},
          {"eval",
           {{"erode_radius", eval.erode_radius},
            {"skip_absent", eval.skip_absent},
            {"macro", eval.macro},
            {"every", eval_every}}},
          {"checkpoint_every", checkpoint_every}};
}

TrainSettings ExperimentConfig::train_settings() const {
  TrainSettings s;
  s.optimizer = optimizer;
  s.epochs = epochs;
  s.iters_per_epoch = iters_per_epoch;
  for (const auto& st : stages) s.schedules.push_back(st.schedule);
  s.augment = augment;
  s.frac_importance = frac_importance;
  s.frac_random = frac_random;
  s.width_scale = width_scale;
  s.seed = seed;
  s.eval_every = eval_every;
  s.checkpoint_every = checkpoint_every;
  s.out_dir = output_dir;
  return s;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " does not parse: " + e.what());
  }
  return ExperimentConfig::from_json(j, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Patch caches

void prepare_patch_cache(const DatasetManifest& manifest, std::size_t patch_size, std::size_t overlap,
                         const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto patches = load_stage_patches(manifest, patch_size, overlap);
  const auto files = write_patch_cache(patches, out_dir);
  json index{{"stage_id", manifest.stage_id},
             {"classes", manifest.class_set.names()},
             {"normalization", normalization_to_json(manifest.normalization)},
             {"patch_size", patch_size},
             {"overlap", overlap},
             {"files", files}};
  std::ofstream out(out_dir / "index.json");
  if (!out) throw IoError("cannot write " + (out_dir / "index.json").string());
  out << index.dump(2) << '\n';
}

StageData load_patch_cache(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("patch cache " + dir.string() + " has no index.json");
  StageData d;
  try {
    const json index = json::parse(in);
    d.manifest.stage_id = index.at("stage_id").get<int>();
    d.manifest.class_set = ClassSet(index.at("classes").get<std::vector<std::string>>());
    d.manifest.normalization = parse_normalization(index.at("normalization"));
    d.manifest.source = dir;
    for (const auto& f : index.at("files")) d.patches.push_back(read_patch(dir / f.get<std::string>()));
  } catch (const json::exception& e) {
    throw SchemaError("patch cache index: " + std::string(e.what()));
  }
  return d;
}

std::vector<StageData> prepare_stage_data(const ExperimentConfig& cfg) {
  if (cfg.strategy == Strategy::kStatic) {
    std::vector<DatasetManifest> manifests;
    for (const auto& s : cfg.stages) {
      if (s.manifest.empty()) throw ConfigError("static strategy needs manifests, not patch caches");
      manifests.push_back(load_manifest(s.manifest));
    }
    check_stage_order(manifests);
    const auto merged = merge_for_static(manifests);
    return {StageData{merged, load_stage_patches(merged, cfg.tiling.patch_size, cfg.tiling.overlap)}};
  }
  std::vector<StageData> out;
  for (const auto& s : cfg.stages) {
    if (!s.patch_cache.empty()) {
      out.push_back(load_patch_cache(s.patch_cache));
    } else {
      auto m = load_manifest(s.manifest);
      auto patches = load_stage_patches(m, cfg.tiling.patch_size, cfg.tiling.overlap);
      out.push_back({std::move(m), std::move(patches)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment driver

namespace {

class DirectoryLock {
 public:
  explicit DirectoryLock(fs::path file) : file_(std::move(file)) {
    std::FILE* f = std::fopen(file_.string().c_str(), "wx");
    if (f == nullptr) {
      throw IoError("experiment directory is in use (lock file " + file_.string() + " exists)");
    }
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(file_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path file_;
};

std::size_t fit_patch(std::size_t patch, std::size_t h, std::size_t w) {
  if (patch == 0) return 0;
  const std::size_t limit = std::min(h, w) / kSpatialDivisor * kSpatialDivisor;
  return std::min(patch, limit);
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  DirectoryLock lock(cfg.output_dir / ".lock");
  {
    std::ofstream out(cfg.output_dir / "effective_config.json");
    out << cfg.to_json().dump(2) << '\n';
  }
  auto stages = prepare_stage_data(cfg);
  std::vector<DatasetManifest> validation;
  for (const auto& v : cfg.validation) validation.push_back(load_manifest(v));

  const fs::path reports = cfg.output_dir / "reports";
  fs::create_directories(reports);
  MetricsSink sink(cfg.output_dir / "metrics.jsonl");
  const auto hook = [&](const EpochInfo& info, const Model& model) -> json {
    if (validation.empty()) return nullptr;
    json out = json::object();
    const Predictor predict = [&model](const RasterImage& img) { return model.predict(img); };
    for (const auto& v : validation) {
      EvalOptions opts = cfg.eval;
      if (!v.items.empty() && cfg.tiling.val_patch_size > 0) {
        const auto first = read_image(v.items.front().image);
        opts.patch_size = fit_patch(cfg.tiling.val_patch_size, first.height, first.width);
        opts.overlap = std::min(cfg.tiling.val_overlap, opts.patch_size / 2);
      }
      auto report = evaluate_manifest(predict, model.class_set(), v, opts);
      report.stage = info.stage_id;
      report.epoch = info.global_epoch;
      const std::string key = v.source.stem().string();
      out[key] = report.to_json();
      if (info.stage_end) {
        const auto stem = reports / (key + "_stage" + std::to_string(info.stage_id));
        std::ofstream(stem.string() + ".json") << report.to_json().dump(2) << '\n';
        std::ofstream(stem.string() + ".csv") << report.to_csv();
      }
    }
    std::cerr << "[incseg] event=eval strategy=" << to_string(info.strategy) << " stage=" << info.stage_id
              << " epoch=" << info.epoch << '\n';
    return out;
  };
  StrategyRunner runner(cfg.strategy, std::move(stages), cfg.train_settings());
  while (!runner.done()) {
    const std::size_t s = runner.next_stage();
    std::cerr << "[incseg] event=stage_start strategy=" << to_string(cfg.strategy) << " stage_index=" << s << '\n';
    runner.run_stage(sink, hook);
  }
  std::cerr << "[incseg] event=done output=" << cfg.output_dir.string() << '\n';
}

}  // namespace incseg

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "incseg/cli.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log_event(const std::string& event, const std::string& detail) {
  std::cerr << "[incseg] event=" << event << ' ' << detail << '\n';
}

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot open ") + what + " " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + " " + path.string() + " does not parse: " + e.what());
  }
}

int cmd_synth(const std::string& spec_file, std::uint64_t seed, const fs::path& out) {
  const SyntheticSpec spec =
      spec_file.empty() ? default_synthetic_spec(seed) : SyntheticSpec::from_json(read_json_file(spec_file, "spec"));
  const auto manifests = synth_generate(spec, out);
  log_event("synth", "manifests=" + std::to_string(manifests.size()) + " out=" + out.string());
  return 0;
}

int cmd_prepare(const fs::path& manifest_path, const fs::path& out, const std::string& profile, std::size_t patch,
                std::size_t overlap, bool patch_set, bool overlap_set) {
  auto tiling = tiling_profile(profile);
  if (patch_set) tiling.patch_size = patch;
  if (overlap_set) tiling.overlap = overlap;
  const auto manifest = load_manifest(manifest_path);
  prepare_patch_cache(manifest, tiling.patch_size, tiling.overlap, out);
  log_event("prepare", "stage=" + std::to_string(manifest.stage_id) + " out=" + out.string());
  return 0;
}

int cmd_train(const fs::path& config, const std::string& output_override) {
  auto cfg = load_experiment_config(config);
  if (!output_override.empty()) cfg.output_dir = fs::absolute(output_override);
  run_experiment(cfg);
  return 0;
}

int cmd_predict(const std::vector<std::string>& checkpoints, const fs::path& manifest_path, const fs::path& out,
                std::size_t patch, std::size_t overlap, const std::string& palette_file) {
  Model model;
  for (const auto& c : checkpoints) model.networks.push_back(load_checkpoint_file(c));
  const auto classes = model.class_set();
  const Palette palette =
      palette_file.empty() ? default_palette(classes) : parse_palette(read_json_file(palette_file, "palette"));
  const auto manifest = load_manifest(manifest_path);
  fs::create_directories(out);
  const Predictor predict = [&model](const RasterImage& img) { return model.predict(img); };
  for (const auto& item : manifest.items) {
    const auto img = normalize_image(read_image(item.image), manifest.normalization);
    const auto probs = predict_tiled(predict, img, patch, overlap);
    const auto binary = threshold_probs(probs);
    const std::string stem = item.image.stem().string();
    for (std::size_t k = 0; k < classes.size(); ++k) {
      write_mask_plane(binary, k, out / (stem + "_" + classes[k] + ".png"));
    }
    write_image(render_multiclass(probs, classes, palette), out / (stem + "_render.png"));
  }
  std::ofstream(out / "palette.json") << palette_to_json(palette).dump(2) << '\n';
  log_event("predict", "images=" + std::to_string(manifest.items.size()) + " out=" + out.string());
  return 0;
}

int cmd_evaluate(const fs::path& pred, const fs::path& manifest_path, int radius, bool skip_absent, bool macro,
                 const std::string& out) {
  const auto manifest = load_manifest(manifest_path);
  EvalOptions opts;
  opts.erode_radius = radius;
  opts.skip_absent = skip_absent;
  opts.macro = macro;
  const auto report = evaluate_mask_files(pred, manifest, opts);
  const std::string text = report.to_json().dump(2);
  if (out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream(out) << text << '\n';
    std::ofstream(fs::path(out).replace_extension(".csv")) << report.to_csv();
  }
  log_event("evaluate", "overall_iou=" + std::to_string(report.overall_iou));
  return 0;
}

int cmd_plot(const std::vector<std::string>& files, const fs::path& out) {
  std::vector<fs::path> paths(files.begin(), files.end());
  const auto written = plot_metrics(paths, out);
  log_event("plot", "figures=" + std::to_string(written.size()) + " out=" + out.string());
  return 0;
}

}  // namespace

int run_command(int argc, char** argv) {
  CLI::App app{"Class-incremental segmentation training toolkit"};
  app.require_subcommand(1);

  std::string spec_file;
  std::uint64_t seed = 0;
  std::string out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--spec", spec_file, "Synthetic spec (JSON)");
  synth->add_option("--seed", seed, "Seed for the default spec");
  synth->add_option("--out", out, "Output directory")->required();

  std::string manifest;
  std::string profile = "desk";
  std::size_t patch = 0;
  std::size_t overlap = 0;
  auto* prepare = app.add_subcommand("prepare", "Tile a manifest into a patch cache");
  prepare->add_option("--manifest", manifest, "Stage manifest")->required();
  prepare->add_option("--out", out, "Cache directory")->required();
  prepare->add_option("--profile", profile, "Tiling profile: desk, luxcarta or benchmark");
  auto* prep_patch = prepare->add_option("--patch", patch, "Patch size override");
  auto* prep_overlap = prepare->add_option("--overlap", overlap, "Overlap override");

  std::string config;
  std::string output_override;
  auto* train = app.add_subcommand("train", "Run an experiment");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--output", output_override, "Override the output directory");

  std::vector<std::string> checkpoints;
  std::string palette;
  auto* predict = app.add_subcommand("predict", "Predict masks for a manifest");
  predict->add_option("--checkpoint", checkpoints, "Checkpoint (repeat to combine networks)")->required();
  predict->add_option("--manifest", manifest, "Manifest of images")->required();
  predict->add_option("--out", out, "Output directory")->required();
  predict->add_option("--patch", patch, "Tile size (0 predicts whole images)");
  predict->add_option("--overlap", overlap, "Tile overlap");
  predict->add_option("--palette", palette, "Palette JSON");

  std::string pred_dir;
  int radius = 3;
  bool skip_absent = false;
  bool macro = false;
  auto* evaluate = app.add_subcommand("evaluate", "Score predicted masks");
  evaluate->add_option("--pred", pred_dir, "Directory of predicted masks")->required();
  evaluate->add_option("--manifest", manifest, "Ground-truth manifest")->required();
  evaluate->add_option("--erode", radius, "Boundary exclusion radius");
  evaluate->add_flag("--skip-absent", skip_absent, "Skip tiles where a class is absent");
  evaluate->add_flag("--macro", macro, "Average per-tile scores");
  evaluate->add_option("--out", out, "Report file (JSON; a CSV is written alongside)");

  std::vector<std::string> metrics;
  auto* plot = app.add_subcommand("plot", "Plot IoU curves from metrics streams");
  plot->add_option("--metrics", metrics, "metrics.jsonl (repeatable)")->required();
  plot->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(spec_file, seed, out);
    if (*prepare) {
      return cmd_prepare(manifest, out, profile, patch, overlap, prep_patch->count() > 0, prep_overlap->count() > 0);
    }
    if (*train) return cmd_train(config, output_override);
    if (*predict) return cmd_predict(checkpoints, manifest, out, patch, overlap, palette);
    if (*evaluate) return cmd_evaluate(pred_dir, manifest, radius, skip_absent, macro, out);
    if (*plot) return cmd_plot(metrics, out);
  } catch (const ConfigError& e) {
    std::cerr << "[incseg] level=error kind=config msg=\"" << e.what() << "\"\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "[incseg] level=error kind=usage msg=\"" << e.what() << "\"\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "[incseg] level=error kind=runtime msg=\"" << e.what() << "\"\n";
    return 1;
  }
  return 2;
}

}  // namespace incseg

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "incseg/cli.hpp"
#include "incseg/losses.hpp"
#include "incseg/trainer.hpp"

using namespace incseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print(int id, const std::string& title, const Verdict& v, double seconds) {
  for (const auto& n : v.notes) std::cout << "    " << n << '\n';
  std::cout << "CRITERION " << id << " (" << title << "): " << (v.pass ? "PASS" : "FAIL") << "  [" << fmt(seconds, 1)
            << " s]" << std::endl;
}

Tensor4<float> random_input(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 40.0f);
  Tensor4<float> x(1, 3, h, w);
  for (auto& v : x.data) v = d(rng);
  return x;
}

MaskStack random_masks(std::size_t k, std::size_t h, std::size_t w, double p, std::mt19937_64& rng) {
  MaskStack m(k, h, w);
  std::bernoulli_distribution d(p);
  for (auto& v : m.values) v = d(rng) ? 1.0f : 0.0f;
  return m;
}

// ---------------------------------------------------------------------------
// 1. Exact preservation

Verdict criterion1(const fs::path& work) {
  Verdict v;
  {
    Rng rng(11);
    auto memory = build_network({3, ClassSet({"building", "vegetation"}), 1.0 / 16.0}, rng);
    memory.freeze();
    Rng head_rng(12);
    const auto updated = memory.expand_classifier(ClassSet({"water"}), head_rng);
    std::size_t diffs = 0;
    for (int i = 0; i < 100; ++i) {
      const auto x = random_input(32, 32, 1000 + static_cast<std::uint64_t>(i));
      const auto a = memory.forward(x);
      const auto b = updated.forward(x);
      for (std::size_t k = 0; k < 2; ++k) {
        for (std::size_t p = 0; p < a.plane(); ++p) diffs += a.at(0, k, p / a.w, p % a.w) != b.at(0, k, p / a.w, p % a.w);
      }
    }
    v.require(diffs == 0, "expanded network changes old outputs (" + std::to_string(diffs) + " values)");
    v.note("expand_classifier: 100 inputs, differing old-channel values = " + std::to_string(diffs));
  }
  {
    auto spec = default_synthetic_spec(42);
    spec.image_size = 64;
    spec.splits = {{"train1", 1}, {"train2", 1}, {"val", 2}};
    spec.manifests = {{"stage1.json", "train1", 1, {"building", "vegetation"}},
                      {"stage2.json", "train2", 2, {"water"}},
                      {"val.json", "val", 1, {"building", "vegetation", "water"}}};
    const auto ms = synth_generate(spec, work / "c1_corpus");
    std::vector<StageData> stages;
    for (int i = 0; i < 2; ++i) stages.push_back({ms[i], load_stage_patches(ms[i], 32, 0)});
    TrainSettings s;
    s.optimizer.lr = 1e-3;
    s.optimizer.batch_size = 4;
    s.epochs = 3;
    s.iters_per_epoch = 10;
    s.width_scale = 1.0 / 16.0;
    s.seed = 3;
    MetricsSink sink;
    StrategyRunner runner(Strategy::kFixedRepresentation, stages, s);
    runner.run_all(sink);
    auto held = load_stage_patches(ms[2], 32, 0);
    held.resize(std::min<std::size_t>(held.size(), 20));
    std::size_t diffs = 0;
    for (const auto& p : held) {
      const auto img = normalize_image(p.image, ms[2].normalization);
      const auto combined = runner.model().predict(img);
      const auto old = predict_image(runner.stage_networks()[0], img);
      for (std::size_t i = 0; i < old.values.size(); ++i) diffs += old.values[i] != combined.values[i];
    }
    v.require(held.size() == 20 && diffs == 0, "fixed representation changed old outputs");
    v.note("fixed_representation: " + std::to_string(held.size()) + " held-out patches, differing values = " +
           std::to_string(diffs));
  }
  {
    Rng rng(1);
    auto net = build_network({3, ClassSet({"a", "b", "c"}), 1.0 / 16.0}, rng);
    const auto before = net;
    const auto mask = freeze_for_remembering(net, ClassSet({"a", "b"}));
    OptimizerConfig opt;
    opt.lr = 1e-2;
    OptimizerState state;
    std::mt19937_64 grng(2);
    std::normal_distribution<float> d(0.0f, 1.0f);
    for (int step = 1; step <= 100; ++step) {
      std::vector<std::vector<float>> grads;
      for (const auto& p : net.parameters()) {
        std::vector<float> g(p.value.size());
        for (auto& x : g) x = d(grng) + 0.1f;
        grads.push_back(std::move(g));
      }
      optimizer_step(net, grads, mask, state, opt, static_cast<std::uint64_t>(step));
    }
    std::size_t excluded = 0, changed = 0;
    for (std::size_t i = 0; i < net.parameters().size(); ++i) {
      if (mask.allows(net.parameters()[i].meta.name)) continue;
      ++excluded;
      changed += net.parameters()[i].value != before.parameters()[i].value;
    }
    v.require(excluded > 0 && changed == 0, "excluded parameters moved");
    v.note("FreezeMask: 100 steps, excluded tensors = " + std::to_string(excluded) +
           ", changed = " + std::to_string(changed));
  }
  return v;
}

// ---------------------------------------------------------------------------
// 2. Numerical correctness

Verdict criterion2() {
  Verdict v;
  const double ce = binary_ce(std::vector<double>{1.0}, std::vector<double>{0.5});
  v.require(std::abs(ce - 0.693147) <= 1e-6, "binary_ce(1, 0.5) = " + fmt(ce, 9));
  {
    Tensor4<double> zero(1, 2, 2, 2, 0.0), half(1, 1, 2, 2, 0.5), y(1, 1, 2, 2, 1.0);
    const auto self = adaptation_loss(y, half, zero, 1);
    v.require(std::abs(self.components.at("distil") - std::log(2.0)) <= 1e-6, "distillation self-entropy");
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-5, 5), p(0, 1);
    Tensor4<double> z(2, 4, 6, 6), yc(2, 1, 6, 6), pm(2, 3, 6, 6);
    for (auto& x : z.data) x = u(rng);
    for (auto& x : yc.data) x = p(rng) < 0.4 ? 1.0 : 0.0;
    for (auto& x : pm.data) x = p(rng);
    const auto l = adaptation_loss(yc, pm, z, 3);
    v.require(l.total == l.components.at("class") + l.components.at("distil"), "adaptation loss additivity");
    v.note("losses: binary_ce(1,0.5) = " + fmt(ce, 7) + ", self-distillation = " +
           fmt(self.components.at("distil"), 7));
  }
  {
    // gradient check in double precision with He-scaled weights
    Rng rng(7);
    auto net = build_network({3, ClassSet({"a", "b"}), 1.0 / 16.0}, rng).cast<double>();
    std::mt19937_64 brng(70);
    for (auto& prm : net.mutable_parameters()) {
      for (auto& x : prm.value) {
        x = prm.meta.name.ends_with(".bias") ? std::uniform_real_distribution<double>(-0.1, 0.1)(brng) : x * std::sqrt(2.0);
      }
    }
    std::mt19937_64 xr(3);
    std::normal_distribution<double> nd(0.0, 3.0);
    Tensor4<double> x(2, 3, 32, 32);
    for (auto& e : x.data) e = nd(xr);
    Tensor4<double> targets(2, 2, 32, 32);
    std::mt19937_64 trng(8);
    for (auto& e : targets.data) e = std::bernoulli_distribution(0.3)(trng) ? 1.0 : 0.0;
    ForwardCache<double> cache;
    Tensor4<double> dlogits;
    binary_ce_logits(targets, net.forward(x, &cache), &dlogits);
    const auto pattern = cache.activation_pattern();
    const auto grads = net.backward(cache, dlogits);
    auto probe = net;
    std::mt19937_64 pick(9);
    constexpr double kStep = 1e-3;
    std::size_t checked = 0, bad = 0;
    double worst = 0.0;
    for (int attempt = 0; checked < 120 && attempt < 2000; ++attempt) {
      const auto pi = std::uniform_int_distribution<std::size_t>(0, net.parameters().size() - 1)(pick);
      const auto ei = std::uniform_int_distribution<std::size_t>(0, net.parameters()[pi].value.size() - 1)(pick);
      auto& w = probe.mutable_parameters()[pi].value[ei];
      const double orig = w;
      ForwardCache<double> cp, cm;
      w = orig + kStep;
      const double lp = binary_ce_logits(targets, probe.forward(x, &cp));
      w = orig - kStep;
      const double lm = binary_ce_logits(targets, probe.forward(x, &cm));
      w = orig;
      if (cp.activation_pattern() != pattern || cm.activation_pattern() != pattern) continue;
      const double numeric = (lp - lm) / (2.0 * kStep);
      const double analytic = grads[pi][ei];
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      worst = std::max(worst, rel);
      bad += rel >= 1e-4;
      ++checked;
    }
    v.require(checked >= 100 && bad == 0, "gradient check");
    v.note("gradcheck: " + std::to_string(checked) + " parameters, worst relative error " + fmt(worst * 1e6, 2) +
           "e-6");
  }
  {
    std::mt19937_64 rng(77);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 1000)(rng);
      const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
      const std::size_t side = trial % 2 ? 2 : 3;
      std::vector<Patch> patches(n);
      std::vector<std::string> names;
      for (std::size_t c = 0; c < k; ++c) names.push_back("c" + std::to_string(c));
      for (auto& p : patches) p.masks = random_masks(k, side, side, std::uniform_real_distribution<double>(0, 0.6)(rng), rng);
      patches[0].masks->values[0] = 1.0f;
      Rng sel(static_cast<std::uint64_t>(trial));
      const auto buf = select_rehearsal(patches, ClassSet(names), 1, 0.15, 0.15, sel);
      // brute force: median-over-totals weights, full ranking
      std::vector<double> totals(k, 0.0);
      std::vector<std::vector<double>> counts(n, std::vector<double>(k, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t q = 0; q < side * side; ++q) counts[i][c] += patches[i].masks->values[c * side * side + q];
          totals[c] += counts[i][c];
        }
      }
      auto sorted = totals;
      std::sort(sorted.begin(), sorted.end());
      const double med = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
      std::vector<double> imp(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) imp[i] += totals[c] > 0 ? med / totals[c] * counts[i][c] : 0.0;
      }
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return imp[a] > imp[b] + 1e-9; });
      const auto k_imp = static_cast<std::size_t>(std::ceil(0.15 * static_cast<double>(n) - 1e-9));
      const std::set<std::size_t> expected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_imp));
      std::set<std::size_t> got;
      for (std::size_t i = 0; i < buf.size(); ++i) {
        if (buf.provenance[i] == Provenance::kImportance) got.insert(buf.source_index[i]);
      }
      mismatches += got != expected;
    }
    v.require(mismatches == 0, "rehearsal top-k");
    v.note("rehearsal: 200 instances, mismatching selections = " + std::to_string(mismatches));
  }
  {
    const auto w = class_weights({{"a", 20.0}, {"b", 30.0}, {"c", 50.0}});
    v.require(w.weights.at("a") == 1.5 && w.weights.at("b") == 1.0 && w.weights.at("c") == 0.6, "class weights");
    const auto wf = class_weights({{"a", 0.2}, {"b", 0.3}, {"c", 0.5}});
    v.require(std::abs(wf.weights.at("a") - 1.5) <= 1e-15 && wf.weights.at("b") == 1.0 && wf.weights.at("c") == 0.6,
              "class weights from frequencies");
    ClassWeights iw{{{"building", 0.5}, {"road", 2.0}}};
    v.require(patch_importance({{"building", 100.0}, {"road", 10.0}}, iw) == 70.0, "patch importance");
    v.note("weights {0.2,0.3,0.5} -> {" + fmt(wf.weights.at("a"), 15) + ", " + fmt(wf.weights.at("b"), 1) + ", " +
           fmt(wf.weights.at("c"), 1) + "}, importance example = 70");
  }
  {
    std::mt19937_64 rng(2024);
    std::size_t uncovered = 0, inexact = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t patch = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
      const std::size_t overlap = std::uniform_int_distribution<std::size_t>(0, patch - 1)(rng);
      const std::size_t h = std::uniform_int_distribution<std::size_t>(patch, 150)(rng);
      const std::size_t w = std::uniform_int_distribution<std::size_t>(patch, 150)(rng);
      const auto grid = compute_grid(h, w, patch, overlap);
      std::vector<int> hits(h * w, 0);
      for (const auto& win : grid.windows) {
        for (std::size_t y = win.row0; y < win.row0 + win.height; ++y) {
          for (std::size_t x = win.col0; x < win.col0 + win.width; ++x) ++hits[y * w + x];
        }
      }
      uncovered += static_cast<std::size_t>(std::count(hits.begin(), hits.end(), 0));
      const float c = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng);
      std::vector<MaskStack> preds;
      for (const auto& win : grid.windows) preds.emplace_back(1, win.height, win.width, c);
      const auto st = stitch_predictions(preds, grid);
      inexact += static_cast<std::size_t>(std::count_if(st.values.begin(), st.values.end(), [c](float x) { return x != c; }));
    }
    v.require(uncovered == 0 && inexact == 0, "tiling coverage and stitching");
    v.note("tiling: 50 triples, uncovered pixels = " + std::to_string(uncovered) +
           ", inexact stitched values = " + std::to_string(inexact));
  }
  {
    MaskStack gt(1, 4, 4), pred(1, 4, 4);
    for (std::size_t y = 1; y < 3; ++y) {
      gt.at(0, y, 0) = gt.at(0, y, 1) = 1.0f;
      pred.at(0, y, 1) = pred.at(0, y, 2) = 1.0f;
    }
    const double i = iou(pred.values, gt.values);
    const double f = f1(pred.values, gt.values);
    v.require(i == 1.0 / 3.0 && f == 0.5, "shifted-block metrics");
    std::mt19937_64 rng(21);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const auto a = random_masks(1, 16, 16, p, rng);
      const auto b = random_masks(1, 16, 16, p, rng);
      const double fi = f1(a.values, b.values);
      worst = std::max(worst, std::abs(iou(a.values, b.values) - fi / (2.0 - fi)));
    }
    v.require(worst <= 1e-9, "IoU = F1/(2-F1)");
    v.note("metrics: shifted block IoU = " + fmt(i, 6) + ", F1 = " + fmt(f, 6) + ", identity residual " +
           fmt(worst * 1e12, 3) + "e-12");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Desk-scale experiment shared by criteria 3 and 5

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};
constexpr std::size_t kPatch = 32;

TrainSettings desk_settings(std::uint64_t seed) {
  TrainSettings s;
  s.optimizer.lr = 2e-3;
  s.optimizer.batch_size = 8;
  s.epochs = 20;
  s.iters_per_epoch = 40;
  s.width_scale = 1.0 / 16.0;
  s.seed = seed;
  s.eval_every = 5;
  s.augment.profile = AugmentProfile::kBenchmark;
  return s;
}

EvalOptions desk_eval() {
  EvalOptions e;
  e.erode_radius = 0;
  e.patch_size = kPatch;
  e.overlap = kPatch / 4;
  return e;
}

// The stage-two region holds few stage-one objects, so distillation on its
// images constrains the old classes only weakly.
SyntheticSpec forgetting_corpus(std::uint64_t seed) {
  auto spec = default_synthetic_spec(100 + seed);
  spec.splits = {{"train1", 2}, {"train2", 2, 0, {{"building", 0.2}, {"vegetation", 0.2}}}, {"val", 3}};
  spec.manifests = {{"stage1.json", "train1", 1, {"building", "vegetation"}},
                    {"stage2.json", "train2", 2, {"water"}},
                    {"val.json", "val", 1, {"building", "vegetation", "water"}}};
  return spec;
}

struct ClassScores {
  double old_iou = 0.0;  // mean over the stage-one classes
  double new_iou = 0.0;
  double overall = 0.0;
};

ClassScores scores_of(const MetricReport& r) {
  ClassScores s;
  s.old_iou = r.mean_iou({"building", "vegetation"});
  if (r.per_class.contains("water")) s.new_iou = r.per_class.at("water").iou;
  s.overall = r.overall_iou;
  return s;
}

MetricReport evaluate_model(const Model& m, const DatasetManifest& val) {
  const Predictor p = [&m](const RasterImage& img) { return m.predict(img); };
  return evaluate_manifest(p, m.class_set(), val, desk_eval());
}

const Strategy kForgettingStrategies[] = {Strategy::kIncremental, Strategy::kIncrementalNoRem, Strategy::kFineTuning,
                                          Strategy::kFixedRepresentation, Strategy::kMultiple};

struct SeedResult {
  ClassScores before;
  std::map<Strategy, ClassScores> after;
};

// Runs stage one once per seed and forks every strategy for stage two. Each
// (seed, strategy) writes its own metrics.jsonl under `out`.
std::vector<SeedResult> forgetting_experiment(const fs::path& out) {
  std::vector<SeedResult> results;
  for (const auto seed : kSeeds) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = out / ("seed" + std::to_string(seed));
    const auto ms = synth_generate(forgetting_corpus(seed), dir / "corpus");
    const auto& val = ms[2];
    std::vector<StageData> stages;
    for (int i = 0; i < 2; ++i) stages.push_back({ms[i], load_stage_patches(ms[i], kPatch, 0)});

    const auto hook = [&](const EpochInfo&, const Model& m) -> json {
      return {{"val", evaluate_model(m, val).to_json()}};
    };
    SeedResult res;
    StrategyRunner base(Strategy::kIncremental, stages, desk_settings(seed));
    {
      MetricsSink sink(dir / "stage1_metrics.jsonl");
      base.run_stage(sink, hook);
    }
    res.before = scores_of(evaluate_model(base.model(), val));
    std::ostringstream line;
    line << "seed " << seed << ": before old=" << fmt(res.before.old_iou);
    for (const auto strat : kForgettingStrategies) {
      auto runner = base.fork(strat);
      MetricsSink sink(dir / (to_string(strat) + "_metrics.jsonl"));
      runner.run_stage(sink, hook);
      const auto rep = evaluate_model(runner.model(), val);
      std::ofstream(dir / (to_string(strat) + "_final.json")) << rep.to_json().dump(2) << '\n';
      res.after[strat] = scores_of(rep);
      line << " | " << to_string(strat) << " old=" << fmt(res.after[strat].old_iou) << " new="
           << fmt(res.after[strat].new_iou) << " all=" << fmt(res.after[strat].overall);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "    " << line.str() << "  [" << fmt(secs, 0) << " s]" << std::endl;
    results.push_back(std::move(res));
  }
  return results;
}

Verdict criterion3(const std::vector<SeedResult>& results) {
  Verdict v;
  const auto mean = [&](auto f) {
    double s = 0.0;
    for (const auto& r : results) s += f(r);
    return s / static_cast<double>(results.size());
  };
  const double before = mean([](const SeedResult& r) { return r.before.old_iou; });
  const auto after = [&](Strategy s, double ClassScores::*field) {
    return mean([&](const SeedResult& r) { return r.after.at(s).*field; });
  };
  const double ft_old = after(Strategy::kFineTuning, &ClassScores::old_iou);
  const double inc_old = after(Strategy::kIncremental, &ClassScores::old_iou);
  const double inc_new = after(Strategy::kIncremental, &ClassScores::new_iou);
  const double base_new = after(Strategy::kMultiple, &ClassScores::new_iou);
  const double fixed_new = after(Strategy::kFixedRepresentation, &ClassScores::new_iou);
  const double inc_all = after(Strategy::kIncremental, &ClassScores::overall);
  const double norem_all = after(Strategy::kIncrementalNoRem, &ClassScores::overall);
  const double ft_all = after(Strategy::kFineTuning, &ClassScores::overall);

  v.note("mean old-class IoU before stage 2: " + fmt(before));
  v.note("fine_tuning old-class IoU " + fmt(ft_old) + " < 0.25 x before = " + fmt(0.25 * before));
  v.require(ft_old < 0.25 * before, "fine-tuning forgetting");
  v.note("incremental old-class IoU " + fmt(inc_old) + " >= 0.80 x before = " + fmt(0.80 * before));
  v.require(inc_old >= 0.80 * before, "incremental retention");
  v.note("incremental new-class IoU " + fmt(inc_new) + " vs from-scratch baseline " + fmt(base_new) +
         " (gap " + fmt(base_new - inc_new) + " <= 0.10)");
  v.require(std::abs(inc_new - base_new) <= 0.10, "incremental new-class accuracy");
  v.note("fixed_representation new-class IoU " + fmt(fixed_new) + " <= incremental - 0.15 = " + fmt(inc_new - 0.15));
  v.require(fixed_new <= inc_new - 0.15, "fixed representation handicap");
  v.note("overall: incremental " + fmt(inc_all) + " >= incremental_no_rem " + fmt(norem_all) +
         " >= fine_tuning " + fmt(ft_all));
  v.require(inc_all >= norem_all, "incremental >= incremental_no_rem");
  v.require(norem_all >= ft_all, "incremental_no_rem >= fine_tuning");
  return v;
}

// ---------------------------------------------------------------------------
// 4. Convergence speed on a same-images scenario

SyntheticSpec staged_annotation_corpus(std::uint64_t seed) {
  auto spec = default_synthetic_spec(200 + seed);
  spec.splits = {{"train", 2}, {"val", 3}};
  spec.manifests = {{"stage1.json", "train", 1, {"building", "vegetation"}},
                    {"stage2.json", "train", 2, {"water"}},
                    {"val.json", "val", 1, {"building", "vegetation", "water"}}};
  return spec;
}

// First epoch (1-based) whose value reaches 90% of the final one.
std::size_t epochs_to_90(const std::vector<double>& curve) {
  const double target = 0.9 * curve.back();
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i] >= target) return i + 1;
  }
  return curve.size();
}

Verdict criterion4(const fs::path& out) {
  Verdict v;
  double inc_sum = 0.0, static_sum = 0.0;
  for (const auto seed : kSeeds) {
    const auto dir = out / ("seed" + std::to_string(seed));
    const auto ms = synth_generate(staged_annotation_corpus(seed), dir / "corpus");
    const auto& val = ms[2];
    auto settings = desk_settings(seed);
    settings.eval_every = 1;

    std::vector<double> inc_curve, static_curve;
    const auto tracker = [&](std::vector<double>& curve) {
      return [&](const EpochInfo& info, const Model& m) -> json {
        const auto rep = evaluate_model(m, val);
        if (rep.per_class.contains("water") && (info.strategy == Strategy::kStatic || info.stage_index == 1)) {
          curve.push_back(rep.per_class.at("water").iou);
        }
        return {{"val", rep.to_json()}};
      };
    };
    std::vector<StageData> stages;
    for (int i = 0; i < 2; ++i) stages.push_back({ms[i], load_stage_patches(ms[i], kPatch, 0)});
    {
      MetricsSink sink(dir / "incremental_metrics.jsonl");
      StrategyRunner inc(Strategy::kIncremental, stages, settings);
      inc.run_all(sink, tracker(inc_curve));
    }
    {
      const auto merged = merge_for_static({ms[0], ms[1]});
      MetricsSink sink(dir / "static_metrics.jsonl");
      StrategyRunner st(Strategy::kStatic, {StageData{merged, load_stage_patches(merged, kPatch, 0)}}, settings);
      st.run_all(sink, tracker(static_curve));
    }
    const auto e_inc = epochs_to_90(inc_curve);
    const auto e_static = epochs_to_90(static_curve);
    inc_sum += static_cast<double>(e_inc);
    static_sum += static_cast<double>(e_static);
    v.note("seed " + std::to_string(seed) + ": incremental reaches 90% of final water IoU " + fmt(inc_curve.back()) +
           " at epoch " + std::to_string(e_inc) + ", static reaches 90% of " + fmt(static_curve.back()) +
           " at epoch " + std::to_string(e_static));
  }
  const double n = static_cast<double>(std::size(kSeeds));
  v.note("mean epochs: incremental " + fmt(inc_sum / n, 1) + " <= 0.3 x static " + fmt(static_sum / n, 1) + " = " +
         fmt(0.3 * static_sum / n, 2));
  v.require(inc_sum <= 0.3 * static_sum, "convergence speed");
  return v;
}

// ---------------------------------------------------------------------------
// 5. Determinism

Verdict criterion5(const fs::path& a, const fs::path& b) {
  Verdict v;
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    const auto name = e.path().filename().string();
    if (!e.is_regular_file() || !(name.ends_with("_metrics.jsonl") || name.ends_with("_final.json"))) continue;
    const auto rel = fs::relative(e.path(), a);
    std::ifstream fa(e.path(), std::ios::binary), fb(b / rel, std::ios::binary);
    const std::string sa{std::istreambuf_iterator<char>(fa), {}};
    const std::string sb{std::istreambuf_iterator<char>(fb), {}};
    ++files;
    if (sa != sb || sa.empty()) {
      ++differing;
      v.note("differs: " + rel.string());
    }
  }
  v.require(files > 0 && differing == 0, "byte-identical metric files");
  v.note("compared " + std::to_string(files) + " metric files, differing = " + std::to_string(differing));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_out";
  std::vector<int> only;
  app.add_option("--out", out, "Work directory");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const fs::path work = fs::absolute(out);
  fs::remove_all(work);
  fs::create_directories(work);
  bool all = true;
  const auto timed = [&](int id, const std::string& title, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.note(std::string("exception: ") + e.what());
    }
    print(id, title, v, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    all = all && v.pass;
  };

  if (wanted(1)) timed(1, "exact preservation", [&] { return criterion1(work); });
  if (wanted(2)) timed(2, "numerical correctness", [] { return criterion2(); });
  std::vector<SeedResult> first;
  if (wanted(3) || wanted(5)) {
    timed(3, "desk-scale forgetting", [&] {
      first = forgetting_experiment(work / "forgetting_a");
      return criterion3(first);
    });
  }
  if (wanted(4)) timed(4, "convergence speed", [&] { return criterion4(work / "convergence"); });
  if (wanted(5)) {
    timed(5, "determinism", [&] {
      (void)forgetting_experiment(work / "forgetting_b");
      return criterion5(work / "forgetting_a", work / "forgetting_b");
    });
  }
  return all ? 0 : 1;
}

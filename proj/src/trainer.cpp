#include "incseg/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <set>

#include "incseg/losses.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Optimizer

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer.lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer.eps must be positive");
  if (batch_size == 0) throw ConfigError("optimizer.batch_size must be at least 1");
}

void adam_update(std::span<float> param, std::span<const float> grad, AdamMoments& s, const OptimizerConfig& opt) {
  if (param.size() != grad.size()) throw DimensionError("adam_update: parameter and gradient sizes differ");
  if (s.m.empty()) {
    s.m.assign(param.size(), 0.0f);
    s.v.assign(param.size(), 0.0f);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(s.t));
  const auto b1 = static_cast<float>(opt.beta1);
  const auto b2 = static_cast<float>(opt.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    s.m[i] = b1 * s.m[i] + (1.0f - b1) * g;
    s.v[i] = b2 * s.v[i] + (1.0f - b2) * g * g;
    const double mhat = static_cast<double>(s.m[i]) / c1;
    const double vhat = static_cast<double>(s.v[i]) / c2;
    param[i] = static_cast<float>(static_cast<double>(param[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
  }
}

void optimizer_step(SegNetwork& net, const std::vector<std::vector<float>>& grads, const FreezeMask& mask,
                    OptimizerState& state, const OptimizerConfig& opt, std::uint64_t iteration) {
  auto& params = net.mutable_parameters();
  if (grads.size() != params.size()) throw DimensionError("optimizer_step: one gradient per parameter expected");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& name = params[p].meta.name;
    if (!mask.allows(name) || grads[p].empty()) continue;
    for (float g : grads[p]) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient at iteration " + std::to_string(iteration) + " in parameter " + name);
      }
    }
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& name = params[p].meta.name;
    if (!mask.allows(name) || grads[p].empty()) continue;
    adam_update(params[p].value, grads[p], state.moments[name], opt);
  }
}

// ---------------------------------------------------------------------------
// Schedules

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::size_t parse_positive(const std::string& text, const std::string& context) {
  if (text.empty() || !std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ConfigError("schedule: expected a positive integer in '" + context + "'");
  }
  const auto v = std::stoull(text);
  if (v == 0) throw ConfigError("schedule: iterations must be >= 1 in '" + context + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

StageSchedule StageSchedule::parse(const std::string& dsl, std::size_t epochs, std::size_t iters_per_epoch) {
  StageSchedule s;
  s.epochs = epochs;
  s.iters_per_epoch = iters_per_epoch;
  if (epochs == 0 || iters_per_epoch == 0) throw ConfigError("schedule: epochs and iterations must be >= 1");
  std::size_t start = 0;
  while (start <= dsl.size()) {
    const auto comma = dsl.find(',', start);
    const std::string tok = trim(dsl.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    const auto colon = tok.rfind(':');
    if (colon == std::string::npos) throw ConfigError("schedule: step '" + tok + "' lacks ':<iterations>'");
    const std::string kind = trim(tok.substr(0, colon));
    ScheduleStep step;
    step.iterations = parse_positive(trim(tok.substr(colon + 1)), tok);
    if (kind == "adapt") {
      step.kind = ScheduleStep::Kind::kAdapt;
    } else if (kind.starts_with("rem(") && kind.ends_with(")")) {
      step.kind = ScheduleStep::Kind::kRem;
      const std::string id = trim(kind.substr(4, kind.size() - 5));
      if (id.empty() || !std::all_of(id.begin(), id.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw ConfigError("schedule: bad stage id in '" + tok + "'");
      }
      step.stage_id = std::stoi(id);
    } else {
      throw ConfigError("schedule: unknown step kind '" + kind + "'");
    }
    s.cycle.push_back(step);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (s.cycle.empty()) throw ConfigError("schedule: empty cycle");
  return s;
}

std::string StageSchedule::to_string() const {
  std::string out;
  for (const auto& st : cycle) {
    if (!out.empty()) out += ",";
    out += st.kind == ScheduleStep::Kind::kAdapt ? std::string("adapt") : "rem(" + std::to_string(st.stage_id) + ")";
    out += ":" + std::to_string(st.iterations);
  }
  return out;
}

std::size_t StageSchedule::cycle_length() const {
  std::size_t n = 0;
  for (const auto& st : cycle) n += st.iterations;
  return n;
}

const ScheduleStep& StageSchedule::step_at(std::size_t it) const {
  std::size_t pos = it % cycle_length();
  for (const auto& st : cycle) {
    if (pos < st.iterations) return st;
    pos -= st.iterations;
  }
  return cycle.back();
}

StageSchedule StageSchedule::without_rem() const {
  StageSchedule out = *this;
  out.cycle.clear();
  for (const auto& st : cycle) {
    if (st.kind == ScheduleStep::Kind::kAdapt) out.cycle.push_back(st);
  }
  if (out.cycle.empty()) out.cycle.push_back({ScheduleStep::Kind::kAdapt, 0, 1});
  return out;
}

std::string default_schedule(const std::vector<int>& earlier_stage_ids) {
  if (earlier_stage_ids.empty()) return "adapt:1";
  const std::size_t adapt = std::max<std::size_t>(1, 4 / earlier_stage_ids.size());
  std::string out;
  for (int id : earlier_stage_ids) {
    if (!out.empty()) out += ",";
    out += "rem(" + std::to_string(id) + "):1,adapt:" + std::to_string(adapt);
  }
  return out;
}

namespace {

const std::vector<std::pair<Strategy, std::string>>& strategy_names() {
  static const std::vector<std::pair<Strategy, std::string>> names = {
      {Strategy::kStatic, "static"},
      {Strategy::kMultiple, "multiple"},
      {Strategy::kFixedRepresentation, "fixed_representation"},
      {Strategy::kFineTuning, "fine_tuning"},
      {Strategy::kIncremental, "incremental"},
      {Strategy::kIncrementalNoRem, "incremental_no_rem"},
  };
  return names;
}

bool is_incremental(Strategy s) { return s == Strategy::kIncremental || s == Strategy::kIncrementalNoRem; }

}  // namespace

Strategy parse_strategy(const std::string& s) {
  for (const auto& [k, name] : strategy_names()) {
    if (name == s) return k;
  }
  throw ConfigError("unknown strategy '" + s + "'");
}

std::string to_string(Strategy s) {
  for (const auto& [k, name] : strategy_names()) {
    if (k == s) return name;
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Sampling and batches

PatchPool::PatchPool(std::vector<Patch> patches) : patches_(std::move(patches)) {
  std::map<std::string, std::map<std::string, std::vector<std::size_t>>> tree;
  for (std::size_t i = 0; i < patches_.size(); ++i) tree[patches_[i].country][patches_[i].city].push_back(i);
  for (auto& [country, cities] : tree) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> cs(cities.begin(), cities.end());
    countries_.emplace_back(country, std::move(cs));
  }
}

std::size_t PatchPool::sample_index(Rng& rng) const {
  if (patches_.empty()) throw DataError("cannot sample from an empty patch set");
  const auto& cities = countries_[std::uniform_int_distribution<std::size_t>(0, countries_.size() - 1)(rng)].second;
  const auto& idx = cities[std::uniform_int_distribution<std::size_t>(0, cities.size() - 1)(rng)].second;
  return idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)];
}

std::vector<Patch> sample_batch(const PatchPool& pool, std::size_t batch_size, Rng& rng, AugmentProfile profile,
                                RadiometricToggles toggles) {
  if (pool.empty()) throw DataError("cannot sample a batch from an empty dataset");
  std::vector<Patch> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto idx = pool.sample_index(rng);
    const auto params = sample_params(rng, profile);
    out.push_back(augment_patch(pool.patches()[idx], params, toggles));
  }
  return out;
}

std::vector<Patch> load_stage_patches(const DatasetManifest& manifest, std::size_t patch_size, std::size_t overlap) {
  std::vector<Patch> out;
  for (std::size_t i = 0; i < manifest.items.size(); ++i) {
    const auto item = load_item(manifest, i);
    const auto grid = compute_grid(item.image.height, item.image.width, patch_size, overlap);
    for (auto& p : extract_patches(item.image, &item.masks, grid)) {
      p.stage_id = manifest.stage_id;
      p.country = item.country;
      p.city = item.city;
      p.item_index = i;
      out.push_back(std::move(p));
    }
  }
  return out;
}

DatasetManifest merge_for_static(const std::vector<DatasetManifest>& stages) {
  if (stages.empty()) throw DataError("static merge needs at least one stage");
  DatasetManifest out;
  out.stage_id = stages.front().stage_id;
  out.normalization = stages.front().normalization;
  std::map<std::string, std::size_t> by_image;
  for (const auto& st : stages) {
    out.class_set = out.class_set.empty() ? st.class_set : out.class_set.concat(st.class_set);
    for (const auto& item : st.items) {
      const std::string key = fs::weakly_canonical(fs::absolute(item.image)).string();
      auto [it, inserted] = by_image.emplace(key, out.items.size());
      if (inserted) {
        out.items.push_back(item);
      } else {
        for (const auto& [cls, path] : item.masks) out.items[it->second].masks[cls] = path;
      }
    }
  }
  for (const auto& item : out.items) {
    for (const auto& cls : out.class_set.names()) {
      if (!item.masks.contains(cls)) {
        throw DataError("static strategy: image " + item.image.string() + " has no annotation for class '" + cls + "'");
      }
    }
  }
  return out;
}

Tensor4<float> batch_images(const std::vector<Patch>& batch, const Normalization& norm) {
  std::vector<RasterImage> imgs;
  imgs.reserve(batch.size());
  for (const auto& p : batch) imgs.push_back(normalize_image(p.image, norm));
  return images_to_batch<float>(imgs);
}

Tensor4<float> batch_masks(const std::vector<Patch>& batch, const std::vector<std::size_t>& planes) {
  std::vector<MaskStack> masks;
  masks.reserve(batch.size());
  for (const auto& p : batch) {
    if (!p.masks) throw DataError("training patch has no masks");
    masks.push_back(p.masks->select(planes));
  }
  return masks_to_batch<float>(masks);
}

ClassSet Model::class_set() const {
  ClassSet out;
  for (const auto& n : networks) out = out.empty() ? n.class_set() : out.concat(n.class_set());
  return out;
}

MaskStack Model::predict(const RasterImage& normalized) const {
  if (networks.empty()) throw ValidationError("model has no networks");
  if (networks.size() == 1) return predict_image(networks.front(), normalized);
  MaskStack out;
  for (const auto& n : networks) {
    auto part = predict_image(n, normalized);
    if (out.planes == 0) {
      out = std::move(part);
    } else {
      out.values.insert(out.values.end(), part.values.begin(), part.values.end());
      out.planes += part.planes;
    }
  }
  return out;
}

MetricsSink::MetricsSink(const fs::path& file) : out_(std::make_unique<std::ofstream>(file, std::ios::binary)) {
  if (!*out_) throw IoError("cannot write metrics file " + file.string());
}

void MetricsSink::write(const json& record) {
  if (out_) {
    *out_ << record.dump() << '\n';
    out_->flush();
  }
  records_.push_back(record);
}

// ---------------------------------------------------------------------------
// Strategy runner

namespace {

Rng stage_rng(std::uint64_t seed, std::size_t stage_index, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage_index), purpose};
  return Rng(seq);
}

std::vector<bool> wanted_for(const SegNetwork& net, const FreezeMask& mask) {
  std::vector<bool> w;
  w.reserve(net.parameters().size());
  for (const auto& p : net.parameters()) w.push_back(mask.allows(p.meta.name));
  return w;
}

std::vector<std::size_t> all_planes(std::size_t k) {
  std::vector<std::size_t> v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = i;
  return v;
}

json nullable(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

}  // namespace

StrategyRunner::StrategyRunner(Strategy strategy, std::vector<StageData> stages, TrainSettings settings)
    : strategy_(strategy), stages_(std::move(stages)), settings_(std::move(settings)) {
  validate();
}

StageSchedule StrategyRunner::schedule_for(std::size_t stage_index) const {
  std::vector<int> earlier;
  for (std::size_t j = 0; j < stage_index; ++j) earlier.push_back(stages_[j].manifest.stage_id);
  std::string dsl;
  if (stage_index < settings_.schedules.size()) dsl = settings_.schedules[stage_index];
  if (dsl.empty()) dsl = default_schedule(earlier);
  auto sched = StageSchedule::parse(dsl, settings_.epochs, settings_.iters_per_epoch);
  if (strategy_ != Strategy::kIncremental) return sched.without_rem();
  for (const auto& st : sched.cycle) {
    if (st.kind == ScheduleStep::Kind::kRem && std::find(earlier.begin(), earlier.end(), st.stage_id) == earlier.end()) {
      throw ConfigError("schedule for stage " + std::to_string(stages_[stage_index].manifest.stage_id) +
                        " references rem(" + std::to_string(st.stage_id) + ") without an earlier stage buffer");
    }
  }
  return sched;
}

void StrategyRunner::validate() const {
  if (stages_.empty()) throw ConfigError("no stages configured");
  settings_.optimizer.validate();
  if (strategy_ == Strategy::kStatic && stages_.size() != 1) {
    throw ConfigError("static strategy trains one merged stage; merge the manifests first");
  }
  std::vector<DatasetManifest> manifests;
  for (const auto& s : stages_) manifests.push_back(s.manifest);
  try {
    check_stage_order(manifests);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  ClassSet seen;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const auto& m = stages_[i].manifest;
    if (!seen.disjoint_from(m.class_set)) {
      throw ValidationError("stage " + std::to_string(m.stage_id) + " repeats an earlier class");
    }
    seen = seen.empty() ? m.class_set : seen.concat(m.class_set);
    if (stages_[i].patches.empty()) throw DataError("stage " + std::to_string(m.stage_id) + " has no patches");
    static_cast<void>(schedule_for(i));
  }
  if (!(settings_.frac_importance >= 0.0 && settings_.frac_random >= 0.0 &&
        settings_.frac_importance + settings_.frac_random <= 1.0)) {
    throw ConfigError("rehearsal fractions must be non-negative and sum to at most 1");
  }
}

void StrategyRunner::refresh_model(const SegNetwork& current) {
  model_.networks.clear();
  if (strategy_ == Strategy::kMultiple) {
    model_.networks = stage_nets_;
    model_.networks.push_back(current);
  } else if (strategy_ == Strategy::kFineTuning || strategy_ == Strategy::kFixedRepresentation) {
    std::vector<const SegNetwork*> heads;
    for (const auto& n : stage_nets_) heads.push_back(&n);
    heads.push_back(&current);
    model_.networks.push_back(SegNetwork::graft(current, heads));
  } else {
    model_.networks.push_back(current);
  }
}

void StrategyRunner::train(SegNetwork& net, const SegNetwork* memory, std::size_t stage_index,
                           const FreezeMask& adapt_mask, const StageSchedule& schedule, MetricsSink& sink,
                           const EpochHook& hook) {
  const StageData& stage = stages_[stage_index];
  const int stage_id = stage.manifest.stage_id;
  const auto& opt = settings_.optimizer;
  Rng rng = stage_rng(settings_.seed, stage_index, 0);
  OptimizerState state;
  const PatchPool pool(stage.patches);
  const auto adapt_wanted = wanted_for(net, adapt_mask);
  const auto new_planes = all_planes(stage.manifest.class_set.size());
  const std::size_t old_channels = memory != nullptr ? memory->class_set().size() : 0;

  struct RemContext {
    PatchPool pool;
    FreezeMask mask;
    std::vector<bool> wanted;
    std::vector<std::size_t> channels;
    std::vector<std::size_t> planes;
    const Normalization* norm = nullptr;
  };
  std::map<int, RemContext> rem;
  for (const auto& st : schedule.cycle) {
    if (st.kind != ScheduleStep::Kind::kRem || rem.contains(st.stage_id)) continue;
    auto it = buffers_.find(st.stage_id);
    if (it == buffers_.end()) throw ConfigError("rem(" + std::to_string(st.stage_id) + ") has no rehearsal buffer");
    RemContext ctx;
    ctx.pool = PatchPool(it->second.patches);
    ctx.mask = freeze_for_remembering(net, it->second.class_set);
    ctx.wanted = wanted_for(net, ctx.mask);
    for (const auto& cls : it->second.class_set.names()) ctx.channels.push_back(net.class_set().index_of(cls));
    ctx.planes = all_planes(it->second.class_set.size());
    for (const auto& s : stages_) {
      if (s.manifest.stage_id == st.stage_id) ctx.norm = &s.manifest.normalization;
    }
    rem.emplace(st.stage_id, std::move(ctx));
  }
  const AugmentProfile buffer_profile = settings_.augment.on_buffers ? settings_.augment.profile : AugmentProfile::kNone;

  const std::size_t total = schedule.total_iterations();
  for (std::size_t it = 0; it < total; ++it) {
    const ScheduleStep& step = schedule.step_at(it);
    const std::size_t epoch = it / schedule.iters_per_epoch + 1;
    std::optional<double> l_class;
    std::optional<double> l_distil;
    std::optional<double> l_rem;
    double l_total = 0.0;
    ForwardCache<float> cache;
    Tensor4<float> dlogits;
    std::vector<std::vector<float>> grads;
    if (step.kind == ScheduleStep::Kind::kAdapt) {
      const auto batch = sample_batch(pool, opt.batch_size, rng, settings_.augment.profile, settings_.augment.radiometric);
      const auto x = batch_images(batch, stage.manifest.normalization);
      const auto y = batch_masks(batch, new_planes);
      const auto logits = net.forward(x, &cache);
      Tensor4<float> p_mem;
      if (memory != nullptr) p_mem = sigmoid(memory->forward(x));
      const auto loss = adaptation_loss(y, p_mem, logits, old_channels, &dlogits);
      l_class = loss.components.at("class");
      l_distil = loss.components.at("distil");
      l_total = loss.total;
      grads = net.backward(cache, dlogits, adapt_wanted);
      optimizer_step(net, grads, adapt_mask, state, opt, it + 1);
    } else {
      const RemContext& ctx = rem.at(step.stage_id);
      const auto batch = sample_batch(ctx.pool, opt.batch_size, rng, buffer_profile, settings_.augment.radiometric);
      const auto x = batch_images(batch, *ctx.norm);
      const auto y = batch_masks(batch, ctx.planes);
      const auto logits = net.forward(x, &cache);
      l_rem = remembering_loss(y, logits, ctx.channels, &dlogits);
      l_total = *l_rem;
      grads = net.backward(cache, dlogits, ctx.wanted);
      optimizer_step(net, grads, ctx.mask, state, opt, it + 1);
    }
    if (!std::isfinite(l_total)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(it + 1) + " of stage " +
                         std::to_string(stage_id));
    }
    sink.write({{"type", "iter"},
                {"strategy", to_string(strategy_)},
                {"stage", stage_id},
                {"epoch", epoch},
                {"iter", it + 1},
                {"step", step.kind == ScheduleStep::Kind::kAdapt ? std::string("adapt")
                                                                  : "rem(" + std::to_string(step.stage_id) + ")"},
                {"loss_total", l_total},
                {"loss_class", nullable(l_class)},
                {"loss_distil", nullable(l_distil)},
                {"loss_rem", nullable(l_rem)}});

    if ((it + 1) % schedule.iters_per_epoch != 0) continue;
    ++global_epoch_;
    const bool stage_end = epoch == schedule.epochs;
    const bool eval_now = stage_end || (settings_.eval_every > 0 && epoch % settings_.eval_every == 0);
    if (eval_now && hook) {
      refresh_model(net);
      EpochInfo info{strategy_, stage_index, stage_id, epoch, global_epoch_, stage_end};
      json metrics = hook(info, model_);
      if (!metrics.is_null()) {
        sink.write({{"type", "eval"},
                    {"strategy", to_string(strategy_)},
                    {"stage", stage_id},
                    {"epoch", epoch},
                    {"global_epoch", global_epoch_},
                    {"stage_end", stage_end},
                    {"metrics", metrics}});
      }
    }
    if (settings_.out_dir && settings_.checkpoint_every > 0 && epoch % settings_.checkpoint_every == 0 && !stage_end) {
      const auto dir = *settings_.out_dir / "checkpoints";
      fs::create_directories(dir);
      save_checkpoint_file(net, dir / ("stage" + std::to_string(stage_id) + "_epoch" + std::to_string(epoch) + ".ckpt"));
    }
  }
}

void StrategyRunner::run_stage(MetricsSink& sink, const EpochHook& hook) {
  if (done()) throw ValidationError("all stages have already run");
  const std::size_t s = next_stage_;
  const StageData& stage = stages_[s];
  const ClassSet& classes = stage.manifest.class_set;
  Rng init = stage_rng(settings_.seed, s, 1);
  const std::size_t in_channels = stage.patches.front().image.channels;
  NetworkSpec spec{in_channels, classes, settings_.width_scale};

  SegNetwork net;
  std::optional<SegNetwork> memory;
  FreezeMask mask;
  if (s == 0 || strategy_ == Strategy::kMultiple || strategy_ == Strategy::kStatic) {
    net = build_network(spec, init);
    mask = full_mask(net);
  } else if (is_incremental(strategy_)) {
    memory = stage_nets_.back();
    memory->freeze();
    net = memory->expand_classifier(classes, init);
    mask = full_mask(net);
  } else {
    net = stage_nets_.back().replace_classifier(classes, init);
    mask = strategy_ == Strategy::kFixedRepresentation ? heads_only_mask(net, classes) : full_mask(net);
  }
  train(net, memory ? &*memory : nullptr, s, mask, schedule_for(s), sink, hook);
  net.record_stage({stage.manifest.stage_id, classes.names()});
  refresh_model(net);

  if (strategy_ != Strategy::kStatic) {
    Rng sel = stage_rng(settings_.seed, s, 2);
    buffers_[stage.manifest.stage_id] = select_rehearsal(stage.patches, classes, stage.manifest.stage_id,
                                                         settings_.frac_importance, settings_.frac_random, sel);
  }
  if (settings_.out_dir) {
    const auto dir = *settings_.out_dir / "checkpoints";
    fs::create_directories(dir);
    save_checkpoint_file(net, dir / ("stage" + std::to_string(stage.manifest.stage_id) + ".ckpt"));
    if (strategy_ == Strategy::kFineTuning || strategy_ == Strategy::kFixedRepresentation) {
      save_checkpoint_file(model_.networks.front(),
                           dir / ("stage" + std::to_string(stage.manifest.stage_id) + "_combined.ckpt"));
    }
    if (buffers_.contains(stage.manifest.stage_id) && s + 1 < stages_.size()) {
      save_buffer(buffers_.at(stage.manifest.stage_id),
                  *settings_.out_dir / "buffers" / ("stage" + std::to_string(stage.manifest.stage_id)));
    }
  }
  stage_nets_.push_back(std::move(net));
  ++next_stage_;
}

void StrategyRunner::run_all(MetricsSink& sink, const EpochHook& hook) {
  while (!done()) run_stage(sink, hook);
}

StrategyRunner StrategyRunner::fork(Strategy other) const {
  if (next_stage_ != 1 || strategy_ == Strategy::kStatic || other == Strategy::kStatic) {
    throw ValidationError("only a runner that finished its first non-static stage can be forked");
  }
  StrategyRunner out = *this;
  out.strategy_ = other;
  out.validate();
  return out;
}

std::vector<SegNetwork> run_strategy(Strategy strategy, std::vector<StageData> stages, const TrainSettings& settings,
                                     MetricsSink& sink, const EpochHook& hook) {
  StrategyRunner runner(strategy, std::move(stages), settings);
  runner.run_all(sink, hook);
  return runner.stage_networks();
}

}  // namespace incseg

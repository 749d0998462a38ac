#include "incseg/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"
#include "layers.hpp"

namespace incseg {

using nlohmann::json;

std::vector<std::size_t> NetworkSpec::widths() const {
  if (!(width_scale > 0.0)) throw ParameterError("width_scale must be positive");
  std::vector<std::size_t> out;
  for (std::size_t base : kBaseWidths) {
    const auto f = static_cast<std::size_t>(std::floor(static_cast<double>(base) * width_scale + 1e-9));
    if (f == 0) {
      throw ParameterError("width_scale " + std::to_string(width_scale) + " leaves a layer with 0 filters");
    }
    out.push_back(f);
  }
  return out;
}

std::size_t Parameter::size() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

namespace {

template <typename T>
std::vector<T> xavier_values(std::size_t count, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = xavier_bound(fan_in, fan_out);
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction

template <typename T>
void BasicSegNetwork<T>::build_graph() {
  // Shapes of every shared layer follow from the NetworkSpec; parameters must
  // already exist (see build/load).
  const auto f = spec_.widths();
  nodes_.clear();
  auto add = [&](Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
  };
  auto conv_like = [&](Op op, const std::string& name, int in, std::size_t cin, std::size_t cout) {
    Node n;
    n.op = op;
    n.name = name;
    n.in0 = in;
    n.cin = cin;
    n.cout = cout;
    n.relu = true;
    n.weight = static_cast<int>(parameter_index(name + ".weight"));
    n.bias = static_cast<int>(parameter_index(name + ".bias"));
    const auto& w = params_[static_cast<std::size_t>(n.weight)].meta.shape;
    const std::vector<std::size_t> expected =
        op == Op::kConv ? std::vector<std::size_t>{cout, cin, 3, 3} : std::vector<std::size_t>{cin, cout, 2, 2};
    if (w != expected) throw FormatError("parameter " + name + ".weight has an unexpected shape");
    return add(std::move(n));
  };

  Node input;
  input.op = Op::kInput;
  input.name = "input";
  input.cout = spec_.in_channels;
  int cur = add(input);
  std::size_t ch = spec_.in_channels;
  int pools[5];
  for (std::size_t s = 0; s < 5; ++s) {
    for (std::size_t j = 0; j < kStageConvs[s]; ++j) {
      cur = conv_like(Op::kConv, "enc" + std::to_string(s + 1) + ".conv" + std::to_string(j + 1), cur, ch, f[s]);
      ch = f[s];
    }
    Node pool;
    pool.op = Op::kPool;
    pool.name = "enc" + std::to_string(s + 1) + ".pool";
    pool.in0 = cur;
    pool.cin = pool.cout = ch;
    cur = pools[s] = add(pool);
  }
  for (std::size_t j = 0; j < kCenterConvs; ++j) {
    cur = conv_like(Op::kConv, "center.conv" + std::to_string(j + 1), cur, ch, f[4]);
    ch = f[4];
  }
  for (std::size_t d = 5; d >= 1; --d) {
    Node cat;
    cat.op = Op::kConcat;
    cat.name = "dec" + std::to_string(d) + ".concat";
    cat.in0 = cur;
    cat.in1 = pools[d - 1];
    cat.cin = ch;
    cat.cout = ch + f[d - 1];
    cur = add(cat);
    ch += f[d - 1];
    cur = conv_like(Op::kDeconv, "dec" + std::to_string(d) + ".deconv", cur, ch, f[d - 1]);
    ch = f[d - 1];
    for (std::size_t j = 0; j < kStageConvs[d - 1]; ++j) {
      cur = conv_like(Op::kConv, "dec" + std::to_string(d) + ".conv" + std::to_string(j + 1), cur, ch, ch);
    }
  }
  Node head;
  head.op = Op::kHead;
  head.name = "head";
  head.in0 = cur;
  head.cin = ch;
  head.cout = spec_.class_set.size();
  for (const auto& cls : spec_.class_set.names()) {
    const auto& w = parameter(head_weight_name(cls)).meta.shape;
    if (w != std::vector<std::size_t>{1, ch, 3, 3}) throw FormatError("head for '" + cls + "' has an unexpected shape");
    static_cast<void>(parameter(head_bias_name(cls)));
  }
  add(head);
}

template <typename T>
void BasicSegNetwork<T>::add_head(const std::string& cls, Rng& rng) {
  const std::size_t cin = spec_.widths()[0];
  auto push = [&](std::string name, std::vector<std::size_t> shape, std::vector<T> value) {
    index_[name] = params_.size();
    params_.push_back({{std::move(name), std::move(shape)}, std::move(value)});
  };
  push(head_weight_name(cls), {1, cin, 3, 3}, xavier_values<T>(cin * 9, cin * 9, 9, rng));
  push(head_bias_name(cls), {1}, std::vector<T>(1, T(0)));
}

template <typename T>
BasicSegNetwork<T> BasicSegNetwork<T>::build(const NetworkSpec& spec, Rng& rng) {
  if (spec.in_channels == 0) throw ParameterError("network needs at least one input channel");
  BasicSegNetwork net;
  net.spec_ = spec;
  const auto f = spec.widths();
  auto push = [&](std::string name, std::vector<std::size_t> shape, std::vector<T> value) {
    net.index_[name] = net.params_.size();
    net.params_.push_back({{std::move(name), std::move(shape)}, std::move(value)});
  };
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    push(name + ".weight", {cout, cin, 3, 3}, xavier_values<T>(cout * cin * 9, cin * 9, cout * 9, rng));
    push(name + ".bias", {cout}, std::vector<T>(cout, T(0)));
  };
  auto deconv = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    push(name + ".weight", {cin, cout, 2, 2}, xavier_values<T>(cin * cout * 4, cin * 4, cout * 4, rng));
    push(name + ".bias", {cout}, std::vector<T>(cout, T(0)));
  };
  std::size_t ch = spec.in_channels;
  for (std::size_t s = 0; s < 5; ++s) {
    for (std::size_t j = 0; j < kStageConvs[s]; ++j) {
      conv("enc" + std::to_string(s + 1) + ".conv" + std::to_string(j + 1), ch, f[s]);
      ch = f[s];
    }
  }
  for (std::size_t j = 0; j < kCenterConvs; ++j) {
    conv("center.conv" + std::to_string(j + 1), ch, f[4]);
    ch = f[4];
  }
  for (std::size_t d = 5; d >= 1; --d) {
    ch += f[d - 1];
    deconv("dec" + std::to_string(d) + ".deconv", ch, f[d - 1]);
    ch = f[d - 1];
    for (std::size_t j = 0; j < kStageConvs[d - 1]; ++j) {
      conv("dec" + std::to_string(d) + ".conv" + std::to_string(j + 1), ch, ch);
    }
  }
  for (const auto& cls : spec.class_set.names()) net.add_head(cls, rng);
  net.build_graph();
  return net;
}

template <typename T>
std::vector<ParameterValues<T>>& BasicSegNetwork<T>::mutable_parameters() {
  if (frozen()) throw ValidationError("memory network is frozen; parameter updates are rejected");
  return params_;
}

template <typename T>
const ParameterValues<T>& BasicSegNetwork<T>::parameter(const std::string& name) const {
  return params_[parameter_index(name)];
}

template <typename T>
std::size_t BasicSegNetwork<T>::parameter_index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t BasicSegNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
std::vector<std::string> BasicSegNetwork<T>::shared_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) {
    if (!p.meta.name.starts_with("head.")) out.push_back(p.meta.name);
  }
  return out;
}

template <typename T>
std::vector<std::string> BasicSegNetwork<T>::node_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_) out.push_back(n.name);
  return out;
}

template <typename T>
BasicSegNetwork<T> BasicSegNetwork<T>::expand_classifier(const ClassSet& new_classes, Rng& rng) const {
  if (new_classes.empty()) throw ValidationError("expand_classifier needs at least one new class");
  if (!spec_.class_set.disjoint_from(new_classes)) {
    throw ValidationError("new classes overlap the memory network's classes");
  }
  BasicSegNetwork out = *this;
  out.mode_ = NetworkMode::kTrainable;
  out.spec_.class_set = spec_.class_set.concat(new_classes);
  for (const auto& cls : new_classes.names()) out.add_head(cls, rng);
  out.build_graph();
  return out;
}

template <typename T>
BasicSegNetwork<T> BasicSegNetwork<T>::replace_classifier(const ClassSet& classes, Rng& rng) const {
  if (classes.empty()) throw ValidationError("replace_classifier needs at least one class");
  BasicSegNetwork out;
  out.spec_ = spec_;
  out.spec_.class_set = classes;
  out.history_ = history_;
  for (const auto& p : params_) {
    if (p.meta.name.starts_with("head.")) continue;
    out.index_[p.meta.name] = out.params_.size();
    out.params_.push_back(p);
  }
  for (const auto& cls : classes.names()) out.add_head(cls, rng);
  out.build_graph();
  return out;
}

template <typename T>
BasicSegNetwork<T> BasicSegNetwork<T>::graft(const BasicSegNetwork& shared,
                                             const std::vector<const BasicSegNetwork*>& head_sources) {
  BasicSegNetwork out;
  out.spec_ = shared.spec_;
  out.spec_.class_set = ClassSet();
  for (const auto& p : shared.params_) {
    if (p.meta.name.starts_with("head.")) continue;
    out.index_[p.meta.name] = out.params_.size();
    out.params_.push_back(p);
  }
  for (const auto* src : head_sources) {
    if (src->spec_.in_channels != shared.spec_.in_channels || src->spec_.width_scale != shared.spec_.width_scale) {
      throw ValidationError("graft: head source has a different architecture");
    }
    out.spec_.class_set = out.spec_.class_set.empty() ? src->class_set() : out.spec_.class_set.concat(src->class_set());
    for (const auto& cls : src->class_set().names()) {
      for (const auto& name : {head_weight_name(cls), head_bias_name(cls)}) {
        out.index_[name] = out.params_.size();
        out.params_.push_back(src->parameter(name));
      }
    }
    for (const auto& r : src->history_) {
      if (std::find(out.history_.begin(), out.history_.end(), r) == out.history_.end()) out.history_.push_back(r);
    }
  }
  out.build_graph();
  return out;
}

template <typename T>
template <typename U>
BasicSegNetwork<U> BasicSegNetwork<T>::cast() const {
  BasicSegNetwork<U> out;
  out.spec_ = spec_;
  out.mode_ = mode_;
  out.history_ = history_;
  out.index_ = index_;
  for (const auto& p : params_) {
    ParameterValues<U> q;
    q.meta = p.meta;
    q.value.assign(p.value.begin(), p.value.end());
    out.params_.push_back(std::move(q));
  }
  out.build_graph();
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
Tensor4<T> BasicSegNetwork<T>::forward(const Tensor4<T>& x, ForwardCache<T>* cache, const ForwardOptions& opts) const {
  if (x.c != spec_.in_channels) {
    throw DimensionError("input has " + std::to_string(x.c) + " channels, network expects " +
                         std::to_string(spec_.in_channels));
  }
  if (x.h == 0 || x.w == 0 || x.h % kSpatialDivisor != 0 || x.w % kSpatialDivisor != 0) {
    throw DimensionError("input " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                         " is not divisible by 32");
  }
  std::vector<Tensor4<T>> acts(nodes_.size());
  std::vector<std::vector<std::uint8_t>> argmax(nodes_.size());
  acts[0] = x;
  std::vector<T> head_w;
  std::vector<T> head_b;
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    const auto& in = acts[static_cast<std::size_t>(n.in0)];
    switch (n.op) {
      case Op::kConv:
        layers::conv3x3_forward(in, params_[static_cast<std::size_t>(n.weight)].value.data(),
                                params_[static_cast<std::size_t>(n.bias)].value.data(), n.cout, acts[i]);
        break;
      case Op::kDeconv:
        layers::deconv2x2_forward(in, params_[static_cast<std::size_t>(n.weight)].value.data(),
                                  params_[static_cast<std::size_t>(n.bias)].value.data(), n.cout, acts[i]);
        break;
      case Op::kPool:
        layers::maxpool2x2_forward(in, acts[i], argmax[i]);
        break;
      case Op::kConcat:
        layers::concat_channels(in, acts[static_cast<std::size_t>(n.in1)], acts[i]);
        break;
      case Op::kHead: {
        head_w.clear();
        head_b.clear();
        for (const auto& cls : spec_.class_set.names()) {
          const auto& wv = parameter(head_weight_name(cls)).value;
          head_w.insert(head_w.end(), wv.begin(), wv.end());
          head_b.push_back(parameter(head_bias_name(cls)).value[0]);
        }
        layers::conv3x3_forward(in, head_w.data(), head_b.data(), n.cout, acts[i]);
        break;
      }
      case Op::kInput:
        break;
    }
    if (n.relu) layers::relu_inplace(acts[i]);
    if (opts.ablate.contains(n.name)) std::fill(acts[i].data.begin(), acts[i].data.end(), T(0));
  }
  Tensor4<T> out = acts.back();
  if (cache != nullptr) {
    cache->activations = std::move(acts);
    cache->argmax = std::move(argmax);
    cache->names = node_names();
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> BasicSegNetwork<T>::backward(const ForwardCache<T>& cache, const Tensor4<T>& dlogits,
                                                         const std::vector<bool>& wanted_in) const {
  if (cache.activations.size() != nodes_.size()) throw DimensionError("forward cache does not match network");
  if (!dlogits.same_shape(cache.activations.back())) throw DimensionError("gradient shape does not match logits");
  std::vector<bool> wanted = wanted_in;
  if (wanted.empty()) wanted.assign(params_.size(), true);
  if (wanted.size() != params_.size()) throw DimensionError("wanted mask size does not match parameter count");

  const std::size_t head_node = nodes_.size() - 1;
  std::vector<std::size_t> head_params;
  for (const auto& cls : spec_.class_set.names()) {
    head_params.push_back(parameter_index(head_weight_name(cls)));
    head_params.push_back(parameter_index(head_bias_name(cls)));
  }
  auto node_wants = [&](std::size_t i) {
    const Node& n = nodes_[i];
    if (n.op == Op::kHead) {
      return std::any_of(head_params.begin(), head_params.end(), [&](std::size_t p) { return wanted[p]; });
    }
    return (n.weight >= 0 && wanted[static_cast<std::size_t>(n.weight)]) ||
           (n.bias >= 0 && wanted[static_cast<std::size_t>(n.bias)]);
  };
  // upstream[i]: node i or one of its ancestors owns a wanted parameter.
  std::vector<bool> upstream(nodes_.size(), false);
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    bool u = node_wants(i);
    if (n.in0 >= 0) u = u || upstream[static_cast<std::size_t>(n.in0)];
    if (n.in1 >= 0) u = u || upstream[static_cast<std::size_t>(n.in1)];
    upstream[i] = u;
  }

  std::vector<std::vector<T>> grads(params_.size());
  for (std::size_t p = 0; p < params_.size(); ++p) {
    if (wanted[p]) grads[p].assign(params_[p].value.size(), T(0));
  }
  std::vector<Tensor4<T>> g(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);
  auto accumulate = [&](int target, Tensor4<T>&& t) {
    const auto j = static_cast<std::size_t>(target);
    if (!has[j]) {
      g[j] = std::move(t);
      has[j] = true;
    } else {
      for (std::size_t k = 0; k < t.data.size(); ++k) g[j].data[k] += t.data[k];
    }
  };
  if (!upstream[head_node]) return grads;
  g[head_node] = dlogits;
  has[head_node] = true;

  for (std::size_t i = nodes_.size() - 1; i >= 1; --i) {
    if (!has[i]) continue;
    const Node& n = nodes_[i];
    Tensor4<T>& gi = g[i];
    if (std::find(cache.names.begin(), cache.names.end(), n.name) == cache.names.end()) {
      throw DimensionError("forward cache lacks node " + n.name);
    }
    if (n.relu) layers::relu_backward_inplace(cache.activations[i], gi);
    const auto& in = cache.activations[static_cast<std::size_t>(n.in0)];
    const bool need_in0 = n.in0 >= 0 && upstream[static_cast<std::size_t>(n.in0)];
    switch (n.op) {
      case Op::kConv:
      case Op::kDeconv: {
        const auto wi = static_cast<std::size_t>(n.weight);
        const auto bi = static_cast<std::size_t>(n.bias);
        T* dw = wanted[wi] ? grads[wi].data() : nullptr;
        T* db = wanted[bi] ? grads[bi].data() : nullptr;
        Tensor4<T> din;
        if (n.op == Op::kConv) {
          layers::conv3x3_backward(in, params_[wi].value.data(), n.cout, gi, dw, db, need_in0 ? &din : nullptr);
        } else {
          layers::deconv2x2_backward(in, params_[wi].value.data(), n.cout, gi, dw, db, need_in0 ? &din : nullptr);
        }
        if (need_in0) accumulate(n.in0, std::move(din));
        break;
      }
      case Op::kHead: {
        std::vector<T> head_w;
        for (const auto& cls : spec_.class_set.names()) {
          const auto& wv = parameter(head_weight_name(cls)).value;
          head_w.insert(head_w.end(), wv.begin(), wv.end());
        }
        const std::size_t per = n.cin * 9;
        std::vector<T> dw(head_w.size(), T(0));
        std::vector<T> db(n.cout, T(0));
        Tensor4<T> din;
        layers::conv3x3_backward(in, head_w.data(), n.cout, gi, dw.data(), db.data(), need_in0 ? &din : nullptr);
        for (std::size_t k = 0; k < n.cout; ++k) {
          const std::size_t wi = head_params[2 * k];
          const std::size_t bi = head_params[2 * k + 1];
          if (wanted[wi]) {
            std::copy_n(dw.begin() + static_cast<std::ptrdiff_t>(k * per), per, grads[wi].begin());
          }
          if (wanted[bi]) grads[bi][0] = db[k];
        }
        if (need_in0) accumulate(n.in0, std::move(din));
        break;
      }
      case Op::kPool: {
        if (need_in0) {
          Tensor4<T> din(in.n, in.c, in.h, in.w);
          layers::maxpool2x2_backward(gi, cache.argmax[i], din);
          accumulate(n.in0, std::move(din));
        }
        break;
      }
      case Op::kConcat: {
        const bool need_in1 = upstream[static_cast<std::size_t>(n.in1)];
        Tensor4<T> da;
        Tensor4<T> db;
        layers::split_channels(gi, n.cin, need_in0 ? &da : nullptr, need_in1 ? &db : nullptr);
        if (need_in0) accumulate(n.in0, std::move(da));
        if (need_in1) accumulate(n.in1, std::move(db));
        break;
      }
      case Op::kInput:
        break;
    }
    g[i] = Tensor4<T>();
  }
  return grads;
}

template <typename T>
const Tensor4<T>& ForwardCache<T>::probe(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ValidationError("no activation named '" + name + "'");
  return activations[static_cast<std::size_t>(it - names.begin())];
}

template <typename T>
std::uint64_t ForwardCache<T>::activation_pattern() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (std::size_t i = 1; i + 1 < activations.size(); ++i) {
    for (auto v : activations[i].data) mix(v > T(0) ? 1u : 0u);
    for (auto a : argmax[i]) mix(a);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Freeze masks

FreezeMask full_mask(const SegNetwork& net) {
  FreezeMask m;
  for (const auto& p : net.parameters()) m.trainable.insert(p.meta.name);
  return m;
}

FreezeMask heads_only_mask(const SegNetwork& net, const ClassSet& classes) {
  FreezeMask m;
  for (const auto& cls : classes.names()) {
    if (!net.class_set().contains(cls)) throw ValidationError("network has no class '" + cls + "'");
    m.trainable.insert(SegNetwork::head_weight_name(cls));
    m.trainable.insert(SegNetwork::head_bias_name(cls));
  }
  return m;
}

FreezeMask shared_and_heads_mask(const SegNetwork& net, const ClassSet& classes) {
  FreezeMask m = heads_only_mask(net, classes);
  for (auto& n : net.shared_parameter_names()) m.trainable.insert(std::move(n));
  return m;
}

FreezeMask freeze_for_remembering(const SegNetwork& net, const ClassSet& stage_classes) {
  return shared_and_heads_mask(net, stage_classes);
}

// ---------------------------------------------------------------------------
// Batches and prediction

template <typename T>
Tensor4<T> sigmoid(const Tensor4<T>& logits) {
  Tensor4<T> out = logits;
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return out;
}

template <typename T>
Tensor4<T> images_to_batch(std::span<const RasterImage> images) {
  if (images.empty()) throw DimensionError("empty batch");
  const auto& f = images.front();
  Tensor4<T> t(images.size(), f.channels, f.height, f.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (img.height != f.height || img.width != f.width || img.channels != f.channels) {
      throw DimensionError("batch images differ in shape");
    }
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        for (std::size_t c = 0; c < img.channels; ++c) t.at(i, c, y, x) = static_cast<T>(img.at(y, x, c));
      }
    }
  }
  return t;
}

template <typename T>
Tensor4<T> masks_to_batch(std::span<const MaskStack> masks) {
  if (masks.empty()) throw DimensionError("empty batch");
  const auto& f = masks.front();
  Tensor4<T> t(masks.size(), f.planes, f.height, f.width);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].planes != f.planes || masks[i].height != f.height || masks[i].width != f.width) {
      throw DimensionError("batch masks differ in shape");
    }
    std::transform(masks[i].values.begin(), masks[i].values.end(), t.sample(i),
                   [](float v) { return static_cast<T>(v); });
  }
  return t;
}

template <typename T>
MaskStack batch_sample_to_masks(const Tensor4<T>& t, std::size_t i) {
  MaskStack m(t.c, t.h, t.w);
  std::transform(t.sample(i), t.sample(i) + t.sample_size(), m.values.begin(),
                 [](T v) { return static_cast<float>(v); });
  return m;
}

MaskStack predict_image(const SegNetwork& net, const RasterImage& normalized) {
  const RasterImage* one = &normalized;
  auto batch = images_to_batch<float>(std::span<const RasterImage>(one, 1));
  return batch_sample_to_masks(sigmoid(net.forward(batch)), 0);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'I', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint8_t kDtypeFloat32 = 1;

}  // namespace

std::string save_checkpoint(const SegNetwork& net) {
  json history = json::array();
  for (const auto& r : net.stage_history()) history.push_back({{"stage_id", r.stage_id}, {"classes", r.classes}});
  json meta{{"format_version", kCkptVersion},
            {"spec",
             {{"in_channels", net.spec().in_channels},
              {"width_scale", net.spec().width_scale},
              {"classes", net.class_set().names()}}},
            {"stage_history", history},
            {"mode", net.frozen() ? "frozen-memory" : "trainable"},
            {"parameter_tensors", net.parameters().size()}};
  std::ostringstream os(std::ios::binary);
  detail::BinaryWriter w(os);
  w.bytes(kCkptMagic, sizeof(kCkptMagic));
  w.pod<std::uint32_t>(kCkptVersion);
  const std::string meta_text = meta.dump();
  w.pod<std::uint64_t>(meta_text.size());
  w.bytes(meta_text.data(), meta_text.size());
  for (const auto& p : net.parameters()) {
    w.str(p.meta.name);
    w.pod<std::uint8_t>(kDtypeFloat32);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.meta.shape.size()));
    for (auto d : p.meta.shape) w.pod<std::uint64_t>(d);
    w.pod<std::uint64_t>(p.value.size() * sizeof(float));
    w.floats(p.value);
  }
  return os.str();
}

SegNetwork load_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  detail::BinaryReader r(is, "checkpoint");
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kCkptMagic))) throw FormatError("checkpoint: bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  const auto meta_len = r.pod<std::uint64_t>();
  if (meta_len > bytes.size()) throw FormatError("checkpoint: truncated metadata");
  std::string meta_text(meta_len, '\0');
  r.bytes(meta_text.data(), meta_len);

  NetworkSpec spec;
  std::vector<StageRecord> history;
  bool frozen = false;
  std::size_t tensors = 0;
  try {
    const json meta = json::parse(meta_text);
    if (meta.at("format_version").get<std::uint32_t>() != kCkptVersion) throw FormatError("checkpoint: version mismatch");
    spec.in_channels = meta.at("spec").at("in_channels").get<std::size_t>();
    spec.width_scale = meta.at("spec").at("width_scale").get<double>();
    spec.class_set = ClassSet(meta.at("spec").at("classes").get<std::vector<std::string>>());
    for (const auto& h : meta.at("stage_history")) {
      history.push_back({h.at("stage_id").get<int>(), h.at("classes").get<std::vector<std::string>>()});
    }
    frozen = meta.at("mode").get<std::string>() == "frozen-memory";
    tensors = meta.at("parameter_tensors").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }

  Rng scratch(0);
  SegNetwork net;
  try {
    net = SegNetwork::build(spec, scratch);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint spec: ") + e.what());
  }
  if (tensors != net.parameters().size()) throw FormatError("checkpoint: parameter tensor count mismatch");
  auto& params = net.mutable_parameters();
  std::vector<bool> seen(params.size(), false);
  for (std::size_t t = 0; t < tensors; ++t) {
    const std::string name = r.str(4096);
    if (r.pod<std::uint8_t>() != kDtypeFloat32) throw FormatError("checkpoint: unsupported dtype for " + name);
    const auto ndim = r.pod<std::uint32_t>();
    if (ndim > 8) throw FormatError("checkpoint: implausible rank for " + name);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    const auto nbytes = r.pod<std::uint64_t>();
    std::size_t idx = 0;
    try {
      idx = net.parameter_index(name);
    } catch (const ValidationError&) {
      throw FormatError("checkpoint: unexpected parameter " + name);
    }
    auto& p = params[idx];
    if (shape != p.meta.shape || nbytes != p.value.size() * sizeof(float)) {
      throw FormatError("checkpoint: shape mismatch for " + name);
    }
    p.value = r.floats(p.value.size());
    seen[idx] = true;
  }
  if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) throw FormatError("checkpoint: missing parameters");
  for (auto& h : history) net.record_stage(std::move(h));
  if (frozen) net.freeze();
  return net;
}

void save_checkpoint_file(const SegNetwork& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const auto bytes = save_checkpoint(net);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

SegNetwork load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_checkpoint(ss.str());
}

template class BasicSegNetwork<float>;
template class BasicSegNetwork<double>;
template BasicSegNetwork<double> BasicSegNetwork<float>::cast<double>() const;
template BasicSegNetwork<float> BasicSegNetwork<double>::cast<float>() const;
template struct ForwardCache<float>;
template struct ForwardCache<double>;
template Tensor4<float> sigmoid<float>(const Tensor4<float>&);
template Tensor4<double> sigmoid<double>(const Tensor4<double>&);
template Tensor4<float> images_to_batch<float>(std::span<const RasterImage>);
template Tensor4<double> images_to_batch<double>(std::span<const RasterImage>);
template Tensor4<float> masks_to_batch<float>(std::span<const MaskStack>);
template Tensor4<double> masks_to_batch<double>(std::span<const MaskStack>);
template MaskStack batch_sample_to_masks<float>(const Tensor4<float>&, std::size_t);
template MaskStack batch_sample_to_masks<double>(const Tensor4<double>&, std::size_t);

}  // namespace incseg

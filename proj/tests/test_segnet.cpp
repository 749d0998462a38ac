#include <cmath>
#include <fstream>

#include "doctest.h"
#include "incseg/losses.hpp"
#include "incseg/segnet.hpp"
#include "support.hpp"

using namespace incseg;
using testing::TempDir;

namespace {

NetworkSpec spec_of(std::vector<std::string> classes, double scale = 1.0 / 16.0) {
  return {3, ClassSet(std::move(classes)), scale};
}

template <typename T>
Tensor4<T> random_input(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed, double sigma = 40.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sigma);
  Tensor4<T> x(n, 3, h, w);
  for (auto& v : x.data) v = static_cast<T>(d(rng));
  return x;
}

// Closed-form parameter total for the encoder-decoder at widths f.
std::size_t oracle_parameter_count(const std::vector<std::size_t>& f, std::size_t in, std::size_t classes) {
  const std::size_t convs[5] = {2, 2, 3, 3, 3};
  auto conv = [](std::size_t a, std::size_t b) { return b * a * 9 + b; };
  std::size_t total = 0;
  std::size_t ch = in;
  for (int s = 0; s < 5; ++s) {
    for (std::size_t j = 0; j < convs[s]; ++j) {
      total += conv(ch, f[s]);
      ch = f[s];
    }
  }
  total += 2 * conv(f[4], f[4]);
  for (int d = 4; d >= 0; --d) {
    total += (ch + f[d]) * f[d] * 4 + f[d];
    ch = f[d];
    total += convs[d] * conv(ch, ch);
  }
  return total + classes * (f[0] * 9 + 1);
}

}  // namespace

TEST_CASE("widths scale the VGG16 filter counts") {
  CHECK(spec_of({"a"}, 1.0 / 8.0).widths() == std::vector<std::size_t>{8, 16, 32, 64, 64});
  CHECK(spec_of({"a"}, 1.0).widths() == std::vector<std::size_t>{64, 128, 256, 512, 512});
  CHECK_THROWS_AS((void)spec_of({"a"}, 1.0 / 128.0).widths(), ParameterError);
  Rng rng(1);
  CHECK_THROWS_AS((void)build_network(spec_of({"a"}, 0.0), rng), ParameterError);
}

TEST_CASE("parameter count matches the closed form") {
  for (double scale : {1.0 / 16.0, 1.0 / 8.0, 0.25}) {
    Rng rng(2);
    const auto spec = spec_of({"a", "b", "c"}, scale);
    const auto net = build_network(spec, rng);
    CHECK(net.parameter_count() == oracle_parameter_count(spec.widths(), 3, 3));
  }
  Rng rng(2);
  // 13 encoder convs, 2 centre convs, 5 deconvs, 13 decoder convs, weight and bias each, plus heads
  const auto net = build_network(spec_of({"a", "b"}), rng);
  CHECK(net.parameters().size() == (13 + 2 + 5 + 13) * 2 + 2 * 2);
  CHECK(net.shared_parameter_names().size() == (13 + 2 + 5 + 13) * 2);
}

TEST_CASE("Xavier-uniform initialization") {
  CHECK(xavier_bound(100, 44) == doctest::Approx(std::sqrt(6.0 / 144.0)));
  Rng rng(3);
  const auto net = build_network(spec_of({"a"}, 0.25), rng);
  for (const char* name : {"enc3.conv2.weight", "dec4.deconv.weight", "center.conv1.weight"}) {
    const auto& p = net.parameter(name);
    const auto& s = p.meta.shape;
    const std::size_t k = s[2] * s[3];
    const bool deconv = std::string(name).find("deconv") != std::string::npos;
    const std::size_t fan_in = (deconv ? s[0] : s[1]) * k;
    const std::size_t fan_out = (deconv ? s[1] : s[0]) * k;
    const double bound = xavier_bound(fan_in, fan_out);
    double mean = 0.0, var = 0.0;
    for (float v : p.value) {
      CHECK(std::abs(v) <= bound);
      mean += v;
    }
    mean /= static_cast<double>(p.value.size());
    for (float v : p.value) var += (v - mean) * (v - mean);
    var /= static_cast<double>(p.value.size());
    CAPTURE(name);
    CHECK(std::abs(mean) < 0.05 * bound);
    CHECK(var == doctest::Approx(bound * bound / 3.0).epsilon(0.05));
  }
  for (const auto& p : net.parameters()) {
    if (p.meta.name.ends_with(".bias")) {
      CHECK(std::all_of(p.value.begin(), p.value.end(), [](float v) { return v == 0.0f; }));
    }
  }
  const auto& head = net.parameter("head.a.weight").value;
  const double hb = xavier_bound(4 * 9, 9);
  CHECK(std::all_of(head.begin(), head.end(), [hb](float v) { return std::abs(v) <= hb; }));
}

TEST_CASE("forward shapes, determinism and input checks") {
  Rng r1(4), r2(4), r3(5);
  const auto a = build_network(spec_of({"a", "b"}), r1);
  const auto b = build_network(spec_of({"a", "b"}), r2);
  const auto c = build_network(spec_of({"a", "b"}), r3);
  CHECK(a.parameter("enc1.conv1.weight").value == b.parameter("enc1.conv1.weight").value);
  CHECK(a.parameter("enc1.conv1.weight").value != c.parameter("enc1.conv1.weight").value);
  const auto x = random_input<float>(2, 32, 64, 1);
  const auto y = a.forward(x);
  CHECK(y.n == 2);
  CHECK(y.c == 2);
  CHECK(y.h == 32);
  CHECK(y.w == 64);
  CHECK(y == b.forward(x));
  CHECK_THROWS_AS((void)a.forward(random_input<float>(1, 48, 32, 1)), DimensionError);
  Tensor4<float> gray(1, 1, 32, 32);
  CHECK_THROWS_AS((void)a.forward(gray), DimensionError);
  // samples are independent of their batch neighbours
  Tensor4<float> first(1, 3, 32, 64);
  std::copy_n(x.data.begin(), first.size(), first.data.begin());
  const auto y1 = a.forward(first);
  CHECK(std::equal(y1.data.begin(), y1.data.end(), y.data.begin()));
}

TEST_CASE("every skip connection and the centre reach the output") {
  Rng rng(6);
  const auto net = build_network(spec_of({"a"}), rng);
  const auto x = random_input<float>(1, 64, 64, 2);
  const auto base = net.forward(x);
  const auto names = net.node_names();
  for (const char* node : {"enc1.pool", "enc2.pool", "enc3.pool", "enc4.pool", "enc5.pool", "center.conv2"}) {
    CAPTURE(node);
    REQUIRE(std::find(names.begin(), names.end(), node) != names.end());
    ForwardOptions opts;
    opts.ablate = {node};
    CHECK(net.forward(x, nullptr, opts) != base);
  }
  ForwardCache<float> cache;
  (void)net.forward(x, &cache);
  CHECK(cache.probe("enc5.pool").h == 2);
  CHECK(cache.probe("dec5.concat").c == 64);
  CHECK(cache.probe("dec1.conv2").h == 64);
  CHECK_THROWS_AS((void)cache.probe("missing"), ValidationError);
}

TEST_CASE("analytic gradients match central differences") {
  Rng rng(7);
  auto net = build_network(spec_of({"a", "b"}), rng).cast<double>();
  // He gain and nonzero biases keep activations and gradients at a measurable
  // scale through all 33 layers.
  std::mt19937_64 brng(70);
  for (auto& p : net.mutable_parameters()) {
    for (auto& v : p.value) {
      v = p.meta.name.ends_with(".bias") ? std::uniform_real_distribution<double>(-0.1, 0.1)(brng) : v * std::sqrt(2.0);
    }
  }
  const auto x = random_input<double>(2, 32, 32, 3, 3.0);
  Tensor4<double> targets(2, 2, 32, 32);
  std::mt19937_64 trng(8);
  for (auto& v : targets.data) v = std::bernoulli_distribution(0.3)(trng) ? 1.0 : 0.0;

  ForwardCache<double> cache;
  Tensor4<double> dlogits;
  binary_ce_logits(targets, net.forward(x, &cache), &dlogits);
  const auto pattern = cache.activation_pattern();
  const auto& logits = cache.activations.back().data;
  // stay clear of the probability clamp, where the loss is flat
  CHECK(*std::max_element(logits.begin(), logits.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }) < 10.0);
  const auto grads = net.backward(cache, dlogits);

  auto loss_with = [&](SegNetwork64& n, std::uint64_t* pat) {
    ForwardCache<double> c;
    const double l = binary_ce_logits(targets, n.forward(x, &c));
    *pat = c.activation_pattern();
    return l;
  };

  std::mt19937_64 pick(9);
  const double h = 1e-3;
  std::size_t checked = 0, kinks = 0;
  double worst = 0.0;
  auto probe = net;
  for (int attempt = 0; checked < 120 && attempt < 2000; ++attempt) {
    const std::size_t pi = std::uniform_int_distribution<std::size_t>(0, net.parameters().size() - 1)(pick);
    const std::size_t ei =
        std::uniform_int_distribution<std::size_t>(0, net.parameters()[pi].value.size() - 1)(pick);
    auto& v = probe.mutable_parameters()[pi].value[ei];
    const double orig = v;
    std::uint64_t p_plus = 0, p_minus = 0;
    v = orig + h;
    const double lp = loss_with(probe, &p_plus);
    v = orig - h;
    const double lm = loss_with(probe, &p_minus);
    v = orig;
    if (p_plus != pattern || p_minus != pattern) {
      ++kinks;  // a ReLU or pooling choice flipped inside the stencil
      continue;
    }
    const double numeric = (lp - lm) / (2 * h);
    const double analytic = grads[pi][ei];
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    worst = std::max(worst, rel);
    CAPTURE(net.parameters()[pi].meta.name);
    CAPTURE(analytic);
    CAPTURE(numeric);
    CHECK(rel < 1e-4);
    ++checked;
  }
  MESSAGE("checked ", checked, " parameters, skipped ", kinks, " at kinks, worst relative error ", worst);
  CHECK(checked >= 100);
}

TEST_CASE("backward computes only the wanted gradients") {
  Rng rng(10);
  const auto net = build_network(spec_of({"a", "b"}), rng);
  const auto x = random_input<float>(1, 32, 32, 4);
  ForwardCache<float> cache;
  const auto y = net.forward(x, &cache);
  Tensor4<float> d(y.n, y.c, y.h, y.w, 0.01f);
  const auto full = net.backward(cache, d);
  std::vector<bool> wanted(net.parameters().size(), false);
  const auto hw = net.parameter_index("head.b.weight");
  const auto c1 = net.parameter_index("dec1.conv1.weight");
  wanted[hw] = wanted[c1] = true;
  const auto part = net.backward(cache, d, wanted);
  for (std::size_t i = 0; i < wanted.size(); ++i) {
    if (wanted[i]) {
      CHECK(part[i] == full[i]);
    } else {
      CHECK(part[i].empty());
    }
  }
  CHECK_THROWS_AS((void)net.backward(cache, Tensor4<float>(1, 2, 64, 64)), DimensionError);
}

TEST_CASE("expanding the classifier preserves old outputs bit for bit") {
  Rng rng(11);
  auto memory = build_network(spec_of({"building", "vegetation"}), rng);
  memory.freeze();
  Rng head_rng(12);
  const auto updated = memory.expand_classifier(ClassSet({"water"}), head_rng);
  CHECK_FALSE(updated.frozen());
  CHECK(updated.class_set().names() == std::vector<std::string>{"building", "vegetation", "water"});
  std::size_t compared = 0;
  for (int i = 0; i < 100; ++i) {
    const auto x = random_input<float>(1, 32, 32, 1000 + static_cast<std::uint64_t>(i));
    const auto a = memory.forward(x);
    const auto b = updated.forward(x);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t p = 0; p < a.plane(); ++p) {
        if (a.at(0, k, p / a.w, p % a.w) != b.at(0, k, p / a.w, p % a.w)) FAIL("old channel differs");
        ++compared;
      }
    }
  }
  CHECK(compared == 100 * 2 * 32 * 32);
  CHECK_THROWS_AS((void)memory.expand_classifier(ClassSet({"building"}), head_rng), ValidationError);
}

TEST_CASE("frozen networks reject parameter updates") {
  Rng rng(13);
  auto net = build_network(spec_of({"a"}), rng);
  CHECK_NOTHROW((void)net.mutable_parameters());
  net.freeze();
  CHECK(net.frozen());
  CHECK_THROWS_AS((void)net.mutable_parameters(), ValidationError);
}

TEST_CASE("replacing and grafting classifier heads") {
  Rng rng(14);
  const auto stage1 = build_network(spec_of({"a", "b"}), rng);
  const auto stage2 = stage1.replace_classifier(ClassSet({"c"}), rng);
  CHECK(stage2.class_set().names() == std::vector<std::string>{"c"});
  CHECK(stage2.parameter("enc2.conv1.weight").value == stage1.parameter("enc2.conv1.weight").value);

  const auto combined = SegNetwork::graft(stage2, {&stage1, &stage2});
  CHECK(combined.class_set().names() == std::vector<std::string>{"a", "b", "c"});
  CHECK(combined.parameter("head.a.weight").value == stage1.parameter("head.a.weight").value);
  const auto x = random_input<float>(1, 32, 32, 5);
  const auto yc = combined.forward(x);
  const auto y2 = stage2.forward(x);
  CHECK(std::equal(y2.data.begin(), y2.data.end(), yc.data.begin() + 2 * yc.plane()));
  CHECK_THROWS_AS((void)SegNetwork::graft(stage2, {&stage1, &stage1}), ValidationError);
  Rng other(1);
  const auto wider = build_network(spec_of({"z"}, 1.0 / 8.0), other);
  CHECK_THROWS_AS((void)SegNetwork::graft(stage2, {&wider}), ValidationError);
}

TEST_CASE("freeze masks") {
  Rng rng(15);
  const auto net = build_network(spec_of({"a", "b", "c"}), rng);
  const auto rem = freeze_for_remembering(net, ClassSet({"a", "b"}));
  CHECK(rem.allows("enc1.conv1.weight"));
  CHECK(rem.allows("head.b.bias"));
  CHECK_FALSE(rem.allows("head.c.weight"));
  CHECK_THROWS_AS((void)freeze_for_remembering(net, ClassSet({"d"})), ValidationError);
  const auto heads = heads_only_mask(net, ClassSet({"c"}));
  CHECK(heads.trainable == std::set<std::string>{"head.c.weight", "head.c.bias"});
  CHECK(full_mask(net).trainable.size() == net.parameters().size());
  const auto ft = shared_and_heads_mask(net, ClassSet({"c"}));
  CHECK(ft.allows("center.conv1.bias"));
  CHECK_FALSE(ft.allows("head.a.bias"));
}

TEST_CASE("precision casts round trip") {
  Rng rng(16);
  const auto net = build_network(spec_of({"a"}), rng);
  const auto back = net.cast<double>().cast<float>();
  for (std::size_t i = 0; i < net.parameters().size(); ++i) CHECK(back.parameters()[i].value == net.parameters()[i].value);
  const auto x = random_input<float>(1, 32, 32, 6);
  const auto yf = net.forward(x);
  Tensor4<double> xd(1, 3, 32, 32);
  std::copy(x.data.begin(), x.data.end(), xd.data.begin());
  const auto yd = net.cast<double>().forward(xd);
  for (std::size_t i = 0; i < yf.size(); ++i) CHECK(yf.data[i] == doctest::Approx(yd.data[i]).epsilon(1e-3));
}

TEST_CASE("checkpoints round trip and reject damage") {
  TempDir dir("ckpt");
  Rng rng(17);
  auto net = build_network(spec_of({"building", "road"}), rng);
  net.record_stage({1, {"building", "road"}});
  net.freeze();
  save_checkpoint_file(net, dir / "a.ckpt");
  const auto back = load_checkpoint_file(dir / "a.ckpt");
  CHECK(back.class_set() == net.class_set());
  CHECK(back.stage_history() == net.stage_history());
  CHECK(back.frozen());
  CHECK(back.spec().width_scale == net.spec().width_scale);
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    CHECK(back.parameters()[i].meta.name == net.parameters()[i].meta.name);
    CHECK(back.parameters()[i].value == net.parameters()[i].value);
  }
  const auto x = random_input<float>(1, 32, 32, 7);
  CHECK(back.forward(x) == net.forward(x));

  const auto bytes = save_checkpoint(net);
  CHECK(save_checkpoint(back) == bytes);
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    CAPTURE(cut);
    CHECK_THROWS_AS((void)load_checkpoint(bytes.substr(0, cut)), FormatError);
  }
  auto bad = bytes;
  bad[0] = 'J';
  CHECK_THROWS_AS((void)load_checkpoint(bad), FormatError);
  auto version = bytes;
  version[8] = 9;
  CHECK_THROWS_AS((void)load_checkpoint(version), FormatError);
  CHECK_THROWS_AS((void)load_checkpoint_file(dir / "missing.ckpt"), IoError);
}

TEST_CASE("batch conversion helpers") {
  std::mt19937_64 rng(18);
  std::vector<RasterImage> imgs{testing::random_image(4, 4, 3, rng), testing::random_image(4, 4, 3, rng)};
  const auto t = images_to_batch<float>(imgs);
  CHECK(t.n == 2);
  CHECK(t.at(1, 2, 3, 1) == imgs[1].at(3, 1, 2));
  std::vector<MaskStack> masks{testing::random_masks(2, 4, 4, 0.5, rng), testing::random_masks(2, 4, 4, 0.5, rng)};
  const auto mt = masks_to_batch<float>(masks);
  CHECK(batch_sample_to_masks(mt, 1) == masks[1]);
  imgs.push_back(testing::random_image(8, 4, 3, rng));
  CHECK_THROWS_AS((void)images_to_batch<float>(imgs), DimensionError);
  Tensor4<float> z(1, 1, 1, 3);
  z.data = {0.0f, 100.0f, -100.0f};
  const auto s = sigmoid(z);
  CHECK(s.data[0] == 0.5f);
  CHECK(s.data[1] == doctest::Approx(1.0f));
  CHECK(s.data[2] >= 0.0f);
}

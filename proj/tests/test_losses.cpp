#include <cmath>
#include <random>

#include "doctest.h"
#include "incseg/losses.hpp"

using namespace incseg;

namespace {

Tensor4<double> random_tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double lo, double hi,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor4<double> t(n, c, h, w);
  for (auto& v : t.data) v = d(rng);
  return t;
}

Tensor4<double> binary_tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  auto t = random_tensor(n, c, h, w, 0.0, 1.0, seed);
  for (auto& v : t.data) v = v < 0.4 ? 1.0 : 0.0;
  return t;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Direct probability-space cross-entropy on a channel subset.
double oracle_ce(const Tensor4<double>& y, const Tensor4<double>& z, std::size_t c0, std::size_t c1) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.n; ++i) {
    for (std::size_t c = c0; c < c1; ++c) {
      for (std::size_t yy = 0; yy < z.h; ++yy) {
        for (std::size_t xx = 0; xx < z.w; ++xx) {
          const double p = sigmoid(z.at(i, c, yy, xx));
          const double t = y.at(i, c - c0, yy, xx);
          s -= t * std::log(p) + (1 - t) * std::log(1 - p);
        }
      }
    }
  }
  return s / static_cast<double>(z.n * (c1 - c0) * z.plane());
}

}  // namespace

TEST_CASE("hand-computed cross-entropy values") {
  const std::vector<double> one{1.0}, half{0.5};
  CHECK(std::abs(binary_ce(one, half) - 0.693147) <= 1e-6);
  CHECK(std::abs(binary_ce(one, half) - std::log(2.0)) < 1e-12);
  // distillation against its own soft target is the binary entropy
  CHECK(std::abs(binary_ce(half, half) - std::log(2.0)) < 1e-6);
  CHECK(binary_entropy(0.5) == doctest::Approx(std::log(2.0)));
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  // clamping bounds the loss of confident mistakes
  CHECK(binary_ce(one, std::vector<double>{0.0}) == doctest::Approx(-std::log(kProbEpsilon)));
  CHECK(binary_ce(std::vector<double>{0.0, 1.0}, std::vector<double>{0.0, 1.0}) < 1e-6);
  CHECK_THROWS_AS((void)binary_ce(one, std::vector<double>{0.5, 0.5}), DimensionError);
  CHECK_THROWS_AS((void)binary_ce(std::vector<double>{}, std::vector<double>{}), DimensionError);

  MaskStack t(1, 1, 2), p(1, 1, 2, 0.5f);
  t.values = {1.0f, 0.0f};
  CHECK(binary_ce(t, p) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("soft-target loss is minimized at the target with value H(q)") {
  for (double q : {0.05, 0.3, 0.5, 0.77, 0.95}) {
    double best_p = 0.0, best = 1e300;
    for (int i = 1; i < 10000; ++i) {
      const double p = i / 10000.0;
      const double l = binary_ce(std::vector<double>{q}, std::vector<double>{p});
      if (l < best) {
        best = l;
        best_p = p;
      }
    }
    CAPTURE(q);
    CHECK(std::abs(best_p - q) <= 1e-4);
    CHECK(best == doctest::Approx(binary_entropy(q)).epsilon(1e-6));
  }
}

TEST_CASE("logit form agrees with the probability form") {
  const auto z = random_tensor(2, 3, 4, 5, -8.0, 8.0, 1);
  const auto y = random_tensor(2, 3, 4, 5, 0.0, 1.0, 2);
  CHECK(binary_ce_logits(y, z) == doctest::Approx(oracle_ce(y, z, 0, 3)).epsilon(1e-12));
  // very confident logits stay finite and are clamped
  Tensor4<double> big(1, 1, 1, 2);
  big.data = {1000.0, -1000.0};
  Tensor4<double> wrong(1, 1, 1, 2);
  wrong.data = {0.0, 1.0};
  CHECK(binary_ce_logits(wrong, big) == doctest::Approx(-std::log(kProbEpsilon)).epsilon(1e-6));
  const auto zf = random_tensor(1, 1, 2, 2, -3, 3, 3);
  Tensor4<float> zf32(1, 1, 2, 2), yf32(1, 1, 2, 2, 1.0f);
  std::copy(zf.data.begin(), zf.data.end(), zf32.data.begin());
  Tensor4<double> yd(1, 1, 2, 2, 1.0);
  Tensor4<double> zd(1, 1, 2, 2);
  std::copy(zf32.data.begin(), zf32.data.end(), zd.data.begin());
  CHECK(binary_ce_logits(yf32, zf32) == doctest::Approx(binary_ce_logits(yd, zd)).epsilon(1e-12));
}

TEST_CASE("logit gradients match finite differences") {
  auto z = random_tensor(2, 3, 3, 3, -4.0, 4.0, 4);
  const auto y_curr = binary_tensor(2, 1, 3, 3, 5);
  const auto p_mem = random_tensor(2, 2, 3, 3, 0.0, 1.0, 6);
  Tensor4<double> grad;
  (void)adaptation_loss(y_curr, p_mem, z, 2, &grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double orig = z.data[i];
    z.data[i] = orig + h;
    const double lp = adaptation_loss(y_curr, p_mem, z, 2).total;
    z.data[i] = orig - h;
    const double lm = adaptation_loss(y_curr, p_mem, z, 2).total;
    z.data[i] = orig;
    CHECK(grad.data[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-6));
  }
  Tensor4<double> g2;
  (void)binary_ce_logits(binary_tensor(2, 3, 3, 3, 7), z, &g2);
  CHECK(g2.same_shape(z));
}

TEST_CASE("adaptation loss is the sum of its two parts") {
  const auto z = random_tensor(2, 4, 6, 6, -5, 5, 8);
  const auto y_curr = binary_tensor(2, 1, 6, 6, 9);
  const auto p_mem = random_tensor(2, 3, 6, 6, 0, 1, 10);
  Tensor4<double> grad;
  const auto v = adaptation_loss(y_curr, p_mem, z, 3, &grad);
  CHECK(v.total == v.components.at("class") + v.components.at("distil"));
  CHECK(v.components.at("class") == doctest::Approx(oracle_ce(y_curr, z, 3, 4)).epsilon(1e-12));
  CHECK(v.components.at("distil") == doctest::Approx(oracle_ce(p_mem, z, 0, 3)).epsilon(1e-12));
  CHECK(std::none_of(grad.data.begin(), grad.data.end(), [](double g) { return g == 0.0; }));

  // distilling toward the memory's own outputs costs exactly their entropy
  Tensor4<double> zero(1, 2, 2, 2, 0.0), half(1, 1, 2, 2, 0.5), y(1, 1, 2, 2, 1.0);
  const auto self = adaptation_loss(y, half, zero, 1);
  CHECK(std::abs(self.components.at("distil") - std::log(2.0)) < 1e-6);

  const auto first = adaptation_loss(binary_tensor(2, 4, 6, 6, 11), Tensor4<double>{}, z, 0);
  CHECK(first.components.at("distil") == 0.0);
  CHECK(first.total == first.components.at("class"));
  CHECK_THROWS_AS((void)adaptation_loss(y_curr, p_mem, z, 2), DimensionError);
}

TEST_CASE("remembering loss touches only the stage channels") {
  const auto z = random_tensor(2, 4, 5, 5, -3, 3, 12);
  const auto y_prev = binary_tensor(2, 2, 5, 5, 13);
  Tensor4<double> grad;
  const double l = remembering_loss(y_prev, z, {0, 2}, &grad);
  const auto picked = select_channels(z, {0, 2});
  CHECK(l == doctest::Approx(binary_ce_logits(y_prev, picked)).epsilon(1e-12));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c : {1u, 3u}) {
      for (std::size_t p = 0; p < 25; ++p) CHECK(grad.at(i, c, p / 5, p % 5) == 0.0);
    }
  }
  CHECK(grad.at(1, 2, 3, 3) != 0.0);
  CHECK_THROWS_AS((void)remembering_loss(y_prev, z, {0}, &grad), ValidationError);
}

TEST_CASE("channel selection") {
  const auto t = random_tensor(2, 3, 2, 2, 0, 1, 14);
  const auto s = select_channels(t, {2, 0});
  CHECK(s.c == 2);
  CHECK(s.at(1, 0, 1, 1) == t.at(1, 2, 1, 1));
  CHECK(s.at(0, 1, 0, 1) == t.at(0, 0, 0, 1));
  CHECK_THROWS_AS((void)select_channels(t, {3}), DimensionError);
}

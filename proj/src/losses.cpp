#include "incseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace incseg {

namespace {

const double kLogEps = std::log(kProbEpsilon);
const double kLog1mEps = std::log1p(-kProbEpsilon);

double clamp_log(double v) { return std::clamp(v, kLogEps, kLog1mEps); }

// log(sigmoid(z)) and log(1 - sigmoid(z)) without overflow.
double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

double element_loss(double y, double z) {
  return -(y * clamp_log(log_sigmoid(z)) + (1.0 - y) * clamp_log(log_sigmoid(-z)));
}

double sigmoid_d(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

double binary_ce(std::span<const double> targets, std::span<const double> probs) {
  if (targets.size() != probs.size()) throw DimensionError("binary_ce: target and probability sizes differ");
  if (targets.empty()) throw DimensionError("binary_ce: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = std::clamp(probs[i], kProbEpsilon, 1.0 - kProbEpsilon);
    s += targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  return -s / static_cast<double>(targets.size());
}

double binary_ce(const MaskStack& targets, const MaskStack& probs) {
  if (targets.planes != probs.planes || targets.height != probs.height || targets.width != probs.width) {
    throw DimensionError("binary_ce: mask stack shapes differ");
  }
  std::vector<double> y(targets.values.begin(), targets.values.end());
  std::vector<double> p(probs.values.begin(), probs.values.end());
  return binary_ce(y, p);
}

double binary_entropy(double q) {
  if (q <= 0.0 || q >= 1.0) return 0.0;
  return -(q * std::log(q) + (1.0 - q) * std::log(1.0 - q));
}

template <typename T>
Tensor4<T> select_channels(const Tensor4<T>& t, const std::vector<std::size_t>& channels) {
  Tensor4<T> out(t.n, channels.size(), t.h, t.w);
  const std::size_t plane = t.plane();
  for (std::size_t i = 0; i < t.n; ++i) {
    for (std::size_t k = 0; k < channels.size(); ++k) {
      if (channels[k] >= t.c) throw DimensionError("channel index out of range");
      std::copy_n(t.sample(i) + channels[k] * plane, plane, out.sample(i) + k * plane);
    }
  }
  return out;
}

namespace {

// Loss over channel subset `channels` of `logits` against `targets`
// (one target plane per listed channel). Gradient is written into `grad`
// on those channels only.
template <typename T>
double subset_ce(const Tensor4<T>& targets, const Tensor4<T>& logits, const std::vector<std::size_t>& channels,
                 Tensor4<T>* grad) {
  if (targets.n != logits.n || targets.h != logits.h || targets.w != logits.w || targets.c != channels.size()) {
    throw DimensionError("loss: target shape does not match logits");
  }
  const std::size_t plane = logits.plane();
  const double norm = static_cast<double>(logits.n * channels.size() * plane);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.n; ++i) {
    for (std::size_t k = 0; k < channels.size(); ++k) {
      const T* z = logits.sample(i) + channels[k] * plane;
      const T* y = targets.sample(i) + k * plane;
      T* g = grad != nullptr ? grad->sample(i) + channels[k] * plane : nullptr;
      for (std::size_t p = 0; p < plane; ++p) {
        const double zd = static_cast<double>(z[p]);
        const double yd = static_cast<double>(y[p]);
        s += element_loss(yd, zd);
        if (g != nullptr) g[p] = static_cast<T>((sigmoid_d(zd) - yd) / norm);
      }
    }
  }
  return s / norm;
}

std::vector<std::size_t> iota_from(std::size_t start, std::size_t count) {
  std::vector<std::size_t> v(count);
  for (std::size_t i = 0; i < count; ++i) v[i] = start + i;
  return v;
}

template <typename T>
void prepare_grad(const Tensor4<T>& logits, Tensor4<T>* grad) {
  if (grad != nullptr) *grad = Tensor4<T>(logits.n, logits.c, logits.h, logits.w);
}

}  // namespace

template <typename T>
double binary_ce_logits(const Tensor4<T>& targets, const Tensor4<T>& logits, Tensor4<T>* grad) {
  prepare_grad(logits, grad);
  return subset_ce(targets, logits, iota_from(0, logits.c), grad);
}

template <typename T>
LossValue adaptation_loss(const Tensor4<T>& y_curr, const Tensor4<T>& p_mem, const Tensor4<T>& logits,
                          std::size_t old_channels, Tensor4<T>* grad) {
  if (old_channels + y_curr.c != logits.c) {
    throw DimensionError("adaptation_loss: " + std::to_string(old_channels) + " old + " + std::to_string(y_curr.c) +
                         " new channels != " + std::to_string(logits.c) + " logits");
  }
  prepare_grad(logits, grad);
  LossValue v;
  v.components["class"] = subset_ce(y_curr, logits, iota_from(old_channels, y_curr.c), grad);
  v.components["distil"] = old_channels == 0 ? 0.0 : subset_ce(p_mem, logits, iota_from(0, old_channels), grad);
  v.total = v.components["class"] + v.components["distil"];
  return v;
}

template <typename T>
double remembering_loss(const Tensor4<T>& y_prev, const Tensor4<T>& logits, const std::vector<std::size_t>& channels,
                        Tensor4<T>* grad) {
  if (y_prev.c != channels.size()) {
    throw ValidationError("remembering_loss: " + std::to_string(y_prev.c) + " label planes for " +
                          std::to_string(channels.size()) + " stage classes");
  }
  prepare_grad(logits, grad);
  return subset_ce(y_prev, logits, channels, grad);
}

#define INCSEG_INSTANTIATE(T)                                                                                  \
  template Tensor4<T> select_channels<T>(const Tensor4<T>&, const std::vector<std::size_t>&);                  \
  template double binary_ce_logits<T>(const Tensor4<T>&, const Tensor4<T>&, Tensor4<T>*);                      \
  template LossValue adaptation_loss<T>(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&, std::size_t, \
                                        Tensor4<T>*);                                                          \
  template double remembering_loss<T>(const Tensor4<T>&, const Tensor4<T>&, const std::vector<std::size_t>&,  \
                                      Tensor4<T>*);
INCSEG_INSTANTIATE(float)
INCSEG_INSTANTIATE(double)
#undef INCSEG_INSTANTIATE

}  // namespace incseg

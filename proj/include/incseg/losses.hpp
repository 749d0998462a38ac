#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "incseg/core_data.hpp"
#include "incseg/tensor.hpp"

namespace incseg {

inline constexpr double kProbEpsilon = 1e-7;

struct LossValue {
  double total = 0.0;
  std::map<std::string, double> components;  // "class", "distil" or "rem"
};

/// Mean sigmoid cross-entropy over every element, probabilities clamped
/// to [eps, 1 - eps]. Throws DimensionError on size mismatch.
[[nodiscard]] double binary_ce(std::span<const double> targets, std::span<const double> probs);
[[nodiscard]] double binary_ce(const MaskStack& targets, const MaskStack& probs);
/// Binary entropy H(q) in nats.
[[nodiscard]] double binary_entropy(double q);

/// Same quantity computed from logits with a stable log-sigmoid. When
/// `grad` is non-null it receives dLoss/dlogit (same layout as `logits`).
template <typename T>
double binary_ce_logits(const Tensor4<T>& targets, const Tensor4<T>& logits, Tensor4<T>* grad = nullptr);

/// Channels [0, old) of `logits` belong to L_prev, [old, old + new) to
/// L_curr. `y_curr` has the L_curr channels, `p_mem` the memory network's
/// probabilities for L_prev (empty tensor when there is no memory).
/// `grad` is filled for every logit channel.
template <typename T>
LossValue adaptation_loss(const Tensor4<T>& y_curr, const Tensor4<T>& p_mem, const Tensor4<T>& logits,
                          std::size_t old_channels, Tensor4<T>* grad = nullptr);

/// Cross-entropy against stored labels on the channels `channels` of
/// `logits`; the gradient is zero on all other channels. Throws
/// ValidationError when `y_prev` does not have one plane per channel.
template <typename T>
double remembering_loss(const Tensor4<T>& y_prev, const Tensor4<T>& logits, const std::vector<std::size_t>& channels,
                        Tensor4<T>* grad = nullptr);

/// `channels` of `t` as a new tensor, in the given order.
template <typename T>
[[nodiscard]] Tensor4<T> select_channels(const Tensor4<T>& t, const std::vector<std::size_t>& channels);

}  // namespace incseg

#pragma once

// Dense kernels behind the segmentation network. Convolutions lower to GEMM
// through im2col; all loops run in a fixed order so results are
// reproducible bit-for-bit in single-threaded builds.

#include <cstdint>
#include <vector>

#include "incseg/tensor.hpp"

namespace incseg::layers {

/// 3x3 convolution, stride 1, zero padding 1. `weight` is Cout x Cin x 3 x 3.
template <typename T>
void conv3x3_forward(const Tensor4<T>& in, const T* weight, const T* bias, std::size_t cout, Tensor4<T>& out);

/// Accumulates into `dweight`/`dbias` (when non-null) and writes `din`
/// (when non-null).
template <typename T>
void conv3x3_backward(const Tensor4<T>& in, const T* weight, std::size_t cout, const Tensor4<T>& dout,
                      T* dweight, T* dbias, Tensor4<T>* din);

/// 2x2 transposed convolution, stride 2. `weight` is Cin x Cout x 2 x 2.
template <typename T>
void deconv2x2_forward(const Tensor4<T>& in, const T* weight, const T* bias, std::size_t cout, Tensor4<T>& out);

template <typename T>
void deconv2x2_backward(const Tensor4<T>& in, const T* weight, std::size_t cout, const Tensor4<T>& dout,
                        T* dweight, T* dbias, Tensor4<T>* din);

/// 2x2 max-pool, stride 2; `argmax` records the winning offset (0..3).
template <typename T>
void maxpool2x2_forward(const Tensor4<T>& in, Tensor4<T>& out, std::vector<std::uint8_t>& argmax);

template <typename T>
void maxpool2x2_backward(const Tensor4<T>& dout, const std::vector<std::uint8_t>& argmax, Tensor4<T>& din);

template <typename T>
void relu_inplace(Tensor4<T>& t);

/// dgrad *= (activation > 0).
template <typename T>
void relu_backward_inplace(const Tensor4<T>& activation, Tensor4<T>& dgrad);

template <typename T>
void concat_channels(const Tensor4<T>& a, const Tensor4<T>& b, Tensor4<T>& out);

template <typename T>
void split_channels(const Tensor4<T>& dout, std::size_t ca, Tensor4<T>* da, Tensor4<T>* db);

}  // namespace incseg::layers

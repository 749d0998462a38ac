#pragma once

#include <cstddef>
#include <vector>

#include "incseg/error.hpp"

namespace incseg {

/// Dense N x C x H x W tensor, row-major with W fastest.
template <typename T>
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t plane() const { return h * w; }
  [[nodiscard]] std::size_t sample_size() const { return c * h * w; }
  [[nodiscard]] bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  [[nodiscard]] T& at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) {
    return data[((i * c + ch) * h + y) * w + x];
  }
  [[nodiscard]] T at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return data[((i * c + ch) * h + y) * w + x];
  }
  [[nodiscard]] T* sample(std::size_t i) { return data.data() + i * sample_size(); }
  [[nodiscard]] const T* sample(std::size_t i) const { return data.data() + i * sample_size(); }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;
};

}  // namespace incseg

#include "layers.hpp"

#include <algorithm>
#include <cstring>

#include <Eigen/Core>

namespace incseg::layers {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// col[(ci*9 + ky*3 + kx), y*w + x] = src[ci, y+ky-1, x+kx-1] (zero outside).
template <typename T>
void im2col3x3(const T* src, std::size_t cin, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* plane = src + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + ((ci * 9) + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        const int dx = kx - 1;
        const std::size_t x_lo = dx < 0 ? 1 : 0;
        const std::size_t x_hi = dx > 0 ? w - 1 : w;  // exclusive
        for (std::size_t y = 0; y < h; ++y) {
          T* dst = row + y * w;
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* s = plane + static_cast<std::size_t>(sy) * w;
          if (x_lo > 0) dst[0] = T(0);
          if (x_hi < w) dst[w - 1] = T(0);
          for (std::size_t x = x_lo; x < x_hi; ++x) dst[x] = s[static_cast<long>(x) + dx];
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* col, std::size_t cin, std::size_t h, std::size_t w, T* dst) {
  const std::size_t hw = h * w;
  std::fill(dst, dst + cin * hw, T(0));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    T* plane = dst + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + ((ci * 9) + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        const int dx = kx - 1;
        const std::size_t x_lo = dx < 0 ? 1 : 0;
        const std::size_t x_hi = dx > 0 ? w - 1 : w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const T* s = row + y * w;
          T* d = plane + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = x_lo; x < x_hi; ++x) d[static_cast<long>(x) + dx] += s[x];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3x3_forward(const Tensor4<T>& in, const T* weight, const T* bias, std::size_t cout, Tensor4<T>& out) {
  const std::size_t hw = in.plane();
  const std::size_t k = in.c * 9;
  out = Tensor4<T>(in.n, cout, in.h, in.w);
  std::vector<T> col(k * hw);
  CMapMat<T> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < in.n; ++i) {
    im2col3x3(in.sample(i), in.c, in.h, in.w, col.data());
    CMapMat<T> cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(hw));
    MapMat<T> om(out.sample(i), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    om.noalias() = wm * cm;
    for (std::size_t co = 0; co < cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += bias[co];
  }
}

template <typename T>
void conv3x3_backward(const Tensor4<T>& in, const T* weight, std::size_t cout, const Tensor4<T>& dout,
                      T* dweight, T* dbias, Tensor4<T>* din) {
  const std::size_t hw = in.plane();
  const std::size_t k = in.c * 9;
  std::vector<T> col(k * hw);
  std::vector<T> dcol;
  if (din != nullptr) {
    *din = Tensor4<T>(in.n, in.c, in.h, in.w);
    dcol.resize(k * hw);
  }
  CMapMat<T> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < in.n; ++i) {
    CMapMat<T> dom(dout.sample(i), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    if (dweight != nullptr) {
      im2col3x3(in.sample(i), in.c, in.h, in.w, col.data());
      CMapMat<T> cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(hw));
      MapMat<T> dwm(dweight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
      dwm.noalias() += dom * cm.transpose();
    }
    if (dbias != nullptr) {
      for (std::size_t co = 0; co < cout; ++co) dbias[co] += dom.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (din != nullptr) {
      MapMat<T> dcm(dcol.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(hw));
      dcm.noalias() = wm.transpose() * dom;
      col2im3x3(dcol.data(), in.c, in.h, in.w, din->sample(i));
    }
  }
}

template <typename T>
void deconv2x2_forward(const Tensor4<T>& in, const T* weight, const T* bias, std::size_t cout, Tensor4<T>& out) {
  const std::size_t hw = in.plane();
  const std::size_t w = in.w;
  out = Tensor4<T>(in.n, cout, in.h * 2, in.w * 2);
  RowMat<T> y(static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(hw));
  CMapMat<T> wm(weight, static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(cout * 4));
  for (std::size_t i = 0; i < in.n; ++i) {
    CMapMat<T> xm(in.sample(i), static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(hw));
    y.noalias() = wm.transpose() * xm;
    T* o = out.sample(i);
    const std::size_t ow = out.w;
    for (std::size_t co = 0; co < cout; ++co) {
      T* oplane = o + co * out.plane();
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t dy = q / 2;
        const std::size_t dx = q % 2;
        const T* yr = y.data() + (co * 4 + q) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t sy = p / w;
          const std::size_t sx = p % w;
          oplane[(2 * sy + dy) * ow + 2 * sx + dx] = yr[p] + bias[co];
        }
      }
    }
  }
}

template <typename T>
void deconv2x2_backward(const Tensor4<T>& in, const T* weight, std::size_t cout, const Tensor4<T>& dout,
                        T* dweight, T* dbias, Tensor4<T>* din) {
  const std::size_t hw = in.plane();
  const std::size_t w = in.w;
  if (din != nullptr) *din = Tensor4<T>(in.n, in.c, in.h, in.w);
  RowMat<T> dy(static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(hw));
  CMapMat<T> wm(weight, static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(cout * 4));
  for (std::size_t i = 0; i < in.n; ++i) {
    const T* d = dout.sample(i);
    const std::size_t ow = dout.w;
    for (std::size_t co = 0; co < cout; ++co) {
      const T* dplane = d + co * dout.plane();
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t qy = q / 2;
        const std::size_t qx = q % 2;
        T* yr = dy.data() + (co * 4 + q) * hw;
        for (std::size_t p = 0; p < hw; ++p) yr[p] = dplane[(2 * (p / w) + qy) * ow + 2 * (p % w) + qx];
      }
      if (dbias != nullptr) {
        T s = T(0);
        for (std::size_t p = 0; p < dout.plane(); ++p) s += dplane[p];
        dbias[co] += s;
      }
    }
    CMapMat<T> xm(in.sample(i), static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(hw));
    if (dweight != nullptr) {
      MapMat<T> dwm(dweight, static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(cout * 4));
      dwm.noalias() += xm * dy.transpose();
    }
    if (din != nullptr) {
      MapMat<T> dxm(din->sample(i), static_cast<Eigen::Index>(in.c), static_cast<Eigen::Index>(hw));
      dxm.noalias() = wm * dy;
    }
  }
}

template <typename T>
void maxpool2x2_forward(const Tensor4<T>& in, Tensor4<T>& out, std::vector<std::uint8_t>& argmax) {
  out = Tensor4<T>(in.n, in.c, in.h / 2, in.w / 2);
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < in.n; ++i) {
    for (std::size_t ch = 0; ch < in.c; ++ch) {
      const T* plane = in.data.data() + (i * in.c + ch) * in.plane();
      for (std::size_t y = 0; y < out.h; ++y) {
        for (std::size_t x = 0; x < out.w; ++x, ++o) {
          const T* p0 = plane + (2 * y) * in.w + 2 * x;
          const T cand[4] = {p0[0], p0[1], p0[in.w], p0[in.w + 1]};
          std::uint8_t best = 0;
          for (std::uint8_t q = 1; q < 4; ++q) {
            if (cand[q] > cand[best]) best = q;
          }
          out.data[o] = cand[best];
          argmax[o] = best;
        }
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(const Tensor4<T>& dout, const std::vector<std::uint8_t>& argmax, Tensor4<T>& din) {
  const std::size_t iw = din.w;
  std::fill(din.data.begin(), din.data.end(), T(0));
  std::size_t o = 0;
  for (std::size_t i = 0; i < dout.n; ++i) {
    for (std::size_t ch = 0; ch < dout.c; ++ch) {
      T* plane = din.data.data() + (i * din.c + ch) * din.plane();
      for (std::size_t y = 0; y < dout.h; ++y) {
        for (std::size_t x = 0; x < dout.w; ++x, ++o) {
          const std::uint8_t q = argmax[o];
          plane[(2 * y + q / 2) * iw + 2 * x + q % 2] += dout.data[o];
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(Tensor4<T>& t) {
  for (auto& v : t.data) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_backward_inplace(const Tensor4<T>& activation, Tensor4<T>& dgrad) {
  for (std::size_t i = 0; i < dgrad.data.size(); ++i) {
    if (!(activation.data[i] > T(0))) dgrad.data[i] = T(0);
  }
}

template <typename T>
void concat_channels(const Tensor4<T>& a, const Tensor4<T>& b, Tensor4<T>& out) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) throw DimensionError("concat: spatial shapes differ");
  out = Tensor4<T>(a.n, a.c + b.c, a.h, a.w);
  for (std::size_t i = 0; i < a.n; ++i) {
    std::copy_n(a.sample(i), a.sample_size(), out.sample(i));
    std::copy_n(b.sample(i), b.sample_size(), out.sample(i) + a.sample_size());
  }
}

template <typename T>
void split_channels(const Tensor4<T>& dout, std::size_t ca, Tensor4<T>* da, Tensor4<T>* db) {
  const std::size_t cb = dout.c - ca;
  const std::size_t hw = dout.plane();
  if (da != nullptr) *da = Tensor4<T>(dout.n, ca, dout.h, dout.w);
  if (db != nullptr) *db = Tensor4<T>(dout.n, cb, dout.h, dout.w);
  for (std::size_t i = 0; i < dout.n; ++i) {
    if (da != nullptr) std::copy_n(dout.sample(i), ca * hw, da->sample(i));
    if (db != nullptr) std::copy_n(dout.sample(i) + ca * hw, cb * hw, db->sample(i));
  }
}

#define INCSEG_INSTANTIATE_LAYERS(T)                                                                      \
  template void conv3x3_forward<T>(const Tensor4<T>&, const T*, const T*, std::size_t, Tensor4<T>&);     \
  template void conv3x3_backward<T>(const Tensor4<T>&, const T*, std::size_t, const Tensor4<T>&, T*, T*, \
                                    Tensor4<T>*);                                                         \
  template void deconv2x2_forward<T>(const Tensor4<T>&, const T*, const T*, std::size_t, Tensor4<T>&);   \
  template void deconv2x2_backward<T>(const Tensor4<T>&, const T*, std::size_t, const Tensor4<T>&, T*,   \
                                      T*, Tensor4<T>*);                                                   \
  template void maxpool2x2_forward<T>(const Tensor4<T>&, Tensor4<T>&, std::vector<std::uint8_t>&);       \
  template void maxpool2x2_backward<T>(const Tensor4<T>&, const std::vector<std::uint8_t>&, Tensor4<T>&); \
  template void relu_inplace<T>(Tensor4<T>&);                                                             \
  template void relu_backward_inplace<T>(const Tensor4<T>&, Tensor4<T>&);                                 \
  template void concat_channels<T>(const Tensor4<T>&, const Tensor4<T>&, Tensor4<T>&);                   \
  template void split_channels<T>(const Tensor4<T>&, std::size_t, Tensor4<T>*, Tensor4<T>*);

INCSEG_INSTANTIATE_LAYERS(float)
INCSEG_INSTANTIATE_LAYERS(double)

#undef INCSEG_INSTANTIATE_LAYERS

}  // namespace incseg::layers

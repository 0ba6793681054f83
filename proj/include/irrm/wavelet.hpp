#pragma once

#include <utility>
#include <vector>

#include "irrm/ops.hpp"

namespace irrm {

/// One level of a 2-D orthonormal Haar split.
///
/// `low` is the LL band with C channels; `high` holds 3C channels laid out as
/// [LH of every channel, HL of every channel, HH of every channel]. That order
/// is part of the checkpoint contract.
template <class T>
struct WaveletBands {
  Tensor<T> low;
  Tensor<T> high;
};

namespace detail {

// Analysis of an (n, C, h, w) array into (n, 4C, h/2, w/2) ordered [LL, LH, HL, HH].
// The 4x4 block transform is symmetric and orthonormal, so the same routine
// read in the other direction is synthesis.
template <class T>
void haar_analysis_raw(const T* in, const Shape& xs, T* out) {
  const std::size_t oh = xs.h / 2, ow = xs.w / 2, op = oh * ow;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* src = in + (n * xs.c + c) * xs.plane();
      T* ll = out + (n * 4 * xs.c + c) * op;
      T* lh = ll + xs.c * op;
      T* hl = lh + xs.c * op;
      T* hh = hl + xs.c * op;
      for (std::size_t i = 0; i < oh; ++i) {
        const T* r0 = src + 2 * i * xs.w;
        const T* r1 = r0 + xs.w;
        for (std::size_t j = 0; j < ow; ++j) {
          const T a = r0[2 * j], b = r0[2 * j + 1], cc = r1[2 * j], d = r1[2 * j + 1];
          const std::size_t k = i * ow + j;
          ll[k] = (a + b + cc + d) * T(0.5);
          lh[k] = (a - b + cc - d) * T(0.5);
          hl[k] = (a + b - cc - d) * T(0.5);
          hh[k] = (a - b - cc + d) * T(0.5);
        }
      }
    }
  }
}

// Inverse of haar_analysis_raw; `bs` is the band shape (n, 4C, h/2, w/2).
template <class T>
void haar_synthesis_raw(const T* in, const Shape& bs, T* out) {
  const std::size_t channels = bs.c / 4, ow = bs.w * 2, op = bs.plane();
  for (std::size_t n = 0; n < bs.n; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* ll = in + (n * bs.c + c) * op;
      const T* lh = ll + channels * op;
      const T* hl = lh + channels * op;
      const T* hh = hl + channels * op;
      T* dst = out + (n * channels + c) * op * 4;
      for (std::size_t i = 0; i < bs.h; ++i) {
        T* r0 = dst + 2 * i * ow;
        T* r1 = r0 + ow;
        for (std::size_t j = 0; j < bs.w; ++j) {
          const std::size_t k = i * bs.w + j;
          r0[2 * j] = (ll[k] + lh[k] + hl[k] + hh[k]) * T(0.5);
          r0[2 * j + 1] = (ll[k] - lh[k] + hl[k] - hh[k]) * T(0.5);
          r1[2 * j] = (ll[k] + lh[k] - hl[k] - hh[k]) * T(0.5);
          r1[2 * j + 1] = (ll[k] - lh[k] - hl[k] + hh[k]) * T(0.5);
        }
      }
    }
  }
}

template <class T>
Tensor<T> haar_analysis(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("haar_forward: spatial size " + xs.str() + " is odd; pad to an even size first");
  }
  const Shape bs{xs.n, 4 * xs.c, xs.h / 2, xs.w / 2};
  std::vector<T> out(bs.numel());
  haar_analysis_raw(x.data().data(), xs, out.data());
  return Tensor<T>::from_op(bs, std::move(out), "haar_forward", {&x}, [bs](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    std::vector<T> g(in.value.size());
    haar_synthesis_raw(self.grad.data(), bs, g.data());
    accumulate_grad<T>(in, g);
  });
}

template <class T>
Tensor<T> haar_synthesis(const Tensor<T>& bands) {
  const Shape& bs = bands.shape();
  const Shape xs{bs.n, bs.c / 4, bs.h * 2, bs.w * 2};
  std::vector<T> out(xs.numel());
  haar_synthesis_raw(bands.data().data(), bs, out.data());
  return Tensor<T>::from_op(xs, std::move(out), "haar_inverse", {&bands}, [xs](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    std::vector<T> g(in.value.size());
    haar_analysis_raw(self.grad.data(), xs, g.data());
    accumulate_grad<T>(in, g);
  });
}

}  // namespace detail

/// Per 2x2 block (a b / c d): LL=(a+b+c+d)/2, LH=(a-b+c-d)/2,
/// HL=(a+b-c-d)/2, HH=(a-b-c+d)/2.
template <class T>
WaveletBands<T> haar_forward(const Tensor<T>& x) {
  Tensor<T> all = detail::haar_analysis(x);
  const std::size_t c = x.shape().c;
  return {slice_channels(all, 0, c), slice_channels(all, c, 3 * c)};
}

template <class T>
Tensor<T> haar_inverse(const WaveletBands<T>& bands) {
  const Shape& ls = bands.low.shape();
  const Shape& hs = bands.high.shape();
  if (hs.c != 3 * ls.c || hs.n != ls.n || hs.h != ls.h || hs.w != ls.w) {
    throw ShapeError("haar_inverse: high band " + hs.str() + " must have 3x the channels of low band " +
                     ls.str());
  }
  return detail::haar_synthesis(concat_channels<T>({bands.low, bands.high}));
}

/// Long-skip split of an image into its 2x2-mean base and detail bands.
///
/// `base` is avg_pool2(x). `high` is the detail part of the Haar split of
/// x - nearest_up2(base); that residual has an identically zero LL band and
/// the same detail bands as x itself, so (base, high) re-parameterizes x
/// exactly.
template <class T>
std::pair<Tensor<T>, Tensor<T>> residual_decompose(const Tensor<T>& x) {
  Tensor<T> base = avg_pool2(x);
  Tensor<T> residual = sub(x, nearest_up2(base));
  return {base, haar_forward(residual).high};
}

template <class T>
Tensor<T> residual_recompose(const Tensor<T>& base, const Tensor<T>& high) {
  const Shape& bs = base.shape();
  const Shape& hs = high.shape();
  if (hs.c != 3 * bs.c || hs.n != bs.n || hs.h != bs.h || hs.w != bs.w) {
    throw ShapeError("residual_recompose: detail bands " + hs.str() + " inconsistent with base " + bs.str());
  }
  Tensor<T> residual = haar_inverse(WaveletBands<T>{Tensor<T>::zeros(bs), high});
  return add(nearest_up2(base), residual);
}

}  // namespace irrm

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "irrm/tensor.hpp"

namespace irrm {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t rows() const { return in_c * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column oj*stride + kj - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const std::size_t lo = kj >= g.padding ? 0 : (g.padding - kj + g.stride - 1) / g.stride;
  const std::size_t end = g.in_w + g.padding;  // first out-of-range column, shifted by pad
  const std::size_t hi = end <= kj ? 0 : std::min(g.out_w, (end - kj + g.stride - 1) / g.stride);
  return {lo, std::max(lo, hi)};
}

// Unfolds one image (in_c, h, w) into a (in_c*kh*kw) x (out_h*out_w) matrix.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
          T* dst = row + oi * g.out_w;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + g.out_w, T(0));
          if (hi == lo) continue;
          // src points at input column lo*stride + kj - pad, which is >= 0 by construction.
          const T* src = img + (c * g.in_h + static_cast<std::size_t>(ii)) * g.in_w + lo * g.stride + kj - g.padding;
          if (g.stride == 1) {
            for (std::size_t t = 0; t < hi - lo; ++t) dst[lo + t] = src[t];
          } else {
            for (std::size_t t = 0; t < hi - lo; ++t) dst[lo + t] = src[t * g.stride];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column entries back onto the image.
template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - pad;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.in_h) || hi == lo) continue;
          T* dst = img + (c * g.in_h + static_cast<std::size_t>(ii)) * g.in_w + lo * g.stride + kj - g.padding;
          const T* src = row + oi * g.out_w + lo;
          if (g.stride == 1) {
            for (std::size_t t = 0; t < hi - lo; ++t) dst[t] += src[t];
          } else {
            for (std::size_t t = 0; t < hi - lo; ++t) dst[t * g.stride] += src[t];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
///
/// `weight` is (out_c, in_c, kh, kw) and `bias` is (out_c, 1, 1, 1). Output
/// spatial size is floor((h + 2*padding - kh) / stride) + 1. Each image is
/// unfolded with im2col and multiplied by the flattened kernel; the backward
/// pass re-unfolds the saved input instead of keeping the column buffer.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: kernel " + ws.str() + " expects " + std::to_string(ws.c) +
                     " input channels but input is " + xs.str());
  }
  if (ws.h % 2 == 0 || ws.w % 2 == 0) throw ShapeError("conv2d: kernel " + ws.str() + " must have odd extent");
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (bias.shape() != Shape{ws.n, 1, 1, 1}) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match kernel " + ws.str());
  }
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " smaller than kernel " + ws.str());
  }

  const detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding,
                               (xs.h + 2 * padding - ws.h) / stride + 1,
                               (xs.w + 2 * padding - ws.w) / stride + 1};
  const Shape out_shape{xs.n, ws.n, g.out_h, g.out_w};
  const std::size_t out_c = ws.n;

  using Mat = detail::RowMatrix<T>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

  std::vector<T> out(out_shape.numel());
  std::vector<T> col(g.rows() * g.cols());
  const CMap wmat(weight.data().data(), out_c, g.rows());
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.data().data(), out_c);
  for (std::size_t n = 0; n < xs.n; ++n) {
    detail::im2col(x.data().data() + n * xs.c * xs.plane(), g, col.data());
    Map ymat(out.data() + n * out_c * g.cols(), out_c, g.cols());
    ymat.noalias() = wmat * CMap(col.data(), g.rows(), g.cols());
    ymat.colwise() += bvec;
  }

  return Tensor<T>::from_op(
      out_shape, std::move(out), "conv2d", {&x, &weight, &bias}, [g, xs, out_c](detail::Node<T>& self) {
        detail::Node<T>& in = *self.inputs[0];
        detail::Node<T>& w = *self.inputs[1];
        detail::Node<T>& b = *self.inputs[2];
        std::vector<T> col(g.rows() * g.cols());
        std::vector<T> dcol;
        if (in.requires_grad) dcol.resize(col.size());
        const CMap wmat(w.value.data(), out_c, g.rows());
        for (std::size_t n = 0; n < xs.n; ++n) {
          const CMap dy(self.grad.data() + n * out_c * g.cols(), out_c, g.cols());
          if (w.requires_grad) {
            detail::im2col(in.value.data() + n * xs.c * xs.plane(), g, col.data());
            Map dw(w.grad_buffer().data(), out_c, g.rows());
            dw.noalias() += dy * CMap(col.data(), g.rows(), g.cols()).transpose();
          }
          if (b.requires_grad) {
            // Plain loop: Eigen's vectorized reductions peel by pointer alignment,
            // which would make the summation order differ between processes.
            T* db = b.grad_buffer().data();
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* row = self.grad.data() + (n * out_c + o) * g.cols();
              T acc = 0;
              for (std::size_t j = 0; j < g.cols(); ++j) acc += row[j];
              db[o] += acc;
            }
          }
          if (in.requires_grad) {
            Map dc(dcol.data(), g.rows(), g.cols());
            dc.noalias() = wmat.transpose() * dy;
            detail::col2im_add(dcol.data(), g, in.grad_buffer().data() + n * xs.c * xs.plane());
          }
        }
      });
}

}  // namespace irrm

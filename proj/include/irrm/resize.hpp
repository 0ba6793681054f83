#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "irrm/tensor.hpp"

namespace irrm {

/// Exact resampling factor num/den.
struct Ratio {
  int num = 1;
  int den = 1;
  double value() const { return static_cast<double>(num) / den; }
};

/// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

// Per output index: the first input index and the normalized weights of the
// taps that follow it. Out-of-range taps read the nearest edge sample.
struct ResampleTaps {
  std::vector<std::ptrdiff_t> first;
  std::vector<std::vector<double>> weights;
};

inline ResampleTaps resample_taps(std::size_t out_size, double scale) {
  const double shrink = std::min(scale, 1.0);  // widen the kernel when downscaling
  const double support = 2.0 / shrink;
  ResampleTaps taps;
  for (std::size_t o = 0; o < out_size; ++o) {
    const double center = (static_cast<double>(o) + 0.5) / scale;
    const auto lo = static_cast<std::ptrdiff_t>(std::floor(center - support));
    const auto hi = static_cast<std::ptrdiff_t>(std::ceil(center + support));
    std::vector<double> w;
    double total = 0.0;
    for (std::ptrdiff_t i = lo; i <= hi; ++i) {
      const double v = cubic_kernel((static_cast<double>(i) + 0.5 - center) * shrink);
      w.push_back(v);
      total += v;
    }
    for (auto& v : w) v /= total;
    taps.first.push_back(lo);
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (static_cast<std::size_t>(i) >= n) return n - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

/// Separable bicubic resize (a = -0.5, pixel-center aligned). Downscaling
/// stretches the kernel by 1/scale for antialiasing. Accepts scales 1/4, 1/2,
/// 2 and 4. Not differentiable; intended for targets and baselines.
template <class T>
Tensor<T> bicubic_resize(const Tensor<T>& x, Ratio scale) {
  const bool supported = (scale.num == 1 && (scale.den == 2 || scale.den == 4)) ||
                         (scale.den == 1 && (scale.num == 2 || scale.num == 4));
  if (!supported) {
    throw ShapeError("bicubic_resize: unsupported scale " + std::to_string(scale.num) + "/" +
                     std::to_string(scale.den) + " (expected 1/4, 1/2, 2 or 4)");
  }
  const Shape& s = x.shape();
  if ((s.h * scale.num) % scale.den != 0 || (s.w * scale.num) % scale.den != 0) {
    throw ShapeError("bicubic_resize: " + s.str() + " is not divisible by " + std::to_string(scale.den));
  }
  const Shape os{s.n, s.c, s.h * scale.num / scale.den, s.w * scale.num / scale.den};
  const double f = scale.value();
  const auto rows = detail::resample_taps(os.h, f);
  const auto cols = detail::resample_taps(os.w, f);

  std::vector<T> out(os.numel());
  std::vector<double> tmp(s.h * os.w);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = x.data().data() + p * s.plane();
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < os.w; ++j) {
        double acc = 0.0;
        const auto& w = cols.weights[j];
        for (std::size_t k = 0; k < w.size(); ++k) {
          acc += w[k] * static_cast<double>(src[i * s.w + detail::clamp_index(cols.first[j] + static_cast<std::ptrdiff_t>(k), s.w)]);
        }
        tmp[i * os.w + j] = acc;
      }
    }
    T* dst = out.data() + p * os.plane();
    for (std::size_t i = 0; i < os.h; ++i) {
      const auto& w = rows.weights[i];
      for (std::size_t j = 0; j < os.w; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
          acc += w[k] * tmp[detail::clamp_index(rows.first[i] + static_cast<std::ptrdiff_t>(k), s.h) * os.w + j];
        }
        dst[i * os.w + j] = static_cast<T>(acc);
      }
    }
  }
  return Tensor<T>(os, std::move(out));
}

}  // namespace irrm

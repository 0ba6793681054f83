#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "irrm/image.hpp"
#include "irrm/tensor.hpp"

namespace irrm {

/// BT.601 studio-range luma of an 8-bit RGB image, in [16, 235].
inline Tensor<double> to_luma(const ImageU8& img) {
  std::vector<double> y(img.width * img.height);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = img.pixels[i * 3] / 255.0, g = img.pixels[i * 3 + 1] / 255.0, b = img.pixels[i * 3 + 2] / 255.0;
    y[i] = 65.481 * r + 128.553 * g + 24.966 * b + 16.0;
  }
  return Tensor<double>(Shape{1, 1, img.height, img.width}, std::move(y));
}

/// Drops `border` pixels from every edge of a single-plane tensor.
inline Tensor<double> crop_border(const Tensor<double>& plane, std::size_t border) {
  const Shape& s = plane.shape();
  if (border == 0) return plane;
  if (2 * border >= s.h || 2 * border >= s.w) {
    throw ShapeError("crop border " + std::to_string(border) + " leaves nothing of " + s.str());
  }
  const Shape os{1, 1, s.h - 2 * border, s.w - 2 * border};
  std::vector<double> v(os.numel());
  for (std::size_t i = 0; i < os.h; ++i) {
    for (std::size_t j = 0; j < os.w; ++j) v[i * os.w + j] = plane.data()[(i + border) * s.w + j + border];
  }
  return Tensor<double>(os, std::move(v));
}

/// PSNR in dB; identical inputs yield the infinite sentinel instead of a number.
class Psnr {
 public:
  static Psnr infinite() { return Psnr(); }
  static Psnr from_mse(double mse) {
    if (mse == 0.0) return infinite();
    Psnr p;
    p.db_ = 10.0 * std::log10(255.0 * 255.0 / mse);
    p.finite_ = true;
    return p;
  }

  bool is_infinite() const { return !finite_; }
  /// Value in dB; +inf for the sentinel so comparisons still order correctly.
  double db() const { return finite_ ? db_ : std::numeric_limits<double>::infinity(); }
  std::string str() const {
    if (!finite_) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", db_);
    return buf;
  }

 private:
  double db_ = 0.0;
  bool finite_ = false;
};

/// PSNR between two luma planes on the 0-255 scale after cropping `border`.
inline Psnr psnr(const Tensor<double>& a, const Tensor<double>& b, std::size_t border = 0) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const Tensor<double> ca = crop_border(a, border), cb = crop_border(b, border);
  double acc = 0.0;
  for (std::size_t i = 0; i < ca.numel(); ++i) {
    const double d = ca.data()[i] - cb.data()[i];
    acc += d * d;
  }
  return Psnr::from_mse(acc / static_cast<double>(ca.numel()));
}

/// PSNR on the Y channel of two RGB images.
inline Psnr psnr(const ImageU8& a, const ImageU8& b, std::size_t border = 0) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("psnr: image dimensions differ");
  return psnr(to_luma(a), to_luma(b), border);
}

namespace detail {

inline std::vector<double> gaussian_window_1d(int radius, double sigma) {
  std::vector<double> w(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += w[i + radius];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Valid-region separable filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t r = k.size(), oh = h - r + 1, ow = w - r + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < r; ++t) acc += k[t] * src[i * w + j + t];
      tmp[i * ow + j] = acc;
    }
  }
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < r; ++t) acc += k[t] * tmp[(i + t) * ow + j];
      out[i * ow + j] = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Mean SSIM of two luma planes: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 255, averaged over the positions where
/// the window fits entirely inside the image.
inline double ssim(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const Shape& s = a.shape();
  constexpr int kRadius = 5;
  if (s.n * s.c != 1) throw ShapeError("ssim expects a single plane, got " + s.str());
  if (s.h < 2 * kRadius + 1 || s.w < 2 * kRadius + 1) {
    throw ShapeError("ssim: image " + s.str() + " is smaller than the 11x11 window");
  }
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const auto k = detail::gaussian_window_1d(kRadius, 1.5);

  std::vector<double> x(a.data().begin(), a.data().end()), y(b.data().begin(), b.data().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::filter_valid(x, s.h, s.w, k);
  const auto my = detail::filter_valid(y, s.h, s.w, k);
  const auto exx = detail::filter_valid(xx, s.h, s.w, k);
  const auto eyy = detail::filter_valid(yy, s.h, s.w, k);
  const auto exy = detail::filter_valid(xy, s.h, s.w, k);

  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double sxx = exx[i] - mx[i] * mx[i];
    const double syy = eyy[i] - my[i] * my[i];
    const double sxy = exy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sxx + syy + c2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

inline double ssim(const ImageU8& a, const ImageU8& b, std::size_t border = 0) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("ssim: image dimensions differ");
  return ssim(crop_border(to_luma(a), border), crop_border(to_luma(b), border));
}

}  // namespace irrm

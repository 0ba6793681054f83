#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "irrm/tensor.hpp"

namespace irrm {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

// Pointwise unary op whose derivative is expressed through input x and output y.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), op, {&x}, [deriv](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {&a, &b}, [](detail::Node<T>& self) {
    accumulate_grad<T>(*self.inputs[0], self.grad);
    accumulate_grad<T>(*self.inputs[1], self.grad);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {&a, &b}, [](detail::Node<T>& self) {
    accumulate_grad<T>(*self.inputs[0], self.grad);
    detail::Node<T>& rhs = *self.inputs[1];
    if (!rhs.requires_grad) return;
    auto& g = rhs.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {&a, &b}, [](detail::Node<T>& self) {
    detail::Node<T>& lhs = *self.inputs[0];
    detail::Node<T>& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      auto& g = lhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.value[i];
    }
    if (rhs.requires_grad) {
      auto& g = rhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.value[i];
    }
  });
}

/// Elementwise quotient. A zero anywhere in the divisor is rejected.
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b.data()[i] == T(0)) throw NumericError("div: divisor contains zero at index " + std::to_string(i));
    out[i] = a.data()[i] / b.data()[i];
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), "div", {&a, &b}, [](detail::Node<T>& self) {
    detail::Node<T>& num = *self.inputs[0];
    detail::Node<T>& den = *self.inputs[1];
    if (num.requires_grad) {
      auto& g = num.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / den.value[i];
    }
    if (den.requires_grad) {
      auto& g = den.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / den.value[i];
    }
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, "mul_scalar", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return detail::unary(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : v * slope; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

/// |x|; the subgradient at zero is taken as zero.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// Rounds to the nearest 8-bit level of the unit range and clamps to [0, 1].
/// Not differentiable: backward through it raises.
template <class T>
Tensor<T> quantize_u8(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = std::clamp(x.data()[i], T(0), T(1));
    out[i] = std::round(v * T(255)) / T(255);
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), "quantize_u8", {&x}, nullptr, false);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return Tensor<T>::from_op(Shape{1, 1, 1, 1}, {acc}, "sum", {&x}, [](detail::Node<T>& self) {
    detail::Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Stacks tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts.front().shape();
  s.c = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: shape mismatch " + parts.front().shape().str() + " vs " +
                       ps.str());
    }
    s.c += ps.c;
  }
  std::vector<T> out(s.numel());
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t block = p.shape().c * plane;
      std::copy_n(p.data().begin() + n * block, block, out.begin() + (n * s.c + c0) * plane);
      c0 += p.shape().c;
    }
  }
  return Tensor<T>::from_op(s, std::move(out), "concat_channels", parts,
                            [s, plane](detail::Node<T>& self) {
                              std::size_t c0 = 0;
                              for (auto& in : self.inputs) {
                                const std::size_t block = in->shape.c * plane;
                                if (in->requires_grad) {
                                  auto& g = in->grad_buffer();
                                  for (std::size_t n = 0; n < s.n; ++n) {
                                    const T* src = self.grad.data() + (n * s.c + c0) * plane;
                                    T* dst = g.data() + n * block;
                                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                                  }
                                }
                                c0 += in->shape.c;
                              }
                            });
}

/// Channels [begin, begin + count).
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape& xs = x.shape();
  if (begin + count > xs.c) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + xs.str());
  }
  Shape s{xs.n, count, xs.h, xs.w};
  const std::size_t plane = xs.plane();
  std::vector<T> out(s.numel());
  for (std::size_t n = 0; n < xs.n; ++n) {
    std::copy_n(x.data().begin() + (n * xs.c + begin) * plane, count * plane,
                out.begin() + n * count * plane);
  }
  return Tensor<T>::from_op(s, std::move(out), "slice_channels", {&x},
                            [xs, begin, count, plane](detail::Node<T>& self) {
                              detail::Node<T>& in = *self.inputs[0];
                              if (!in.requires_grad) return;
                              auto& g = in.grad_buffer();
                              for (std::size_t n = 0; n < xs.n; ++n) {
                                const T* src = self.grad.data() + n * count * plane;
                                T* dst = g.data() + (n * xs.c + begin) * plane;
                                for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                              }
                            });
}

/// Non-overlapping 2x2 mean.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("avg_pool2: spatial size " + xs.str() + " is odd; pad to an even size first");
  }
  Shape s{xs.n, xs.c, xs.h / 2, xs.w / 2};
  std::vector<T> out(s.numel());
  auto in = x.data();
  for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
    const T* src = in.data() + p * xs.plane();
    T* dst = out.data() + p * s.plane();
    for (std::size_t i = 0; i < s.h; ++i) {
      const T* r0 = src + 2 * i * xs.w;
      const T* r1 = r0 + xs.w;
      for (std::size_t j = 0; j < s.w; ++j) {
        dst[i * s.w + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * T(0.25);
      }
    }
  }
  return Tensor<T>::from_op(s, std::move(out), "avg_pool2", {&x}, [xs, s](detail::Node<T>& self) {
    detail::Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
      const T* src = self.grad.data() + p * s.plane();
      T* dst = g.data() + p * xs.plane();
      for (std::size_t i = 0; i < xs.h; ++i) {
        for (std::size_t j = 0; j < xs.w; ++j) dst[i * xs.w + j] += src[(i / 2) * s.w + j / 2] * T(0.25);
      }
    }
  });
}

/// Doubles height and width by pixel replication.
template <class T>
Tensor<T> nearest_up2(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  Shape s{xs.n, xs.c, xs.h * 2, xs.w * 2};
  std::vector<T> out(s.numel());
  auto in = x.data();
  for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
    const T* src = in.data() + p * xs.plane();
    T* dst = out.data() + p * s.plane();
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) dst[i * s.w + j] = src[(i / 2) * xs.w + j / 2];
    }
  }
  return Tensor<T>::from_op(s, std::move(out), "nearest_up2", {&x}, [xs, s](detail::Node<T>& self) {
    detail::Node<T>& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
      const T* src = self.grad.data() + p * s.plane();
      T* dst = g.data() + p * xs.plane();
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) dst[(i / 2) * xs.w + j / 2] += src[i * s.w + j];
      }
    }
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// Largest absolute elementwise difference; a plain value, never recorded.
template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

template <class T>
double max_abs(const Tensor<T>& a) {
  double m = 0.0;
  for (T v : a.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <class T>
double squared_norm(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

}  // namespace irrm

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "irrm/tensor.hpp"

namespace irrm {

using Rng = std::mt19937_64;

/// Generator keyed by a seed and any number of stream identifiers (step,
/// image index, draw). Independent keys give independent, reproducible streams.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (std::uint64_t s : stream) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

template <class T>
Tensor<T> normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
  std::vector<T> v(shape.numel());
  if (stddev == 0.0) {
    std::fill(v.begin(), v.end(), static_cast<T>(mean));
  } else {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& x : v) x = static_cast<T>(dist(rng));
  }
  return Tensor<T>(shape, std::move(v));
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v));
}

}  // namespace irrm

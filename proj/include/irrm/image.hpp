#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "irrm/checkpoint.hpp"
#include "irrm/tensor.hpp"

namespace irrm {

/// Interleaved 8-bit sRGB image, row-major, 3 samples per pixel.
struct ImageU8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch) { return pixels[(y * width + x) * 3 + ch]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const { return pixels[(y * width + x) * 3 + ch]; }
  friend bool operator==(const ImageU8&, const ImageU8&) = default;
};

/// Decodes any PNG into 8-bit RGB. Grayscale and palette images are expanded,
/// alpha is dropped, 16-bit samples are reduced to 8 bits.
inline ImageU8 load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  ImageU8 out(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(path.string() + ": " + msg);
  }
  return out;
}

/// Encodes `img` as 8-bit RGB PNG bytes.
inline std::vector<std::uint8_t> encode_png(const ImageU8& img) {
  if (img.pixels.size() != img.width * img.height * 3 || img.width == 0 || img.height == 0) {
    throw DataError("encode_png: image buffer does not match its dimensions");
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, img.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("encode_png: ") + image.message);
  }
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&image, bytes.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("encode_png: ") + image.message);
  }
  bytes.resize(size);
  return bytes;
}

/// Writes via a temporary file that is renamed into place on success.
inline void save_png(const ImageU8& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(img));
}

/// (1, 3, h, w) tensor with samples scaled to [0, 1].
template <class T>
Tensor<T> to_tensor(const ImageU8& img) {
  const std::size_t plane = img.width * img.height;
  std::vector<T> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) v[ch * plane + i] = static_cast<T>(img.pixels[i * 3 + ch]) / T(255);
  }
  return Tensor<T>(Shape{1, 3, img.height, img.width}, std::move(v));
}

/// Clamps to [0, 1] and rounds to the nearest 8-bit level. Uses batch item `n`.
template <class T>
ImageU8 to_image(const Tensor<T>& t, std::size_t n = 0) {
  const Shape& s = t.shape();
  if (s.c != 3) throw ShapeError("to_image needs 3 channels, got " + s.str());
  ImageU8 img(s.w, s.h);
  const std::size_t plane = s.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(static_cast<double>(t.data()[(n * 3 + ch) * plane + i]), 0.0, 1.0);
      img.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

/// Extends the right and bottom edges by mirror reflection so both sides
/// become multiples of `multiple`.
inline ImageU8 reflect_pad(const ImageU8& img, std::size_t multiple) {
  const std::size_t w = (img.width + multiple - 1) / multiple * multiple;
  const std::size_t h = (img.height + multiple - 1) / multiple * multiple;
  if (w == img.width && h == img.height) return img;
  auto mirror = [](std::size_t i, std::size_t n) -> std::size_t {
    if (n == 1) return 0;
    const std::size_t period = 2 * (n - 1);
    std::size_t k = i % period;
    return k < n ? k : period - k;
  };
  ImageU8 out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.at(x, y, ch) = img.at(mirror(x, img.width), mirror(y, img.height), ch);
      }
    }
  }
  return out;
}

inline ImageU8 crop(const ImageU8& img, std::size_t width, std::size_t height) {
  if (width > img.width || height > img.height) throw ShapeError("crop larger than image");
  ImageU8 out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    std::copy_n(img.pixels.begin() + y * img.width * 3, width * 3, out.pixels.begin() + y * width * 3);
  }
  return out;
}

/// Sorted list of *.png files in `dir`.
inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace irrm

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umbra {

struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Row-major H x W image with C interleaved channels.
template <typename T, int C>
class Raster {
  static_assert(C >= 1, "Raster needs at least one channel");

 public:
  using Scalar = T;
  static constexpr int kChannels = C;

  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width), height_(height) {
    if (width < 0 || height < 0) throw std::invalid_argument("Raster: negative dimension");
    data_.assign(static_cast<std::size_t>(width) * height * C, fill);
  }
  Raster(int width, int height, std::vector<T> data)
      : width_(width), height_(height), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(width) * height * C)
      throw std::invalid_argument("Raster: data length does not match " + std::to_string(width) +
                                  "x" + std::to_string(height) + "x" + std::to_string(C));
  }

  int width() const { return width_; }
  int height() const { return height_; }
  static constexpr int channels() { return C; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const { return data_.empty(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

  T& operator()(int x, int y, int c = 0) { return data_[index(x, y) * C + c]; }
  const T& operator()(int x, int y, int c = 0) const { return data_[index(x, y) * C + c]; }

  T* pixel(std::size_t i) { return data_.data() + i * C; }
  const T* pixel(std::size_t i) const { return data_.data() + i * C; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  /// Channel-interleaved view as a (pixel_count x C) Eigen array.
  auto array() {
    return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, C, Eigen::RowMajor>>(
        data_.data(), static_cast<Eigen::Index>(pixel_count()), C);
  }
  auto array() const {
    return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, C, Eigen::RowMajor>>(
        data_.data(), static_cast<Eigen::Index>(pixel_count()), C);
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using RgbImage = Raster<std::uint8_t, 3>;
using GrayImage = Raster<std::uint8_t, 1>;
using LabImage = Raster<float, 3>;
/// Unit-interval single-channel map (priors, probabilities).
using ProbMap = Raster<float, 1>;
/// Binary mask stored as 0/1.
using Mask = Raster<std::uint8_t, 1>;

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* what) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                                " vs " + std::to_string(b.width()) + "x" +
                                std::to_string(b.height()) + ")");
}

}  // namespace umbra

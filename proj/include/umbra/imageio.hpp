#pragma once

#include "umbra/raster.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umbra::imageio {

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EncodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Untyped 8-bit image view; lets the encoder reject channel counts at runtime.
struct ImageView8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::span<const std::uint8_t> data;
};

template <int C>
ImageView8 view(const Raster<std::uint8_t, C>& r) {
  return {r.width(), r.height(), C, r.data()};
}

/// Decodes PNG (gray, gray+alpha, RGB, RGBA, palette; 8-bit output) or binary PPM (P6).
/// Alpha is dropped, gray is replicated to three channels.
RgbImage decode_image(std::span<const std::uint8_t> bytes);

/// Decodes a single-channel mask; RGB input is reduced by taking the first channel.
GrayImage decode_gray(std::span<const std::uint8_t> bytes);

/// 1-channel -> grayscale PNG, 3-channel -> RGB PNG. Anything else throws EncodeError.
std::vector<std::uint8_t> encode_image(const ImageView8& image);

template <int C>
std::vector<std::uint8_t> encode_image(const Raster<std::uint8_t, C>& r) {
  return encode_image(view(r));
}

/// 16-bit grayscale PNG, used for label-map dumps.
std::vector<std::uint8_t> encode_png16(int width, int height, std::span<const std::uint16_t> data);

std::vector<std::uint8_t> encode_ppm(const RgbImage& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

RgbImage read_image(const std::filesystem::path& path);
/// Reads an 8-bit mask and binarizes it at 128 (value >= 128 -> 1).
Mask read_mask(const std::filesystem::path& path);
/// Writes a 0/1 mask as a {0,255} grayscale PNG.
void write_mask(const std::filesystem::path& path, const Mask& mask);
/// Writes a unit-interval map as 8-bit grayscale PNG with value round(255 p).
void write_prob_map(const std::filesystem::path& path, const ProbMap& map);

/// sRGB (D65) -> CIELAB, one pixel. L in [0,100].
std::array<double, 3> srgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);

LabImage rgb_to_lab(const RgbImage& rgb);

inline constexpr int kPatchSize = 32;
inline constexpr int kPatchChannels = 4;
inline constexpr int kPatchValues = kPatchSize * kPatchSize * kPatchChannels;

/// 32x32 RGBP window. Values are stored planar (channel, row, col), all in [0,1].
struct Patch {
  Pixel origin;
  Pixel center;
  std::array<float, kPatchValues> values{};

  float at(int c, int row, int col) const {
    return values[static_cast<std::size_t>((c * kPatchSize + row) * kPatchSize + col)];
  }
};

/// Top-left corner of the 32x32 window centered on `center`, shifted to lie inside the image.
Pixel patch_origin(int width, int height, Pixel center);

Patch extract_patch(const RgbImage& image, const ProbMap& prior, Pixel center);

}  // namespace umbra::imageio

#include "umbra/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace umbra::imageio {

namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

bool is_png(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0;
}

// Minimal P6 reader: magic, width, height, maxval (<= 255), one whitespace byte, raster.
class PpmReader {
 public:
  explicit PpmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  RgbImage read() {
    if (bytes_.size() < 2 || bytes_[0] != 'P' || bytes_[1] != '6')
      fail(0, "missing P6 magic");
    pos_ = 2;
    const int width = read_int("width");
    const int height = read_int("height");
    const int maxval = read_int("maxval");
    if (width <= 0 || height <= 0) fail(pos_, "non-positive dimensions");
    if (maxval <= 0 || maxval > 255) fail(pos_, "unsupported maxval " + std::to_string(maxval));
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
      fail(pos_, "expected single whitespace after maxval");
    ++pos_;
    const std::size_t need = static_cast<std::size_t>(width) * height * 3;
    if (bytes_.size() - pos_ < need)
      fail(bytes_.size(), "truncated raster: need " + std::to_string(need) + " bytes, have " +
                              std::to_string(bytes_.size() - pos_));
    std::vector<std::uint8_t> data(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + need));
    if (maxval != 255)
      for (auto& v : data) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / maxval));
    return RgbImage(width, height, std::move(data));
  }

 private:
  [[noreturn]] void fail(std::size_t offset, const std::string& why) const {
    throw DecodeError("PPM decode error at offset " + std::to_string(offset) + ": " + why);
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  int read_int(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (1L << 28)) fail(start, std::string(field) + " too large");
      ++pos_;
    }
    if (pos_ == start) fail(start, std::string("truncated header: expected ") + field);
    return static_cast<int>(value);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct PngImage {
  png_image image{};
  PngImage() {
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

std::vector<std::uint8_t> decode_png(std::span<const std::uint8_t> bytes, png_uint_32 format,
                                     int& width, int& height) {
  PngImage png;
  if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size()))
    throw DecodeError(std::string("PNG decode error: ") + png.image.message);
  png.image.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, buffer.data(), 0, nullptr))
    throw DecodeError(std::string("PNG decode error: ") + png.image.message);
  width = static_cast<int>(png.image.width);
  height = static_cast<int>(png.image.height);
  return buffer;
}

std::vector<std::uint8_t> encode_png(int width, int height, png_uint_32 format, const void* data) {
  PngImage png;
  png.image.width = static_cast<png_uint_32>(width);
  png.image.height = static_cast<png_uint_32>(height);
  png.image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, data, 0, nullptr))
    throw EncodeError(std::string("PNG encode error: ") + png.image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, data, 0, nullptr))
    throw EncodeError(std::string("PNG encode error: ") + png.image.message);
  out.resize(size);
  return out;
}

}  // namespace

RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) {
    int w = 0, h = 0;
    auto rgba = decode_png(bytes, PNG_FORMAT_RGBA, w, h);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0, n = static_cast<std::size_t>(w) * h; i < n; ++i)
      std::copy_n(rgba.data() + 4 * i, 3, rgb.data() + 3 * i);
    return RgbImage(w, h, std::move(rgb));
  }
  if (bytes.size() >= 2 && bytes[0] == 'P') return PpmReader(bytes).read();
  throw DecodeError("decode error at offset 0: unrecognized image signature");
}

GrayImage decode_gray(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) {
    // Read as RGBA so gray levels pass through without any gamma handling.
    int w = 0, h = 0;
    auto rgba = decode_png(bytes, PNG_FORMAT_RGBA, w, h);
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = rgba[4 * i];
    return GrayImage(w, h, std::move(gray));
  }
  const RgbImage rgb = decode_image(bytes);
  GrayImage gray(rgb.width(), rgb.height());
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) gray.data()[i] = rgb.pixel(i)[0];
  return gray;
}

std::vector<std::uint8_t> encode_image(const ImageView8& image) {
  if (image.channels != 1 && image.channels != 3)
    throw EncodeError("encode_image: unsupported channel count " + std::to_string(image.channels));
  if (image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw EncodeError("encode_image: data length mismatch");
  return encode_png(image.width, image.height,
                    image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB, image.data.data());
}

std::vector<std::uint8_t> encode_png16(int width, int height, std::span<const std::uint16_t> data) {
  if (data.size() != static_cast<std::size_t>(width) * height)
    throw EncodeError("encode_png16: data length mismatch");
  return encode_png(width, height, PNG_FORMAT_LINEAR_Y, data.data());
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data().begin(), image.data().end());
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RgbImage read_image(const std::filesystem::path& path) {
  try {
    return decode_image(read_file(path));
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

Mask read_mask(const std::filesystem::path& path) {
  GrayImage gray;
  try {
    gray = decode_gray(read_file(path));
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
  Mask mask(gray.width(), gray.height());
  for (std::size_t i = 0; i < gray.pixel_count(); ++i) mask.data()[i] = gray.data()[i] >= 128 ? 1 : 0;
  return mask;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  GrayImage out(mask.width(), mask.height());
  for (std::size_t i = 0; i < mask.pixel_count(); ++i) out.data()[i] = mask.data()[i] ? 255 : 0;
  write_file(path, encode_image(out));
}

void write_prob_map(const std::filesystem::path& path, const ProbMap& map) {
  GrayImage out(map.width(), map.height());
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    const double p = std::clamp(static_cast<double>(map.data()[i]), 0.0, 1.0);
    out.data()[i] = static_cast<std::uint8_t>(std::lround(255.0 * p));
  }
  write_file(path, encode_image(out));
}

std::array<double, 3> srgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  auto linear = [](std::uint8_t v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double rl = linear(r), gl = linear(g), bl = linear(b);
  // D65 reference white, sRGB primaries.
  const double x = (0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl) / 0.95047;
  const double y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
  const double z = (0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl) / 1.08883;
  auto f = [](double t) {
    constexpr double delta = 6.0 / 29.0;
    return t > delta * delta * delta ? std::cbrt(t) : t / (3 * delta * delta) + 4.0 / 29.0;
  };
  const double fx = f(x), fy = f(y), fz = f(z);
  const double L = std::clamp(116.0 * fy - 16.0, 0.0, 100.0);
  return {L, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

LabImage rgb_to_lab(const RgbImage& rgb) {
  LabImage lab(rgb.width(), rgb.height());
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    const std::uint8_t* p = rgb.pixel(i);
    const auto v = srgb_to_lab(p[0], p[1], p[2]);
    float* out = lab.pixel(i);
    out[0] = static_cast<float>(v[0]);
    out[1] = static_cast<float>(v[1]);
    out[2] = static_cast<float>(v[2]);
  }
  return lab;
}

Pixel patch_origin(int width, int height, Pixel center) {
  const int half = kPatchSize / 2;
  return {std::clamp(center.x - half, 0, width - kPatchSize),
          std::clamp(center.y - half, 0, height - kPatchSize)};
}

Patch extract_patch(const RgbImage& image, const ProbMap& prior, Pixel center) {
  require_same_size(image, prior, "extract_patch");
  if (image.width() < kPatchSize || image.height() < kPatchSize)
    throw std::invalid_argument("extract_patch: image smaller than 32x32");
  if (!image.contains(center.x, center.y))
    throw std::invalid_argument("extract_patch: center outside image");
  Patch patch;
  patch.origin = patch_origin(image.width(), image.height(), center);
  patch.center = center;
  constexpr int plane = kPatchSize * kPatchSize;
  for (int row = 0; row < kPatchSize; ++row) {
    for (int col = 0; col < kPatchSize; ++col) {
      const int x = patch.origin.x + col, y = patch.origin.y + row;
      const int k = row * kPatchSize + col;
      for (int c = 0; c < 3; ++c) patch.values[c * plane + k] = image(x, y, c) / 255.0f;
      patch.values[3 * plane + k] = std::clamp(prior(x, y), 0.0f, 1.0f);
    }
  }
  return patch;
}

}  // namespace umbra::imageio

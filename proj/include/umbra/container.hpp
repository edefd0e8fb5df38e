#pragma once

// UMB1 model container.
//
//   offset 0   "UMB1"
//          4   u32 format version (1)
//          8   u32 section count N
//         12   N x { char name[16] (NUL padded), u64 offset, u64 length }
//          …   section payloads
//
// All integers little-endian; reals are IEEE-754 binary64, little-endian.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umbra::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kContainerVersion = 1;

class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void str(const std::string& s);
  void f64s(std::span<const double> v);
  void matrix(const Eigen::Ref<const Eigen::MatrixXd>& m);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  std::string str();
  std::vector<double> f64s();
  Eigen::MatrixXd matrix();

  bool done() const { return pos_ == bytes_.size(); }
  void expect_done() const;

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

class Container {
 public:
  struct Section {
    std::string name;
    std::vector<std::uint8_t> payload;
  };

  void add(std::string name, std::vector<std::uint8_t> payload);
  bool has(const std::string& name) const;
  const std::vector<std::uint8_t>& get(const std::string& name) const;
  const std::vector<Section>& sections() const { return sections_; }

  std::vector<std::uint8_t> serialize() const;
  static Container parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::vector<Section> sections_;
};

/// FNV-1a 64-bit.
std::uint64_t fingerprint(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace umbra::io

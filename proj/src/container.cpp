#include "umbra/container.hpp"

#include "umbra/imageio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace umbra::io {

static_assert(std::endian::native == std::endian::little, "UMB1 writer assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'U', 'M', 'B', '1'};
constexpr std::size_t kNameBytes = 16;
}  // namespace

void ByteWriter::u32(std::uint32_t v) {
  std::uint8_t b[4];
  std::memcpy(b, &v, 4);
  bytes_.insert(bytes_.end(), b, b + 4);
}

void ByteWriter::u64(std::uint64_t v) {
  std::uint8_t b[8];
  std::memcpy(b, &v, 8);
  bytes_.insert(bytes_.end(), b, b + 8);
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(const std::string& s) {
  u64(s.size());
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteWriter::f64s(std::span<const double> v) {
  u64(v.size());
  for (double x : v) f64(x);
}

void ByteWriter::matrix(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n)
    throw FormatError(context_ + ": truncated at offset " + std::to_string(pos_) + " (need " +
                      std::to_string(n) + " bytes)");
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, bytes_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  const auto n = u64();
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> ByteReader::f64s() {
  const auto n = u64();
  need(n * 8);
  std::vector<double> v(n);
  for (auto& x : v) x = f64();
  return v;
}

Eigen::MatrixXd ByteReader::matrix() {
  const auto rows = u64(), cols = u64();
  need(rows * cols * 8);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
  return m;
}

void ByteReader::expect_done() const {
  if (!done())
    throw FormatError(context_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes");
}

void Container::add(std::string name, std::vector<std::uint8_t> payload) {
  if (name.empty() || name.size() >= kNameBytes)
    throw std::invalid_argument("Container: section name must be 1..15 characters");
  if (has(name)) throw std::invalid_argument("Container: duplicate section " + name);
  sections_.push_back({std::move(name), std::move(payload)});
}

bool Container::has(const std::string& name) const {
  return std::any_of(sections_.begin(), sections_.end(), [&](const Section& s) { return s.name == name; });
}

const std::vector<std::uint8_t>& Container::get(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return s.payload;
  throw FormatError("UMB1: missing section '" + name + "'");
}

std::vector<std::uint8_t> Container::serialize() const {
  ByteWriter w;
  w.u32(std::bit_cast<std::uint32_t>(kMagic));
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(sections_.size()));
  std::uint64_t offset = 12 + sections_.size() * (kNameBytes + 16);
  auto out = w.take();
  for (const auto& s : sections_) {
    char name[kNameBytes] = {};
    std::memcpy(name, s.name.data(), s.name.size());
    out.insert(out.end(), name, name + kNameBytes);
    ByteWriter entry;
    entry.u64(offset);
    entry.u64(s.payload.size());
    out.insert(out.end(), entry.bytes().begin(), entry.bytes().end());
    offset += s.payload.size();
  }
  for (const auto& s : sections_) out.insert(out.end(), s.payload.begin(), s.payload.end());
  return out;
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("UMB1: bad magic");
  ByteReader header(bytes.subspan(4), "UMB1 header");
  const auto version = header.u32();
  if (version != kContainerVersion)
    throw FormatError("UMB1: unsupported version " + std::to_string(version));
  const auto count = header.u32();
  Container c;
  std::size_t table = 12;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (bytes.size() < table + kNameBytes + 16) throw FormatError("UMB1: truncated section table");
    const char* raw = reinterpret_cast<const char*>(bytes.data() + table);
    std::string name(raw, strnlen(raw, kNameBytes));
    ByteReader entry(bytes.subspan(table + kNameBytes, 16), "UMB1 section table");
    const auto offset = entry.u64(), length = entry.u64();
    if (offset > bytes.size() || length > bytes.size() - offset)
      throw FormatError("UMB1: section '" + name + "' out of bounds");
    c.sections_.push_back({name, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                                           bytes.begin() + static_cast<std::ptrdiff_t>(offset + length))});
    table += kNameBytes + 16;
  }
  return c;
}

void Container::save(const std::filesystem::path& path) const { imageio::write_file(path, serialize()); }

Container Container::load(const std::filesystem::path& path) {
  try {
    return parse(imageio::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint64_t fingerprint(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace umbra::io

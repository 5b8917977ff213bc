#include "deepir/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace deepir {

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void BinaryReader::need(std::size_t n) const {
  if (remaining() < n) {
    throw FormatError(source_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ")");
  }
}

void BinaryReader::expect_magic(std::string_view four_cc) {
  need(four_cc.size());
  const std::string_view got(data_.data() + pos_, four_cc.size());
  if (got != four_cc) {
    throw FormatError(source_ + ": bad magic, expected " + std::string(four_cc));
  }
  pos_ += four_cc.size();
}

std::uint32_t BinaryReader::expect_version(std::uint32_t supported) {
  const std::uint32_t v = u32();
  if (v != supported) {
    throw FormatError(source_ + ": unsupported format version " + std::to_string(v) +
                      " (reader supports " + std::to_string(supported) + ")");
  }
  return v;
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  return std::string(raw(n));
}

std::string_view BinaryReader::raw(std::size_t n) {
  need(n);
  std::string_view v(data_.data() + pos_, n);
  pos_ += n;
  return v;
}

void BinaryReader::expect_end() const {
  if (remaining() != 0) {
    throw FormatError(source_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace deepir

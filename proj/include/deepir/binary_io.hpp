#pragma once

// Little-endian serialization helpers and atomic file output shared by every
// on-disk format (checkpoints, descriptor stores, codebooks, code stores).

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace deepir {

// Malformed, truncated or version-mismatched artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  void bytes(std::string_view raw) { buf_.append(raw); }
  void magic(std::string_view four_cc) { bytes(four_cc); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f32(float v);
  // u32 length prefix followed by the raw UTF-8 bytes.
  void str(std::string_view s);

  const std::string& buffer() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::string data, std::string source)
      : data_(std::move(data)), source_(std::move(source)) {}

  void expect_magic(std::string_view four_cc);
  // Reads a u32 version and rejects anything other than `supported`.
  std::uint32_t expect_version(std::uint32_t supported);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  float f32();
  std::string str();
  std::string_view raw(std::size_t n);

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_end() const;
  const std::string& source() const noexcept { return source_; }

 private:
  void need(std::size_t n) const;

  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace deepir

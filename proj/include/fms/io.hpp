#pragma once

// Little-endian binary helpers for the tensor-block file formats.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fms::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ByteWriter {
 public:
  void magic(std::string_view m) { out_.append(m); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void text(std::string_view s);  // u32 length + bytes
  void block_f32(std::span<const std::uint32_t> dims, std::span<const float> payload);
  void block_f64(std::span<const std::uint32_t> dims, std::span<const double> payload);
  const std::string& bytes() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  void expect_magic(std::string_view m);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string text();
  // Reads a tensor block; dims are returned through `dims`.
  std::vector<float> block_f32(std::vector<std::uint32_t>& dims);
  std::vector<double> block_f64(std::vector<std::uint32_t>& dims);
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view take(std::size_t n);
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// 64-bit FNV-1a; stable across platforms, used for spec and hub hashes.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace fms::io

#include "fms/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fms::io {

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::size_t count_of(std::span<const std::uint32_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

void ByteWriter::u32(std::uint32_t v) { put_le(out_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(out_, v); }
void ByteWriter::f32(float v) { put_le(out_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(out_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::text(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  out_.append(s);
}

void ByteWriter::block_f32(std::span<const std::uint32_t> dims, std::span<const float> payload) {
  if (count_of(dims) != payload.size()) throw FormatError("tensor block payload does not match dims");
  u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) u32(d);
  for (float v : payload) f32(v);
}

void ByteWriter::block_f64(std::span<const std::uint32_t> dims, std::span<const double> payload) {
  if (count_of(dims) != payload.size()) throw FormatError("tensor block payload does not match dims");
  u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) u32(d);
  for (double v : payload) f64(v);
}

std::string_view ByteReader::take(std::size_t n) {
  if (n > remaining()) throw FormatError("unexpected end of data");
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::expect_magic(std::string_view m) {
  if (remaining() < m.size() || take(m.size()) != m) throw FormatError("bad magic, expected '" + std::string(m) + "'");
}

std::uint32_t ByteReader::u32() {
  auto s = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto s = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::text() {
  const std::uint32_t n = u32();
  return std::string(take(n));
}

std::vector<float> ByteReader::block_f32(std::vector<std::uint32_t>& dims) {
  dims.assign(u32(), 0);
  if (dims.size() > 8) throw FormatError("tensor block rank too large");
  for (auto& d : dims) d = u32();
  const std::size_t n = count_of(dims);
  if (n * 4 > remaining()) throw FormatError("tensor block truncated");
  std::vector<float> out(n);
  for (auto& v : out) v = f32();
  return out;
}

std::vector<double> ByteReader::block_f64(std::vector<std::uint32_t>& dims) {
  dims.assign(u32(), 0);
  if (dims.size() > 8) throw FormatError("tensor block rank too large");
  for (auto& d : dims) d = u32();
  const std::size_t n = count_of(dims);
  if (n * 8 > remaining()) throw FormatError("tensor block truncated");
  std::vector<double> out(n);
  for (auto& v : out) v = f64();
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace fms::io

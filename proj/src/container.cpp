// src/container.cpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "mert/container.hpp"

#include "mert/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace mert::container {

namespace {

template <typename V>
void put(std::vector<std::uint8_t>& buf, V v) {
  std::uint8_t raw[sizeof(V)];
  std::memcpy(raw, &v, sizeof(V));
  buf.insert(buf.end(), raw, raw + sizeof(V));
}

}  // namespace

void ByteWriter::u16(std::uint16_t v) { put(buffer_, v); }
void ByteWriter::u32(std::uint32_t v) { put(buffer_, v); }
void ByteWriter::u64(std::uint64_t v) { put(buffer_, v); }
void ByteWriter::i32(std::int32_t v) { put(buffer_, v); }
void ByteWriter::f32(float v) { put(buffer_, v); }
void ByteWriter::f64(double v) { put(buffer_, v); }

void ByteWriter::bytes(std::string_view s) { buffer_.insert(buffer_.end(), s.begin(), s.end()); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void ByteWriter::f32_array(std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  buffer_.insert(buffer_.end(), p, p + v.size() * sizeof(float));
}

void ByteWriter::f32_array(std::span<const double> v) {
  for (double x : v) f32(static_cast<float>(x));
}

void ByteWriter::magic(std::string_view eight_bytes, std::uint32_t version) {
  bytes(eight_bytes.substr(0, 8));
  for (std::size_t i = eight_bytes.size(); i < 8; ++i) buffer_.push_back(0);
  u32(version);
}

void ByteWriter::patch_u32(std::size_t offset, std::uint32_t v) {
  std::memcpy(buffer_.data() + offset, &v, sizeof(v));
}

void ByteReader::need(std::size_t n, const char* what) const {
  if (remaining() < n) {
    throw FormatError(std::string("truncated data reading ") + what, offset_);
  }
}

namespace {

template <typename V>
V take(std::span<const std::uint8_t> data, std::size_t& offset) {
  V v;
  std::memcpy(&v, data.data() + offset, sizeof(V));
  offset += sizeof(V);
  return v;
}

}  // namespace

std::uint16_t ByteReader::u16() {
  need(2, "u16");
  return take<std::uint16_t>(data_, offset_);
}
std::uint32_t ByteReader::u32() {
  need(4, "u32");
  return take<std::uint32_t>(data_, offset_);
}
std::uint64_t ByteReader::u64() {
  need(8, "u64");
  return take<std::uint64_t>(data_, offset_);
}
std::int32_t ByteReader::i32() {
  need(4, "i32");
  return take<std::int32_t>(data_, offset_);
}
float ByteReader::f32() {
  need(4, "f32");
  return take<float>(data_, offset_);
}
double ByteReader::f64() {
  need(8, "f64");
  return take<double>(data_, offset_);
}

std::string ByteReader::bytes(std::size_t n) {
  need(n, "bytes");
  std::string s(reinterpret_cast<const char*>(data_.data() + offset_), n);
  offset_ += n;
  return s;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  return bytes(n);
}

std::vector<float> ByteReader::f32_array(std::size_t n) {
  if (n > remaining() / sizeof(float)) throw FormatError("truncated float32 array", offset_);
  std::vector<float> v(n);
  std::memcpy(v.data(), data_.data() + offset_, n * sizeof(float));
  offset_ += n * sizeof(float);
  return v;
}

void ByteReader::skip(std::size_t n) {
  need(n, "padding");
  offset_ += n;
}

void ByteReader::seek(std::size_t offset) {
  if (offset > data_.size()) throw FormatError("seek past end", offset);
  offset_ = offset;
}

std::uint32_t ByteReader::expect_magic(std::string_view eight_bytes,
                                       std::uint32_t expected_version) {
  const std::size_t start = offset_;
  std::string m = bytes(8);
  std::string want(eight_bytes.substr(0, 8));
  want.resize(8, '\0');
  if (m != want) {
    throw FormatError("bad magic, expected '" + std::string(eight_bytes) + "'", start);
  }
  const std::uint32_t version = u32();
  if (version != expected_version) {
    throw VersionError(std::string(eight_bytes) + " version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(expected_version) + ")");
  }
  return version;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text) {
  return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace mert::container

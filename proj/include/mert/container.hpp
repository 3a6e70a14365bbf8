// mert/container.hpp

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

#ifndef MERT_CONTAINER_HPP_
#define MERT_CONTAINER_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Little-endian binary helpers shared by the WAV codec and the MERT*
// containers. Every container starts with an 8-byte magic followed by a u32
// version.
namespace mert::container {

class ByteWriter {
 public:
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view s);
  /// u32 length followed by the bytes.
  void str(std::string_view s);
  void f32_array(std::span<const float> v);
  void f32_array(std::span<const double> v);
  void magic(std::string_view eight_bytes, std::uint32_t version);

  std::size_t size() const { return buffer_.size(); }
  void patch_u32(std::size_t offset, std::uint32_t v);
  const std::vector<std::uint8_t>& buffer() const { return buffer_; }
  std::vector<std::uint8_t> take() { return std::move(buffer_); }

 private:
  std::vector<std::uint8_t> buffer_;
};

/// Bounds-checked reader; every failure is a FormatError carrying the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32();
  float f32();
  double f64();
  std::string bytes(std::size_t n);
  std::string str();
  std::vector<float> f32_array(std::size_t n);
  void skip(std::size_t n);
  /// Checks the magic and returns the version (VersionError when it differs
  /// from `expected_version`).
  std::uint32_t expect_magic(std::string_view eight_bytes, std::uint32_t expected_version);

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return data_.size() - offset_; }
  void seek(std::size_t offset);

 private:
  void need(std::size_t n, const char* what) const;

  std::span<const std::uint8_t> data_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for content and config hashes.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text);
std::string hex64(std::uint64_t v);

}  // namespace mert::container

#endif  // MERT_CONTAINER_HPP_

// mert/errors.hpp

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

#ifndef MERT_ERRORS_HPP_
#define MERT_ERRORS_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mert {

/// Bad input data: malformed files, inconsistent corpora, degenerate inputs.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed container; `offset` is the byte position where parsing failed.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedCodecError : public DataError {
 public:
  using DataError::DataError;
};

/// A container written by an incompatible version of this tool.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

/// Not enough distinct data to fit the requested model.
class DegenerateDataError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace mert

#endif  // MERT_ERRORS_HPP_

// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctcbir {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed something outside an operation's domain. CLI maps this to exit code 2.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file or payload failed to parse. `offset` is the byte position where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Stored checksum does not match the content.
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Image and mask (or other paired arrays) disagree on shape.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// A norm that must be positive was zero (cosine of a zero vector).
class NumericDegeneracy : public Error {
 public:
  using Error::Error;
};

/// Loss became non-finite during training.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, double embedding_std, double lr)
      : Error(what + " (embedding_std=" + std::to_string(embedding_std) +
              ", lr=" + std::to_string(lr) + ")"),
        embedding_std_(embedding_std),
        lr_(lr) {}
  double embedding_std() const noexcept { return embedding_std_; }
  double lr() const noexcept { return lr_; }

 private:
  double embedding_std_;
  double lr_;
};

/// Model fingerprints of two stores (or a store and a checkpoint) differ.
class StoreConsistency : public Error {
 public:
  using Error::Error;
};

class DuplicateId : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

/// A retrieval query had no candidates left after filtering.
class EmptyCandidates : public Error {
 public:
  using Error::Error;
};

/// A volume lacks enough slices in a stratum; the caller excludes it.
class VolumeSkipped : public Error {
 public:
  using Error::Error;
};

}  // namespace ctcbir

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aacap {

enum class ErrorKind {
  kBadMagic,
  kBadVersion,
  kShapeMismatch,
  kPayloadLength,
  kNonFinite,
  kIo,
  kParse,
  kInvalidArgument,
  kUnknownLanguage,
  kLengthOverflow,
  kMissingData,
  kValidation,
  kProvider,
};

const char* to_string(ErrorKind kind);

// Structured failure carried by every fallible operation in the toolkit.
// `items` holds per-record detail (e.g. each missing embedding file).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message, std::vector<std::string> items = {})
      : std::runtime_error(std::move(message)), kind_(kind), items_(std::move(items)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::vector<std::string>& items() const noexcept { return items_; }

 private:
  ErrorKind kind_;
  std::vector<std::string> items_;
};

}  // namespace aacap

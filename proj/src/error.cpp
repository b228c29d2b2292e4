// SPDX-License-Identifier: Apache-2.0

#include "aacap/error.hpp"

namespace aacap {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kBadMagic: return "bad_magic";
    case ErrorKind::kBadVersion: return "bad_version";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kPayloadLength: return "payload_length";
    case ErrorKind::kNonFinite: return "non_finite";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kUnknownLanguage: return "unknown_language";
    case ErrorKind::kLengthOverflow: return "length_overflow";
    case ErrorKind::kMissingData: return "missing_data";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kProvider: return "provider";
  }
  return "unknown";
}

}  // namespace aacap

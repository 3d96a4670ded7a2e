#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace demask {

/// Machine-readable failure categories. The CLI maps these to exit codes.
enum class ErrorCode {
  zero_probability_context,
  enumeration_cap_exceeded,
  dimension_mismatch,
  empty_mask_set,
  no_progress,
  empty_cache,
  non_finite_loss,
  format_version_mismatch,
  invalid_argument,
  config_error,
  io_error,
};

constexpr std::string_view category_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::zero_probability_context: return "ZeroProbabilityContext";
    case ErrorCode::enumeration_cap_exceeded: return "EnumerationCapExceeded";
    case ErrorCode::dimension_mismatch: return "DimensionMismatch";
    case ErrorCode::empty_mask_set: return "EmptyMaskSet";
    case ErrorCode::no_progress: return "NoProgress";
    case ErrorCode::empty_cache: return "EmptyCache";
    case ErrorCode::non_finite_loss: return "NonFiniteLoss";
    case ErrorCode::format_version_mismatch: return "FormatVersionMismatch";
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::config_error: return "ConfigError";
    case ErrorCode::io_error: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view category() const noexcept { return category_name(code_); }

 private:
  ErrorCode code_;
};

template <ErrorCode Code>
class CategorizedError : public Error {
 public:
  explicit CategorizedError(const std::string& what) : Error(Code, what) {}
};

using ZeroProbabilityContext = CategorizedError<ErrorCode::zero_probability_context>;
using EnumerationCapExceeded = CategorizedError<ErrorCode::enumeration_cap_exceeded>;
using DimensionMismatch = CategorizedError<ErrorCode::dimension_mismatch>;
using EmptyMaskSet = CategorizedError<ErrorCode::empty_mask_set>;
using NoProgress = CategorizedError<ErrorCode::no_progress>;
using EmptyCache = CategorizedError<ErrorCode::empty_cache>;
using NonFiniteLoss = CategorizedError<ErrorCode::non_finite_loss>;
using FormatVersionMismatch = CategorizedError<ErrorCode::format_version_mismatch>;
using InvalidArgument = CategorizedError<ErrorCode::invalid_argument>;
using ConfigError = CategorizedError<ErrorCode::config_error>;
using IoError = CategorizedError<ErrorCode::io_error>;

}  // namespace demask

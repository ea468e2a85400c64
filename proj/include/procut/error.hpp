#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace procut {

enum class Errc {
  // template / domain
  empty_template,
  unbalanced_braces,
  empty_mask,
  missing_input,
  invalid_argument,
  // gateway
  timeout,
  rate_limited,
  upstream_unavailable,
  malformed_response,
  mock_miss,
  gateway_unconfigured,
  // attribution
  too_many_segments,
  dimension_mismatch,
  all_zero_fit,
  invalid_mask_shape,
  invalid_ranking,
  degenerate_gold,
  // pipeline
  placeholder_lost,
  semantic_mismatch,
  io_error,
};

std::string_view errc_name(Errc code);

/// Base of every error thrown by the library. The code identifies the
/// failure; the message carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Thrown for upstream/mock completion failures. CLI maps these to exit 3.
class GatewayError : public Error {
 public:
  using Error::Error;
  bool retriable() const noexcept;
};

}  // namespace procut

#include "procut/error.hpp"

namespace procut {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::empty_template: return "EmptyTemplate";
    case Errc::unbalanced_braces: return "UnbalancedBraces";
    case Errc::empty_mask: return "EmptyMask";
    case Errc::missing_input: return "MissingInput";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::timeout: return "Timeout";
    case Errc::rate_limited: return "RateLimited";
    case Errc::upstream_unavailable: return "UpstreamUnavailable";
    case Errc::malformed_response: return "Malformed";
    case Errc::mock_miss: return "MockMiss";
    case Errc::gateway_unconfigured: return "GatewayUnconfigured";
    case Errc::too_many_segments: return "TooManySegments";
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::all_zero_fit: return "AllZeroFit";
    case Errc::invalid_mask_shape: return "InvalidMaskShape";
    case Errc::invalid_ranking: return "InvalidRanking";
    case Errc::degenerate_gold: return "DegenerateGold";
    case Errc::placeholder_lost: return "PlaceholderLost";
    case Errc::semantic_mismatch: return "SemanticMismatch";
    case Errc::io_error: return "IoError";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message),
      code_(code) {}

bool GatewayError::retriable() const noexcept {
  return code() == Errc::timeout || code() == Errc::rate_limited ||
         code() == Errc::upstream_unavailable;
}

}  // namespace procut

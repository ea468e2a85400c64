#pragma once

#include <string_view>

#include <json.hpp>

namespace procut {

/// Pulls the JSON object out of a model reply: the body of a ```json fence
/// if present, otherwise the span from the first '{' to the last '}'.
/// Throws GatewayError(Errc::malformed_response).
nlohmann::json parse_llm_json(std::string_view reply);

}  // namespace procut

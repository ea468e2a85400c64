#include "procut/llm_json.hpp"

#include <string>

#include "procut/error.hpp"

namespace procut {

nlohmann::json parse_llm_json(std::string_view reply) {
  std::string_view body = reply;
  if (auto fence = reply.find("```json"); fence != std::string_view::npos) {
    auto start = fence + 7;
    auto end = reply.find("```", start);
    body = reply.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
  } else if (auto open = reply.find('{'); open != std::string_view::npos) {
    auto close = reply.rfind('}');
    if (close == std::string_view::npos || close < open) {
      throw GatewayError(Errc::malformed_response, "reply has no complete JSON object");
    }
    body = reply.substr(open, close - open + 1);
  } else {
    throw GatewayError(Errc::malformed_response, "reply contains no JSON object");
  }
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw GatewayError(Errc::malformed_response, std::string("invalid JSON in reply: ") + e.what());
  }
}

}  // namespace procut

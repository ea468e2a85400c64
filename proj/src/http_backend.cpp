#include "procut/http_backend.hpp"

#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

namespace procut {

using nlohmann::json;

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  auto& url = config_.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(Errc::invalid_argument, "endpoint must include a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
}

std::string HttpBackend::complete(const CompletionRequest& req) {
  httplib::Client client(origin_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);

  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const json body = {
      {"model", req.model},
      {"messages", json::array({{{"role", "user"}, {"content", req.prompt}}})},
      {"temperature", req.temperature},
      {"max_tokens", req.max_output_tokens},
  };

  auto res = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(),
                         "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write ||
        err == httplib::Error::ConnectionTimeout) {
      throw GatewayError(Errc::timeout, "request timed out: " + httplib::to_string(err));
    }
    throw GatewayError(Errc::upstream_unavailable, "transport error: " + httplib::to_string(err));
  }
  if (res->status == 429) throw GatewayError(Errc::rate_limited, "HTTP 429");
  if (res->status == 408) throw GatewayError(Errc::timeout, "HTTP 408");
  if (res->status >= 500) {
    throw GatewayError(Errc::upstream_unavailable, "HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw GatewayError(Errc::malformed_response,
                       "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
  }
  try {
    const auto j = json::parse(res->body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw std::runtime_error("content is not a string");
    return content.get<std::string>();
  } catch (const std::exception& e) {
    throw GatewayError(Errc::malformed_response, std::string("unexpected payload: ") + e.what());
  }
}

}  // namespace procut

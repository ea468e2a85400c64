#pragma once

#include <chrono>
#include <string>

#include "procut/gateway.hpp"

namespace procut {

struct HttpBackendConfig {
  /// e.g. "https://api.openai.com/v1"; requests go to `<base_url>/chat/completions`.
  std::string base_url;
  /// Name of the environment variable holding the bearer token.
  std::string api_key_env = "PROCUT_API_KEY";
  std::chrono::seconds timeout{120};
};

/// Chat-completions client. One user message per request; no streaming.
/// 429 maps to RateLimited, 5xx and transport failures to
/// UpstreamUnavailable/Timeout, anything unparsable to Malformed.
class HttpBackend : public CompletionBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config);
  std::string complete(const CompletionRequest& req) override;

 private:
  HttpBackendConfig config_;
  std::string origin_;
  std::string path_prefix_;
};

}  // namespace procut

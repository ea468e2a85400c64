#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "procut/gateway.hpp"
#include "procut/http_backend.hpp"
#include "procut/llm_json.hpp"
#include "procut/mock_oracle.hpp"
#include "test_support.hpp"

using namespace procut;
using nlohmann::json;

namespace {

/// Echo backend that tracks how many calls overlap.
class CountingBackend : public CompletionBackend {
 public:
  std::string complete(const CompletionRequest& req) override {
    const int now = ++active_;
    int seen = peak_.load();
    while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    ++calls_;
    --active_;
    return "echo:" + req.prompt;
  }
  int peak() const { return peak_.load(); }
  int calls() const { return calls_.load(); }

 private:
  std::atomic<int> active_{0};
  std::atomic<int> peak_{0};
  std::atomic<int> calls_{0};
};

/// Fails with `code` for the first `failures` calls.
class FlakyBackend : public CompletionBackend {
 public:
  FlakyBackend(Errc code, int failures) : code_(code), failures_(failures) {}
  std::string complete(const CompletionRequest&) override {
    if (calls_++ < failures_) throw GatewayError(code_, "flaky");
    return "ok";
  }
  int calls() const { return calls_.load(); }

 private:
  Errc code_;
  int failures_;
  std::atomic<int> calls_{0};
};

CompletionRequest request(std::string prompt) {
  CompletionRequest r;
  r.prompt = std::move(prompt);
  return r;
}

GatewayOptions recording_sleep(std::vector<std::chrono::milliseconds>& delays) {
  GatewayOptions opts;
  opts.sleep = [&delays](std::chrono::milliseconds d) { delays.push_back(d); };
  return opts;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an exception");
  return Errc::io_error;
}

}  // namespace

TEST_CASE("scripted completion and cache idempotence") {
  auto oracle = std::make_shared<MockOracle>();
  oracle->script("hi", "yo");
  Gateway gw(oracle);
  CHECK(gw.complete(request("hi")) == "yo");
  CHECK(gw.complete(request("hi")) == "yo");
  const auto ledger = gw.ledger();
  CHECK(ledger.total_calls == 1);
  CHECK(ledger.cache_hits == 1);
  CHECK(ledger.lookups == 2);
  CHECK(oracle->calls() == 1);
}

TEST_CASE("unknown prompt is a mock miss") {
  auto oracle = std::make_shared<MockOracle>();
  oracle->script("hi", "yo");
  Gateway gw(oracle);
  CHECK(code_of([&] { gw.complete(request("other")); }) == Errc::mock_miss);
}

TEST_CASE("no backend") {
  Gateway gw(nullptr);
  CHECK_FALSE(gw.has_backend());
  CHECK(code_of([&] { gw.complete(request("x")); }) == Errc::gateway_unconfigured);
}

TEST_CASE("request validation") {
  Gateway gw(std::make_shared<CountingBackend>());
  CHECK(code_of([&] { gw.complete(request("")); }) == Errc::invalid_argument);
  auto r = request("x");
  r.temperature = -1;
  CHECK(code_of([&] { gw.complete(r); }) == Errc::invalid_argument);
}

TEST_CASE("batch keeps order and bounds concurrency") {
  auto backend = std::make_shared<CountingBackend>();
  Gateway gw(backend);
  std::vector<CompletionRequest> reqs;
  for (int i = 0; i < 25; ++i) reqs.push_back(request("p" + std::to_string(i)));
  const auto out = gw.batch_complete(reqs, 10);
  REQUIRE(out.size() == 25);
  for (int i = 0; i < 25; ++i) CHECK(out[i] == "echo:p" + std::to_string(i));
  CHECK(backend->peak() <= 10);
  CHECK(backend->peak() >= 2);
  CHECK(backend->calls() == 25);
}

TEST_CASE("parallelism one serializes") {
  auto backend = std::make_shared<CountingBackend>();
  Gateway gw(backend);
  std::vector<CompletionRequest> reqs;
  for (int i = 0; i < 6; ++i) reqs.push_back(request("p" + std::to_string(i)));
  gw.batch_complete(reqs, 1);
  CHECK(backend->peak() == 1);
}

TEST_CASE("duplicates in one batch are sent once") {
  auto backend = std::make_shared<CountingBackend>();
  Gateway gw(backend);
  std::vector<CompletionRequest> reqs(7, request("same"));
  reqs.push_back(request("other"));
  const auto out = gw.batch_complete(reqs);
  CHECK(out.size() == 8);
  CHECK(out[3] == "echo:same");
  CHECK(backend->calls() == 2);
  CHECK(gw.ledger().total_calls == 2);
}

TEST_CASE("empty batch") {
  Gateway gw(std::make_shared<CountingBackend>());
  CHECK(gw.batch_complete({}).empty());
  CHECK(gw.ledger().lookups == 0);
}

TEST_CASE("concurrent identical requests share one call") {
  auto backend = std::make_shared<CountingBackend>();
  Gateway gw(backend);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&] { gw.complete(request("shared")); });
  for (auto& t : threads) t.join();
  CHECK(backend->calls() == 1);
}

TEST_CASE("cache keys") {
  const auto a = request("prompt");
  CHECK(cache_key(a) == cache_key(request("prompt")));
  CHECK(cache_key(a).size() == 64);
  auto warm = a;
  warm.temperature = 0.1;
  CHECK(cache_key(a) != cache_key(warm));
  CHECK(cache_key(a) != cache_key(request("prompT")));
  auto other_model = a;
  other_model.model = "m2";
  CHECK(cache_key(a) != cache_key(other_model));
  auto longer = a;
  longer.max_output_tokens = 10;
  CHECK(cache_key(a) != cache_key(longer));
}

TEST_CASE("sha256 digest") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("retriable errors back off exponentially with jitter") {
  std::vector<std::chrono::milliseconds> delays;
  auto backend = std::make_shared<FlakyBackend>(Errc::rate_limited, 3);
  Gateway gw(backend, std::make_shared<ResponseCache>(), recording_sleep(delays));
  CHECK(gw.complete(request("x")) == "ok");
  CHECK(backend->calls() == 4);
  REQUIRE(delays.size() == 3);
  const double nominal[] = {500, 1000, 2000};
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(static_cast<double>(delays[i].count()) >= nominal[i] * 0.8 - 1);
    CHECK(static_cast<double>(delays[i].count()) <= nominal[i] * 1.2 + 1);
  }
  CHECK(gw.ledger().retries == 3);
  CHECK(gw.ledger().total_calls == 1);
}

TEST_CASE("retries stop at the limit") {
  std::vector<std::chrono::milliseconds> delays;
  auto backend = std::make_shared<FlakyBackend>(Errc::upstream_unavailable, 100);
  Gateway gw(backend, std::make_shared<ResponseCache>(), recording_sleep(delays));
  CHECK(code_of([&] { gw.complete(request("x")); }) == Errc::upstream_unavailable);
  CHECK(backend->calls() == 6);
  CHECK(delays.size() == 5);
}

TEST_CASE("fatal errors are not retried") {
  std::vector<std::chrono::milliseconds> delays;
  auto backend = std::make_shared<FlakyBackend>(Errc::malformed_response, 100);
  Gateway gw(backend, std::make_shared<ResponseCache>(), recording_sleep(delays));
  CHECK(code_of([&] { gw.complete(request("x")); }) == Errc::malformed_response);
  CHECK(backend->calls() == 1);
  CHECK(delays.empty());
}

TEST_CASE("a fatal error aborts the batch") {
  auto oracle = std::make_shared<MockOracle>();
  oracle->script("a", "1");
  Gateway gw(oracle);
  std::vector<CompletionRequest> reqs{request("a"), request("missing"), request("a")};
  CHECK(code_of([&] { gw.batch_complete(reqs); }) == Errc::mock_miss);
}

TEST_CASE("refresh bypasses the cache and overwrites it") {
  auto oracle = std::make_shared<MockOracle>();
  oracle->script("q", std::vector<std::string>{"first", "second"});
  Gateway gw(oracle);
  CHECK(gw.complete(request("q")) == "first");
  CHECK(gw.complete(request("q")) == "first");
  CHECK(gw.complete(request("q"), CallContext{Phase::evaluation, nullptr, CacheMode::refresh}) ==
        "second");
  CHECK(gw.complete(request("q")) == "second");
  CHECK(oracle->calls() == 2);
}

TEST_CASE("phases and per-call ledgers") {
  auto oracle = std::make_shared<MockOracle>();
  oracle->script("a", "1");
  oracle->script("b", "2");
  Gateway gw(oracle);
  CallLedger run;
  gw.complete(request("a"), CallContext{Phase::segmentation, &run});
  gw.complete(request("a"), CallContext{Phase::attribution, &run});
  gw.complete(request("b"));
  const auto s = run.snapshot();
  CHECK(s.total_calls == 1);
  CHECK(s.cache_hits == 1);
  CHECK(s.phase(Phase::segmentation).calls == 1);
  CHECK(s.phase(Phase::attribution).cache_hits == 1);
  CHECK(gw.ledger().phase(Phase::evaluation).calls == 1);

  CallLedger merged;
  merged.merge(s);
  merged.merge(s);
  CHECK(merged.snapshot().total_calls == 2);
  CHECK(merged.snapshot().phase(Phase::attribution).cache_hits == 2);
}

TEST_CASE("persistent cache survives a restart") {
  testing::TempDir dir;
  const auto file = dir / "cache.jsonl";
  {
    auto oracle = std::make_shared<MockOracle>();
    oracle->script("a", "1");
    oracle->script("b", "2");
    Gateway gw(oracle, std::make_shared<ResponseCache>(file));
    gw.complete(request("a"));
    gw.complete(request("b"));
  }
  auto empty = std::make_shared<MockOracle>();
  Gateway gw(empty, std::make_shared<ResponseCache>(file));
  CHECK(gw.complete(request("a")) == "1");
  CHECK(gw.complete(request("b")) == "2");
  CHECK(gw.ledger().total_calls == 0);
  CHECK(empty->calls() == 0);

  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  const auto rec = json::parse(line);
  CHECK(rec.contains("key"));
  CHECK(rec.contains("model"));
  CHECK(rec.contains("response"));
  CHECK(rec.contains("created_at"));
}

TEST_CASE("a corrupt cache tail is truncated") {
  testing::TempDir dir;
  const auto file = dir / "cache.jsonl";
  {
    ResponseCache cache(file);
    cache.put("k1", "m", "v1");
    cache.put("k2", "m", "v2");
  }
  const auto good_size = std::filesystem::file_size(file);
  {
    std::ofstream out(file, std::ios::app | std::ios::binary);
    out << "{\"key\": \"k3\", \"resp";
  }
  ResponseCache cache(file);
  CHECK(cache.size() == 2);
  CHECK(cache.get("k2") == std::optional<std::string>("v2"));
  CHECK(cache.truncated_bytes() > 0);
  CHECK(std::filesystem::file_size(file) == good_size);
  cache.put("k3", "m", "v3");
  ResponseCache reread(file);
  CHECK(reread.size() == 3);
  CHECK(reread.truncated_bytes() == 0);
}

TEST_CASE("later cache records win") {
  testing::TempDir dir;
  const auto file = dir / "cache.jsonl";
  {
    ResponseCache cache(file);
    cache.put("k", "m", "old");
    cache.put("k", "m", "new");
  }
  CHECK(ResponseCache(file).get("k") == std::optional<std::string>("new"));
}

TEST_CASE("llm json extraction") {
  CHECK(parse_llm_json("```json\n{\"a\": 1}\n```")["a"] == 1);
  CHECK(parse_llm_json("Sure! {\"a\": {\"b\": 2}} done")["a"]["b"] == 2);
  CHECK(code_of([] { parse_llm_json("no json"); }) == Errc::malformed_response);
  CHECK(code_of([] { parse_llm_json("{broken"); }) == Errc::malformed_response);
}

TEST_CASE("fixed clock") {
  CHECK(fixed_clock(42)() == 42);
  CHECK(system_clock_ms()() > 1'600'000'000'000);
}

namespace {

/// Local chat-completions stand-in for the HTTP client tests.
class FakeEndpoint {
 public:
  FakeEndpoint() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      last_auth_ = req.get_header_value("Authorization");
      last_body_ = req.body;
      const auto body = json::parse(req.body);
      const auto prompt = body["messages"][0]["content"].get<std::string>();
      if (prompt == "limit") {
        res.status = 429;
      } else if (prompt == "down") {
        res.status = 503;
      } else if (prompt == "garbage") {
        res.set_content("not json", "text/plain");
      } else if (prompt == "denied") {
        res.status = 401;
      } else {
        json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "re:" + prompt}}}}}}};
        res.set_content(reply.dump(), "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  std::string last_auth_;
  std::string last_body_;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("http backend against a local endpoint") {
  FakeEndpoint endpoint;
  ::setenv("PROCUT_TEST_KEY", "secret", 1);
  HttpBackend backend({endpoint.base_url(), "PROCUT_TEST_KEY", std::chrono::seconds(5)});

  auto req = request("hello");
  req.model = "m1";
  req.max_output_tokens = 7;
  CHECK(backend.complete(req) == "re:hello");
  CHECK(endpoint.last_auth_ == "Bearer secret");
  const auto sent = json::parse(endpoint.last_body_);
  CHECK(sent["model"] == "m1");
  CHECK(sent["max_tokens"] == 7);
  CHECK(sent["temperature"] == 0.0);
  CHECK(sent["messages"][0]["role"] == "user");

  CHECK(code_of([&] { backend.complete(request("limit")); }) == Errc::rate_limited);
  CHECK(code_of([&] { backend.complete(request("down")); }) == Errc::upstream_unavailable);
  CHECK(code_of([&] { backend.complete(request("garbage")); }) == Errc::malformed_response);
  CHECK(code_of([&] { backend.complete(request("denied")); }) == Errc::malformed_response);
}

TEST_CASE("http backend through the gateway retries rate limits") {
  FakeEndpoint endpoint;
  std::vector<std::chrono::milliseconds> delays;
  Gateway gw(std::make_shared<HttpBackend>(HttpBackendConfig{endpoint.base_url()}),
             std::make_shared<ResponseCache>(), recording_sleep(delays));
  CHECK(code_of([&] { gw.complete(request("limit")); }) == Errc::rate_limited);
  CHECK(delays.size() == 5);
  CHECK(gw.complete(request("fine")) == "re:fine");
}

TEST_CASE("http backend transport failure") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpBackend backend({"http://127.0.0.1:" + std::to_string(port), "PROCUT_UNSET_KEY",
                       std::chrono::seconds(2)});
  const auto code = code_of([&] { backend.complete(request("x")); });
  CHECK((code == Errc::upstream_unavailable || code == Errc::timeout));
  CHECK_THROWS_AS(HttpBackend({"no-scheme.example"}), Error);
}

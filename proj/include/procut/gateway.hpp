#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "procut/error.hpp"

namespace procut {

/// Milliseconds since the Unix epoch. Injectable so reports can be made
/// byte-reproducible.
using Clock = std::function<std::int64_t()>;
Clock system_clock_ms();
Clock fixed_clock(std::int64_t value);

struct CompletionRequest {
  std::string model = "gpt-4.1-mini";
  std::string prompt;
  double temperature = 0.0;
  int max_output_tokens = 4000;
};

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

/// SHA-256 over (model, prompt, temperature, max_output_tokens), hex encoded.
std::string cache_key(const CompletionRequest& req);

enum class Phase : std::size_t { segmentation = 0, attribution = 1, evaluation = 2 };
std::string_view to_string(Phase p);

struct PhaseCounts {
  std::uint64_t calls = 0;
  std::uint64_t cache_hits = 0;
  friend bool operator==(const PhaseCounts&, const PhaseCounts&) = default;
};

struct LedgerSnapshot {
  /// Requests that reached the backend (cache misses). Retries are not
  /// counted here.
  std::uint64_t total_calls = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t lookups = 0;
  std::uint64_t retries = 0;
  std::int64_t wall_time_ms = 0;
  std::array<PhaseCounts, 3> phases{};

  const PhaseCounts& phase(Phase p) const { return phases[static_cast<std::size_t>(p)]; }
  friend bool operator==(const LedgerSnapshot&, const LedgerSnapshot&) = default;
};

/// Thread-safe call counters. Every update happens under one lock so
/// readers never observe a torn snapshot.
class CallLedger {
 public:
  void record_lookup(Phase phase, bool hit);
  void record_retry();
  void add_wall_time(std::int64_t ms);
  /// Adds every counter of `other`.
  void merge(const LedgerSnapshot& other);
  LedgerSnapshot snapshot() const;

 private:
  mutable std::mutex mu_;
  LedgerSnapshot state_;
};

/// Upstream completion provider: an HTTP endpoint or a mock oracle.
class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  /// Throws GatewayError. Timeout, RateLimited and UpstreamUnavailable are
  /// retried by the gateway.
  virtual std::string complete(const CompletionRequest& req) = 0;
};

/// Key/response store, optionally persisted as an append-only JSON-lines
/// file `{key, model, response, created_at}`. A corrupt trailing record is
/// truncated away on load. Later records for the same key win.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path file);

  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const std::string& model, const std::string& response);
  std::size_t size() const;
  /// Bytes discarded from the file tail on load.
  std::uintmax_t truncated_bytes() const noexcept { return truncated_bytes_; }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::string> entries_;
  std::optional<std::filesystem::path> file_;
  std::uintmax_t truncated_bytes_ = 0;
};

struct RetryPolicy {
  int retry_limit = 5;
  std::chrono::milliseconds base{500};
  double factor = 2.0;
  double jitter = 0.2;
};

struct GatewayOptions {
  RetryPolicy retry;
  std::size_t parallelism = 10;
  std::uint64_t jitter_seed = 0;
  Clock clock = system_clock_ms();
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to this_thread::sleep_for
};

enum class CacheMode { use, refresh };

/// Per-call routing: which phase is charged, an optional extra ledger
/// (per run), and whether the cache may answer.
struct CallContext {
  Phase phase = Phase::evaluation;
  CallLedger* ledger = nullptr;
  CacheMode cache = CacheMode::use;
};

class Gateway {
 public:
  explicit Gateway(std::shared_ptr<CompletionBackend> backend,
                   std::shared_ptr<ResponseCache> cache = std::make_shared<ResponseCache>(),
                   GatewayOptions options = {});

  bool has_backend() const noexcept { return backend_ != nullptr; }
  const GatewayOptions& options() const noexcept { return options_; }

  std::string complete(const CompletionRequest& req, const CallContext& ctx = {});

  /// Results follow input order. Duplicate requests are sent once. At most
  /// `parallelism` (0 = options().parallelism) requests are in flight. The
  /// first fatal error aborts the batch once in-flight requests drain.
  std::vector<std::string> batch_complete(std::span<const CompletionRequest> reqs,
                                          std::size_t parallelism = 0,
                                          const CallContext& ctx = {});

  LedgerSnapshot ledger() const { return ledger_.snapshot(); }
  const ResponseCache& cache() const noexcept { return *cache_; }

 private:
  std::string complete_one(const CompletionRequest& req, const std::string& key,
                           const CallContext& ctx);
  std::string call_with_retry(const CompletionRequest& req, const CallContext& ctx);
  std::chrono::milliseconds backoff_delay(int attempt);
  void record_lookup(const CallContext& ctx, bool hit);

  std::shared_ptr<CompletionBackend> backend_;
  std::shared_ptr<ResponseCache> cache_;
  GatewayOptions options_;
  CallLedger ledger_;

  std::mutex inflight_mu_;
  std::unordered_map<std::string, std::shared_future<std::string>> inflight_;

  std::mutex jitter_mu_;
  std::mt19937_64 jitter_rng_;
};

}  // namespace procut

#include "procut/gateway.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace procut {

using nlohmann::json;

Clock system_clock_ms() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

Clock fixed_clock(std::int64_t value) {
  return [value] { return value; };
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

namespace {

std::string iso8601_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string cache_key(const CompletionRequest& req) {
  char temp[40];
  std::snprintf(temp, sizeof temp, "%.17g", req.temperature);
  const json canonical = {req.model, req.prompt, temp, req.max_output_tokens};
  return sha256_hex(canonical.dump());
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::segmentation: return "segmentation";
    case Phase::attribution: return "attribution";
    case Phase::evaluation: return "evaluation";
  }
  return "evaluation";
}

// ---------------------------------------------------------------------------

void CallLedger::record_lookup(Phase phase, bool hit) {
  std::lock_guard lock(mu_);
  ++state_.lookups;
  auto& p = state_.phases[static_cast<std::size_t>(phase)];
  if (hit) {
    ++state_.cache_hits;
    ++p.cache_hits;
  } else {
    ++state_.total_calls;
    ++p.calls;
  }
}

void CallLedger::record_retry() {
  std::lock_guard lock(mu_);
  ++state_.retries;
}

void CallLedger::merge(const LedgerSnapshot& other) {
  std::lock_guard lock(mu_);
  state_.total_calls += other.total_calls;
  state_.cache_hits += other.cache_hits;
  state_.lookups += other.lookups;
  state_.retries += other.retries;
  state_.wall_time_ms += other.wall_time_ms;
  for (std::size_t i = 0; i < state_.phases.size(); ++i) {
    state_.phases[i].calls += other.phases[i].calls;
    state_.phases[i].cache_hits += other.phases[i].cache_hits;
  }
}

void CallLedger::add_wall_time(std::int64_t ms) {
  std::lock_guard lock(mu_);
  state_.wall_time_ms += std::max<std::int64_t>(ms, 0);
}

LedgerSnapshot CallLedger::snapshot() const {
  std::lock_guard lock(mu_);
  return state_;
}

// ---------------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path file) : file_(std::move(file)) {
  if (!std::filesystem::exists(*file_)) return;
  std::ifstream in(*file_, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open cache file " + file_->string());

  std::string line;
  std::uintmax_t good_end = 0;
  std::uintmax_t pos = 0;
  bool corrupt = false;
  while (std::getline(in, line)) {
    const bool terminated = !in.eof();
    const std::uintmax_t next = pos + line.size() + (terminated ? 1 : 0);
    try {
      if (!terminated) throw std::runtime_error("unterminated record");
      auto j = json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("response").get<std::string>();
    } catch (const std::exception&) {
      corrupt = true;
      break;
    }
    pos = next;
    good_end = next;
  }
  in.close();
  if (corrupt) {
    const auto size = std::filesystem::file_size(*file_);
    truncated_bytes_ = size - good_end;
    std::filesystem::resize_file(*file_, good_end);
  }
}

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ResponseCache::put(const std::string& key, const std::string& model,
                        const std::string& response) {
  std::lock_guard lock(mu_);
  entries_[key] = response;
  if (!file_) return;
  if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
  std::ofstream out(*file_, std::ios::binary | std::ios::app);
  if (!out) throw Error(Errc::io_error, "cannot append to cache file " + file_->string());
  const json record = {
      {"key", key}, {"model", model}, {"response", response}, {"created_at", iso8601_now()}};
  out << record.dump() << '\n';
  out.flush();
}

std::size_t ResponseCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

// ---------------------------------------------------------------------------

Gateway::Gateway(std::shared_ptr<CompletionBackend> backend, std::shared_ptr<ResponseCache> cache,
                 GatewayOptions options)
    : backend_(std::move(backend)),
      cache_(cache ? std::move(cache) : std::make_shared<ResponseCache>()),
      options_(std::move(options)),
      jitter_rng_(options_.jitter_seed) {
  if (!options_.clock) options_.clock = system_clock_ms();
  if (!options_.sleep) {
    options_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
  if (options_.parallelism == 0) options_.parallelism = 1;
}

void Gateway::record_lookup(const CallContext& ctx, bool hit) {
  ledger_.record_lookup(ctx.phase, hit);
  if (ctx.ledger) ctx.ledger->record_lookup(ctx.phase, hit);
}

std::chrono::milliseconds Gateway::backoff_delay(int attempt) {
  const auto& r = options_.retry;
  double jitter = 0.0;
  {
    std::lock_guard lock(jitter_mu_);
    // uniform in [-1, 1)
    jitter = static_cast<double>(jitter_rng_() >> 11) * 0x1.0p-52 - 1.0;
  }
  const double ms = static_cast<double>(r.base.count()) * std::pow(r.factor, attempt) *
                    (1.0 + r.jitter * jitter);
  return std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(std::max(ms, 0.0))));
}

std::string Gateway::call_with_retry(const CompletionRequest& req, const CallContext& ctx) {
  if (!backend_) {
    throw GatewayError(Errc::gateway_unconfigured, "no endpoint or mock oracle configured");
  }
  for (int attempt = 0;; ++attempt) {
    try {
      return backend_->complete(req);
    } catch (const GatewayError& e) {
      if (!e.retriable() || attempt >= options_.retry.retry_limit) throw;
      ledger_.record_retry();
      if (ctx.ledger) ctx.ledger->record_retry();
      options_.sleep(backoff_delay(attempt));
    }
  }
}

std::string Gateway::complete_one(const CompletionRequest& req, const std::string& key,
                                  const CallContext& ctx) {
  if (req.prompt.empty()) throw Error(Errc::invalid_argument, "completion prompt is empty");
  if (req.temperature < 0) throw Error(Errc::invalid_argument, "temperature must be >= 0");

  if (ctx.cache == CacheMode::refresh) {
    record_lookup(ctx, false);
    auto response = call_with_retry(req, ctx);
    cache_->put(key, req.model, response);
    return response;
  }

  std::promise<std::string> promise;
  {
    std::unique_lock lock(inflight_mu_);
    if (auto hit = cache_->get(key)) {
      lock.unlock();
      record_lookup(ctx, true);
      return *hit;
    }
    if (auto it = inflight_.find(key); it != inflight_.end()) {
      auto pending = it->second;
      lock.unlock();
      record_lookup(ctx, true);
      return pending.get();
    }
    inflight_.emplace(key, promise.get_future().share());
  }
  record_lookup(ctx, false);

  auto finish = [&] {
    std::lock_guard lock(inflight_mu_);
    inflight_.erase(key);
  };
  try {
    auto response = call_with_retry(req, ctx);
    {
      // Insert before releasing waiters so later lookups hit the cache.
      std::lock_guard lock(inflight_mu_);
      cache_->put(key, req.model, response);
      inflight_.erase(key);
    }
    promise.set_value(response);
    return response;
  } catch (...) {
    finish();
    promise.set_exception(std::current_exception());
    throw;
  }
}

std::string Gateway::complete(const CompletionRequest& req, const CallContext& ctx) {
  const auto start = options_.clock();
  struct Timer {
    Gateway& gw;
    const CallContext& ctx;
    std::int64_t start;
    ~Timer() {
      const auto elapsed = gw.options_.clock() - start;
      gw.ledger_.add_wall_time(elapsed);
      if (ctx.ledger) ctx.ledger->add_wall_time(elapsed);
    }
  } timer{*this, ctx, start};
  return complete_one(req, cache_key(req), ctx);
}

std::vector<std::string> Gateway::batch_complete(std::span<const CompletionRequest> reqs,
                                                 std::size_t parallelism,
                                                 const CallContext& ctx) {
  if (reqs.empty()) return {};
  if (parallelism == 0) parallelism = options_.parallelism;

  const auto start = options_.clock();
  struct Timer {
    Gateway& gw;
    const CallContext& ctx;
    std::int64_t start;
    ~Timer() {
      const auto elapsed = gw.options_.clock() - start;
      gw.ledger_.add_wall_time(elapsed);
      if (ctx.ledger) ctx.ledger->add_wall_time(elapsed);
    }
  } timer{*this, ctx, start};

  // In-batch deduplication: each distinct key is requested once.
  std::vector<std::string> keys;
  std::vector<std::size_t> unique_of(reqs.size());
  std::vector<std::size_t> representative;
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    auto key = cache_key(reqs[i]);
    auto [it, inserted] = seen.emplace(key, representative.size());
    if (inserted) {
      representative.push_back(i);
      keys.push_back(std::move(key));
    } else {
      record_lookup(ctx, true);
    }
    unique_of[i] = it->second;
  }

  std::vector<std::string> unique_results(representative.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mu;

  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t u = next.fetch_add(1);
      if (u >= representative.size()) return;
      try {
        unique_results[u] = complete_one(reqs[representative[u]], keys[u], ctx);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
      }
    }
  };

  const std::size_t n_workers = std::min(parallelism, representative.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<std::string> out(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) out[i] = unique_results[unique_of[i]];
  return out;
}

}  // namespace procut

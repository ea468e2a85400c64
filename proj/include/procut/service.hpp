#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "procut/gateway.hpp"
#include "procut/pipeline.hpp"

namespace httplib {
class Server;
}

namespace procut {

struct ServiceOptions {
  std::filesystem::path runs_dir = "runs";
  std::size_t max_concurrent_runs = 2;
  /// Value of Access-Control-Allow-Origin.
  std::string cors_origin = "*";
  /// Base directory for `dataset_path` references in run requests.
  std::filesystem::path data_root = ".";
  Clock clock = system_clock_ms();
};

struct RunHandle {
  std::string run_id;
  RunStatus status = RunStatus::queued;
  double progress = 0.0;
  std::string error;
};

nlohmann::json to_json(const RunHandle& h);

/// Status code plus JSON body; what every endpoint returns.
struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// Run registry and worker pool behind the HTTP API. Runs are
/// content-addressed by run_id; at most max_concurrent_runs execute at
/// once and the rest wait in FIFO order. Handles are persisted next to the
/// reports so a restarted service still knows finished runs; runs that were
/// queued or executing at shutdown come back as failed.
class RunService {
 public:
  RunService(std::shared_ptr<Gateway> gw, ServiceOptions opts = {});
  ~RunService();
  RunService(const RunService&) = delete;
  RunService& operator=(const RunService&) = delete;

  /// Body: {"template": str, "dataset": [{inputs, reference, split?}...] |
  /// "dataset_path": str, "config": {...}}. 202, 400, or 409 with the
  /// existing handle.
  ApiResponse submit(const nlohmann::json& body);
  ApiResponse handle(const std::string& run_id) const;
  /// 404 unknown, 409 until the run is done.
  ApiResponse report(const std::string& run_id) const;
  /// Body: {"template": str, "strategy"?, "max_units"?, "marker"?}.
  ApiResponse segment(const nlohmann::json& body);
  static nlohmann::json schema();

  /// Registers the /api routes and CORS handling on `server`.
  void install(httplib::Server& server);

  /// Blocks until no run is queued or executing.
  void wait_idle();

 private:
  struct Job {
    std::string run_id;
    std::string template_text;
    EvalTask task;
    CompressionConfig config;
  };

  void worker();
  void update(const std::string& run_id, RunStatus status, double progress, const std::string& error = {});
  void save_handle(const RunHandle& h) const;
  void recover();
  std::filesystem::path handle_path(const std::string& run_id) const;
  std::filesystem::path report_path(const std::string& run_id) const;

  std::shared_ptr<Gateway> gw_;
  ServiceOptions opts_;

  mutable std::mutex mu_;
  std::condition_variable work_cv_;
  std::condition_variable idle_cv_;
  std::map<std::string, RunHandle> handles_;
  std::deque<Job> queue_;
  std::size_t active_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// Parses "host:port" (or ":port", or a bare port). Throws Errc::invalid_argument.
std::pair<std::string, int> parse_listen_address(const std::string& listen);

}  // namespace procut

#include "procut/service.hpp"

#include <httplib.h>

#include <sstream>

#include "procut/error.hpp"
#include "procut/io.hpp"
#include "procut/segmentation.hpp"
#include "procut/serialize.hpp"

namespace procut {

using nlohmann::json;

namespace {

int rank(RunStatus s) { return static_cast<int>(s); }

bool finished(RunStatus s) { return s == RunStatus::done || s == RunStatus::failed; }

ApiResponse error_response(int status, const std::string& message) {
  return {status, json{{"error", message}}};
}

EvalTask task_from_request(const json& body, const std::filesystem::path& data_root,
                           const CompressionConfig& cfg) {
  std::vector<LabeledExample> examples;
  if (body.contains("dataset")) {
    if (!body["dataset"].is_array()) throw Error(Errc::invalid_argument, "dataset must be an array");
    std::stringstream lines;
    for (const auto& ex : body["dataset"]) lines << ex.dump() << '\n';
    examples = parse_dataset_jsonl(lines);
  } else if (body.contains("dataset_path")) {
    if (!body["dataset_path"].is_string()) throw Error(Errc::invalid_argument, "dataset_path must be a string");
    const std::filesystem::path rel = body["dataset_path"].get<std::string>();
    if (rel.is_absolute() || std::any_of(rel.begin(), rel.end(), [](const auto& p) { return p == ".."; })) {
      throw Error(Errc::invalid_argument, "dataset_path must stay inside the data root");
    }
    examples = load_dataset(data_root / rel);
  } else {
    throw Error(Errc::invalid_argument, "request needs dataset or dataset_path");
  }
  if (examples.empty()) throw Error(Errc::invalid_argument, "dataset is empty");
  return make_task(examples, cfg.metric, cfg.splits);
}

}  // namespace

json to_json(const RunHandle& h) {
  return {{"run_id", h.run_id},
          {"status", to_string(h.status)},
          {"progress", h.progress},
          {"error", h.error.empty() ? json(nullptr) : json(h.error)}};
}

RunService::RunService(std::shared_ptr<Gateway> gw, ServiceOptions opts)
    : gw_(std::move(gw)), opts_(std::move(opts)) {
  if (!gw_) throw Error(Errc::invalid_argument, "service needs a gateway");
  if (opts_.max_concurrent_runs < 1) throw Error(Errc::invalid_argument, "max_concurrent_runs must be >= 1");
  if (!opts_.clock) opts_.clock = system_clock_ms();
  std::filesystem::create_directories(opts_.runs_dir);
  recover();
  for (std::size_t i = 0; i < opts_.max_concurrent_runs; ++i) workers_.emplace_back([this] { worker(); });
}

RunService::~RunService() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  work_cv_.notify_all();
  for (auto& t : workers_) t.join();
}

std::filesystem::path RunService::handle_path(const std::string& run_id) const {
  return opts_.runs_dir / (run_id + ".handle.json");
}

std::filesystem::path RunService::report_path(const std::string& run_id) const {
  return opts_.runs_dir / (run_id + ".json");
}

void RunService::save_handle(const RunHandle& h) const {
  write_file_atomic(handle_path(h.run_id), dump_document(to_json(h)));
}

void RunService::recover() {
  const std::string suffix = ".handle.json";
  for (const auto& entry : std::filesystem::directory_iterator(opts_.runs_dir)) {
    const auto name = entry.path().filename().string();
    if (!entry.is_regular_file() || !name.ends_with(suffix)) continue;
    try {
      const auto j = json::parse(read_text_file(entry.path()));
      RunHandle h;
      h.run_id = j.at("run_id").get<std::string>();
      h.status = run_status_from_string(j.at("status").get<std::string>());
      h.progress = j.value("progress", 0.0);
      if (j.contains("error") && j["error"].is_string()) h.error = j["error"].get<std::string>();
      if (!finished(h.status)) {
        h.status = RunStatus::failed;
        h.error = "interrupted by a service restart";
        save_handle(h);
      }
      handles_[h.run_id] = h;
    } catch (const std::exception&) {
      // Unreadable handle files are skipped; the run can be resubmitted.
    }
  }
}

ApiResponse RunService::submit(const json& body) {
  Job job;
  try {
    if (!body.is_object()) throw Error(Errc::invalid_argument, "body must be a JSON object");
    for (const auto& [key, _] : body.items()) {
      if (key != "template" && key != "dataset" && key != "dataset_path" && key != "config") {
        throw Error(Errc::invalid_argument, "unknown field '" + key + "'");
      }
    }
    if (!body.contains("template") || !body["template"].is_string()) {
      throw Error(Errc::invalid_argument, "template must be a string");
    }
    job.template_text = body["template"].get<std::string>();
    const auto tpl = parse_template(job.template_text);
    job.config = config_from_json(body.value("config", json::object()));
    validate(job.config);
    job.task = task_from_request(body, opts_.data_root, job.config);
    check_task_against_template(job.task, tpl);
    job.run_id = make_run_id(tpl, job.task, job.config);
  } catch (const std::exception& e) {
    return error_response(400, e.what());
  }

  std::lock_guard lock(mu_);
  if (const auto it = handles_.find(job.run_id); it != handles_.end()) {
    return {409, to_json(it->second)};
  }
  RunHandle h{job.run_id, RunStatus::queued, 0.0, {}};
  handles_[h.run_id] = h;
  save_handle(h);
  queue_.push_back(std::move(job));
  work_cv_.notify_one();
  return {202, to_json(h)};
}

ApiResponse RunService::handle(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  const auto it = handles_.find(run_id);
  if (it == handles_.end()) return error_response(404, "unknown run '" + run_id + "'");
  return {200, to_json(it->second)};
}

ApiResponse RunService::report(const std::string& run_id) const {
  {
    std::lock_guard lock(mu_);
    const auto it = handles_.find(run_id);
    if (it == handles_.end()) return error_response(404, "unknown run '" + run_id + "'");
    if (it->second.status != RunStatus::done) {
      auto body = to_json(it->second);
      body["error"] = it->second.error.empty()
                          ? "run is " + std::string(to_string(it->second.status))
                          : it->second.error;
      return {409, body};
    }
  }
  try {
    return {200, json::parse(read_text_file(report_path(run_id)))};
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

ApiResponse RunService::segment(const json& body) {
  try {
    if (!body.is_object() || !body.contains("template") || !body["template"].is_string()) {
      throw Error(Errc::invalid_argument, "template must be a string");
    }
    json cfg_json = json::object();
    for (const auto& [key, value] : body.items()) {
      if (key == "template") continue;
      if (key != "strategy" && key != "max_units" && key != "marker") {
        throw Error(Errc::invalid_argument, "unknown field '" + key + "'");
      }
      cfg_json[key] = value;
    }
    const auto cfg = config_from_json(cfg_json);
    const auto tpl = parse_template(body["template"].get<std::string>());
    SegmentationConfig sc = cfg.segmentation;
    json out;
    if (sc.strategy == SegmentationStrategy::llm) {
      const auto r = segment_llm_detailed(tpl, sc, *gw_);
      out = to_json(r.segmentation);
      out["fell_back"] = r.fell_back;
      out["attempts"] = r.attempts;
    } else {
      out = to_json(procut::segment(tpl, sc, gw_.get()));
    }
    return {200, out};
  } catch (const GatewayError& e) {
    return error_response(502, e.what());
  } catch (const std::exception& e) {
    return error_response(400, e.what());
  }
}

json RunService::schema() {
  json example = {{"type", "object"},
                  {"required", {"inputs", "reference"}},
                  {"properties",
                   {{"inputs", {{"type", "object"}, {"additionalProperties", {{"type", "string"}}}}},
                    {"reference", {{"type", "string"}}},
                    {"split", {{"enum", {"train", "test"}}}}}}};
  json statuses = json::array();
  for (auto s : {RunStatus::queued, RunStatus::segmenting, RunStatus::attributing, RunStatus::pruning,
                 RunStatus::evaluating, RunStatus::done, RunStatus::failed}) {
    statuses.push_back(to_string(s));
  }
  return {
      {"config", config_schema()},
      {"run_request",
       {{"type", "object"},
        {"additionalProperties", false},
        {"required", {"template"}},
        {"properties",
         {{"template", {{"type", "string"}}},
          {"dataset", {{"type", "array"}, {"items", example}}},
          {"dataset_path", {{"type", "string"}}},
          {"config", {{"$ref", "#/config"}}}}}}},
      {"segment_request",
       {{"type", "object"},
        {"additionalProperties", false},
        {"required", {"template"}},
        {"properties",
         {{"template", {{"type", "string"}}},
          {"strategy", {{"enum", {"predefined", "structural", "llm"}}}},
          {"max_units", {{"type", "integer"}}},
          {"marker", {{"type", "string"}}}}}}},
      {"run_handle",
       {{"type", "object"},
        {"properties",
         {{"run_id", {{"type", "string"}}},
          {"status", {{"enum", statuses}}},
          {"progress", {{"type", "number"}}},
          {"error", {{"type", {"string", "null"}}}}}}}},
      {"run_report",
       {{"type", "object"},
        {"required",
         {"run_id", "status", "original_template", "compressed_template", "segments", "kept",
          "attribution", "score_before", "score_after", "tokens_before", "tokens_after", "ledger"}}}},
  };
}

void RunService::update(const std::string& run_id, RunStatus status, double progress,
                        const std::string& error) {
  std::lock_guard lock(mu_);
  auto& h = handles_[run_id];
  if (finished(h.status)) return;
  if (status != RunStatus::failed && rank(status) < rank(h.status)) return;
  h.status = status;
  h.progress = std::max(h.progress, progress);
  if (!error.empty()) h.error = error;
  try {
    save_handle(h);
  } catch (const std::exception&) {
    // The in-memory handle stays authoritative while the process lives.
  }
}

void RunService::worker() {
  while (true) {
    Job job;
    {
      std::unique_lock lock(mu_);
      work_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      job = std::move(queue_.front());
      queue_.pop_front();
      ++active_;
    }
    RunOptions ro;
    ro.clock = opts_.clock;
    ro.runs_dir = opts_.runs_dir;
    ro.progress = [&](RunStatus s, double f) {
      if (s != RunStatus::done && s != RunStatus::failed) update(job.run_id, s, f);
    };
    try {
      run_procut(parse_template(job.template_text), job.task, job.config, *gw_, ro);
      update(job.run_id, RunStatus::done, 1.0);
    } catch (const std::exception& e) {
      update(job.run_id, RunStatus::failed, 1.0, e.what());
    }
    {
      std::lock_guard lock(mu_);
      --active_;
    }
    idle_cv_.notify_all();
  }
}

void RunService::wait_idle() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [&] { return queue_.empty() && active_ == 0; });
}

void RunService::install(httplib::Server& server) {
  const std::string origin = opts_.cors_origin;
  server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto parse_body = [](const httplib::Request& req, json& out) {
    try {
      out = json::parse(req.body);
      return true;
    } catch (const json::exception&) {
      return false;
    }
  };

  server.Post("/api/runs", [this, send, parse_body](const httplib::Request& req, httplib::Response& res) {
    json body;
    if (!parse_body(req, body)) return send(res, error_response(400, "body is not valid JSON"));
    send(res, submit(body));
  });
  server.Get(R"(/api/runs/([A-Za-z0-9]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle(req.matches[1]));
  });
  server.Get(R"(/api/runs/([A-Za-z0-9]+)/report)",
             [this, send](const httplib::Request& req, httplib::Response& res) {
               send(res, report(req.matches[1]));
             });
  server.Post("/api/segment", [this, send, parse_body](const httplib::Request& req, httplib::Response& res) {
    json body;
    if (!parse_body(req, body)) return send(res, error_response(400, "body is not valid JSON"));
    send(res, segment(body));
  });
  server.Get("/api/schema", [send](const httplib::Request&, httplib::Response& res) {
    send(res, ApiResponse{200, schema()});
  });
}

std::pair<std::string, int> parse_listen_address(const std::string& listen) {
  std::string host = "127.0.0.1";
  std::string port = listen;
  if (const auto colon = listen.rfind(':'); colon != std::string::npos) {
    if (colon > 0) host = listen.substr(0, colon);
    port = listen.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const int p = std::stoi(port, &used);
    if (used == port.size() && p >= 0 && p <= 65535) return {host, p};
  } catch (const std::exception&) {
  }
  throw Error(Errc::invalid_argument, "invalid listen address '" + listen + "'");
}

}  // namespace procut

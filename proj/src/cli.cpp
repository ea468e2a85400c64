#include "procut/cli.hpp"

#include <httplib.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "procut/error.hpp"
#include "procut/http_backend.hpp"
#include "procut/io.hpp"
#include "procut/mock_oracle.hpp"
#include "procut/pipeline.hpp"
#include "procut/serialize.hpp"
#include "procut/service.hpp"

namespace procut {

using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const GatewayError*>(&e)) return kExitGateway;
  const auto* err = dynamic_cast<const Error*>(&e);
  if (!err) return kExitInput;
  switch (err->code()) {
    case Errc::invalid_argument:
    case Errc::too_many_segments:
      return kExitUsage;
    case Errc::semantic_mismatch:
    case Errc::dimension_mismatch:
    case Errc::degenerate_gold:
    case Errc::all_zero_fit:
      return kExitMismatch;
    case Errc::timeout:
    case Errc::rate_limited:
    case Errc::upstream_unavailable:
    case Errc::malformed_response:
    case Errc::mock_miss:
    case Errc::gateway_unconfigured:
    case Errc::invalid_mask_shape:
    case Errc::invalid_ranking:
    case Errc::placeholder_lost:
      return kExitGateway;
    default:
      return kExitInput;
  }
}

namespace {

struct Options {
  std::string template_path;
  std::string dataset_path;
  std::string config_path;
  std::string mock_path;
  std::string endpoint;
  std::string api_key_env = "PROCUT_API_KEY";
  std::string cache_path;
  std::string output = "human";
  std::string runs_dir = "runs";
  std::string ratios = "0.25,0.5,0.75";
  std::string listen = "127.0.0.1:8080";
  std::size_t max_concurrent_runs = 2;
  std::vector<std::size_t> pins;
  std::vector<std::string> ndcg_files;

  // Config overrides; only the ones given on the command line are applied.
  double ratio = 0.5;
  std::string estimator;
  std::string strategy;
  std::string marker;
  std::string metric;
  std::string model;
  std::size_t max_units = 8;
  std::uint64_t seed = 0;
  std::size_t parallelism = 10;
  std::size_t t = 2;
  std::size_t k = 0;
  std::size_t permutations = 0;
  std::size_t n_train = 20;
};

class Command {
 public:
  Command(CLI::App& app, Options& o, std::ostream& out, std::ostream& err)
      : app_(app), o_(o), out_(out), err_(err) {}

  CompressionConfig config() const {
    CompressionConfig cfg;
    if (!o_.config_path.empty()) {
      const auto text = read_text_file(o_.config_path);
      json j;
      try {
        j = json::parse(text);
      } catch (const json::exception& e) {
        throw Error(Errc::io_error, o_.config_path + ": " + e.what());
      }
      cfg = config_from_json(j);
    }
    json overrides = json::object();
    auto given = [&](const char* flag) {
      const auto* sub = app_.get_subcommands().empty() ? &app_ : app_.get_subcommands().front();
      const auto* opt = sub->get_option_no_throw(flag);
      return opt != nullptr && opt->count() > 0;
    };
    if (given("--ratio")) overrides["ratio"] = o_.ratio;
    if (given("--estimator")) overrides["estimator"] = o_.estimator;
    if (given("--strategy")) overrides["strategy"] = o_.strategy;
    if (given("--marker")) overrides["marker"] = o_.marker;
    if (given("--max-units")) overrides["max_units"] = o_.max_units;
    if (given("--metric")) overrides["metric"] = o_.metric;
    if (given("--model")) overrides["model"] = o_.model;
    if (given("--seed")) overrides["seed"] = o_.seed;
    if (given("--parallelism")) overrides["parallelism"] = o_.parallelism;
    if (given("--num-masks")) overrides["t"] = o_.t;
    if (given("--keep-units")) overrides["k"] = o_.k;
    if (given("--permutations")) overrides["permutations"] = o_.permutations;
    if (given("--n-train")) overrides["n_train"] = o_.n_train;
    if (given("--pin")) overrides["pinned"] = o_.pins;
    return config_from_json(overrides, cfg);
  }

  /// Mock runs use a fixed clock so their output is byte-reproducible.
  bool deterministic() const { return !o_.mock_path.empty(); }

  std::shared_ptr<Gateway> gateway(const CompressionConfig& cfg) const {
    std::shared_ptr<CompletionBackend> backend;
    if (!o_.mock_path.empty()) {
      backend = load_mock_oracle(o_.mock_path);
    } else if (!o_.endpoint.empty()) {
      backend = std::make_shared<HttpBackend>(HttpBackendConfig{o_.endpoint, o_.api_key_env});
    }
    auto cache = o_.cache_path.empty() ? std::make_shared<ResponseCache>()
                                       : std::make_shared<ResponseCache>(o_.cache_path);
    GatewayOptions go;
    go.parallelism = cfg.parallelism;
    if (deterministic()) go.clock = fixed_clock(0);
    return std::make_shared<Gateway>(backend, cache, go);
  }

  PromptTemplate load_template() const { return parse_template(read_text_file(o_.template_path)); }

  EvalTask load_task(const CompressionConfig& cfg) const {
    if (o_.dataset_path.empty()) throw Error(Errc::invalid_argument, "--dataset is required");
    return make_task(load_dataset(o_.dataset_path), cfg.metric, cfg.splits);
  }

  RunOptions run_options() const {
    RunOptions ro;
    ro.runs_dir = o_.runs_dir;
    if (deterministic()) ro.clock = fixed_clock(0);
    ro.progress = [this](RunStatus s, double f) {
      if (s == RunStatus::done || s == RunStatus::failed) return;
      char buf[16];
      std::snprintf(buf, sizeof buf, "%3.0f%%", f * 100.0);
      err_ << "[" << buf << "] " << to_string(s) << "\n";
    };
    return ro;
  }

  bool json_output() const { return o_.output == "json"; }

  void emit(const json& doc) { out_ << dump_document(doc); }

  int segment() {
    const auto cfg = config();
    const auto tpl = load_template();
    auto gw = gateway(cfg);
    SegmentationConfig sc = cfg.segmentation;
    sc.model = cfg.model;
    std::optional<LlmSegmentation> llm;
    std::optional<SegmentedTemplate> seg;
    if (sc.strategy == SegmentationStrategy::llm) {
      llm = segment_llm_detailed(tpl, sc, *gw);
      seg = llm->segmentation;
    } else {
      seg = procut::segment(tpl, sc, gw.get());
    }
    if (json_output()) {
      auto doc = to_json(*seg);
      if (llm) {
        doc["fell_back"] = llm->fell_back;
        doc["attempts"] = llm->attempts;
      }
      emit(doc);
      return kExitOk;
    }
    out_ << seg->size() << " segments (" << to_string(seg->strategy()) << ")\n";
    for (const auto& s : seg->segments()) {
      out_ << "#" << s.index << " [" << count_tokens(s.text) << " tokens] " << json(s.text).dump() << "\n";
    }
    if (llm && llm->fell_back) out_ << "model segmentation rejected; fell back to structural\n";
    return kExitOk;
  }

  int attribute() {
    const auto cfg = config();
    const auto tpl = load_template();
    const auto task = load_task(cfg);
    check_task_against_template(task, tpl);
    auto gw = gateway(cfg);
    SegmentationConfig sc = cfg.segmentation;
    sc.model = cfg.model;
    const auto seg = procut::segment(tpl, sc, gw.get());
    const auto attr = procut::attribute(seg, task, cfg, *gw);
    if (json_output()) {
      auto doc = to_json(attr);
      doc["segments"] = seg.texts();
      emit(doc);
      return kExitOk;
    }
    out_ << "estimator " << to_string(attr.estimator) << ", " << attr.mask_evaluations
         << " mask evaluations, " << attr.meta_calls << " meta calls\n";
    for (std::size_t j = 0; j < seg.size(); ++j) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%+.4f", attr.scores[j]);
      out_ << "#" << j << " " << buf << "  " << json(seg[j].text).dump() << "\n";
    }
    return kExitOk;
  }

  int compress() {
    const auto cfg = config();
    const auto tpl = load_template();
    const auto task = load_task(cfg);
    auto gw = gateway(cfg);
    const auto report = run_procut(tpl, task, cfg, *gw, run_options());
    const auto path = (std::filesystem::path(o_.runs_dir) / (report.run_id + ".json")).string();
    if (json_output()) {
      emit({{"report_path", path}, {"report", to_json(report)}});
      return kExitOk;
    }
    out_ << "report: " << path << "\n";
    out_ << "kept " << report.k << " of " << report.segments.size() << " segments: "
         << report.kept.to_string() << "\n";
    char buf[160];
    const double reduction =
        report.tokens_before ? 100.0 * (1.0 - static_cast<double>(report.tokens_after) /
                                                  static_cast<double>(report.tokens_before))
                             : 0.0;
    std::snprintf(buf, sizeof buf, "tokens: %zu -> %zu (%.1f%% fewer)\nscore (%s, test): %.4f -> %.4f\n",
                  report.tokens_before, report.tokens_after, reduction,
                  std::string(to_string(report.metric)).c_str(), report.score_before, report.score_after);
    out_ << buf;
    out_ << "calls: " << report.ledger.total_calls << " upstream, " << report.ledger.cache_hits
         << " cached\n";
    return kExitOk;
  }

  int sweep() {
    const auto cfg = config();
    const auto tpl = load_template();
    const auto task = load_task(cfg);
    std::vector<double> ratios;
    std::stringstream in(o_.ratios);
    for (std::string item; std::getline(in, item, ',');) {
      try {
        std::size_t used = 0;
        ratios.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw Error(Errc::invalid_argument, "--ratios: '" + item + "' is not a number");
      }
    }
    auto gw = gateway(cfg);
    const auto curve = procut::sweep(tpl, task, cfg, ratios, *gw, run_options());
    if (json_output()) {
      emit(to_json(curve));
      return kExitOk;
    }
    char buf[128];
    std::snprintf(buf, sizeof buf, "full template: %zu tokens, score %.4f\n", curve.tokens_before,
                  curve.score_before);
    out_ << buf << "ratio    k  tokens  reduction  score\n";
    for (const auto& p : curve.points) {
      std::snprintf(buf, sizeof buf, "%5.2f  %3zu  %6zu  %8.1f%%  %.4f\n", p.ratio, p.k, p.tokens,
                    100.0 * p.token_reduction, p.test_score);
      out_ << buf;
    }
    return kExitOk;
  }

  int ndcg() {
    auto load = [](const std::string& path) {
      try {
        return attribution_from_json(json::parse(read_text_file(path)));
      } catch (const json::exception& e) {
        throw Error(Errc::io_error, path + ": " + e.what());
      } catch (const Error& e) {
        if (e.code() == Errc::invalid_argument) throw Error(Errc::io_error, path + ": " + e.what());
        throw;
      }
    };
    const auto estimated = load(o_.ndcg_files.at(0));
    const auto gold = load(o_.ndcg_files.at(1));
    const double value = procut::ndcg(estimated, gold);
    if (json_output()) {
      emit({{"ndcg", value}, {"m", gold.scores.size()}});
    } else {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f\n", value);
      out_ << buf;
    }
    return kExitOk;
  }

  int serve() {
    const auto cfg = config();
    auto gw = gateway(cfg);
    ServiceOptions so;
    so.runs_dir = o_.runs_dir;
    so.max_concurrent_runs = o_.max_concurrent_runs;
    RunService service(gw, so);
    httplib::Server server;
    service.install(server);
    const auto [host, port] = parse_listen_address(o_.listen);
    err_ << "listening on " << host << ":" << port << "\n";
    if (!server.listen(host, port)) {
      throw Error(Errc::io_error, "cannot listen on " + o_.listen);
    }
    return kExitOk;
  }

 private:
  CLI::App& app_;
  Options& o_;
  std::ostream& out_;
  std::ostream& err_;
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Prompt template compression by segment attribution", "procut"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "procut 1.0.0");

  const std::vector<std::string> estimators{"shap", "shap_exact", "shap_mc", "shap-mc", "loo",
                                            "lasso", "greedy", "llm-ranker", "llm_ranker", "random"};
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file (flags override it)");
    sub->add_option("--mock", o.mock_path, "mock oracle JSON instead of a live endpoint");
    sub->add_option("--endpoint", o.endpoint, "chat-completions base URL");
    sub->add_option("--api-key-env", o.api_key_env, "environment variable holding the API token");
    sub->add_option("--cache", o.cache_path, "persistent response cache (JSON lines)");
    sub->add_option("--model", o.model, "model name");
    sub->add_option("--parallelism", o.parallelism, "requests in flight")->check(CLI::PositiveNumber);
    sub->add_option("--output", o.output, "output format")->check(CLI::IsMember({"human", "json"}));
  };
  auto add_segmentation = [&](CLI::App* sub) {
    sub->add_option("--strategy", o.strategy, "segmentation strategy")
        ->check(CLI::IsMember({"predefined", "structural", "llm"}));
    sub->add_option("--max-units", o.max_units, "maximum number of segments")->check(CLI::PositiveNumber);
    sub->add_option("--marker", o.marker, "segment marker line (predefined strategy)");
  };
  auto add_task = [&](CLI::App* sub) {
    sub->add_option("-d,--dataset", o.dataset_path, "dataset (JSON lines)")->required();
    sub->add_option("--metric", o.metric, "task metric")
        ->check(CLI::IsMember({"exact_match", "em", "token_f1", "f1"}));
    sub->add_option("--n-train", o.n_train, "unlabeled examples placed in train")->check(CLI::PositiveNumber);
    sub->add_option("--estimator", o.estimator, "attribution estimator")->check(CLI::IsMember(estimators));
    sub->add_option("--seed", o.seed, "seed for sampling estimators");
    sub->add_option("--num-masks", o.t, "llm-ranker candidate masks (also --t)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--keep-units", o.k, "llm-ranker units to keep (also --k)");
    sub->add_option("--permutations", o.permutations, "shap_mc permutations");
    sub->add_option("--pin", o.pins, "segment index that is never pruned (repeatable)");
    sub->add_option("--runs-dir", o.runs_dir, "directory for run reports");
  };

  auto* seg = app.add_subcommand("segment", "split a template into segments");
  seg->add_option("-t,--template", o.template_path, "template file")->required();
  add_common(seg);
  add_segmentation(seg);

  auto* attr = app.add_subcommand("attribute", "score every segment");
  attr->add_option("-t,--template", o.template_path, "template file")->required();
  add_common(attr);
  add_segmentation(attr);
  add_task(attr);
  attr->add_option("--ratio", o.ratio, "ratio used to derive the ranker k")->check(CLI::Range(0.0, 1.0));

  auto* comp = app.add_subcommand("compress", "segment, attribute, prune and report");
  comp->add_option("-t,--template", o.template_path, "template file")->required();
  add_common(comp);
  add_segmentation(comp);
  add_task(comp);
  comp->add_option("--ratio", o.ratio, "fraction of segments kept")->check(CLI::Range(0.0, 1.0));

  auto* sw = app.add_subcommand("sweep", "token/score trade-off over several ratios");
  sw->add_option("-t,--template", o.template_path, "template file")->required();
  add_common(sw);
  add_segmentation(sw);
  add_task(sw);
  sw->add_option("--ratios", o.ratios, "comma-separated ratios");

  auto* nd = app.add_subcommand("ndcg", "NDCG of an attribution against a gold attribution");
  nd->add_option("files", o.ndcg_files, "estimated.json gold.json")->required()->expected(2);
  nd->add_option("--output", o.output, "output format")->check(CLI::IsMember({"human", "json"}));

  auto* sv = app.add_subcommand("serve", "HTTP API for the companion UI");
  add_common(sv);
  sv->add_option("--listen", o.listen, "host:port");
  sv->add_option("--runs-dir", o.runs_dir, "directory for run reports and handles");
  sv->add_option("--max-concurrent-runs", o.max_concurrent_runs, "pipelines executing at once")
      ->check(CLI::PositiveNumber);

  // `--t` and `--k` would collide with the `-t` short flag inside CLI11.
  std::vector<std::string> reversed;
  for (auto it = args.rbegin(); it != args.rend(); ++it) {
    std::string a = *it;
    if (a == "--t" || a.starts_with("--t=")) a = "--num-masks" + a.substr(3);
    if (a == "--k" || a.starts_with("--k=")) a = "--keep-units" + a.substr(3);
    reversed.push_back(std::move(a));
  }
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Command cmd(app, o, out, err);
  try {
    if (seg->parsed()) return cmd.segment();
    if (attr->parsed()) return cmd.attribute();
    if (comp->parsed()) return cmd.compress();
    if (sw->parsed()) return cmd.sweep();
    if (nd->parsed()) return cmd.ndcg();
    if (sv->parsed()) return cmd.serve();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitUsage;
}

}  // namespace procut

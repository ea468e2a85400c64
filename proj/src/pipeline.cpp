#include "procut/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "procut/error.hpp"
#include "procut/prompt_resources.hpp"
#include "procut/serialize.hpp"

namespace procut {

using nlohmann::json;

void validate(const CompressionConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(Errc::invalid_argument, msg); };
  if (!(cfg.ratio >= 0.0 && cfg.ratio <= 1.0)) fail("ratio must lie in [0, 1]");
  if (cfg.segmentation.max_units < 1) fail("max_units must be >= 1");
  if (cfg.segmentation.strategy == SegmentationStrategy::predefined && cfg.segmentation.marker.empty()) {
    fail("marker must be non-empty");
  }
  if (cfg.segmentation.retry_limit < 0) fail("segmentation_retries must be >= 0");
  if (cfg.ranker_t < 1) fail("t must be >= 1");
  if (cfg.parallelism < 1) fail("parallelism must be >= 1");
  if (!(cfg.temperature >= 0.0)) fail("temperature must be >= 0");
  if (cfg.max_output_tokens < 1) fail("max_output_tokens must be >= 1");
  if (cfg.splits.n_train < 1) fail("n_train must be >= 1");
  if (cfg.model.empty()) fail("model must be non-empty");
}

namespace {

enum class Kind { number, integer, string, index_list };

struct Key {
  const char* name;
  Kind kind;
  const char* help;
};

constexpr Key kConfigKeys[] = {
    {"ratio", Kind::number, "fraction of segments kept, in [0, 1]"},
    {"estimator", Kind::string, "shap | shap_mc | loo | lasso | greedy | llm-ranker | random"},
    {"strategy", Kind::string, "predefined | structural | llm"},
    {"max_units", Kind::integer, "upper bound on the number of segments"},
    {"marker", Kind::string, "segment marker line for the predefined strategy"},
    {"segmentation_retries", Kind::integer, "extra LLM segmentation attempts before fallback"},
    {"pinned", Kind::index_list, "segment indices that are never pruned"},
    {"seed", Kind::integer, "seed for sampling estimators"},
    {"permutations", Kind::integer, "shap_mc permutations (0: 200 * M)"},
    {"lasso_masks", Kind::integer, "lasso sampled masks (0: 8 * M)"},
    {"t", Kind::integer, "llm-ranker candidate masks"},
    {"k", Kind::integer, "llm-ranker units to keep (0: the pruning k)"},
    {"metric", Kind::string, "exact_match | token_f1"},
    {"n_train", Kind::integer, "unlabeled dataset lines placed in train"},
    {"model", Kind::string, "model name sent upstream"},
    {"temperature", Kind::number, "sampling temperature"},
    {"max_output_tokens", Kind::integer, "completion token limit"},
    {"parallelism", Kind::integer, "requests in flight"},
    {"answer_open", Kind::string, "opening answer tag"},
    {"answer_close", Kind::string, "closing answer tag"},
};

const Key* find_key(const std::string& name) {
  for (const auto& k : kConfigKeys) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

}  // namespace

CompressionConfig config_from_json(const json& j, const CompressionConfig& base) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, "config must be a JSON object");
  CompressionConfig cfg = base;
  for (const auto& [name, value] : j.items()) {
    const Key* key = find_key(name);
    if (!key) throw Error(Errc::invalid_argument, "unknown config key '" + name + "'");
    const bool ok = key->kind == Kind::number    ? value.is_number()
                    : key->kind == Kind::integer ? value.is_number_unsigned() ||
                                                       (value.is_number_integer() && value.get<long long>() >= 0)
                    : key->kind == Kind::string  ? value.is_string()
                                                 : value.is_array();
    if (!ok) throw Error(Errc::invalid_argument, "config key '" + name + "' has the wrong type");
  }
  auto u = [&](const char* name, auto& dst) {
    if (j.contains(name)) dst = j[name].get<std::remove_reference_t<decltype(dst)>>();
  };
  try {
    u("ratio", cfg.ratio);
    if (j.contains("estimator")) cfg.estimator = estimator_from_string(j["estimator"].get<std::string>());
    if (j.contains("strategy")) {
      cfg.segmentation.strategy = segmentation_strategy_from_string(j["strategy"].get<std::string>());
    }
    u("max_units", cfg.segmentation.max_units);
    u("marker", cfg.segmentation.marker);
    u("segmentation_retries", cfg.segmentation.retry_limit);
    if (j.contains("pinned")) {
      cfg.pinned.clear();
      for (const auto& p : j["pinned"]) {
        if (!p.is_number_integer() || p.get<long long>() < 0) {
          throw Error(Errc::invalid_argument, "pinned entries must be non-negative integers");
        }
        cfg.pinned.insert(p.get<std::size_t>());
      }
    }
    u("seed", cfg.seed);
    u("permutations", cfg.permutations);
    u("lasso_masks", cfg.lasso_masks);
    u("t", cfg.ranker_t);
    u("k", cfg.ranker_k);
    if (j.contains("metric")) cfg.metric = metric_from_string(j["metric"].get<std::string>());
    u("n_train", cfg.splits.n_train);
    u("model", cfg.model);
    u("temperature", cfg.temperature);
    u("max_output_tokens", cfg.max_output_tokens);
    u("parallelism", cfg.parallelism);
    u("answer_open", cfg.tags.open);
    u("answer_close", cfg.tags.close);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("config: ") + e.what());
  }
  cfg.segmentation.model = cfg.model;
  validate(cfg);
  return cfg;
}

json to_json(const CompressionConfig& cfg) {
  return {{"ratio", cfg.ratio},
          {"estimator", to_string(cfg.estimator)},
          {"strategy", to_string(cfg.segmentation.strategy)},
          {"max_units", cfg.segmentation.max_units},
          {"marker", cfg.segmentation.marker},
          {"segmentation_retries", cfg.segmentation.retry_limit},
          {"pinned", cfg.pinned},
          {"seed", cfg.seed},
          {"permutations", cfg.permutations},
          {"lasso_masks", cfg.lasso_masks},
          {"t", cfg.ranker_t},
          {"k", cfg.ranker_k},
          {"metric", to_string(cfg.metric)},
          {"n_train", cfg.splits.n_train},
          {"model", cfg.model},
          {"temperature", cfg.temperature},
          {"max_output_tokens", cfg.max_output_tokens},
          {"parallelism", cfg.parallelism},
          {"answer_open", cfg.tags.open},
          {"answer_close", cfg.tags.close}};
}

json config_schema() {
  json props = json::object();
  for (const auto& k : kConfigKeys) {
    const char* type = k.kind == Kind::number    ? "number"
                       : k.kind == Kind::integer ? "integer"
                       : k.kind == Kind::string  ? "string"
                                                 : "array";
    props[k.name] = {{"type", type}, {"description", k.help}};
  }
  return {{"type", "object"}, {"additionalProperties", false}, {"properties", props}};
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::queued: return "queued";
    case RunStatus::segmenting: return "segmenting";
    case RunStatus::attributing: return "attributing";
    case RunStatus::pruning: return "pruning";
    case RunStatus::evaluating: return "evaluating";
    case RunStatus::done: return "done";
    case RunStatus::failed: return "failed";
  }
  return "failed";
}

RunStatus run_status_from_string(std::string_view s) {
  for (auto st : {RunStatus::queued, RunStatus::segmenting, RunStatus::attributing, RunStatus::pruning,
                  RunStatus::evaluating, RunStatus::done, RunStatus::failed}) {
    if (s == to_string(st)) return st;
  }
  throw Error(Errc::invalid_argument, "unknown run status '" + std::string(s) + "'");
}

std::size_t keep_count(std::size_t m, double r, std::size_t pinned) {
  // The small slack keeps products such as 0.7 * 10 from flooring to 6.
  const auto by_ratio = static_cast<std::size_t>(std::floor(r * static_cast<double>(m) + 1e-9));
  return std::min(std::max({by_ratio, pinned, std::size_t{1}}), std::max(m, pinned));
}

PruneResult prune(const SegmentedTemplate& seg, std::span<const double> scores, double r,
                  const std::set<std::size_t>& pinned) {
  const std::size_t m = seg.size();
  if (scores.size() != m) {
    throw Error(Errc::dimension_mismatch, std::to_string(scores.size()) + " scores for " +
                                              std::to_string(m) + " segments");
  }
  if (!(r >= 0.0 && r <= 1.0)) throw Error(Errc::invalid_argument, "ratio must lie in [0, 1]");
  std::set<std::size_t> pins = pinned;
  for (const auto& s : seg.segments()) {
    if (s.pinned) pins.insert(s.index);
  }
  if (!pins.empty() && *pins.rbegin() >= m) {
    throw Error(Errc::invalid_argument, "pinned index " + std::to_string(*pins.rbegin()) +
                                            " out of range for " + std::to_string(m) + " segments");
  }

  const std::size_t k = keep_count(m, r, pins.size());
  Mask kept(m);
  for (auto p : pins) kept.set(p);
  std::size_t n = pins.size();
  for (auto j : rank_by_score(scores)) {
    if (n >= k) break;
    if (kept.test(j)) continue;
    kept.set(j);
    ++n;
  }

  std::vector<std::string> texts;
  std::set<std::size_t> new_pins;
  for (auto j : kept.indices()) {
    if (pins.count(j)) new_pins.insert(texts.size());
    texts.push_back(seg[j].text);
  }
  SegmentedTemplate compressed(parse_template(join_masked(seg, kept)), texts, seg.strategy());
  return {compressed.with_pins(new_pins), kept, k};
}

PruneResult prune(const SegmentedTemplate& seg, const AttributionResult& attr, double r,
                  const std::set<std::size_t>& pinned) {
  return prune(seg, std::span<const double>(attr.scores), r, pinned);
}

std::string make_run_id(const PromptTemplate& tpl, const EvalTask& task,
                        const CompressionConfig& cfg) {
  auto examples = [](const std::vector<EvalExample>& xs) {
    json out = json::array();
    for (const auto& x : xs) out.push_back({{"inputs", x.inputs}, {"reference", x.reference}});
    return out;
  };
  const json content = {{"template", tpl.raw_text()},
                        {"config", to_json(cfg)},
                        {"train", examples(task.train)},
                        {"test", examples(task.test)},
                        {"metric", to_string(task.metric)}};
  return sha256_hex(content.dump()).substr(0, 16);
}

namespace {

EvalOptions eval_options(const CompressionConfig& cfg, Phase phase, CallLedger* ledger) {
  EvalOptions e;
  e.model = cfg.model;
  e.temperature = cfg.temperature;
  e.max_output_tokens = cfg.max_output_tokens;
  e.parallelism = cfg.parallelism;
  e.tags = cfg.tags;
  e.phase = phase;
  e.ledger = ledger;
  return e;
}

void require_split(const EvalTask& task, Split s) {
  if (task.split(s).empty()) {
    throw Error(Errc::invalid_argument,
                "the " + std::string(to_string(s)) + " split of the dataset is empty");
  }
}

SegmentedTemplate segment_with(const PromptTemplate& tpl, const CompressionConfig& cfg, Gateway& gw,
                               CallLedger* ledger, bool* fell_back) {
  SegmentationConfig sc = cfg.segmentation;
  sc.model = cfg.model;
  if (sc.strategy == SegmentationStrategy::llm) {
    auto out = segment_llm_detailed(tpl, sc, gw, ledger);
    if (fell_back) *fell_back = out.fell_back;
    return out.segmentation;
  }
  return segment(tpl, sc, &gw, ledger);
}

void persist(const RunReport& r, const RunOptions& opts) {
  if (!opts.runs_dir) return;
  std::filesystem::create_directories(*opts.runs_dir);
  write_file_atomic(*opts.runs_dir / (r.run_id + ".json"), dump_document(to_json(r)));
}

}  // namespace

AttributionResult attribute(const SegmentedTemplate& seg, const EvalTask& task,
                            const CompressionConfig& cfg, Gateway& gw, CallLedger* ledger) {
  const std::size_t m = seg.size();
  if (cfg.estimator != Estimator::random) require_split(task, Split::train);
  CallLedger local;
  MaskEvaluator v(seg, task, Split::train, gw, eval_options(cfg, Phase::attribution, &local));

  AttributionResult r;
  switch (cfg.estimator) {
    case Estimator::shap_exact:
      if (m <= kExactLimit) {
        r = shap_exact(v);
        break;
      }
      [[fallthrough]];
    case Estimator::shap_mc:
      r = shap_mc(v, cfg.permutations ? cfg.permutations : 200 * m, cfg.seed);
      break;
    case Estimator::loo: r = loo(v); break;
    case Estimator::lasso: {
      LassoOptions lo;
      lo.n_masks = cfg.lasso_masks;
      r = lasso_attribution(v, cfg.seed, lo);
      break;
    }
    case Estimator::greedy: r = greedy_forward(v); break;
    case Estimator::llm_ranker: {
      RankerOptions ro;
      ro.t = cfg.ranker_t;
      ro.k = std::min(cfg.ranker_k ? cfg.ranker_k : keep_count(m, cfg.ratio, cfg.pinned.size()), m);
      ro.model = cfg.model;
      ro.ledger = &local;
      r = llm_ranker(seg, v, gw, ro);
      break;
    }
    case Estimator::random: r = random_attribution(m, cfg.seed); break;
  }
  r.ledger = local.snapshot();
  if (ledger) ledger->merge(r.ledger);
  return r;
}

RunReport run_procut(const PromptTemplate& tpl, const EvalTask& task, const CompressionConfig& cfg,
                     Gateway& gw, const RunOptions& opts) {
  const Clock clock = opts.clock ? opts.clock : system_clock_ms();
  const TokenCounter counter = opts.token_counter ? opts.token_counter : default_token_counter();
  auto progress = [&](RunStatus s, double f) {
    if (opts.progress) opts.progress(s, f);
  };

  RunReport report;
  report.run_id = make_run_id(tpl, task, cfg);
  report.status = RunStatus::queued;
  report.started_at_ms = clock();
  report.config = to_json(cfg);
  report.original_template = tpl.raw_text();
  report.metric = task.metric;
  report.n_train = task.train.size();
  report.n_test = task.test.size();
  report.ratio = cfg.ratio;
  report.pinned = cfg.pinned;
  CallLedger ledger;

  try {
    validate(cfg);
    check_task_against_template(task, tpl);
    require_split(task, Split::test);

    report.status = RunStatus::segmenting;
    progress(report.status, 0.05);
    auto seg = segment_with(tpl, cfg, gw, &ledger, &report.segmentation_fell_back);
    seg = seg.with_pins(cfg.pinned);
    report.segments = seg.texts();
    report.strategy = seg.strategy();

    report.status = RunStatus::attributing;
    progress(report.status, 0.15);
    report.attribution = attribute(seg, task, cfg, gw, &ledger);

    report.status = RunStatus::pruning;
    progress(report.status, 0.8);
    const auto pruned = prune(seg, report.attribution, cfg.ratio, cfg.pinned);
    report.kept = pruned.kept;
    report.k = pruned.k;
    report.compressed_template = pruned.compressed.source().raw_text();

    report.status = RunStatus::evaluating;
    progress(report.status, 0.85);
    const std::vector<Mask> masks{Mask(seg.size(), true), pruned.kept};
    const auto scores = evaluate_masks(seg, masks, task, Split::test, gw,
                                       eval_options(cfg, Phase::evaluation, &ledger));
    report.score_before = scores[0].mean_score;
    report.score_after = scores[1].mean_score;
    report.tokens_before = counter(report.original_template);
    report.tokens_after = counter(report.compressed_template);

    report.status = RunStatus::done;
    report.ledger = ledger.snapshot();
    report.finished_at_ms = clock();
    persist(report, opts);
    progress(report.status, 1.0);
    return report;
  } catch (const std::exception& e) {
    report.status = RunStatus::failed;
    report.error = e.what();
    report.ledger = ledger.snapshot();
    report.finished_at_ms = clock();
    try {
      persist(report, opts);
    } catch (const std::exception&) {
      // The original failure is the one worth reporting.
    }
    progress(report.status, 1.0);
    throw;
  }
}

PromptTemplate vanilla_llm_compress(const PromptTemplate& tpl, double r, Gateway& gw,
                                    const VanillaOptions& opts) {
  if (!(r >= 0.0 && r <= 1.0)) throw Error(Errc::invalid_argument, "ratio must lie in [0, 1]");
  if (r >= 1.0) return tpl;
  const TokenCounter counter = opts.token_counter ? opts.token_counter : default_token_counter();
  const auto target = static_cast<std::size_t>(
      std::llround(r * static_cast<double>(counter(tpl.raw_text()))));

  CompletionRequest req;
  req.model = opts.model;
  req.prompt = substitute(prompts::vanilla_compress,
                          {{"current_prompt", tpl.raw_text()},
                           {"ratio_percent", std::to_string(std::llround(r * 100.0))},
                           {"target_tokens", std::to_string(target)}});

  std::string last_problem;
  const int attempts = 1 + std::max(opts.retry_limit, 0);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    const auto reply =
        gw.complete(req, CallContext{Phase::segmentation, opts.ledger,
                                     attempt == 0 ? CacheMode::use : CacheMode::refresh});
    std::string body = extract_answer(reply, AnswerTags{"<template>", "</template>"});
    try {
      auto out = parse_template(body);
      std::vector<std::string> lost;
      for (const auto& name : tpl.placeholders()) {
        if (!out.has_placeholder(name)) lost.push_back(name);
      }
      if (lost.empty()) return out;
      last_problem = "placeholder {" + lost.front() + "} was dropped";
    } catch (const Error& e) {
      last_problem = e.what();
    }
  }
  throw Error(Errc::placeholder_lost, last_problem + " after " + std::to_string(attempts) + " attempts");
}

TradeoffCurve sweep(const PromptTemplate& tpl, const EvalTask& task, const CompressionConfig& cfg,
                    std::vector<double> ratios, Gateway& gw, const RunOptions& opts) {
  if (ratios.empty()) throw Error(Errc::invalid_argument, "no ratios given");
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(Errc::invalid_argument, "ratios must lie in [0, 1]");
  }
  std::sort(ratios.begin(), ratios.end());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
  validate(cfg);
  check_task_against_template(task, tpl);
  require_split(task, Split::test);
  const TokenCounter counter = opts.token_counter ? opts.token_counter : default_token_counter();

  CallLedger ledger;
  auto seg = segment_with(tpl, cfg, gw, &ledger, nullptr).with_pins(cfg.pinned);
  TradeoffCurve curve;
  curve.attribution = attribute(seg, task, cfg, gw, &ledger);
  curve.tokens_before = counter(tpl.raw_text());

  std::vector<Mask> masks{Mask(seg.size(), true)};
  for (double r : ratios) {
    const auto pruned = prune(seg, curve.attribution, r, cfg.pinned);
    TradeoffPoint p;
    p.ratio = r;
    p.k = pruned.k;
    p.kept = pruned.kept;
    p.tokens = counter(pruned.compressed.source().raw_text());
    p.token_reduction =
        curve.tokens_before == 0
            ? 0.0
            : 1.0 - static_cast<double>(p.tokens) / static_cast<double>(curve.tokens_before);
    curve.points.push_back(std::move(p));
    masks.push_back(pruned.kept);
  }
  const auto scores = evaluate_masks(seg, masks, task, Split::test, gw,
                                     eval_options(cfg, Phase::evaluation, &ledger));
  curve.score_before = scores[0].mean_score;
  for (std::size_t i = 0; i < curve.points.size(); ++i) curve.points[i].test_score = scores[i + 1].mean_score;
  return curve;
}

std::vector<RunReport> compress_in_loop(const OptimizerStep& step, const PromptTemplate& tpl,
                                        const EvalTask& task, const CompressionConfig& cfg,
                                        std::size_t iterations, Gateway& gw,
                                        const RunOptions& opts) {
  std::vector<RunReport> trajectory;
  PromptTemplate current = tpl;
  for (std::size_t round = 0; round < iterations; ++round) {
    const auto grown = step(current, round);
    trajectory.push_back(run_procut(grown, task, cfg, gw, opts));
    current = parse_template(trajectory.back().compressed_template);
  }
  return trajectory;
}

}  // namespace procut

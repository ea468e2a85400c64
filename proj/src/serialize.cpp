#include "procut/serialize.hpp"

#include "procut/error.hpp"

namespace procut {

using nlohmann::json;

namespace {

Mask mask_from_json(const json& j) {
  if (j.is_string()) return Mask::from_string(j.get<std::string>());
  return Mask::from_bits(j.get<std::vector<int>>());
}

json mask_list(const std::vector<Mask>& masks) {
  json out = json::array();
  for (const auto& m : masks) out.push_back(m.to_vector());
  return out;
}

}  // namespace

json to_json(const LedgerSnapshot& s) {
  json phases = json::object();
  for (auto p : {Phase::segmentation, Phase::attribution, Phase::evaluation}) {
    phases[std::string(to_string(p))] = {{"calls", s.phase(p).calls},
                                         {"cache_hits", s.phase(p).cache_hits}};
  }
  return {{"total_calls", s.total_calls}, {"cache_hits", s.cache_hits},
          {"lookups", s.lookups},         {"retries", s.retries},
          {"wall_time_ms", s.wall_time_ms}, {"phases", phases}};
}

LedgerSnapshot ledger_from_json(const json& j) {
  LedgerSnapshot s;
  s.total_calls = j.value("total_calls", std::uint64_t{0});
  s.cache_hits = j.value("cache_hits", std::uint64_t{0});
  s.lookups = j.value("lookups", std::uint64_t{0});
  s.retries = j.value("retries", std::uint64_t{0});
  s.wall_time_ms = j.value("wall_time_ms", std::int64_t{0});
  if (j.contains("phases")) {
    for (auto p : {Phase::segmentation, Phase::attribution, Phase::evaluation}) {
      const auto name = std::string(to_string(p));
      if (!j["phases"].contains(name)) continue;
      auto& dst = s.phases[static_cast<std::size_t>(p)];
      dst.calls = j["phases"][name].value("calls", std::uint64_t{0});
      dst.cache_hits = j["phases"][name].value("cache_hits", std::uint64_t{0});
    }
  }
  return s;
}

json to_json(const SegmentedTemplate& seg, const TokenCounter& counter) {
  json segments = json::array();
  for (const auto& s : seg.segments()) {
    segments.push_back({{"index", s.index},
                        {"text", s.text},
                        {"tokens", counter(s.text)},
                        {"pinned", s.pinned},
                        {"placeholders", s.placeholders}});
  }
  return {{"template", seg.source().raw_text()},
          {"strategy", to_string(seg.strategy())},
          {"segments", segments}};
}

json to_json(const AttributionResult& r) {
  json probes = json::array();
  for (const auto& p : r.probe_log) probes.push_back({{"mask", p.mask.to_vector()}, {"score", p.value}});
  json out = {{"estimator", to_string(r.estimator)},
              {"scores", r.scores},
              {"rng_seed", r.rng_seed},
              {"mask_evaluations", r.mask_evaluations},
              {"meta_calls", r.meta_calls},
              {"ledger", to_json(r.ledger)},
              {"probe_log", probes},
              {"ranker", nullptr},
              {"lasso", nullptr}};
  if (r.ranker) {
    out["ranker"] = {{"t", r.ranker->t},
                     {"k", r.ranker->k},
                     {"candidate_masks", mask_list(r.ranker->candidate_masks)},
                     {"candidate_scores", r.ranker->candidate_scores},
                     {"ranking", r.ranker->ranking},
                     {"rationale", r.ranker->rationale}};
  }
  if (r.lasso) {
    out["lasso"] = {{"lambda", r.lasso->lambda},
                    {"coefficients", r.lasso->coefficients},
                    {"intercept", r.lasso->intercept},
                    {"n_masks", r.lasso->n_masks},
                    {"converged", r.lasso->converged},
                    {"iterations", r.lasso->iterations}};
  }
  return out;
}

AttributionResult attribution_from_json(const json& j) {
  try {
    AttributionResult r;
    r.scores = j.at("scores").get<std::vector<double>>();
    if (j.contains("estimator")) r.estimator = estimator_from_string(j["estimator"].get<std::string>());
    r.rng_seed = j.value("rng_seed", std::uint64_t{0});
    r.mask_evaluations = j.value("mask_evaluations", std::size_t{0});
    r.meta_calls = j.value("meta_calls", std::size_t{0});
    if (j.contains("ledger")) r.ledger = ledger_from_json(j["ledger"]);
    if (j.contains("probe_log")) {
      for (const auto& p : j["probe_log"]) {
        r.probe_log.push_back({mask_from_json(p.at("mask")), p.at("score").get<double>()});
      }
    }
    if (j.contains("ranker") && j["ranker"].is_object()) {
      const auto& s = j["ranker"];
      RankerState st;
      st.t = s.value("t", std::size_t{0});
      st.k = s.value("k", std::size_t{0});
      for (const auto& m : s.value("candidate_masks", json::array())) {
        st.candidate_masks.push_back(mask_from_json(m));
      }
      st.candidate_scores = s.value("candidate_scores", std::vector<double>{});
      st.ranking = s.value("ranking", std::vector<std::size_t>{});
      st.rationale = s.value("rationale", std::string{});
      r.ranker = std::move(st);
    }
    if (j.contains("lasso") && j["lasso"].is_object()) {
      const auto& s = j["lasso"];
      LassoFit f;
      f.lambda = s.value("lambda", 0.0);
      f.coefficients = s.value("coefficients", std::vector<double>{});
      f.intercept = s.value("intercept", 0.0);
      f.n_masks = s.value("n_masks", std::size_t{0});
      f.converged = s.value("converged", false);
      f.iterations = s.value("iterations", std::size_t{0});
      r.lasso = std::move(f);
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("attribution JSON: ") + e.what());
  }
}

json to_json(const RunReport& r) {
  return {{"run_id", r.run_id},
          {"status", to_string(r.status)},
          {"error", r.error},
          {"original_template", r.original_template},
          {"compressed_template", r.compressed_template},
          {"segments", r.segments},
          {"strategy", to_string(r.strategy)},
          {"segmentation_fell_back", r.segmentation_fell_back},
          {"pinned", r.pinned},
          {"ratio", r.ratio},
          {"k", r.k},
          {"kept", r.kept.to_vector()},
          {"attribution", to_json(r.attribution)},
          {"metric", to_string(r.metric)},
          {"n_train", r.n_train},
          {"n_test", r.n_test},
          {"score_before", r.score_before},
          {"score_after", r.score_after},
          {"tokens_before", r.tokens_before},
          {"tokens_after", r.tokens_after},
          {"ledger", to_json(r.ledger)},
          {"started_at_ms", r.started_at_ms},
          {"finished_at_ms", r.finished_at_ms},
          {"config", r.config}};
}

RunReport run_report_from_json(const json& j) {
  try {
    RunReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.status = run_status_from_string(j.at("status").get<std::string>());
    r.error = j.value("error", std::string{});
    r.original_template = j.value("original_template", std::string{});
    r.compressed_template = j.value("compressed_template", std::string{});
    r.segments = j.value("segments", std::vector<std::string>{});
    r.strategy = segmentation_strategy_from_string(j.value("strategy", std::string("structural")));
    r.segmentation_fell_back = j.value("segmentation_fell_back", false);
    r.pinned = j.value("pinned", std::set<std::size_t>{});
    r.ratio = j.value("ratio", 0.0);
    r.k = j.value("k", std::size_t{0});
    r.kept = Mask::from_bits(j.value("kept", std::vector<int>{}));
    if (j.contains("attribution")) r.attribution = attribution_from_json(j["attribution"]);
    r.metric = metric_from_string(j.value("metric", std::string("exact_match")));
    r.n_train = j.value("n_train", std::size_t{0});
    r.n_test = j.value("n_test", std::size_t{0});
    r.score_before = j.value("score_before", 0.0);
    r.score_after = j.value("score_after", 0.0);
    r.tokens_before = j.value("tokens_before", std::size_t{0});
    r.tokens_after = j.value("tokens_after", std::size_t{0});
    if (j.contains("ledger")) r.ledger = ledger_from_json(j["ledger"]);
    r.started_at_ms = j.value("started_at_ms", std::int64_t{0});
    r.finished_at_ms = j.value("finished_at_ms", std::int64_t{0});
    r.config = j.value("config", json::object());
    return r;
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("run report JSON: ") + e.what());
  }
}

json to_json(const TradeoffCurve& c) {
  json points = json::array();
  for (const auto& p : c.points) {
    points.push_back({{"ratio", p.ratio},
                      {"k", p.k},
                      {"kept", p.kept.to_vector()},
                      {"tokens", p.tokens},
                      {"token_reduction", p.token_reduction},
                      {"test_score", p.test_score}});
  }
  return {{"tokens_before", c.tokens_before},
          {"score_before", c.score_before},
          {"attribution", to_json(c.attribution)},
          {"points", points}};
}

std::string dump_document(const json& j) { return j.dump(2) + "\n"; }

}  // namespace procut

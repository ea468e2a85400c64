#include <doctest.h>

#include <json.hpp>

#include "procut/pipeline.hpp"
#include "procut/rng.hpp"
#include "procut/serialize.hpp"
#include "test_support.hpp"

using namespace procut;
using nlohmann::json;
using testing::SyntheticWorld;

namespace {

CompressionConfig config_for(std::size_t m, double ratio, Estimator e = Estimator::shap_exact) {
  CompressionConfig cfg;
  cfg.ratio = ratio;
  cfg.estimator = e;
  cfg.metric = MetricId::token_f1;
  cfg.segmentation.max_units = m;
  return cfg;
}

SegmentedTemplate four_segments() {
  return SegmentedTemplate(parse_template("A. B. C. D."), {"A. ", "B. ", "C. ", "D."},
                           SegmentationStrategy::structural);
}

RunOptions quiet() {
  RunOptions o;
  o.clock = fixed_clock(0);
  return o;
}

}  // namespace

TEST_CASE("keep count follows the ratio headings") {
  CHECK(keep_count(4, 0.25, 0) == 1);
  CHECK(keep_count(4, 0.5, 0) == 2);
  CHECK(keep_count(4, 0.75, 0) == 3);
  CHECK(keep_count(4, 1.0, 0) == 4);
  CHECK(keep_count(4, 0.1, 0) == 1);
  CHECK(keep_count(10, 0.7, 0) == 7);
  CHECK(keep_count(4, 0.25, 3) == 3);
}

TEST_CASE("prune keeps the top segments in order") {
  const auto seg = four_segments();
  const auto out = prune(seg, std::vector<double>{0.9, 0.1, 0.5, 0.3}, 0.5);
  CHECK(out.kept == Mask::from_bits({1, 0, 1, 0}));
  CHECK(out.k == 2);
  CHECK(out.compressed.texts() == std::vector<std::string>{"A. ", "C. "});

  const auto all = prune(seg, std::vector<double>{0.9, 0.1, 0.5, 0.3}, 1.0);
  CHECK(all.compressed.source().raw_text() == seg.source().raw_text());

  const auto pinned = prune(seg, std::vector<double>{0.9, 0.1, 0.5, 0.3}, 0.25, {1});
  CHECK(pinned.kept == Mask::from_bits({0, 1, 0, 0}));
  const auto ties = prune(seg, std::vector<double>{0.5, 0.5, 0.5, 0.5}, 0.5);
  CHECK(ties.kept == Mask::from_bits({1, 1, 0, 0}));
  CHECK_THROWS_AS(prune(seg, std::vector<double>{1, 2}, 0.5), Error);
}

TEST_CASE("prune invariants on random cases") {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + rng.below(8);
    std::vector<std::string> texts;
    std::string raw;
    for (std::size_t i = 0; i < m; ++i) {
      texts.push_back("S" + std::to_string(i) + ". ");
      raw += texts.back();
    }
    const SegmentedTemplate seg(parse_template(raw), texts, SegmentationStrategy::structural);
    std::vector<double> scores(m);
    for (auto& s : scores) s = rng.uniform() - 0.3;
    std::set<std::size_t> pins;
    for (std::size_t i = 0; i < m; ++i)
      if (rng.bernoulli(0.2)) pins.insert(i);
    const double r = rng.uniform();
    const auto out = prune(seg, scores, r, pins);
    CHECK(out.kept.count() == keep_count(m, r, pins.size()));
    for (auto p : pins) CHECK(out.kept.test(p));
    // Kept segments appear in original order.
    std::string expect;
    for (auto i : out.kept.indices()) expect += texts[i];
    CHECK(out.compressed.source().raw_text() == expect);
    // No dropped unpinned segment outscores a kept unpinned one.
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (out.kept.test(i) && !pins.count(i) && !out.kept.test(j)) CHECK(scores[i] >= scores[j]);
      }
    }
  }
}

TEST_CASE("run_procut matches brute force on an additive oracle") {
  const std::vector<double> w{0.1, 0.4, 0.2, 0.3};
  SyntheticWorld world(4, [&](const Mask& m) { return testing::additive(w, m); });
  Gateway gw(world.oracle);
  const auto report = run_procut(world.tpl, world.task, config_for(4, 0.5), gw, quiet());
  SetFunction v(4, [&](const Mask& m) { return testing::additive(w, m); });
  CHECK(report.kept == brute_force_best(v, 2));
  CHECK(report.kept == Mask::from_bits({0, 1, 0, 1}));
  CHECK(report.k == 2);
  CHECK(report.status == RunStatus::done);
  CHECK(report.score_before == doctest::Approx(1.0));
  CHECK(report.score_after == doctest::Approx(0.7));
  CHECK(report.tokens_after < report.tokens_before);
  CHECK(report.segments.size() == 4);
  CHECK(report.compressed_template == world.units[1] + world.units[3]);
  CHECK(report.n_train == 3);
  CHECK(report.ledger.phase(Phase::attribution).calls > 0);
  // Test and train hold the same examples, so the full mask is answered from the cache.
  CHECK(report.ledger.phase(Phase::evaluation).cache_hits > 0);
}

TEST_CASE("ratio one is the identity") {
  SyntheticWorld world(3, [](const Mask& m) { return 0.2 * static_cast<double>(m.count()); });
  Gateway gw(world.oracle);
  const auto report = run_procut(world.tpl, world.task, config_for(3, 1.0), gw, quiet());
  CHECK(report.score_after == report.score_before);
  CHECK(report.tokens_after == report.tokens_before);
  CHECK(report.compressed_template == world.tpl.raw_text());
}

TEST_CASE("random estimator never beats brute force") {
  // Adversarial: segment 0 alone is worth most but interacts badly.
  auto v = [](const Mask& m) {
    if (m.count() == 1 && m.test(0)) return 0.9;
    return 0.1 * static_cast<double>(m.count());
  };
  SyntheticWorld world(4, v);
  Gateway gw(world.oracle);
  SetFunction sf(4, v);
  const double best = v(brute_force_best(sf, 1));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = config_for(4, 0.25, Estimator::random);
    cfg.seed = seed;
    const auto report = run_procut(world.tpl, world.task, cfg, gw, quiet());
    CHECK(report.status == RunStatus::done);
    CHECK(report.score_after <= best + 1e-12);
  }
}

TEST_CASE("every estimator runs end to end") {
  const std::vector<double> w{0.05, 0.5, 0.15, 0.3};
  for (auto e : {Estimator::shap_exact, Estimator::shap_mc, Estimator::loo, Estimator::lasso,
                 Estimator::greedy, Estimator::llm_ranker, Estimator::random}) {
    CAPTURE(to_string(e));
    SyntheticWorld world(4, [&](const Mask& m) { return testing::additive(w, m); });
    Gateway gw(world.oracle);
    auto cfg = config_for(4, 0.5, e);
    cfg.permutations = 50;
    const auto report = run_procut(world.tpl, world.task, cfg, gw, quiet());
    CHECK(report.attribution.scores.size() == 4);
    CHECK(report.kept.count() == 2);
    if (e == Estimator::llm_ranker) CHECK(report.attribution.meta_calls == 2);
  }
}

TEST_CASE("pins survive compression") {
  SyntheticWorld world(4, [](const Mask& m) { return m.test(3) ? 0.9 : 0.1; });
  Gateway gw(world.oracle);
  auto cfg = config_for(4, 0.25);
  cfg.pinned = {0};
  const auto report = run_procut(world.tpl, world.task, cfg, gw, quiet());
  CHECK(report.kept.test(0));
  CHECK(report.kept.count() == 1);
}

TEST_CASE("progress moves forward through the stages") {
  SyntheticWorld world(3, [](const Mask& m) { return 0.3 * static_cast<double>(m.count()); });
  Gateway gw(world.oracle);
  std::vector<std::pair<RunStatus, double>> seen;
  RunOptions opts = quiet();
  opts.progress = [&](RunStatus s, double f) { seen.emplace_back(s, f); };
  run_procut(world.tpl, world.task, config_for(3, 0.5), gw, opts);
  REQUIRE(seen.size() == 5);
  CHECK(seen.front().first == RunStatus::segmenting);
  CHECK(seen.back().first == RunStatus::done);
  CHECK(seen.back().second == 1.0);
  for (std::size_t i = 1; i < seen.size(); ++i) {
    CHECK(seen[i].second > seen[i - 1].second);
    CHECK(static_cast<int>(seen[i].first) > static_cast<int>(seen[i - 1].first));
  }
}

TEST_CASE("reports are persisted, failures included") {
  testing::TempDir dir;
  SyntheticWorld world(3, [](const Mask& m) { return 0.3 * static_cast<double>(m.count()); });
  Gateway gw(world.oracle);
  RunOptions opts = quiet();
  opts.runs_dir = dir.path();
  const auto report = run_procut(world.tpl, world.task, config_for(3, 0.5), gw, opts);
  const auto saved = json::parse(read_text_file(dir / (report.run_id + ".json")));
  CHECK(saved["status"] == "done");
  CHECK(run_report_from_json(saved).kept == report.kept);

  EvalTask broken = world.task;
  broken.test[0].inputs["stray"] = "x";
  auto cfg = config_for(3, 0.5);
  CHECK_THROWS_AS(run_procut(world.tpl, broken, cfg, gw, opts), Error);
  const auto failed_id = make_run_id(world.tpl, broken, cfg);
  const auto failed = json::parse(read_text_file(dir / (failed_id + ".json")));
  CHECK(failed["status"] == "failed");
  CHECK_FALSE(failed["error"].get<std::string>().empty());
}

TEST_CASE("run ids are content hashes") {
  SyntheticWorld world(3, [](const Mask&) { return 0.5; });
  const auto cfg = config_for(3, 0.5);
  const auto id = make_run_id(world.tpl, world.task, cfg);
  CHECK(id.size() == 16);
  CHECK(id == make_run_id(world.tpl, world.task, cfg));
  auto other = cfg;
  other.seed = 1;
  CHECK(id != make_run_id(world.tpl, world.task, other));
  CHECK(id != make_run_id(parse_template("changed {q}"), world.task, cfg));
}

TEST_CASE("vanilla compression") {
  const auto tpl = parse_template("Please answer the question carefully and in detail: {question}");
  auto oracle = std::make_shared<MockOracle>();
  Gateway gw(oracle);
  CHECK(vanilla_llm_compress(tpl, 1.0, gw) == tpl);
  CHECK(oracle->calls() == 0);

  CHECK_THROWS_AS(vanilla_llm_compress(tpl, 0.5, gw), GatewayError);
  auto capture = std::make_shared<MockOracle>();
  capture->enable_meta();
  Gateway meta_gw(capture);
  const auto compressed = vanilla_llm_compress(tpl, 0.5, meta_gw);
  CHECK(compressed.has_placeholder("question"));

  struct Scripted : CompletionBackend {
    std::string reply;
    std::string complete(const CompletionRequest&) override { return reply; }
  };
  auto good = std::make_shared<Scripted>();
  good->reply = "<template>Answer: {question}</template>";
  Gateway good_gw(good);
  CHECK(vanilla_llm_compress(tpl, 0.5, good_gw).raw_text() == "Answer: {question}");

  auto bad = std::make_shared<Scripted>();
  bad->reply = "<template>Answer briefly.</template>";
  Gateway bad_gw(bad);
  try {
    vanilla_llm_compress(tpl, 0.5, bad_gw);
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::placeholder_lost);
  }
  CHECK(bad_gw.ledger().total_calls == 3);
  CHECK_THROWS_AS(vanilla_llm_compress(tpl, 1.5, bad_gw), Error);
}

TEST_CASE("sweep") {
  const std::vector<double> w{0.1, 0.4, 0.2, 0.3};
  SyntheticWorld world(4, [&](const Mask& m) { return testing::additive(w, m); });
  Gateway gw(world.oracle);
  const auto curve = sweep(world.tpl, world.task, config_for(4, 0.5), {0.75, 0.25, 0.5, 0.5}, gw, quiet());
  REQUIRE(curve.points.size() == 3);
  CHECK(curve.points[0].k == 1);
  CHECK(curve.points[1].k == 2);
  CHECK(curve.points[2].k == 3);
  for (std::size_t i = 1; i < 3; ++i) {
    CHECK(curve.points[i].test_score >= curve.points[i - 1].test_score);
    CHECK(curve.points[i].tokens > curve.points[i - 1].tokens);
  }
  CHECK(curve.points[0].test_score == doctest::Approx(0.4));
  CHECK(curve.score_before == doctest::Approx(1.0));
  CHECK(curve.points[0].token_reduction > 0.5);

  const auto single = sweep(world.tpl, world.task, config_for(4, 0.5), {0.5}, gw, quiet());
  CHECK(single.points.size() == 1);
  CHECK_THROWS_AS(sweep(world.tpl, world.task, config_for(4, 0.5), {}, gw, quiet()), Error);
}

TEST_CASE("compression in the loop") {
  SyntheticWorld world(2, [](const Mask& m) { return m.test(0) ? 0.8 : 0.0; });
  Gateway gw(world.oracle);
  const OptimizerStep identity = [](const PromptTemplate& t, std::size_t) { return t; };
  CHECK(compress_in_loop(identity, world.tpl, world.task, config_for(2, 0.5), 0, gw, quiet()).empty());

  const auto pure = compress_in_loop(identity, world.tpl, world.task, config_for(2, 1.0), 3, gw, quiet());
  REQUIRE(pure.size() == 3);
  for (const auto& r : pure) CHECK(r.compressed_template == world.tpl.raw_text());

  const auto squeezed = compress_in_loop(identity, world.tpl, world.task, config_for(2, 0.5), 2, gw, quiet());
  CHECK(squeezed[0].compressed_template == world.units[0]);
  CHECK(squeezed[1].original_template == world.units[0]);
  CHECK(squeezed[1].score_after == doctest::Approx(0.8));
}

TEST_CASE("config json") {
  auto cfg = config_from_json(json{{"ratio", 0.3}, {"estimator", "loo"}, {"t", 4}, {"pinned", {1, 2}},
                                   {"metric", "token_f1"}, {"strategy", "predefined"}});
  CHECK(cfg.ratio == 0.3);
  CHECK(cfg.estimator == Estimator::loo);
  CHECK(cfg.ranker_t == 4);
  CHECK(cfg.pinned == std::set<std::size_t>{1, 2});
  CHECK(cfg.segmentation.strategy == SegmentationStrategy::predefined);
  const auto back = config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK_THROWS_AS(config_from_json(json{{"bogus", 1}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"ratio", "high"}}), Error);
  CHECK_THROWS_AS(validate(config_from_json(json{{"ratio", 2}})), Error);
  CHECK(config_schema()["properties"]["ratio"]["type"] == "number");
}

TEST_CASE("report json round trip") {
  const std::vector<double> w{0.1, 0.4, 0.2, 0.3};
  SyntheticWorld world(4, [&](const Mask& m) { return testing::additive(w, m); });
  Gateway gw(world.oracle);
  auto cfg = config_for(4, 0.5, Estimator::llm_ranker);
  const auto report = run_procut(world.tpl, world.task, cfg, gw, quiet());
  const auto j = to_json(report);
  CHECK(to_json(run_report_from_json(j)) == j);
  CHECK(j["attribution"]["meta_calls"] == 2);
  CHECK(dump_document(j).back() == '\n');
  const auto seg_json = to_json(four_segments());
  CHECK(seg_json["segments"].size() == 4);
  CHECK(seg_json["segments"][0]["tokens"] == 2);
}

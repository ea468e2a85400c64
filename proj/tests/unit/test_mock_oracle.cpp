#include <doctest.h>

#include <json.hpp>

#include "procut/attribution.hpp"
#include "procut/evaluation.hpp"
#include "procut/mock_oracle.hpp"
#include "procut/pipeline.hpp"
#include "procut/segmentation.hpp"
#include "test_support.hpp"

using namespace procut;
using nlohmann::json;

namespace {

CompletionRequest request(std::string prompt) {
  CompletionRequest r;
  r.prompt = std::move(prompt);
  return r;
}

SegmentedTemplate library_template() {
  return SegmentedTemplate(
      parse_template("You are an expert in {domain}. Think step by step.\n\nQuestion: {question}"),
      {"You are an expert in {domain}. ", "Think step by step.\n\n", "Question: {question}"},
      SegmentationStrategy::structural);
}

}  // namespace

TEST_CASE("scripted replies advance and the last one repeats") {
  MockOracle oracle;
  oracle.script("p", std::vector<std::string>{"a", "b"});
  CHECK(oracle.complete(request("p")) == "a");
  CHECK(oracle.complete(request("p")) == "b");
  CHECK(oracle.complete(request("p")) == "b");
  CHECK(oracle.calls() == 3);
  CHECK_THROWS_AS(oracle.complete(request("q")), GatewayError);
  CHECK(oracle.calls() == 3);
}

TEST_CASE("decode finds the units present in a rendered prompt") {
  const auto seg = library_template();
  MockOracle oracle;
  SyntheticConfig cfg;
  cfg.units = seg.texts();
  cfg.value = [](const Mask&) { return 1.0; };
  oracle.set_synthetic(cfg);
  const EvalExample ex{{{"domain", "chess"}, {"question", "Best opening? Think step by step."}}, ""};
  for (const auto& bits : {"111", "101", "011", "001", "100", "010"}) {
    const auto mask = Mask::from_string(bits);
    CAPTURE(bits);
    CHECK(oracle.decode(render(seg, mask, ex)) == mask);
  }
  // Whitespace differences do not matter.
  CHECK(oracle.decode("You are an expert in math.   Question: why") == Mask::from_string("101"));
  CHECK_FALSE(oracle.decode("Something unrelated").has_value());
}

TEST_CASE("synthetic token_f1 answers hit v exactly") {
  const auto seg = library_template();
  auto oracle = std::make_shared<MockOracle>();
  SyntheticConfig cfg;
  cfg.units = seg.texts();
  cfg.quantum = 40;
  cfg.value = [](const Mask& m) { return 0.025 * static_cast<double>(m.count() * 11 % 40); };
  oracle->set_synthetic(cfg);
  const EvalExample ex{{{"domain", "d"}, {"question", "q"}}, ""};
  for (const auto& bits : {"111", "110", "001"}) {
    const auto mask = Mask::from_string(bits);
    const auto reply = oracle->complete(request(render(seg, mask, ex)));
    const double got = score(MetricId::token_f1, synthetic_reference(40), extract_answer(reply));
    CHECK(got == doctest::Approx(cfg.value(mask)).epsilon(1e-12));
  }
}

TEST_CASE("value descriptions") {
  const auto add = mask_value_from_json(json{{"additive", {0.5, 0.25}}});
  CHECK(add(Mask::from_string("11")) == 0.75);
  const auto table = mask_value_from_json(json{{"table", {{"10", 0.3}}}, {"default", 0.1}});
  CHECK(table(Mask::from_string("10")) == 0.3);
  CHECK(table(Mask::from_string("01")) == 0.1);
  CHECK(mask_value_from_json(json{{"constant", 0.4}})(Mask::from_string("1")) == 0.4);
  CHECK_THROWS_AS(mask_value_from_json(json{{"weird", 1}}), Error);
}

TEST_CASE("oracle from json") {
  testing::TempDir dir;
  const auto path = dir.write("oracle.json", json{
      {"seed", 4},
      {"scripted", {{"hi", "yo"}, {"seq", {"1", "2"}}}},
      {"synthetic", {{"units", {"Alpha. ", "Beta."}}, {"value", {{"additive", {0.5, 0.5}}}}}},
  }.dump());
  auto oracle = load_mock_oracle(path);
  CHECK(oracle->complete(request("hi")) == "yo");
  CHECK(oracle->complete(request("seq")) == "1");
  CHECK(oracle->decode("Alpha. Beta.") == Mask::from_string("11"));
  CHECK_THROWS_AS(load_mock_oracle(dir / "missing.json"), Error);
  CHECK_THROWS_AS(mock_oracle_from_json(json{{"synthetic", {{"units", 3}}}}), Error);
}

TEST_CASE("prompt resource matching") {
  CHECK(match_prompt_resource("Hello {name}, you are {age}.", "Hello Ann, you are 7.") ==
        std::vector<std::string>{"Ann", "7"});
  CHECK_FALSE(match_prompt_resource("Hello {name}.", "Goodbye Ann.").has_value());
  CHECK(match_prompt_resource("{{x}} {v}", "{x} 1") == std::vector<std::string>{"1"});
}

TEST_CASE("meta responders answer the built-in prompts") {
  auto oracle = std::make_shared<MockOracle>(2);
  oracle->enable_meta();
  Gateway gw(oracle);
  const auto seg = library_template();

  const auto units = parse_units_response(gw.complete(request(segmentation_prompt(seg.source(), 3))));
  CHECK(units == structural_units(seg.source().raw_text(), 3));

  const auto [masks, why] = parse_mask_reply(gw.complete(request(mask_request_prompt(seg, 5))), 3, 5);
  REQUIRE(masks.size() == 5);
  CHECK(masks[0] == Mask::from_string("011"));
  CHECK(masks[2] == Mask::from_string("110"));
  for (const auto& m : masks) CHECK_FALSE(m.none());

  const std::vector<Mask> probes{Mask::from_string("011"), Mask::from_string("101"),
                                 Mask::from_string("110")};
  const auto ranking = parse_ranking_reply(
      gw.complete(request(ranking_prompt(seg, probes, std::vector<double>{0.2, 0.9, 0.5}))), 3);
  // Dropping segment 0 hurts most, dropping segment 1 hurts least.
  CHECK(ranking.first == std::vector<std::size_t>{0, 2, 1});

  const auto compressed = vanilla_llm_compress(seg.source(), 0.5, gw);
  CHECK(compressed.placeholders() == seg.source().placeholders());
  CHECK(count_tokens(compressed.raw_text()) < count_tokens(seg.source().raw_text()));
}

TEST_CASE("meta responders are off by default") {
  MockOracle oracle;
  const auto seg = library_template();
  CHECK_THROWS_AS(oracle.complete(request(segmentation_prompt(seg.source(), 3))), GatewayError);
}

TEST_CASE("synthetic reference") {
  CHECK(synthetic_reference(3) == "t0 t1 t2");
}

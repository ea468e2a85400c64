#include <doctest.h>

#include <sstream>

#include "procut/domain.hpp"
#include "procut/error.hpp"
#include "procut/io.hpp"
#include "test_support.hpp"

using namespace procut;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an exception");
  return Errc::io_error;
}

SegmentedTemplate two_segments() {
  return SegmentedTemplate(parse_template("A {q} B"), {"A {q}", " B"}, SegmentationStrategy::predefined);
}

}  // namespace

TEST_CASE("parse_template extracts the placeholder inventory") {
  CHECK(parse_template("Answer: {question}").placeholders() == std::vector<std::string>{"question"});
  CHECK(parse_template("You are an expert in {domain}").placeholders() ==
        std::vector<std::string>{"domain"});
  CHECK(parse_template("No placeholders here.").placeholders().empty());
  CHECK(parse_template("{a} {b} {a}").placeholders() == std::vector<std::string>{"a", "b"});
}

TEST_CASE("placeholder extraction is idempotent") {
  const auto first = parse_template("x {a} {{lit}} {b}");
  const auto second = parse_template(first.raw_text());
  CHECK(first == second);
  CHECK(second.placeholders() == std::vector<std::string>{"a", "b"});
}

TEST_CASE("parse_template rejects malformed input") {
  CHECK(code_of([] { parse_template(""); }) == Errc::empty_template);
  CHECK(code_of([] { parse_template("open { only"); }) == Errc::unbalanced_braces);
  CHECK(code_of([] { parse_template("close } only"); }) == Errc::unbalanced_braces);
  CHECK(code_of([] { parse_template("empty {} name"); }) == Errc::unbalanced_braces);
}

TEST_CASE("escaped braces are literal text") {
  const auto tpl = parse_template("json {{\"a\": {v}}}");
  CHECK(tpl.placeholders() == std::vector<std::string>{"v"});
  CHECK(substitute(tpl.raw_text(), {{"v", "1"}}) == "json {\"a\": 1}");
}

TEST_CASE("cut points never split a placeholder or an escape") {
  const std::string raw = "ab{xy}{{c";
  const auto cuts = cut_points(raw);
  CHECK(cuts.front() == 0);
  CHECK(cuts.back() == raw.size());
  for (auto c : cuts) {
    CHECK(c != 3);
    CHECK(c != 4);
    CHECK(c != 5);
    CHECK(c != 7);
  }
}

TEST_CASE("render follows the mask") {
  const auto seg = two_segments();
  const EvalExample ex{{{"q", "x"}}, ""};
  CHECK(render(seg, Mask::from_bits({1, 1}), ex) == "A x B");
  CHECK(render(seg, Mask::from_bits({0, 1}), ex) == " B");
  CHECK(render(seg, Mask::from_bits({0, 1}), EvalExample{}) == " B");
}

TEST_CASE("render errors") {
  const auto seg = two_segments();
  CHECK(code_of([&] { render(seg, Mask::from_bits({1, 0}), EvalExample{}); }) == Errc::missing_input);
  CHECK(code_of([&] { render(seg, Mask(2), EvalExample{}); }) == Errc::empty_mask);
  CHECK(code_of([&] { render(seg, Mask(3, true), EvalExample{}); }) == Errc::dimension_mismatch);
}

TEST_CASE("missing input names the placeholder") {
  const auto seg = two_segments();
  try {
    render(seg, Mask::from_bits({1, 0}), EvalExample{});
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("q") != std::string::npos);
  }
}

TEST_CASE("segmented template invariants") {
  const auto tpl = parse_template("A {q} B");
  CHECK_THROWS_AS(SegmentedTemplate(tpl, {"A {", "q} B"}, SegmentationStrategy::llm), Error);
  CHECK_THROWS_AS(SegmentedTemplate(tpl, {"A {q}", " C"}, SegmentationStrategy::llm), Error);
  CHECK_THROWS_AS(SegmentedTemplate(tpl, {"A {q}", "", " B"}, SegmentationStrategy::llm), Error);
  CHECK_THROWS_AS(SegmentedTemplate(tpl, {"A ", "{q}", " B"}, SegmentationStrategy::llm, 2), Error);
  const SegmentedTemplate ok(tpl, {"A ", "{q}", " B"}, SegmentationStrategy::llm, 3);
  CHECK(ok.join() == tpl.raw_text());
  CHECK(ok[1].placeholders == std::vector<std::string>{"q"});
  CHECK(ok[2].index == 2);
  CHECK(validate_segmentation("A {q} B", {"A {", "q} B"}, 5).has_value());
  CHECK_FALSE(validate_segmentation("A {q} B", {"A {q}", " B"}, 5).has_value());
}

TEST_CASE("pins") {
  const auto seg = two_segments().with_pins({1});
  CHECK_FALSE(seg[0].pinned);
  CHECK(seg[1].pinned);
  CHECK_THROWS_AS(seg.with_pins({2}), Error);
}

TEST_CASE("mask helpers") {
  const auto m = Mask::from_string("1011");
  CHECK(m.count() == 3);
  CHECK(m.indices() == std::vector<std::size_t>{0, 2, 3});
  CHECK(m.to_string() == "1011");
  CHECK(Mask::from_indices(4, {0, 2, 3}) == m);
  CHECK(Mask::from_string("0010").subset_of(m));
  CHECK_FALSE(Mask::from_string("0100").subset_of(m));
  CHECK(code_of([] { Mask::from_string("10x"); }) == Errc::invalid_argument);
  CHECK(MaskHash{}(m) == MaskHash{}(Mask::from_bits({1, 0, 1, 1})));
}

TEST_CASE("default token counter") {
  CHECK(count_tokens("") == 0);
  CHECK(count_tokens("hello world") == 2);
  // don ' t stop .
  CHECK(count_tokens("don't stop.") == 5);
  CHECK(count_tokens("  a\t\nb  ") == 2);
  CHECK(count_tokens("{question}") == 3);
  CHECK(count_tokens("héllo") == 1);
}

TEST_CASE("task/template consistency") {
  const auto tpl = parse_template("Q: {question}");
  EvalTask task;
  task.train = {EvalExample{{{"question", "x"}}, "y"}};
  CHECK_NOTHROW(check_task_against_template(task, tpl));
  task.test = {EvalExample{{{"question", "x"}, {"extra", "z"}}, "y"}};
  CHECK(code_of([&] { check_task_against_template(task, tpl); }) == Errc::semantic_mismatch);
  task.test = {EvalExample{{}, "y"}};
  CHECK(code_of([&] { check_task_against_template(task, tpl); }) == Errc::semantic_mismatch);
}

TEST_CASE("dataset parsing and splits") {
  std::istringstream in(
      "{\"inputs\": {\"q\": \"a\"}, \"reference\": \"1\"}\n"
      "\n"
      "{\"inputs\": {\"q\": \"b\"}, \"reference\": \"2\", \"split\": \"test\"}\n"
      "{\"inputs\": {\"q\": \"c\"}, \"reference\": \"3\"}\n"
      "{\"inputs\": {\"q\": \"d\"}, \"reference\": \"4\"}\n");
  const auto rows = parse_dataset_jsonl(in);
  REQUIRE(rows.size() == 4);
  CHECK(rows[1].split == Split::test);
  CHECK_FALSE(rows[0].split.has_value());

  const auto task = make_task(rows, MetricId::token_f1, SplitPolicy{2});
  CHECK(task.metric == MetricId::token_f1);
  REQUIRE(task.train.size() == 2);
  CHECK(task.train[0].reference == "1");
  CHECK(task.train[1].reference == "3");
  REQUIRE(task.test.size() == 2);
  CHECK(task.test[0].reference == "2");
  CHECK(task.test[1].reference == "4");

  std::istringstream only_train("{\"inputs\": {}, \"reference\": \"x\"}\n");
  const auto reuse = make_task(parse_dataset_jsonl(only_train), MetricId::exact_match);
  CHECK(reuse.test == reuse.train);
}

TEST_CASE("dataset errors name the line") {
  std::istringstream bad("{\"inputs\": {}, \"reference\": \"x\"}\nnot json\n");
  try {
    parse_dataset_jsonl(bad);
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::io_error);
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  std::istringstream wrong_type("{\"inputs\": {\"q\": 3}, \"reference\": \"x\"}\n");
  CHECK_THROWS_AS(parse_dataset_jsonl(wrong_type), Error);
}

TEST_CASE("files") {
  testing::TempDir dir;
  const auto p = dir / "a.txt";
  write_file_atomic(p, "hello");
  CHECK(read_text_file(p) == "hello");
  write_file_atomic(p, "again");
  CHECK(read_text_file(p) == "again");
  CHECK(code_of([&] { read_text_file(dir / "missing.txt"); }) == Errc::io_error);
}

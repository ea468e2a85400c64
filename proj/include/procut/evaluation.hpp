#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "procut/domain.hpp"
#include "procut/gateway.hpp"
#include "procut/value_function.hpp"

namespace procut {

/// SQuAD-style normalization: lowercase, drop ASCII punctuation, drop the
/// articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

/// Metric value in [0, 1]. exact_match compares normalized strings;
/// token_f1 is multiset token-overlap F1 on normalized tokens (two empty
/// strings score 1, exactly one empty scores 0).
double score(MetricId metric, std::string_view reference, std::string_view prediction);

struct AnswerTags {
  std::string open = "<answer>";
  std::string close = "</answer>";
};

/// Text between the first open tag and the following close tag; the whole
/// completion when the pair is absent.
std::string extract_answer(std::string_view completion, const AnswerTags& tags = {});

struct EvalOptions {
  std::string model = "gpt-4.1-mini";
  double temperature = 0.0;
  int max_output_tokens = 4000;
  std::size_t parallelism = 0;  // 0: gateway default
  AnswerTags tags;
  Phase phase = Phase::evaluation;
  CallLedger* ledger = nullptr;
  /// Value assigned to the empty mask, which cannot be rendered.
  double empty_value = 0.0;
};

struct MaskScore {
  Mask mask;
  double mean_score = 0.0;
  std::size_t n_examples = 0;
  Split split = Split::train;
};

nlohmann::json to_json(const MaskScore& s);

/// Mean metric of the masked template over one split. Per-example calls go
/// through one bounded-parallel batch. Throws Errc::empty_mask.
MaskScore evaluate_mask(const SegmentedTemplate& seg, const Mask& mask, const EvalTask& task,
                        Split split, Gateway& gw, const EvalOptions& opts = {});

/// Several masks in a single batch. The empty mask scores opts.empty_value
/// without any call.
std::vector<MaskScore> evaluate_masks(const SegmentedTemplate& seg, std::span<const Mask> masks,
                                      const EvalTask& task, Split split, Gateway& gw,
                                      const EvalOptions& opts = {});

/// Gateway-backed value function over one split. Keeps every evaluation
/// for audit export. Holds references; the arguments must outlive it.
class MaskEvaluator final : public ValueFunction {
 public:
  MaskEvaluator(const SegmentedTemplate& seg, const EvalTask& task, Split split, Gateway& gw,
                EvalOptions opts = {});

  std::size_t size() const override { return seg_.size(); }
  std::vector<double> evaluate(std::span<const Mask> masks) override;

  const std::vector<MaskScore>& records() const noexcept { return records_; }
  /// One JSON object per line: {mask, split, mean_score, n_examples}.
  std::string export_jsonl() const;

 private:
  const SegmentedTemplate& seg_;
  const EvalTask& task_;
  Split split_;
  Gateway& gw_;
  EvalOptions opts_;
  std::vector<MaskScore> records_;
};

/// NDCG of the ranking induced by `estimated` (descending, ties by lower
/// index) against graded relevance gold_j - min(gold), linear gains and a
/// log2(position + 1) discount. Throws Errc::dimension_mismatch and
/// Errc::degenerate_gold.
double ndcg(std::span<const double> estimated, std::span<const double> gold);

/// Indices sorted by descending score, ties by lower index.
std::vector<std::size_t> rank_by_score(std::span<const double> scores);

}  // namespace procut

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "procut/attribution.hpp"
#include "procut/domain.hpp"
#include "procut/evaluation.hpp"
#include "procut/gateway.hpp"
#include "procut/io.hpp"
#include "procut/segmentation.hpp"

namespace procut {

struct CompressionConfig {
  /// Fraction of segments kept; k = max(floor(r * M), |pinned|, 1).
  double ratio = 0.5;
  Estimator estimator = Estimator::shap_exact;
  SegmentationConfig segmentation;
  std::set<std::size_t> pinned;
  std::uint64_t seed = 0;
  /// shap_mc permutations; 0 means 200 * M.
  std::size_t permutations = 0;
  /// lasso masks; 0 means 8 * M.
  std::size_t lasso_masks = 0;
  std::size_t ranker_t = 2;
  /// Units the ranker is told to keep; 0 means the pruning k.
  std::size_t ranker_k = 0;
  MetricId metric = MetricId::exact_match;
  SplitPolicy splits;
  std::string model = "gpt-4.1-mini";
  double temperature = 0.0;
  int max_output_tokens = 4000;
  std::size_t parallelism = 10;
  AnswerTags tags;
};

/// Throws Errc::invalid_argument on out-of-range values.
void validate(const CompressionConfig& cfg);

/// Flat JSON form. Unknown keys and wrongly typed values are rejected with
/// Errc::invalid_argument. Keys absent from `j` keep their value in `base`.
CompressionConfig config_from_json(const nlohmann::json& j, const CompressionConfig& base = {});
nlohmann::json to_json(const CompressionConfig& cfg);
/// Every key config_from_json accepts, with its JSON type.
nlohmann::json config_schema();

enum class RunStatus { queued, segmenting, attributing, pruning, evaluating, done, failed };
std::string_view to_string(RunStatus s);
RunStatus run_status_from_string(std::string_view s);

struct RunReport {
  std::string run_id;
  RunStatus status = RunStatus::done;
  std::string error;
  std::string original_template;
  std::string compressed_template;
  std::vector<std::string> segments;
  SegmentationStrategy strategy = SegmentationStrategy::structural;
  bool segmentation_fell_back = false;
  std::set<std::size_t> pinned;
  double ratio = 0.0;
  std::size_t k = 0;
  Mask kept;
  AttributionResult attribution;
  MetricId metric = MetricId::exact_match;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double score_before = 0.0;
  double score_after = 0.0;
  std::size_t tokens_before = 0;
  std::size_t tokens_after = 0;
  LedgerSnapshot ledger;
  std::int64_t started_at_ms = 0;
  std::int64_t finished_at_ms = 0;
  nlohmann::json config;
};

struct TradeoffPoint {
  double ratio = 0.0;
  std::size_t k = 0;
  Mask kept;
  std::size_t tokens = 0;
  double token_reduction = 0.0;
  double test_score = 0.0;
};

struct TradeoffCurve {
  std::size_t tokens_before = 0;
  double score_before = 0.0;
  AttributionResult attribution;
  std::vector<TradeoffPoint> points;
};

using ProgressFn = std::function<void(RunStatus, double)>;

struct RunOptions {
  ProgressFn progress;
  /// Source of the report timestamps.
  Clock clock = system_clock_ms();
  TokenCounter token_counter = default_token_counter();
  /// When set, reports are written to `<runs_dir>/<run_id>.json`.
  std::optional<std::filesystem::path> runs_dir;
};

/// Segments kept for ratio r over m segments with `pinned` pins.
std::size_t keep_count(std::size_t m, double r, std::size_t pinned);

struct PruneResult {
  SegmentedTemplate compressed;
  Mask kept;
  std::size_t k = 0;
};

/// Keeps the pinned segments plus the best-scoring others (ties to the
/// lower index) up to keep_count, in original order.
PruneResult prune(const SegmentedTemplate& seg, std::span<const double> scores, double r,
                  const std::set<std::size_t>& pinned = {});
PruneResult prune(const SegmentedTemplate& seg, const AttributionResult& attr, double r,
                  const std::set<std::size_t>& pinned = {});

/// Content hash of (template, task, config).
std::string make_run_id(const PromptTemplate& tpl, const EvalTask& task,
                        const CompressionConfig& cfg);

/// Runs the estimator named in `cfg` on the train split of `task`.
AttributionResult attribute(const SegmentedTemplate& seg, const EvalTask& task,
                            const CompressionConfig& cfg, Gateway& gw, CallLedger* ledger = nullptr);

/// Segment, attribute on train, prune, and score the full and compressed
/// templates on test. On failure the report is persisted with status
/// failed (when runs_dir is set) and the error is rethrown.
RunReport run_procut(const PromptTemplate& tpl, const EvalTask& task, const CompressionConfig& cfg,
                     Gateway& gw, const RunOptions& opts = {});

struct VanillaOptions {
  std::string model = "gpt-4.1-mini";
  int retry_limit = 2;
  CallLedger* ledger = nullptr;
  TokenCounter token_counter = default_token_counter();
};

/// Baseline: asks the model to rewrite the template to about r of its
/// length. The reply must keep every placeholder; otherwise it is retried
/// and finally Errc::placeholder_lost is thrown. r = 1 returns `tpl`
/// without a call.
PromptTemplate vanilla_llm_compress(const PromptTemplate& tpl, double r, Gateway& gw,
                                    const VanillaOptions& opts = {});

/// One attribution pass, pruned at every ratio (sorted, duplicates
/// dropped) and scored on test.
TradeoffCurve sweep(const PromptTemplate& tpl, const EvalTask& task, const CompressionConfig& cfg,
                    std::vector<double> ratios, Gateway& gw, const RunOptions& opts = {});

/// External optimizer step: receives the current template and the round
/// number (0-based) and returns the next template.
using OptimizerStep = std::function<PromptTemplate(const PromptTemplate&, std::size_t)>;

/// Alternates `step` and run_procut for `iterations` rounds, feeding each
/// compressed template into the next step.
std::vector<RunReport> compress_in_loop(const OptimizerStep& step, const PromptTemplate& tpl,
                                        const EvalTask& task, const CompressionConfig& cfg,
                                        std::size_t iterations, Gateway& gw,
                                        const RunOptions& opts = {});

}  // namespace procut

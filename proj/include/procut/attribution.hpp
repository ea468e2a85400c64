#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "procut/domain.hpp"
#include "procut/evaluation.hpp"
#include "procut/gateway.hpp"
#include "procut/value_function.hpp"

namespace procut {

enum class Estimator { shap_exact, shap_mc, loo, lasso, greedy, llm_ranker, random };

std::string_view to_string(Estimator e);
/// Accepts the canonical names plus CLI spellings ("shap", "llm-ranker", ...).
/// "shap" maps to shap_exact; callers pick MC when M exceeds the exact limit.
Estimator estimator_from_string(std::string_view s);

inline constexpr std::size_t kExactLimit = 12;

struct ProbeRecord {
  Mask mask;
  double value = 0.0;
};

/// Probe-and-test state of the LLM ranker.
struct RankerState {
  std::size_t t = 0;
  std::size_t k = 0;
  std::vector<Mask> candidate_masks;
  std::vector<double> candidate_scores;
  /// Segment indices, most important first.
  std::vector<std::size_t> ranking;
  std::string rationale;
};

struct LassoFit {
  double lambda = 0.0;
  std::vector<double> coefficients;
  double intercept = 0.0;
  std::size_t n_masks = 0;
  bool converged = false;
  std::size_t iterations = 0;
};

struct AttributionResult {
  std::vector<double> scores;
  Estimator estimator = Estimator::shap_exact;
  std::uint64_t rng_seed = 0;
  /// Distinct masks whose value was requested.
  std::size_t mask_evaluations = 0;
  /// Model calls issued by the estimator itself (llm_ranker only).
  std::size_t meta_calls = 0;
  /// Gateway traffic charged to this estimator; filled by callers that own
  /// a ledger.
  LedgerSnapshot ledger;
  std::vector<ProbeRecord> probe_log;
  std::optional<RankerState> ranker;
  std::optional<LassoFit> lasso;
};

/// Exact Shapley values by enumerating all 2^M subsets.
/// Throws Errc::too_many_segments when M > exact_limit.
AttributionResult shap_exact(ValueFunction& v, std::size_t exact_limit = kExactLimit);

/// Permutation-sampling Shapley estimate. Permutations are drawn in
/// antithetic pairs (each followed by its reverse); all prefix masks are
/// evaluated in one batch and repeated subsets are charged once.
AttributionResult shap_mc(ValueFunction& v, std::size_t n_permutations, std::uint64_t seed);

/// a_j = v(full) - v(full without j). Exactly M + 1 distinct masks.
AttributionResult loo(ValueFunction& v);

/// i.i.d. Bernoulli(p_include) masks; all-zero draws are redrawn.
std::vector<Mask> sample_masks(std::size_t m, std::size_t n_masks, std::uint64_t seed,
                               double p_include = 0.5);

/// Cyclic coordinate descent with soft-thresholding on the centered 0/1
/// design with a free intercept, minimizing
///   (1 / 2n) * ||y - b0 - X b||^2 + lambda * ||b||_1.
/// Stops when the largest coefficient change in a sweep is below 1e-8 or
/// after 10000 sweeps. Throws Errc::dimension_mismatch.
LassoFit fit_lasso(std::span<const Mask> designs, std::span<const double> targets, double lambda,
                   const std::vector<double>* warm_start = nullptr);

struct LassoOptions {
  std::size_t n_masks = 0;  // 0: 8 * M
  double p_include = 0.5;
  std::vector<double> lambda_grid{0.1, 0.05, 0.02, 0.01, 0.005, 0.001};
  std::size_t cv_folds = 5;
};

/// Fits along the descending grid and keeps the lambda with the lowest
/// k-fold cross-validated error (ties to the larger lambda), moving to
/// smaller lambdas if that fit is all zeros. Constant targets give zero
/// scores; an all-zero path on non-constant targets throws
/// Errc::all_zero_fit.
AttributionResult lasso_attribution(ValueFunction& v, std::uint64_t seed,
                                    const LassoOptions& opts = {});

/// Starts from the empty set and repeatedly adds the segment with the
/// largest gain (ties to the lowest index). a_j is the gain observed when j
/// was added. Exactly M(M+1)/2 + 1 distinct masks.
AttributionResult greedy_forward(ValueFunction& v);

struct RankerOptions {
  std::size_t t = 2;
  std::size_t k = 1;
  std::string model = "gpt-4.1-mini";
  /// Extra attempts after an unusable reply; they bypass the cache.
  int retry_limit = 2;
  CallLedger* ledger = nullptr;
};

/// The segment list as shown to the model.
std::string describe_segments(const SegmentedTemplate& seg);
/// Mask-proposal prompt for t masks over M segments.
std::string mask_request_prompt(const SegmentedTemplate& seg, std::size_t t);
/// Ranking prompt carrying the (mask, score) experiment records.
std::string ranking_prompt(const SegmentedTemplate& seg, std::span<const Mask> masks,
                           std::span<const double> scores);

/// Throws Errc::invalid_mask_shape.
std::pair<std::vector<Mask>, std::string> parse_mask_reply(std::string_view reply, std::size_t m,
                                                           std::size_t t);
/// Throws Errc::invalid_ranking unless the reply is a permutation of 0..M-1.
std::pair<std::vector<std::size_t>, std::string> parse_ranking_reply(std::string_view reply,
                                                                     std::size_t m);

/// LLM-driven attribution: one call proposes t masks, each is scored with
/// `v` (the train split), one call ranks the segments, a_j = 1 / rank(j).
AttributionResult llm_ranker(const SegmentedTemplate& seg, ValueFunction& v, Gateway& gw,
                             const RankerOptions& opts);

/// Convenience form scoring masks on the train split of `task`.
AttributionResult llm_ranker(const SegmentedTemplate& seg, const EvalTask& task, Gateway& gw,
                             const RankerOptions& opts, const EvalOptions& eval = {});

/// i.i.d. uniform scores in [0, 1).
AttributionResult random_attribution(std::size_t m, std::uint64_t seed);

/// The size-k mask maximizing v, by exhaustive search. Ties go to the mask
/// whose kept index list is lexicographically smallest.
/// Throws Errc::too_many_segments when M > exact_limit.
Mask brute_force_best(ValueFunction& v, std::size_t k, std::size_t exact_limit = kExactLimit);

double ndcg(const AttributionResult& estimated, const AttributionResult& gold);

}  // namespace procut

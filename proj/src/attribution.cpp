#include "procut/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "procut/error.hpp"
#include "procut/llm_json.hpp"
#include "procut/prompt_resources.hpp"
#include "procut/rng.hpp"

namespace procut {

std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::shap_exact: return "shap_exact";
    case Estimator::shap_mc: return "shap_mc";
    case Estimator::loo: return "loo";
    case Estimator::lasso: return "lasso";
    case Estimator::greedy: return "greedy";
    case Estimator::llm_ranker: return "llm_ranker";
    case Estimator::random: return "random";
  }
  return "shap_exact";
}

Estimator estimator_from_string(std::string_view s) {
  std::string n(s);
  std::replace(n.begin(), n.end(), '-', '_');
  if (n == "shap" || n == "shap_exact" || n == "shapley") return Estimator::shap_exact;
  if (n == "shap_mc") return Estimator::shap_mc;
  if (n == "loo" || n == "leave_one_out") return Estimator::loo;
  if (n == "lasso") return Estimator::lasso;
  if (n == "greedy" || n == "greedy_forward") return Estimator::greedy;
  if (n == "llm_ranker" || n == "llm") return Estimator::llm_ranker;
  if (n == "random") return Estimator::random;
  throw Error(Errc::invalid_argument, "unknown estimator '" + std::string(s) + "'");
}

namespace {

Mask mask_of_bits(std::size_t m, std::uint64_t bits) {
  Mask mask(m);
  for (std::size_t j = 0; j < m; ++j) {
    if (bits & (std::uint64_t{1} << j)) mask.set(j);
  }
  return mask;
}

void finish(AttributionResult& r, const ProbeRecorder& rec) {
  r.mask_evaluations = rec.distinct_evaluations();
  r.probe_log.clear();
  r.probe_log.reserve(rec.log().size());
  for (const auto& [m, value] : rec.log()) r.probe_log.push_back({m, value});
}

void require_segments(const ValueFunction& v) {
  if (v.size() == 0) throw Error(Errc::invalid_argument, "value function has no segments");
}

}  // namespace

AttributionResult shap_exact(ValueFunction& v, std::size_t exact_limit) {
  require_segments(v);
  const std::size_t m = v.size();
  if (m > exact_limit || m >= 63) {
    throw Error(Errc::too_many_segments, std::to_string(m) + " segments exceed the exact limit " +
                                             std::to_string(exact_limit));
  }
  ProbeRecorder rec(v);
  const std::uint64_t n_subsets = std::uint64_t{1} << m;
  std::vector<Mask> masks;
  masks.reserve(n_subsets);
  for (std::uint64_t bits = 0; bits < n_subsets; ++bits) masks.push_back(mask_of_bits(m, bits));
  const auto values = rec.evaluate(masks);

  // weight[s] = s! (m - s - 1)! / m!
  std::vector<double> weight(m);
  for (std::size_t s = 0; s < m; ++s) {
    weight[s] = std::exp(std::lgamma(static_cast<double>(s) + 1) +
                         std::lgamma(static_cast<double>(m - s)) -
                         std::lgamma(static_cast<double>(m) + 1));
  }

  AttributionResult r;
  r.estimator = Estimator::shap_exact;
  r.scores.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const std::uint64_t bit = std::uint64_t{1} << j;
    double phi = 0.0;
    for (std::uint64_t bits = 0; bits < n_subsets; ++bits) {
      if (bits & bit) continue;
      const auto s = static_cast<std::size_t>(std::popcount(bits));
      phi += weight[s] * (values[bits | bit] - values[bits]);
    }
    r.scores[j] = phi;
  }
  finish(r, rec);
  return r;
}

AttributionResult shap_mc(ValueFunction& v, std::size_t n_permutations, std::uint64_t seed) {
  require_segments(v);
  if (n_permutations == 0) throw Error(Errc::invalid_argument, "n_permutations must be >= 1");
  const std::size_t m = v.size();
  Rng rng(seed);

  std::vector<std::vector<std::size_t>> perms;
  perms.reserve(n_permutations);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  while (perms.size() < n_permutations) {
    rng.shuffle(order.begin(), order.end());
    perms.push_back(order);
    if (perms.size() < n_permutations) perms.emplace_back(order.rbegin(), order.rend());
  }

  std::vector<Mask> prefixes;
  prefixes.reserve(n_permutations * (m + 1));
  for (const auto& p : perms) {
    Mask cur(m);
    prefixes.push_back(cur);
    for (auto j : p) prefixes.push_back(cur.set(j));
  }
  ProbeRecorder rec(v);
  const auto values = rec.evaluate(prefixes);

  AttributionResult r;
  r.estimator = Estimator::shap_mc;
  r.rng_seed = seed;
  r.scores.assign(m, 0.0);
  std::size_t at = 0;
  for (const auto& p : perms) {
    for (std::size_t pos = 0; pos < m; ++pos) {
      r.scores[p[pos]] += values[at + pos + 1] - values[at + pos];
    }
    at += m + 1;
  }
  for (auto& s : r.scores) s /= static_cast<double>(n_permutations);
  finish(r, rec);
  return r;
}

AttributionResult loo(ValueFunction& v) {
  require_segments(v);
  const std::size_t m = v.size();
  std::vector<Mask> masks{Mask(m, true)};
  for (std::size_t j = 0; j < m; ++j) masks.push_back(Mask(m, true).set(j, false));
  ProbeRecorder rec(v);
  const auto values = rec.evaluate(masks);

  AttributionResult r;
  r.estimator = Estimator::loo;
  r.scores.resize(m);
  for (std::size_t j = 0; j < m; ++j) r.scores[j] = values[0] - values[j + 1];
  finish(r, rec);
  return r;
}

std::vector<Mask> sample_masks(std::size_t m, std::size_t n_masks, std::uint64_t seed,
                               double p_include) {
  if (!(p_include > 0.0 && p_include < 1.0)) {
    throw Error(Errc::invalid_argument, "p_include must lie strictly between 0 and 1");
  }
  if (m == 0 && n_masks > 0) throw Error(Errc::invalid_argument, "cannot sample empty masks");
  Rng rng(seed);
  std::vector<Mask> out;
  out.reserve(n_masks);
  while (out.size() < n_masks) {
    Mask mask(m);
    for (std::size_t j = 0; j < m; ++j) mask.set(j, rng.bernoulli(p_include));
    if (!mask.none()) out.push_back(std::move(mask));
  }
  return out;
}

LassoFit fit_lasso(std::span<const Mask> designs, std::span<const double> targets, double lambda,
                   const std::vector<double>* warm_start) {
  if (designs.size() != targets.size()) {
    throw Error(Errc::dimension_mismatch, std::to_string(designs.size()) + " designs but " +
                                              std::to_string(targets.size()) + " targets");
  }
  if (designs.empty()) throw Error(Errc::dimension_mismatch, "no designs");
  const std::size_t m = designs.front().size();
  const std::size_t n = designs.size();
  if (n < m) {
    throw Error(Errc::dimension_mismatch, "need at least M=" + std::to_string(m) + " designs, got " +
                                              std::to_string(n));
  }
  if (lambda < 0) throw Error(Errc::invalid_argument, "lambda must be >= 0");
  for (const auto& d : designs) {
    if (d.size() != m) throw Error(Errc::dimension_mismatch, "designs differ in length");
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> mean_x(m, 0.0);
  double mean_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_y += targets[i];
    for (std::size_t j = 0; j < m; ++j) mean_x[j] += designs[i].test(j) ? 1.0 : 0.0;
  }
  mean_y *= inv_n;
  for (auto& x : mean_x) x *= inv_n;

  // Column-major centered design.
  std::vector<std::vector<double>> xc(m, std::vector<double>(n));
  std::vector<double> col_var(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      xc[j][i] = (designs[i].test(j) ? 1.0 : 0.0) - mean_x[j];
      col_var[j] += xc[j][i] * xc[j][i];
    }
    col_var[j] *= inv_n;
  }

  LassoFit fit;
  fit.lambda = lambda;
  fit.n_masks = n;
  fit.coefficients.assign(m, 0.0);
  if (warm_start && warm_start->size() == m) fit.coefficients = *warm_start;
  auto& b = fit.coefficients;

  std::vector<double> residual(n);
  for (std::size_t i = 0; i < n; ++i) {
    double pred = 0.0;
    for (std::size_t j = 0; j < m; ++j) pred += xc[j][i] * b[j];
    residual[i] = (targets[i] - mean_y) - pred;
  }

  constexpr double kTol = 1e-8;
  constexpr std::size_t kMaxSweeps = 10000;
  for (fit.iterations = 0; fit.iterations < kMaxSweeps;) {
    ++fit.iterations;
    double max_delta = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (col_var[j] <= 0.0) {
        if (b[j] != 0.0) {
          max_delta = std::max(max_delta, std::abs(b[j]));
          b[j] = 0.0;
        }
        continue;
      }
      double rho = 0.0;
      for (std::size_t i = 0; i < n; ++i) rho += xc[j][i] * residual[i];
      rho = rho * inv_n + col_var[j] * b[j];
      const double shrunk = std::copysign(std::max(std::abs(rho) - lambda, 0.0), rho);
      const double updated = shrunk / col_var[j];
      const double delta = updated - b[j];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < n; ++i) residual[i] -= xc[j][i] * delta;
        b[j] = updated;
      }
      max_delta = std::max(max_delta, std::abs(delta));
    }
    if (max_delta < kTol) {
      fit.converged = true;
      break;
    }
  }

  fit.intercept = mean_y;
  for (std::size_t j = 0; j < m; ++j) fit.intercept -= mean_x[j] * b[j];
  return fit;
}

namespace {

bool all_zero(const std::vector<double>& coef) {
  return std::all_of(coef.begin(), coef.end(), [](double c) { return c == 0.0; });
}

double predict(const LassoFit& fit, const Mask& x) {
  double y = fit.intercept;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x.test(j)) y += fit.coefficients[j];
  }
  return y;
}

}  // namespace

AttributionResult lasso_attribution(ValueFunction& v, std::uint64_t seed, const LassoOptions& opts) {
  require_segments(v);
  const std::size_t m = v.size();
  if (opts.lambda_grid.empty()) throw Error(Errc::invalid_argument, "lambda grid is empty");
  if (!std::is_sorted(opts.lambda_grid.rbegin(), opts.lambda_grid.rend())) {
    throw Error(Errc::invalid_argument, "lambda grid must be descending");
  }
  const std::size_t n_masks = std::max(opts.n_masks == 0 ? 8 * m : opts.n_masks, m);
  const auto designs = sample_masks(m, n_masks, seed, opts.p_include);
  ProbeRecorder rec(v);
  const auto targets = rec.evaluate(designs);

  AttributionResult r;
  r.estimator = Estimator::lasso;
  r.rng_seed = seed;

  const auto [lo, hi] = std::minmax_element(targets.begin(), targets.end());
  if (*hi - *lo <= 0.0) {
    r.scores.assign(m, 0.0);
    r.lasso = fit_lasso(designs, targets, opts.lambda_grid.front());
    finish(r, rec);
    return r;
  }

  std::vector<LassoFit> path;
  const std::vector<double>* warm = nullptr;
  for (double lambda : opts.lambda_grid) {
    path.push_back(fit_lasso(designs, targets, lambda, warm));
    warm = &path.back().coefficients;
  }

  // k-fold cross-validation over the same grid; fold of row i is i mod k.
  const std::size_t folds = std::clamp<std::size_t>(opts.cv_folds, 2, designs.size());
  std::vector<double> cv_error(opts.lambda_grid.size(), 0.0);
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<Mask> train_x;
    std::vector<double> train_y;
    std::vector<std::size_t> held;
    for (std::size_t i = 0; i < designs.size(); ++i) {
      if (i % folds == f) {
        held.push_back(i);
      } else {
        train_x.push_back(designs[i]);
        train_y.push_back(targets[i]);
      }
    }
    if (train_x.size() < m || held.empty()) continue;
    std::vector<double> fold_warm;
    for (std::size_t l = 0; l < opts.lambda_grid.size(); ++l) {
      auto fit = fit_lasso(train_x, train_y, opts.lambda_grid[l], l == 0 ? nullptr : &fold_warm);
      fold_warm = fit.coefficients;
      for (auto i : held) {
        const double e = predict(fit, designs[i]) - targets[i];
        cv_error[l] += e * e;
      }
    }
  }
  std::size_t chosen = 0;
  for (std::size_t l = 1; l < cv_error.size(); ++l) {
    if (cv_error[l] < cv_error[chosen] * (1.0 - 1e-12)) chosen = l;
  }
  while (chosen < path.size() && all_zero(path[chosen].coefficients)) ++chosen;
  if (chosen == path.size()) {
    throw Error(Errc::all_zero_fit, "every lambda in the grid shrinks all coefficients to zero");
  }
  r.scores = path[chosen].coefficients;
  r.lasso = path[chosen];
  finish(r, rec);
  return r;
}

AttributionResult greedy_forward(ValueFunction& v) {
  require_segments(v);
  const std::size_t m = v.size();
  ProbeRecorder rec(v);
  AttributionResult r;
  r.estimator = Estimator::greedy;
  r.scores.assign(m, 0.0);

  Mask current(m);
  double current_value = rec(current);
  std::vector<bool> added(m, false);
  for (std::size_t step = 0; step < m; ++step) {
    std::vector<std::size_t> candidates;
    std::vector<Mask> masks;
    for (std::size_t j = 0; j < m; ++j) {
      if (added[j]) continue;
      candidates.push_back(j);
      masks.push_back(Mask(current).set(j));
    }
    const auto values = rec.evaluate(masks);
    std::size_t best = 0;
    for (std::size_t c = 1; c < candidates.size(); ++c) {
      if (values[c] > values[best]) best = c;
    }
    const auto j = candidates[best];
    r.scores[j] = values[best] - current_value;
    current.set(j);
    current_value = values[best];
    added[j] = true;
  }
  finish(r, rec);
  return r;
}

// ---------------------------------------------------------------------------
// LLM-driven attribution

std::string describe_segments(const SegmentedTemplate& seg) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& s : seg.segments()) {
    units.push_back({{"index", s.index}, {"template", s.text}});
  }
  return nlohmann::json{{"units", units}}.dump(2);
}

std::string mask_request_prompt(const SegmentedTemplate& seg, std::size_t t) {
  return substitute(prompts::ask_masks, {{"segmented_prompt_template", describe_segments(seg)},
                                         {"num_mask", std::to_string(t)},
                                         {"num_features", std::to_string(seg.size())}});
}

std::string ranking_prompt(const SegmentedTemplate& seg, std::span<const Mask> masks,
                           std::span<const double> scores) {
  std::ostringstream ex;
  ex << "Prompt components:\n";
  for (const auto& s : seg.segments()) ex << '#' << s.index << ": " << s.text << '\n';
  ex << "\nExperiments (mask over the components, mean score on the training set):\n";
  for (std::size_t i = 0; i < masks.size(); ++i) {
    ex << i + 1 << ". mask=[";
    for (std::size_t j = 0; j < masks[i].size(); ++j) ex << (j ? ", " : "") << masks[i].test(j);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", scores[i]);
    ex << "] score=" << buf << '\n';
  }
  return substitute(prompts::rank, {{"experiments", ex.str()}});
}

std::pair<std::vector<Mask>, std::string> parse_mask_reply(std::string_view reply, std::size_t m,
                                                           std::size_t t) {
  nlohmann::json j;
  try {
    j = parse_llm_json(reply);
  } catch (const GatewayError& e) {
    throw Error(Errc::invalid_mask_shape, e.what());
  }
  if (!j.is_object() || !j.contains("masks") || !j["masks"].is_array() || j["masks"].empty()) {
    throw Error(Errc::invalid_mask_shape, "reply has no non-empty \"masks\" array");
  }
  std::vector<Mask> masks;
  for (const auto& row : j["masks"]) {
    if (!row.is_array() || row.size() != m) {
      throw Error(Errc::invalid_mask_shape, "mask of wrong length (expected " + std::to_string(m) + ")");
    }
    Mask mask(m);
    for (std::size_t b = 0; b < m; ++b) {
      if (!row[b].is_number_integer() || (row[b] != 0 && row[b] != 1)) {
        throw Error(Errc::invalid_mask_shape, "mask entries must be 0 or 1");
      }
      mask.set(b, row[b] == 1);
    }
    masks.push_back(std::move(mask));
    if (masks.size() == t) break;
  }
  std::string rationale =
      j.contains("rationale") && j["rationale"].is_string() ? j["rationale"].get<std::string>() : "";
  return {std::move(masks), std::move(rationale)};
}

std::pair<std::vector<std::size_t>, std::string> parse_ranking_reply(std::string_view reply,
                                                                     std::size_t m) {
  nlohmann::json j;
  try {
    j = parse_llm_json(reply);
  } catch (const GatewayError& e) {
    throw Error(Errc::invalid_ranking, e.what());
  }
  if (!j.is_object() || !j.contains("ranking") || !j["ranking"].is_array()) {
    throw Error(Errc::invalid_ranking, "reply has no \"ranking\" array");
  }
  std::vector<std::size_t> ranking;
  std::vector<bool> seen(m, false);
  for (const auto& e : j["ranking"]) {
    if (!e.is_number_integer() || e.get<long long>() < 0 ||
        static_cast<std::size_t>(e.get<long long>()) >= m) {
      throw Error(Errc::invalid_ranking, "ranking entry out of range");
    }
    const auto idx = static_cast<std::size_t>(e.get<long long>());
    if (seen[idx]) throw Error(Errc::invalid_ranking, "ranking repeats index " + std::to_string(idx));
    seen[idx] = true;
    ranking.push_back(idx);
  }
  if (ranking.size() != m) {
    throw Error(Errc::invalid_ranking, "ranking has " + std::to_string(ranking.size()) +
                                           " entries, expected " + std::to_string(m));
  }
  std::string rationale =
      j.contains("rationale") && j["rationale"].is_string() ? j["rationale"].get<std::string>() : "";
  return {std::move(ranking), std::move(rationale)};
}

namespace {

// Issues `prompt` and parses the reply, retrying unusable replies with the
// cache bypassed. The last parse error is rethrown.
template <typename Parse>
auto ask_until_valid(Gateway& gw, const RankerOptions& opts, const std::string& prompt,
                     std::size_t& calls, Parse parse) {
  CompletionRequest req;
  req.model = opts.model;
  req.prompt = prompt;
  const int attempts = 1 + std::max(opts.retry_limit, 0);
  for (int attempt = 0;; ++attempt) {
    ++calls;
    const auto reply = gw.complete(
        req, CallContext{Phase::attribution, opts.ledger,
                         attempt == 0 ? CacheMode::use : CacheMode::refresh});
    try {
      return parse(reply);
    } catch (const Error&) {
      if (attempt + 1 >= attempts) throw;
    }
  }
}

}  // namespace

AttributionResult llm_ranker(const SegmentedTemplate& seg, ValueFunction& v, Gateway& gw,
                             const RankerOptions& opts) {
  const std::size_t m = seg.size();
  if (v.size() != m) throw Error(Errc::dimension_mismatch, "value function size != segment count");
  if (opts.t == 0) throw Error(Errc::invalid_argument, "t must be >= 1");
  if (opts.k == 0 || opts.k > m) throw Error(Errc::invalid_argument, "k must lie in [1, M]");

  AttributionResult r;
  r.estimator = Estimator::llm_ranker;
  RankerState state;
  state.t = opts.t;
  state.k = opts.k;

  auto [masks, mask_rationale] =
      ask_until_valid(gw, opts, mask_request_prompt(seg, opts.t), r.meta_calls,
                      [&](const std::string& reply) { return parse_mask_reply(reply, m, opts.t); });
  state.candidate_masks = std::move(masks);

  ProbeRecorder rec(v);
  state.candidate_scores = rec.evaluate(state.candidate_masks);

  auto [ranking, rationale] = ask_until_valid(
      gw, opts, ranking_prompt(seg, state.candidate_masks, state.candidate_scores), r.meta_calls,
      [&](const std::string& reply) { return parse_ranking_reply(reply, m); });
  state.ranking = std::move(ranking);
  state.rationale = std::move(rationale);
  if (state.rationale.empty()) state.rationale = mask_rationale;

  r.scores.assign(m, 0.0);
  for (std::size_t pos = 0; pos < m; ++pos) {
    r.scores[state.ranking[pos]] = 1.0 / static_cast<double>(pos + 1);
  }
  r.ranker = std::move(state);
  finish(r, rec);
  return r;
}

AttributionResult llm_ranker(const SegmentedTemplate& seg, const EvalTask& task, Gateway& gw,
                             const RankerOptions& opts, const EvalOptions& eval) {
  EvalOptions e = eval;
  e.phase = Phase::attribution;
  if (!e.ledger) e.ledger = opts.ledger;
  MaskEvaluator v(seg, task, Split::train, gw, e);
  return llm_ranker(seg, v, gw, opts);
}

AttributionResult random_attribution(std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  AttributionResult r;
  r.estimator = Estimator::random;
  r.rng_seed = seed;
  r.scores.resize(m);
  for (auto& s : r.scores) s = rng.uniform();
  return r;
}

Mask brute_force_best(ValueFunction& v, std::size_t k, std::size_t exact_limit) {
  require_segments(v);
  const std::size_t m = v.size();
  if (m > exact_limit || m >= 63) {
    throw Error(Errc::too_many_segments, std::to_string(m) + " segments exceed the exact limit " +
                                             std::to_string(exact_limit));
  }
  if (k > m) throw Error(Errc::invalid_argument, "k exceeds the segment count");

  // Size-k index combinations in lexicographic order.
  std::vector<Mask> masks;
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  while (true) {
    masks.push_back(Mask::from_indices(m, idx));
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == m - k + i - 1) --i;
    if (i == 0) break;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
  const auto values = v.evaluate(masks);
  std::size_t best = 0;
  for (std::size_t i = 1; i < masks.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return masks[best];
}

double ndcg(const AttributionResult& estimated, const AttributionResult& gold) {
  return ndcg(std::span<const double>(estimated.scores), std::span<const double>(gold.scores));
}

}  // namespace procut

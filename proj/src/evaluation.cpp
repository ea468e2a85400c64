#include "procut/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "procut/error.hpp"

namespace procut {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && ((u >= 0x21 && u <= 0x2f) || (u >= 0x3a && u <= 0x40) ||
                      (u >= 0x5b && u <= 0x60) || (u >= 0x7b && u <= 0x7e));
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space(s[j])) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    if (is_punct(c)) continue;
    lowered.push_back(static_cast<char>(
        (c >= 'A' && c <= 'Z') ? c - 'A' + 'a' : c));
  }
  std::string out;
  for (const auto& tok : split_ws(lowered)) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

double score(MetricId metric, std::string_view reference, std::string_view prediction) {
  const auto ref = normalize_answer(reference);
  const auto pred = normalize_answer(prediction);
  if (metric == MetricId::exact_match) return ref == pred ? 1.0 : 0.0;

  const auto ref_tokens = split_ws(ref);
  const auto pred_tokens = split_ws(pred);
  if (ref_tokens.empty() || pred_tokens.empty()) {
    return ref_tokens.empty() && pred_tokens.empty() ? 1.0 : 0.0;
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : ref_tokens) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : pred_tokens) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred_tokens.size());
  const double recall = static_cast<double>(common) / static_cast<double>(ref_tokens.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string extract_answer(std::string_view completion, const AnswerTags& tags) {
  if (tags.open.empty() || tags.close.empty()) return std::string(completion);
  const auto open = completion.find(tags.open);
  if (open == std::string_view::npos) return std::string(completion);
  const auto start = open + tags.open.size();
  const auto close = completion.find(tags.close, start);
  if (close == std::string_view::npos) return std::string(completion);
  return std::string(completion.substr(start, close - start));
}

nlohmann::json to_json(const MaskScore& s) {
  return {{"mask", s.mask.to_vector()},
          {"split", to_string(s.split)},
          {"mean_score", s.mean_score},
          {"n_examples", s.n_examples}};
}

std::vector<MaskScore> evaluate_masks(const SegmentedTemplate& seg, std::span<const Mask> masks,
                                      const EvalTask& task, Split split, Gateway& gw,
                                      const EvalOptions& opts) {
  const auto& examples = task.split(split);
  std::vector<MaskScore> out(masks.size());
  std::vector<CompletionRequest> reqs;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    if (masks[m].size() != seg.size()) {
      throw Error(Errc::dimension_mismatch, "mask length " + std::to_string(masks[m].size()) +
                                                " != segment count " + std::to_string(seg.size()));
    }
    out[m] = MaskScore{masks[m], opts.empty_value, examples.size(), split};
    if (masks[m].none()) continue;
    if (examples.empty()) {
      throw Error(Errc::invalid_argument,
                  std::string("the ") + std::string(to_string(split)) + " split is empty");
    }
    for (const auto& ex : examples) {
      CompletionRequest r;
      r.model = opts.model;
      r.prompt = render(seg, masks[m], ex);
      r.temperature = opts.temperature;
      r.max_output_tokens = opts.max_output_tokens;
      reqs.push_back(std::move(r));
    }
  }

  const auto replies = gw.batch_complete(reqs, opts.parallelism,
                                         CallContext{opts.phase, opts.ledger, CacheMode::use});
  std::size_t next = 0;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    if (masks[m].none()) continue;
    double sum = 0.0;
    for (const auto& ex : examples) {
      sum += score(task.metric, ex.reference, extract_answer(replies[next++], opts.tags));
    }
    out[m].mean_score = sum / static_cast<double>(examples.size());
  }
  return out;
}

MaskScore evaluate_mask(const SegmentedTemplate& seg, const Mask& mask, const EvalTask& task,
                        Split split, Gateway& gw, const EvalOptions& opts) {
  if (mask.size() == seg.size() && mask.none()) {
    throw Error(Errc::empty_mask, "mask selects no segment");
  }
  return evaluate_masks(seg, std::span<const Mask>(&mask, 1), task, split, gw, opts).front();
}

MaskEvaluator::MaskEvaluator(const SegmentedTemplate& seg, const EvalTask& task, Split split,
                             Gateway& gw, EvalOptions opts)
    : seg_(seg), task_(task), split_(split), gw_(gw), opts_(std::move(opts)) {}

std::vector<double> MaskEvaluator::evaluate(std::span<const Mask> masks) {
  auto scores = evaluate_masks(seg_, masks, task_, split_, gw_, opts_);
  std::vector<double> out;
  out.reserve(scores.size());
  for (auto& s : scores) {
    out.push_back(s.mean_score);
    records_.push_back(std::move(s));
  }
  return out;
}

std::string MaskEvaluator::export_jsonl() const {
  std::ostringstream out;
  for (const auto& r : records_) out << to_json(r).dump() << '\n';
  return out.str();
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double ndcg(std::span<const double> estimated, std::span<const double> gold) {
  if (estimated.size() != gold.size()) {
    throw Error(Errc::dimension_mismatch, "estimated has " + std::to_string(estimated.size()) +
                                              " scores, gold has " + std::to_string(gold.size()));
  }
  if (gold.empty()) throw Error(Errc::degenerate_gold, "no items");
  const double floor = *std::min_element(gold.begin(), gold.end());
  std::vector<double> relevance(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) relevance[i] = gold[i] - floor;

  auto dcg = [&](const std::vector<std::size_t>& order) {
    double total = 0.0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      total += relevance[order[pos]] / std::log2(static_cast<double>(pos) + 2.0);
    }
    return total;
  };
  const double ideal = dcg(rank_by_score(relevance));
  if (!(ideal > 0.0)) throw Error(Errc::degenerate_gold, "all gold relevances are equal");
  return dcg(rank_by_score(estimated)) / ideal;
}

}  // namespace procut

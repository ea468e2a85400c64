#include "procut/segmentation.hpp"

#include <algorithm>

#include "procut/error.hpp"
#include "procut/llm_json.hpp"
#include "procut/prompt_resources.hpp"

namespace procut {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Cut offsets strictly inside (0, raw.size()) after whitespace runs that
// satisfy `accept(run_start, run_end)`.
template <typename Accept>
std::vector<std::size_t> boundaries_after_whitespace(std::string_view raw,
                                                     const std::vector<std::size_t>& cuts,
                                                     Accept accept) {
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (i < raw.size()) {
    if (!is_space(raw[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < raw.size() && is_space(raw[j])) ++j;
    if (j < raw.size() && i > 0 && accept(i, j) && std::binary_search(cuts.begin(), cuts.end(), j) &&
        std::binary_search(cuts.begin(), cuts.end(), i)) {
      out.push_back(j);
    }
    i = j;
  }
  return out;
}

std::vector<std::string> split_at(std::string_view text, std::size_t base,
                                  const std::vector<std::size_t>& offsets) {
  std::vector<std::string> out;
  std::size_t prev = base;
  for (auto off : offsets) {
    out.emplace_back(text.substr(prev - base, off - prev));
    prev = off;
  }
  out.emplace_back(text.substr(prev - base));
  return out;
}

void merge_from_end(std::vector<std::string>& units, std::size_t max_units) {
  while (units.size() > max_units && units.size() > 1) {
    units[units.size() - 2] += units.back();
    units.pop_back();
  }
}

}  // namespace

SegmentedTemplate segment_predefined(const PromptTemplate& tpl, std::string_view marker) {
  if (marker.empty()) throw Error(Errc::invalid_argument, "segment marker is empty");
  const std::string& raw = tpl.raw_text();

  std::vector<std::string> pieces;
  std::string current;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    const auto hit = raw.find(marker, pos);
    if (hit == std::string::npos) {
      current += raw.substr(pos);
      break;
    }
    const auto after = hit + marker.size();
    const bool line_start = hit == 0 || raw[hit - 1] == '\n';
    const bool line_end = after == raw.size() || raw[after] == '\n' ||
                          (raw[after] == '\r' && after + 1 < raw.size() && raw[after + 1] == '\n');
    current += raw.substr(pos, hit - pos);
    if (line_start && line_end) {
      pieces.push_back(std::move(current));
      current.clear();
    } else {
      current += marker;
    }
    pos = after;
  }
  pieces.push_back(std::move(current));
  std::erase_if(pieces, [](const std::string& p) { return p.empty(); });

  std::string stripped;
  for (const auto& p : pieces) stripped += p;
  return SegmentedTemplate(parse_template(stripped), pieces, SegmentationStrategy::predefined);
}

std::vector<std::string> structural_units(std::string_view raw, std::size_t max_units) {
  if (max_units == 0) throw Error(Errc::invalid_argument, "max_units must be >= 1");
  const auto cuts = cut_points(raw);

  const auto para_cuts = boundaries_after_whitespace(raw, cuts, [&](std::size_t i, std::size_t j) {
    return std::count(raw.begin() + static_cast<std::ptrdiff_t>(i),
                      raw.begin() + static_cast<std::ptrdiff_t>(j), '\n') >= 2;
  });
  auto paragraphs = split_at(raw, 0, para_cuts);
  if (paragraphs.size() >= max_units) {
    merge_from_end(paragraphs, max_units);
    return paragraphs;
  }

  std::vector<std::string> units;
  std::size_t budget = max_units - paragraphs.size();
  std::size_t base = 0;
  for (const auto& para : paragraphs) {
    const std::string_view p(para);
    std::vector<std::size_t> sentence_cuts;
    if (budget > 0) {
      for (auto off : boundaries_after_whitespace(raw.substr(0, base + p.size()), cuts,
                                                  [&](std::size_t i, std::size_t) {
                                                    const char prev = raw[i - 1];
                                                    return prev == '.' || prev == '?' || prev == '!';
                                                  })) {
        if (off > base) sentence_cuts.push_back(off);
      }
    }
    const std::size_t extra = std::min(sentence_cuts.size(), budget);
    sentence_cuts.resize(extra);
    budget -= extra;
    for (auto& s : split_at(p, base, sentence_cuts)) units.push_back(std::move(s));
    base += p.size();
  }
  return units;
}

SegmentedTemplate segment_structural(const PromptTemplate& tpl, std::size_t max_units) {
  return SegmentedTemplate(tpl, structural_units(tpl.raw_text(), max_units),
                           SegmentationStrategy::structural, max_units);
}

std::optional<std::vector<std::string>> realign_units(std::string_view raw,
                                                      const std::vector<std::string>& units) {
  std::vector<std::string> out;
  std::size_t cursor = 0;
  for (const auto& unit : units) {
    if (unit.empty()) continue;
    std::size_t start = cursor;
    if (raw.compare(start, unit.size(), unit) != 0) {
      while (start < raw.size() && is_space(raw[start])) ++start;
      if (start == cursor || raw.compare(start, unit.size(), unit) != 0) return std::nullopt;
    }
    const std::string gap(raw.substr(cursor, start - cursor));
    if (out.empty()) {
      out.push_back(gap + unit);
    } else {
      out.back() += gap;
      out.push_back(unit);
    }
    cursor = start + unit.size();
  }
  if (out.empty()) return std::nullopt;
  const auto rest = raw.substr(cursor);
  if (!std::all_of(rest.begin(), rest.end(), is_space)) return std::nullopt;
  out.back() += std::string(rest);
  return out;
}

std::string segmentation_prompt(const PromptTemplate& tpl, std::size_t max_units) {
  return substitute(prompts::segmentation, {{"current_prompt", tpl.raw_text()},
                                            {"max_units", std::to_string(max_units)}});
}

std::vector<std::string> parse_units_response(std::string_view response) {
  const auto j = parse_llm_json(response);
  if (!j.is_object() || !j.contains("units") || !j["units"].is_array()) {
    throw GatewayError(Errc::malformed_response, "reply has no \"units\" array");
  }
  std::vector<std::string> units;
  for (const auto& u : j["units"]) {
    if (!u.is_object() || !u.contains("template") || !u["template"].is_string()) {
      throw GatewayError(Errc::malformed_response, "unit without a string \"template\" field");
    }
    units.push_back(u["template"].get<std::string>());
  }
  return units;
}

LlmSegmentation segment_llm_detailed(const PromptTemplate& tpl, const SegmentationConfig& cfg,
                                     Gateway& gw, CallLedger* ledger) {
  if (cfg.max_units == 0) throw Error(Errc::invalid_argument, "max_units must be >= 1");
  CompletionRequest req;
  req.model = cfg.model;
  req.prompt = segmentation_prompt(tpl, cfg.max_units);

  std::vector<std::string> rejections;
  const int attempts = 1 + std::max(cfg.retry_limit, 0);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    CallContext ctx{Phase::segmentation, ledger,
                    attempt == 0 ? CacheMode::use : CacheMode::refresh};
    const auto reply = gw.complete(req, ctx);
    std::vector<std::string> units;
    try {
      units = parse_units_response(reply);
    } catch (const GatewayError& e) {
      rejections.emplace_back(e.what());
      continue;
    }
    auto aligned = realign_units(tpl.raw_text(), units);
    if (!aligned) {
      rejections.emplace_back("units do not reconstruct the template");
      continue;
    }
    if (auto problem = validate_segmentation(tpl.raw_text(), *aligned, cfg.max_units)) {
      rejections.push_back(*problem);
      continue;
    }
    return {SegmentedTemplate(tpl, *aligned, SegmentationStrategy::llm, cfg.max_units),
            attempt + 1, false, std::move(rejections)};
  }
  return {segment_structural(tpl, cfg.max_units), attempts, true, std::move(rejections)};
}

SegmentedTemplate segment_llm(const PromptTemplate& tpl, std::size_t max_units, Gateway& gw) {
  SegmentationConfig cfg;
  cfg.max_units = max_units;
  cfg.strategy = SegmentationStrategy::llm;
  return segment_llm_detailed(tpl, cfg, gw).segmentation;
}

SegmentedTemplate segment(const PromptTemplate& tpl, const SegmentationConfig& cfg, Gateway* gw,
                          CallLedger* ledger) {
  switch (cfg.strategy) {
    case SegmentationStrategy::predefined:
      return segment_predefined(tpl, cfg.marker);
    case SegmentationStrategy::structural:
      return segment_structural(tpl, cfg.max_units);
    case SegmentationStrategy::llm:
      if (!gw) throw GatewayError(Errc::gateway_unconfigured, "llm segmentation needs a gateway");
      return segment_llm_detailed(tpl, cfg, *gw, ledger).segmentation;
  }
  return segment_structural(tpl, cfg.max_units);
}

}  // namespace procut

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "procut/domain.hpp"
#include "procut/gateway.hpp"

namespace procut {

inline constexpr std::string_view kDefaultSegmentMarker = "---SEGMENT---";

struct SegmentationConfig {
  std::size_t max_units = 8;
  SegmentationStrategy strategy = SegmentationStrategy::structural;
  std::string marker = std::string(kDefaultSegmentMarker);
  /// Extra LLM attempts after an invalid segmentation, before falling back
  /// to structural segmentation.
  int retry_limit = 2;
  std::string model = "gpt-4.1-mini";
};

/// Splits at lines consisting solely of `marker`. The marker text is removed;
/// the newlines around it stay with the neighbouring segments, so the
/// returned template's source is the marker-stripped text. A template with
/// no marker yields a single segment.
SegmentedTemplate segment_predefined(const PromptTemplate& tpl,
                                     std::string_view marker = kDefaultSegmentMarker);

/// Paragraphs (blank lines) first, then sentences (`.`, `?`, `!` followed by
/// whitespace), refined in document order while the unit count stays within
/// `max_units`. Trailing whitespace stays with the preceding unit. Never cuts
/// inside a placeholder.
SegmentedTemplate segment_structural(const PromptTemplate& tpl, std::size_t max_units);

/// Raw unit texts of segment_structural.
std::vector<std::string> structural_units(std::string_view raw, std::size_t max_units);

/// Re-aligns LLM-proposed units to the original text. Whitespace the model
/// dropped between units is re-attached to the preceding unit; any other
/// discrepancy yields nullopt.
std::optional<std::vector<std::string>> realign_units(std::string_view raw,
                                                      const std::vector<std::string>& units);

/// The segmentation instruction filled with the template and bound.
std::string segmentation_prompt(const PromptTemplate& tpl, std::size_t max_units);

/// Reads `{"units": [{"template": ...}, ...]}`, tolerating code fences.
/// Throws Errc::malformed_response.
std::vector<std::string> parse_units_response(std::string_view response);

struct LlmSegmentation {
  SegmentedTemplate segmentation;
  int attempts = 0;
  bool fell_back = false;
  std::vector<std::string> rejections;
};

/// Asks the model for a segmentation and validates it; invalid answers are
/// retried (bypassing the cache) up to cfg.retry_limit times, then the
/// structural segmenter is used. Gateway errors propagate.
LlmSegmentation segment_llm_detailed(const PromptTemplate& tpl, const SegmentationConfig& cfg,
                                     Gateway& gw, CallLedger* ledger = nullptr);

SegmentedTemplate segment_llm(const PromptTemplate& tpl, std::size_t max_units, Gateway& gw);

/// Dispatches on cfg.strategy. `gw` is required only for the llm strategy.
SegmentedTemplate segment(const PromptTemplate& tpl, const SegmentationConfig& cfg,
                          Gateway* gw = nullptr, CallLedger* ledger = nullptr);

}  // namespace procut

#pragma once

#include <json.hpp>

#include "procut/attribution.hpp"
#include "procut/domain.hpp"
#include "procut/gateway.hpp"
#include "procut/pipeline.hpp"

namespace procut {

nlohmann::json to_json(const LedgerSnapshot& s);
LedgerSnapshot ledger_from_json(const nlohmann::json& j);

/// {template, strategy, segments: [{index, text, tokens, pinned, placeholders}]}.
nlohmann::json to_json(const SegmentedTemplate& seg,
                       const TokenCounter& counter = default_token_counter());

nlohmann::json to_json(const AttributionResult& r);
/// Only `scores` is required. Throws Errc::invalid_argument.
AttributionResult attribution_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunReport& r);
RunReport run_report_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TradeoffCurve& c);

/// Pretty-printed with a trailing newline; the on-disk and CLI form.
std::string dump_document(const nlohmann::json& j);

}  // namespace procut

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "procut/domain.hpp"
#include "procut/gateway.hpp"

namespace procut {

/// Set function the synthetic oracle answers for. Masks are over the
/// oracle's unit library, not over any particular segmentation.
using MaskValue = std::function<double(const Mask&)>;

/// Parses {"additive": [w...]}, {"table": {"101": v, ...}, "default": x}
/// or {"constant": c}. Throws Errc::invalid_argument.
MaskValue mask_value_from_json(const nlohmann::json& j);

struct SyntheticConfig {
  /// Unit library in document order. Prompts are decoded by matching them
  /// against ordered sub-sequences of these texts.
  std::vector<std::string> units;
  MaskValue value;
  MetricId metric = MetricId::token_f1;
  /// token_f1 answers are built from `quantum` reference tokens, so scores
  /// move in steps of 1 / quantum.
  std::size_t quantum = 1000;
};

/// Reference answer the synthetic token_f1 oracle is scored against.
std::string synthetic_reference(std::size_t quantum = 1000);
/// Reference answer for the synthetic exact_match oracle.
inline constexpr std::string_view kSyntheticExactAnswer = "yes";

/// Offline completion backend.
///
/// Dispatch order for a prompt: the scripted table, then (when enabled) the
/// deterministic responders for the segmentation, mask-proposal, ranking
/// and compression prompts, then the synthetic evaluator. Anything else
/// throws GatewayError(Errc::mock_miss).
///
/// The synthetic evaluator decodes which library units a rendered prompt
/// contains (whitespace-insensitive, placeholders match any non-empty text)
/// and answers so that the task metric yields v(mask): for token_f1 the
/// answer holds round(v * quantum) of the reference tokens padded with
/// junk, for exact_match it is correct iff a seeded hash of the prompt
/// falls below v.
class MockOracle final : public CompletionBackend {
 public:
  explicit MockOracle(std::uint64_t seed = 0) : seed_(seed) {}

  /// Later replies are served on repeated calls; the last one repeats.
  void script(std::string prompt, std::vector<std::string> replies);
  void script(std::string prompt, std::string reply) {
    script(std::move(prompt), std::vector<std::string>{std::move(reply)});
  }
  void set_synthetic(SyntheticConfig cfg);
  void enable_meta(bool on = true) noexcept { meta_ = on; }

  std::string complete(const CompletionRequest& req) override;

  /// Units of the library present in `prompt`, or nullopt.
  std::optional<Mask> decode(std::string_view prompt) const;

  /// Prompts answered so far (every complete() that did not throw).
  std::uint64_t calls() const noexcept { return calls_.load(); }

 private:
  struct Piece {
    bool wildcard = false;
    std::string text;
  };

  std::optional<std::string> answer_meta(std::string_view prompt) const;
  std::string answer_synthetic(std::string_view prompt, const Mask& mask) const;

  std::uint64_t seed_;
  bool meta_ = false;
  std::mutex script_mu_;
  std::map<std::string, std::vector<std::string>, std::less<>> scripted_;
  std::map<std::string, std::size_t, std::less<>> served_;
  std::optional<SyntheticConfig> synthetic_;
  std::vector<std::vector<Piece>> unit_pieces_;
  std::atomic<std::uint64_t> calls_{0};
};

/// Builds an oracle from its JSON description:
/// {"seed": 0, "meta": true, "scripted": {prompt: reply | [replies]},
///  "synthetic": {"units": [...], "value": {...}, "metric": "f1", "quantum": 1000}}.
std::shared_ptr<MockOracle> mock_oracle_from_json(const nlohmann::json& j);
std::shared_ptr<MockOracle> load_mock_oracle(const std::filesystem::path& path);

/// Values of the placeholders of `resource` (a prompt template) in the
/// order they appear, if `prompt` is an instance of it.
std::optional<std::vector<std::string>> match_prompt_resource(std::string_view resource,
                                                              std::string_view prompt);

}  // namespace procut

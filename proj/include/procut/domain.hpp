#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace procut {

// ---------------------------------------------------------------------------
// Template lexing
// ---------------------------------------------------------------------------

/// One lexical unit of template text. Placeholders are `{name}`; literal
/// braces are written doubled (`{{`, `}}`).
struct TemplateToken {
  enum class Kind { literal, open_brace, close_brace, placeholder };
  Kind kind;
  std::size_t offset;
  std::size_t length;
  std::string name;  // placeholder only
};

/// Splits raw template text into tokens. Throws Errc::unbalanced_braces.
std::vector<TemplateToken> lex_template(std::string_view raw);

/// Offsets at which the template may be cut without splitting a placeholder
/// or an escaped brace. Always contains 0 and raw.size().
std::vector<std::size_t> cut_points(std::string_view raw);

// ---------------------------------------------------------------------------
// Templates and segments
// ---------------------------------------------------------------------------

class PromptTemplate {
 public:
  const std::string& raw_text() const noexcept { return raw_text_; }
  /// Unique placeholder names in order of first appearance.
  const std::vector<std::string>& placeholders() const noexcept { return placeholders_; }
  bool has_placeholder(std::string_view name) const;

  friend PromptTemplate parse_template(std::string raw);
  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;

 private:
  PromptTemplate() = default;
  std::string raw_text_;
  std::vector<std::string> placeholders_;
};

/// Throws Errc::empty_template or Errc::unbalanced_braces.
PromptTemplate parse_template(std::string raw);

enum class SegmentationStrategy { predefined, structural, llm };

std::string_view to_string(SegmentationStrategy s);
SegmentationStrategy segmentation_strategy_from_string(std::string_view s);

struct Segment {
  std::size_t index = 0;
  std::string text;
  bool pinned = false;
  std::vector<std::string> placeholders;

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered partition of a template into contiguous non-empty segments.
/// Construction validates that the segments reconstruct the source exactly
/// and that no placeholder or escaped brace straddles a boundary.
class SegmentedTemplate {
 public:
  SegmentedTemplate(PromptTemplate source, const std::vector<std::string>& texts,
                    SegmentationStrategy strategy,
                    std::size_t max_units = static_cast<std::size_t>(-1));

  const PromptTemplate& source() const noexcept { return source_; }
  const std::vector<Segment>& segments() const noexcept { return segments_; }
  const Segment& operator[](std::size_t i) const { return segments_.at(i); }
  std::size_t size() const noexcept { return segments_.size(); }
  SegmentationStrategy strategy() const noexcept { return strategy_; }

  std::vector<std::string> texts() const;
  /// Concatenation of all segment texts (equals source().raw_text()).
  std::string join() const;

  /// Copy with the given indices marked pinned. Out-of-range indices throw.
  SegmentedTemplate with_pins(const std::set<std::size_t>& pinned) const;

  friend bool operator==(const SegmentedTemplate&, const SegmentedTemplate&) = default;

 private:
  PromptTemplate source_;
  std::vector<Segment> segments_;
  SegmentationStrategy strategy_;
};

/// Checks the partition invariants without throwing; returns an explanation
/// of the first violation, or nullopt when `texts` is a valid segmentation.
std::optional<std::string> validate_segmentation(std::string_view raw,
                                                 const std::vector<std::string>& texts,
                                                 std::size_t max_units);

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

class Mask {
 public:
  Mask() = default;
  explicit Mask(std::size_t size, bool value = false) : bits_(size, value ? 1 : 0) {}
  static Mask from_bits(const std::vector<int>& bits);
  /// Parses "1011"; throws Errc::invalid_argument on other characters.
  static Mask from_string(std::string_view bits);
  static Mask from_indices(std::size_t size, const std::vector<std::size_t>& on);

  std::size_t size() const noexcept { return bits_.size(); }
  bool test(std::size_t i) const { return bits_.at(i) != 0; }
  Mask& set(std::size_t i, bool value = true) {
    bits_.at(i) = value ? 1 : 0;
    return *this;
  }
  std::size_t count() const noexcept;
  bool none() const noexcept { return count() == 0; }
  bool all() const noexcept { return count() == size(); }
  bool subset_of(const Mask& other) const;
  std::vector<std::size_t> indices() const;
  std::vector<int> to_vector() const;
  std::string to_string() const;

  friend auto operator<=>(const Mask&, const Mask&) = default;
  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

struct MaskHash {
  std::size_t operator()(const Mask& m) const noexcept;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class MetricId { exact_match, token_f1 };
enum class Split { train, test };

std::string_view to_string(MetricId m);
MetricId metric_from_string(std::string_view s);
std::string_view to_string(Split s);

struct EvalExample {
  std::map<std::string, std::string> inputs;
  std::string reference;

  friend bool operator==(const EvalExample&, const EvalExample&) = default;
};

struct EvalTask {
  std::vector<EvalExample> train;
  std::vector<EvalExample> test;
  MetricId metric = MetricId::exact_match;

  const std::vector<EvalExample>& split(Split s) const { return s == Split::train ? train : test; }
};

/// Throws Errc::semantic_mismatch when an example supplies an input the
/// template does not declare or omits one it does.
void check_task_against_template(const EvalTask& task, const PromptTemplate& tpl);

// ---------------------------------------------------------------------------
// Rendering and token counting
// ---------------------------------------------------------------------------

/// Fills placeholders of raw template text and un-escapes doubled braces.
/// Throws Errc::missing_input.
std::string substitute(std::string_view raw, const std::map<std::string, std::string>& inputs);

/// Concatenates the included segments in order with placeholders filled.
/// Throws Errc::empty_mask, Errc::dimension_mismatch, Errc::missing_input.
std::string render(const SegmentedTemplate& seg, const Mask& mask, const EvalExample& ex);

/// Raw template text of the included segments, in original order.
std::string join_masked(const SegmentedTemplate& seg, const Mask& mask);

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Maximal runs of non-whitespace, further split so every ASCII punctuation
/// character is its own token.
std::size_t count_tokens(std::string_view text);
TokenCounter default_token_counter();

}  // namespace procut

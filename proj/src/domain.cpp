#include "procut/domain.hpp"

#include <algorithm>
#include <numeric>

#include "procut/error.hpp"

namespace procut {

namespace {

bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && ((u >= 0x21 && u <= 0x2f) || (u >= 0x3a && u <= 0x40) ||
                      (u >= 0x5b && u <= 0x60) || (u >= 0x7b && u <= 0x7e));
}

std::vector<std::string> placeholder_names(const std::vector<TemplateToken>& tokens) {
  std::vector<std::string> names;
  for (const auto& t : tokens) {
    if (t.kind == TemplateToken::Kind::placeholder &&
        std::find(names.begin(), names.end(), t.name) == names.end()) {
      names.push_back(t.name);
    }
  }
  return names;
}

}  // namespace

std::vector<TemplateToken> lex_template(std::string_view raw) {
  std::vector<TemplateToken> tokens;
  auto push_literal = [&](std::size_t pos) {
    if (!tokens.empty() && tokens.back().kind == TemplateToken::Kind::literal) {
      ++tokens.back().length;
    } else {
      tokens.push_back({TemplateToken::Kind::literal, pos, 1, {}});
    }
  };

  std::size_t i = 0;
  while (i < raw.size()) {
    const char c = raw[i];
    if (c == '{') {
      if (i + 1 < raw.size() && raw[i + 1] == '{') {
        tokens.push_back({TemplateToken::Kind::open_brace, i, 2, {}});
        i += 2;
        continue;
      }
      std::size_t j = i + 1;
      while (j < raw.size() && raw[j] != '}' && raw[j] != '{' && raw[j] != '\n') ++j;
      if (j >= raw.size() || raw[j] != '}') {
        throw Error(Errc::unbalanced_braces,
                    "opening brace at offset " + std::to_string(i) + " has no matching close");
      }
      if (j == i + 1) {
        throw Error(Errc::unbalanced_braces, "empty placeholder at offset " + std::to_string(i));
      }
      tokens.push_back({TemplateToken::Kind::placeholder, i, j - i + 1,
                        std::string(raw.substr(i + 1, j - i - 1))});
      i = j + 1;
    } else if (c == '}') {
      if (i + 1 < raw.size() && raw[i + 1] == '}') {
        tokens.push_back({TemplateToken::Kind::close_brace, i, 2, {}});
        i += 2;
        continue;
      }
      throw Error(Errc::unbalanced_braces,
                  "closing brace at offset " + std::to_string(i) + " has no matching open");
    } else {
      push_literal(i);
      ++i;
    }
  }
  return tokens;
}

std::vector<std::size_t> cut_points(std::string_view raw) {
  std::vector<std::size_t> points{0};
  for (const auto& t : lex_template(raw)) {
    if (t.kind == TemplateToken::Kind::literal) {
      for (std::size_t k = 1; k <= t.length; ++k) points.push_back(t.offset + k);
    } else {
      points.push_back(t.offset + t.length);
    }
  }
  return points;
}

bool PromptTemplate::has_placeholder(std::string_view name) const {
  return std::find(placeholders_.begin(), placeholders_.end(), name) != placeholders_.end();
}

PromptTemplate parse_template(std::string raw) {
  if (raw.empty()) throw Error(Errc::empty_template, "template text is empty");
  PromptTemplate t;
  t.placeholders_ = placeholder_names(lex_template(raw));
  t.raw_text_ = std::move(raw);
  return t;
}

std::string_view to_string(SegmentationStrategy s) {
  switch (s) {
    case SegmentationStrategy::predefined: return "predefined";
    case SegmentationStrategy::structural: return "structural";
    case SegmentationStrategy::llm: return "llm";
  }
  return "structural";
}

SegmentationStrategy segmentation_strategy_from_string(std::string_view s) {
  if (s == "predefined") return SegmentationStrategy::predefined;
  if (s == "structural") return SegmentationStrategy::structural;
  if (s == "llm") return SegmentationStrategy::llm;
  throw Error(Errc::invalid_argument, "unknown segmentation strategy '" + std::string(s) + "'");
}

std::optional<std::string> validate_segmentation(std::string_view raw,
                                                 const std::vector<std::string>& texts,
                                                 std::size_t max_units) {
  if (texts.empty()) return "no units";
  if (texts.size() > max_units) {
    return std::to_string(texts.size()) + " units exceed max_units=" + std::to_string(max_units);
  }
  std::vector<std::size_t> cuts;
  try {
    cuts = cut_points(raw);
  } catch (const Error& e) {
    return std::string(e.what());
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto& t = texts[i];
    if (t.empty()) return "unit " + std::to_string(i) + " is empty";
    if (raw.substr(offset, t.size()) != t) {
      return "unit " + std::to_string(i) + " does not match the original text at offset " +
             std::to_string(offset);
    }
    offset += t.size();
    if (!std::binary_search(cuts.begin(), cuts.end(), offset)) {
      return "unit " + std::to_string(i) + " ends inside a placeholder or escaped brace";
    }
  }
  if (offset != raw.size()) return "units do not cover the whole template";
  return std::nullopt;
}

SegmentedTemplate::SegmentedTemplate(PromptTemplate source, const std::vector<std::string>& texts,
                                     SegmentationStrategy strategy, std::size_t max_units)
    : source_(std::move(source)), strategy_(strategy) {
  if (auto problem = validate_segmentation(source_.raw_text(), texts, max_units)) {
    throw Error(Errc::invalid_argument, "invalid segmentation: " + *problem);
  }
  segments_.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    segments_.push_back(Segment{i, texts[i], false, placeholder_names(lex_template(texts[i]))});
  }
}

std::vector<std::string> SegmentedTemplate::texts() const {
  std::vector<std::string> out;
  out.reserve(segments_.size());
  for (const auto& s : segments_) out.push_back(s.text);
  return out;
}

std::string SegmentedTemplate::join() const {
  std::string out;
  for (const auto& s : segments_) out += s.text;
  return out;
}

SegmentedTemplate SegmentedTemplate::with_pins(const std::set<std::size_t>& pinned) const {
  SegmentedTemplate copy = *this;
  for (auto i : pinned) {
    if (i >= copy.segments_.size()) {
      throw Error(Errc::invalid_argument, "pinned index " + std::to_string(i) + " out of range");
    }
    copy.segments_[i].pinned = true;
  }
  return copy;
}

// ---------------------------------------------------------------------------

Mask Mask::from_bits(const std::vector<int>& bits) {
  Mask m(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != 0 && bits[i] != 1) {
      throw Error(Errc::invalid_argument, "mask bits must be 0 or 1");
    }
    m.bits_[i] = static_cast<std::uint8_t>(bits[i]);
  }
  return m;
}

Mask Mask::from_string(std::string_view bits) {
  Mask m(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != '0' && bits[i] != '1') {
      throw Error(Errc::invalid_argument, "mask string must contain only 0 and 1");
    }
    m.bits_[i] = bits[i] == '1';
  }
  return m;
}

Mask Mask::from_indices(std::size_t size, const std::vector<std::size_t>& on) {
  Mask m(size);
  for (auto i : on) m.set(i);
  return m;
}

std::size_t Mask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

bool Mask::subset_of(const Mask& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (bits_[i] && !other.bits_[i]) return false;
  }
  return true;
}

std::vector<std::size_t> Mask::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (bits_[i]) out.push_back(i);
  }
  return out;
}

std::vector<int> Mask::to_vector() const { return {bits_.begin(), bits_.end()}; }

std::string Mask::to_string() const {
  std::string s(size(), '0');
  for (std::size_t i = 0; i < size(); ++i) {
    if (bits_[i]) s[i] = '1';
  }
  return s;
}

std::size_t MaskHash::operator()(const Mask& m) const noexcept {
  return std::hash<std::string>{}(m.to_string());
}

// ---------------------------------------------------------------------------

std::string_view to_string(MetricId m) {
  return m == MetricId::exact_match ? "exact_match" : "token_f1";
}

MetricId metric_from_string(std::string_view s) {
  if (s == "exact_match" || s == "em") return MetricId::exact_match;
  if (s == "token_f1" || s == "f1") return MetricId::token_f1;
  throw Error(Errc::invalid_argument, "unknown metric '" + std::string(s) + "'");
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

void check_task_against_template(const EvalTask& task, const PromptTemplate& tpl) {
  auto check = [&](const std::vector<EvalExample>& examples, std::string_view split) {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      for (const auto& [name, _] : examples[i].inputs) {
        if (!tpl.has_placeholder(name)) {
          throw Error(Errc::semantic_mismatch, std::string(split) + " example " +
                                                   std::to_string(i) + " supplies input '" + name +
                                                   "' which the template does not declare");
        }
      }
      for (const auto& name : tpl.placeholders()) {
        if (!examples[i].inputs.contains(name)) {
          throw Error(Errc::semantic_mismatch, std::string(split) + " example " +
                                                   std::to_string(i) + " has no input for '" +
                                                   name + "'");
        }
      }
    }
  };
  check(task.train, "train");
  check(task.test, "test");
}

// ---------------------------------------------------------------------------

std::string substitute(std::string_view raw, const std::map<std::string, std::string>& inputs) {
  std::string out;
  out.reserve(raw.size());
  for (const auto& t : lex_template(raw)) {
    switch (t.kind) {
      case TemplateToken::Kind::literal:
        out.append(raw.substr(t.offset, t.length));
        break;
      case TemplateToken::Kind::open_brace:
        out.push_back('{');
        break;
      case TemplateToken::Kind::close_brace:
        out.push_back('}');
        break;
      case TemplateToken::Kind::placeholder: {
        auto it = inputs.find(t.name);
        if (it == inputs.end()) throw Error(Errc::missing_input, t.name);
        out.append(it->second);
        break;
      }
    }
  }
  return out;
}

namespace {
void check_mask(const SegmentedTemplate& seg, const Mask& mask) {
  if (mask.size() != seg.size()) {
    throw Error(Errc::dimension_mismatch, "mask length " + std::to_string(mask.size()) +
                                              " != segment count " + std::to_string(seg.size()));
  }
  if (mask.none()) throw Error(Errc::empty_mask, "mask selects no segment");
}
}  // namespace

std::string render(const SegmentedTemplate& seg, const Mask& mask, const EvalExample& ex) {
  check_mask(seg, mask);
  std::string out;
  for (const auto& s : seg.segments()) {
    if (mask.test(s.index)) out += substitute(s.text, ex.inputs);
  }
  return out;
}

std::string join_masked(const SegmentedTemplate& seg, const Mask& mask) {
  check_mask(seg, mask);
  std::string out;
  for (const auto& s : seg.segments()) {
    if (mask.test(s.index)) out += s.text;
  }
  return out;
}

std::size_t count_tokens(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (char c : text) {
    if (is_ascii_space(c)) {
      in_word = false;
    } else if (is_ascii_punct(c)) {
      ++count;
      in_word = false;
    } else if (!in_word) {
      ++count;
      in_word = true;
    }
  }
  return count;
}

TokenCounter default_token_counter() {
  return [](std::string_view text) { return count_tokens(text); };
}

}  // namespace procut

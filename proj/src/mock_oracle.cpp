#include "procut/mock_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

#include "procut/error.hpp"
#include "procut/io.hpp"
#include "procut/prompt_resources.hpp"
#include "procut/rng.hpp"
#include "procut/segmentation.hpp"

namespace procut {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string strip_ws(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (!is_space(c)) out.push_back(c);
  }
  return out;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string units_json(const std::vector<std::string>& units) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& u : units) arr.push_back({{"template", u}});
  return nlohmann::json{{"units", arr}}.dump(2);
}

std::size_t to_size(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw GatewayError(Errc::mock_miss, "expected an integer in the prompt, got '" + s + "'");
}

}  // namespace

MaskValue mask_value_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, "value spec must be an object");
  if (j.contains("additive")) {
    const auto w = j.at("additive").get<std::vector<double>>();
    return [w](const Mask& m) {
      double v = 0.0;
      for (std::size_t i = 0; i < m.size() && i < w.size(); ++i) {
        if (m.test(i)) v += w[i];
      }
      return v;
    };
  }
  if (j.contains("table")) {
    std::map<std::string, double> table;
    for (const auto& [bits, v] : j.at("table").items()) table[bits] = v.get<double>();
    const double fallback = j.value("default", 0.0);
    return [table, fallback](const Mask& m) {
      const auto it = table.find(m.to_string());
      return it == table.end() ? fallback : it->second;
    };
  }
  if (j.contains("constant")) {
    const double c = j.at("constant").get<double>();
    return [c](const Mask&) { return c; };
  }
  throw Error(Errc::invalid_argument, "value spec needs one of additive, table, constant");
}

std::string synthetic_reference(std::size_t quantum) {
  std::string out;
  for (std::size_t i = 0; i < quantum; ++i) {
    if (i) out.push_back(' ');
    out += "t" + std::to_string(i);
  }
  return out;
}

std::optional<std::vector<std::string>> match_prompt_resource(std::string_view resource,
                                                              std::string_view prompt) {
  // Literal pieces between placeholders, with escapes resolved.
  std::vector<std::string> pieces(1);
  for (const auto& tok : lex_template(resource)) {
    switch (tok.kind) {
      case TemplateToken::Kind::literal:
        pieces.back() += resource.substr(tok.offset, tok.length);
        break;
      case TemplateToken::Kind::open_brace: pieces.back() += '{'; break;
      case TemplateToken::Kind::close_brace: pieces.back() += '}'; break;
      case TemplateToken::Kind::placeholder: pieces.emplace_back(); break;
    }
  }
  if (!prompt.starts_with(pieces.front())) return std::nullopt;
  std::vector<std::string> values;
  std::size_t pos = pieces.front().size();
  for (std::size_t k = 1; k < pieces.size(); ++k) {
    std::size_t at;
    if (k + 1 == pieces.size()) {
      if (!prompt.ends_with(pieces[k]) || prompt.size() - pieces[k].size() < pos) return std::nullopt;
      at = prompt.size() - pieces[k].size();
    } else {
      at = prompt.find(pieces[k], pos);
      if (at == std::string_view::npos) return std::nullopt;
    }
    values.emplace_back(prompt.substr(pos, at - pos));
    pos = at + pieces[k].size();
  }
  if (pieces.size() == 1 && prompt.size() != pos) return std::nullopt;
  return values;
}

void MockOracle::script(std::string prompt, std::vector<std::string> replies) {
  if (replies.empty()) throw Error(Errc::invalid_argument, "scripted entry needs a reply");
  std::lock_guard lock(script_mu_);
  served_.erase(prompt);
  scripted_[std::move(prompt)] = std::move(replies);
}

void MockOracle::set_synthetic(SyntheticConfig cfg) {
  if (cfg.units.empty()) throw Error(Errc::invalid_argument, "synthetic oracle needs units");
  if (!cfg.value) throw Error(Errc::invalid_argument, "synthetic oracle needs a value function");
  if (cfg.quantum == 0) throw Error(Errc::invalid_argument, "quantum must be >= 1");
  unit_pieces_.clear();
  for (const auto& unit : cfg.units) {
    std::vector<Piece> pieces;
    for (const auto& tok : lex_template(unit)) {
      if (tok.kind == TemplateToken::Kind::placeholder) {
        // Adjacent placeholders collapse into one wildcard.
        if (pieces.empty() || !pieces.back().wildcard) pieces.push_back({true, {}});
        continue;
      }
      std::string lit;
      if (tok.kind == TemplateToken::Kind::open_brace) {
        lit = "{";
      } else if (tok.kind == TemplateToken::Kind::close_brace) {
        lit = "}";
      } else {
        lit = strip_ws(std::string_view(unit).substr(tok.offset, tok.length));
      }
      if (lit.empty()) continue;
      if (!pieces.empty() && !pieces.back().wildcard) {
        pieces.back().text += lit;
      } else {
        pieces.push_back({false, std::move(lit)});
      }
    }
    unit_pieces_.push_back(std::move(pieces));
  }
  synthetic_ = std::move(cfg);
}

std::optional<Mask> MockOracle::decode(std::string_view prompt) const {
  if (!synthetic_) return std::nullopt;
  const std::string p = strip_ws(prompt);
  const std::size_t m = unit_pieces_.size();
  std::vector<bool> chosen(m, false);
  // Failed (unit, piece, position) states; position is in the stripped prompt.
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> dead;

  std::function<bool(std::size_t, std::size_t, std::size_t)> walk;
  // Units i.. must cover p[pos..]; inclusion is tried before exclusion.
  std::function<bool(std::size_t, std::size_t)> next_unit = [&](std::size_t i, std::size_t pos) {
    if (i == m) return pos == p.size();
    if (walk(i, 0, pos)) {
      chosen[i] = true;
      return true;
    }
    return next_unit(i + 1, pos);
  };
  walk = [&](std::size_t i, std::size_t piece, std::size_t pos) -> bool {
    const auto key = std::make_tuple(i, piece, pos);
    if (dead.count(key)) return false;
    const auto& pieces = unit_pieces_[i];
    bool ok = false;
    if (piece == pieces.size()) {
      ok = next_unit(i + 1, pos);
    } else if (!pieces[piece].wildcard) {
      const auto& lit = pieces[piece].text;
      ok = p.compare(pos, lit.size(), lit) == 0 && walk(i, piece + 1, pos + lit.size());
    } else if (piece + 1 < pieces.size()) {
      // The following piece is a literal; only try ends where it matches.
      const auto& lit = pieces[piece + 1].text;
      for (auto at = p.find(lit, pos + 1); !ok && at != std::string::npos; at = p.find(lit, at + 1)) {
        ok = walk(i, piece + 1, at);
      }
    } else {
      for (std::size_t end = pos + 1; !ok && end <= p.size(); ++end) ok = walk(i, piece + 1, end);
    }
    if (!ok) dead.insert(key);
    return ok;
  };

  if (!next_unit(0, 0)) return std::nullopt;
  Mask mask(m);
  for (std::size_t i = 0; i < m; ++i) mask.set(i, chosen[i]);
  if (mask.none()) return std::nullopt;
  return mask;
}

std::string MockOracle::answer_synthetic(std::string_view prompt, const Mask& mask) const {
  const auto& cfg = *synthetic_;
  const double v = std::clamp(cfg.value(mask), 0.0, 1.0);
  std::string answer;
  if (cfg.metric == MetricId::exact_match) {
    const double u = static_cast<double>(Rng::mix(fnv1a(prompt, Rng::mix(seed_))) >> 11) * 0x1.0p-53;
    answer = u < v ? std::string(kSyntheticExactAnswer) : "wrong";
  } else {
    const auto hits = static_cast<std::size_t>(std::llround(v * static_cast<double>(cfg.quantum)));
    std::ostringstream out;
    for (std::size_t i = 0; i < cfg.quantum; ++i) {
      if (i) out << ' ';
      if (i < hits) {
        out << 't' << i;
      } else {
        out << 'x' << i;
      }
    }
    answer = out.str();
  }
  return "<answer>" + answer + "</answer>";
}

std::optional<std::string> MockOracle::answer_meta(std::string_view prompt) const {
  if (auto slots = match_prompt_resource(prompts::segmentation, prompt)) {
    // current_prompt, max_units, max_units
    const auto units = structural_units((*slots)[0], to_size((*slots)[1]));
    return units_json(units);
  }

  if (auto slots = match_prompt_resource(prompts::ask_masks, prompt)) {
    // segmented_prompt_template, num_mask, num_features
    const auto t = to_size((*slots)[1]);
    const auto m = to_size((*slots)[2]);
    Rng rng(seed_ ^ 0x6d61736bULL);
    nlohmann::json masks = nlohmann::json::array();
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<int> bits(m, 1);
      if (i < m) {
        if (m > 1) bits[i] = 0;
      } else {
        do {
          for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : 0;
        } while (std::count(bits.begin(), bits.end(), 1) == 0);
      }
      masks.push_back(bits);
    }
    return nlohmann::json{{"masks", masks},
                          {"rationale", "drop one component per mask to see how much it matters"}}
        .dump();
  }

  if (auto slots = match_prompt_resource(prompts::rank, prompt)) {
    std::vector<std::vector<int>> masks;
    std::vector<double> scores;
    std::istringstream lines((*slots)[0]);
    std::string line;
    while (std::getline(lines, line)) {
      const auto open = line.find("mask=[");
      const auto close = line.find("] score=", open);
      if (open == std::string::npos || close == std::string::npos) continue;
      std::vector<int> bits;
      std::string body = line.substr(open + 6, close - open - 6);
      std::replace(body.begin(), body.end(), ',', ' ');
      std::istringstream nums(body);
      for (int b; nums >> b;) bits.push_back(b);
      masks.push_back(std::move(bits));
      scores.push_back(std::stod(line.substr(close + 8)));
    }
    if (masks.empty()) throw GatewayError(Errc::mock_miss, "ranking prompt without experiments");
    const std::size_t m = masks.front().size();
    double overall = 0.0;
    for (double s : scores) overall += s;
    overall /= static_cast<double>(scores.size());
    std::vector<double> effect(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      double on = 0.0, off = 0.0;
      std::size_t n_on = 0, n_off = 0;
      for (std::size_t e = 0; e < masks.size(); ++e) {
        if (j < masks[e].size() && masks[e][j]) {
          on += scores[e];
          ++n_on;
        } else {
          off += scores[e];
          ++n_off;
        }
      }
      effect[j] = (n_on ? on / static_cast<double>(n_on) : overall) -
                  (n_off ? off / static_cast<double>(n_off) : overall);
    }
    std::vector<std::size_t> ranking(m);
    for (std::size_t j = 0; j < m; ++j) ranking[j] = j;
    std::stable_sort(ranking.begin(), ranking.end(),
                     [&](std::size_t a, std::size_t b) { return effect[a] > effect[b]; });
    return nlohmann::json{{"ranking", ranking},
                          {"rationale", "components whose removal lowered the score rank first"}}
        .dump();
  }

  if (auto slots = match_prompt_resource(prompts::vanilla_compress, prompt)) {
    // current_prompt, ratio_percent, target_tokens
    const auto target = to_size((*slots)[2]);
    std::string kept;
    std::size_t tokens = 0;
    for (const auto& unit : structural_units((*slots)[0], static_cast<std::size_t>(-1))) {
      const bool has_placeholder = !parse_template(unit).placeholders().empty();
      const auto n = count_tokens(unit);
      if (has_placeholder || tokens + n <= target) {
        kept += unit;
        tokens += n;
      }
    }
    return "<template>" + kept + "</template>";
  }
  return std::nullopt;
}

std::string MockOracle::complete(const CompletionRequest& req) {
  {
    std::lock_guard lock(script_mu_);
    const auto it = scripted_.find(req.prompt);
    if (it != scripted_.end()) {
      auto& n = served_[req.prompt];
      const auto& reply = it->second[std::min(n, it->second.size() - 1)];
      ++n;
      ++calls_;
      return reply;
    }
  }
  if (meta_) {
    if (auto reply = answer_meta(req.prompt)) {
      ++calls_;
      return *reply;
    }
  }
  if (auto mask = decode(req.prompt)) {
    ++calls_;
    return answer_synthetic(req.prompt, *mask);
  }
  std::string head = req.prompt.substr(0, 80);
  std::replace(head.begin(), head.end(), '\n', ' ');
  throw GatewayError(Errc::mock_miss, "no mock answer for prompt \"" + head + "...\"");
}

std::shared_ptr<MockOracle> mock_oracle_from_json(const nlohmann::json& j) {
  try {
    auto oracle = std::make_shared<MockOracle>(j.value("seed", std::uint64_t{0}));
    oracle->enable_meta(j.value("meta", false));
    if (j.contains("scripted")) {
      for (const auto& [prompt, reply] : j.at("scripted").items()) {
        if (reply.is_array()) {
          oracle->script(prompt, reply.get<std::vector<std::string>>());
        } else {
          oracle->script(prompt, reply.get<std::string>());
        }
      }
    }
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      SyntheticConfig cfg;
      cfg.units = s.at("units").get<std::vector<std::string>>();
      cfg.value = mask_value_from_json(s.at("value"));
      cfg.metric = metric_from_string(s.value("metric", std::string("token_f1")));
      cfg.quantum = s.value("quantum", std::size_t{1000});
      oracle->set_synthetic(std::move(cfg));
    }
    return oracle;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("mock oracle description: ") + e.what());
  }
}

std::shared_ptr<MockOracle> load_mock_oracle(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::io_error, path.string() + ": " + e.what());
  }
  return mock_oracle_from_json(j);
}

}  // namespace procut

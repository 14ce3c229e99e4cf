#include "softtpl/dataprep.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "softtpl/error.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("dataprep", what); }

const std::unordered_map<std::string, int>& small_words() {
  static const std::unordered_map<std::string, int> m = {
      {"zero", 0},      {"one", 1},        {"two", 2},        {"three", 3},     {"four", 4},
      {"five", 5},      {"six", 6},        {"seven", 7},      {"eight", 8},     {"nine", 9},
      {"ten", 10},      {"eleven", 11},    {"twelve", 12},    {"thirteen", 13}, {"fourteen", 14},
      {"fifteen", 15},  {"sixteen", 16},   {"seventeen", 17}, {"eighteen", 18}, {"nineteen", 19},
  };
  return m;
}

const std::unordered_map<std::string, int>& tens_words() {
  static const std::unordered_map<std::string, int> m = {
      {"twenty", 20}, {"thirty", 30},  {"forty", 40},  {"fifty", 50},
      {"sixty", 60},  {"seventy", 70}, {"eighty", 80}, {"ninety", 90},
  };
  return m;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::optional<int> lookup(const std::unordered_map<std::string, int>& m, const std::string& w) {
  auto it = m.find(w);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

std::optional<int> parse_digits(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  if (!std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  int v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

// 0-99 at the head of `w`: "seven", "seventy", "seventy-seven", "seventy seven".
std::optional<ParsedNumber> parse_below_hundred(std::span<const std::string> w) {
  if (w.empty()) return std::nullopt;
  const std::string head = lower(w[0]);
  if (auto v = lookup(small_words(), head)) return ParsedNumber{*v, 1};

  auto dash = head.find('-');
  if (dash != std::string::npos) {
    auto tens = lookup(tens_words(), head.substr(0, dash));
    auto unit = lookup(small_words(), head.substr(dash + 1));
    if (tens && unit && *unit >= 1 && *unit <= 9) return ParsedNumber{*tens + *unit, 1};
    return std::nullopt;
  }
  if (auto tens = lookup(tens_words(), head)) {
    if (w.size() > 1) {
      auto unit = lookup(small_words(), lower(w[1]));
      if (unit && *unit >= 1 && *unit <= 9) return ParsedNumber{*tens + *unit, 2};
    }
    return ParsedNumber{*tens, 1};
  }
  return std::nullopt;
}

std::string canonical_number(std::string_view s) {
  if (auto v = parse_digits(s)) return std::to_string(*v);
  return std::string(s);
}

}  // namespace

std::optional<ParsedNumber> words_to_number(std::span<const std::string> window) {
  if (window.empty()) return std::nullopt;
  if (auto v = parse_digits(window[0])) return ParsedNumber{*v, 1};

  auto lead = parse_below_hundred(window);
  if (!lead) return std::nullopt;
  std::size_t pos = lead->consumed;
  if (lead->value < 1 || lead->value > 9 || pos >= window.size() ||
      lower(window[pos]) != "hundred") {
    return lead;
  }
  ParsedNumber out{lead->value * 100, pos + 1};
  pos = out.consumed;
  std::size_t skip = (pos < window.size() && lower(window[pos]) == "and") ? 1 : 0;
  if (auto rest = parse_below_hundred(window.subspan(std::min(pos + skip, window.size())));
      rest && rest->value >= 1) {
    out.value += rest->value;
    out.consumed = pos + skip + rest->consumed;
  }
  return out;
}

bool FilterRule::fires_after(std::span<const std::string> tokens, std::size_t end) const {
  const std::string key = lower(trigger);
  for (std::size_t i = end; i < tokens.size() && i < end + window; ++i) {
    if (lower(tokens[i]).rfind(key, 0) == 0) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------

ScoreTable::ScoreTable(std::vector<ScoreRow> rows) : rows_(std::move(rows)) {
  std::set<std::pair<std::string, std::string>> seen;
  for (auto& r : rows_) {
    if (r.entity.empty() || r.field.empty() || r.value.empty()) fail("score row has an empty column");
    r.entity = normalize_value("", r.entity, NormalizationMap{});
    r.value = normalize_value(r.field, r.value, NormalizationMap{});
    if (!seen.insert({r.entity, r.field}).second) {
      fail("duplicate score row for (" + r.entity + ", " + r.field + ")");
    }
    lexicon_.insert(r.entity);
    if (r.value == r.entity && !name_fields_.count(r.entity)) name_fields_[r.entity] = r.field;
  }
}

std::string ScoreTable::name_field(const std::string& entity) const {
  auto it = name_fields_.find(entity);
  return it == name_fields_.end() ? "ENTITY" : it->second;
}

EntityScan find_entities(std::span<const std::string> sentence,
                         const std::set<std::string>& lexicon) {
  std::set<std::string> joined;
  std::size_t longest = 1;
  for (const auto& raw : lexicon) {
    std::string key = normalize_value("", raw, NormalizationMap{});
    longest = std::max<std::size_t>(longest, std::count(key.begin(), key.end(), '_') + 1);
    joined.insert(std::move(key));
  }

  EntityScan scan;
  std::size_t i = 0;
  while (i < sentence.size()) {
    bool hit = false;
    for (std::size_t k = std::min(longest, sentence.size() - i); k >= 1; --k) {
      std::string candidate = lower(sentence[i]);
      for (std::size_t m = 1; m < k; ++m) candidate += "_" + lower(sentence[i + m]);
      if (joined.count(candidate)) {
        scan.matches.push_back({scan.tokens.size(), candidate});
        scan.tokens.push_back(std::move(candidate));
        i += k;
        hit = true;
        break;
      }
    }
    if (!hit) scan.tokens.push_back(sentence[i++]);
  }
  return scan;
}

Record align_records(std::span<const std::string> sentence, const ScoreTable& table,
                     std::span<const FilterRule> rules) {
  if (sentence.empty()) fail("cannot align an empty sentence");
  const EntityScan scan = find_entities(sentence, table.lexicon());

  struct Mention {
    int value;
    std::size_t end;
  };
  std::vector<Mention> numbers;
  std::vector<bool> is_entity(scan.tokens.size(), false);
  for (const auto& m : scan.matches) is_entity[m.position] = true;
  for (std::size_t i = 0; i < scan.tokens.size();) {
    if (is_entity[i]) {
      ++i;
      continue;
    }
    std::span<const std::string> rest(scan.tokens.data() + i, scan.tokens.size() - i);
    if (auto n = words_to_number(rest)) {
      numbers.push_back({n->value, i + n->consumed});
      i += n->consumed;
    } else {
      ++i;
    }
  }

  std::vector<std::string> entities;
  for (const auto& m : scan.matches) {
    if (std::find(entities.begin(), entities.end(), m.token) == entities.end()) {
      entities.push_back(m.token);
    }
  }

  struct Chosen {
    std::size_t row;
    bool preferred;
  };
  std::vector<Entry> entries;
  std::size_t score_entries = 0;
  const auto& rows = table.rows();
  for (std::size_t k = 0; k < entities.size(); ++k) {
    const std::string& entity = entities[k];
    const std::string suffix = k == 0 ? "" : "_" + std::to_string(k + 1);
    std::map<std::string, Chosen> by_field;

    for (const auto& number : numbers) {
      const std::string text = std::to_string(number.value);
      std::vector<const FilterRule*> fired;
      for (const auto& rule : rules) {
        if (rule.fires_after(scan.tokens, number.end)) fired.push_back(&rule);
      }
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.entity != entity || canonical_number(row.value) != text) continue;
        bool allowed = std::all_of(fired.begin(), fired.end(),
                                   [&](const FilterRule* f) { return f->fields.count(row.field) > 0; });
        if (!allowed) continue;
        Chosen c{r, !fired.empty()};
        auto [it, inserted] = by_field.emplace(row.field, c);
        if (!inserted && ((c.preferred && !it->second.preferred) ||
                          (c.preferred == it->second.preferred && c.row < it->second.row))) {
          it->second = c;
        }
      }
    }

    entries.push_back({table.name_field(entity) + suffix, entity});
    std::vector<Chosen> picked;
    for (const auto& [field, c] : by_field) {
      if (rows[c.row].value == entity) continue;  // the name row itself
      picked.push_back(c);
    }
    std::sort(picked.begin(), picked.end(), [](const Chosen& a, const Chosen& b) { return a.row < b.row; });
    for (const auto& c : picked) {
      entries.push_back({rows[c.row].field + suffix, canonical_number(rows[c.row].value)});
      ++score_entries;
    }
  }
  if (score_entries == 0) fail("sentence matches no (entity, number) score row");
  try {
    return Record(std::move(entries));
  } catch (const Error& e) {
    fail(std::string("aligned record is invalid: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

ScoreTable load_score_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open score table " + path.string());
  std::vector<ScoreRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      auto value = j.at("value");
      rows.push_back({j.at("entity").get<std::string>(), j.at("field").get<std::string>(),
                      value.is_string() ? value.get<std::string>() : value.dump()});
    } catch (const nlohmann::json::exception& e) {
      fail(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return ScoreTable(std::move(rows));
}

std::vector<FilterRule> load_filter_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open filter rules " + path.string());
  std::vector<FilterRule> rules;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      FilterRule r;
      r.trigger = j.at("trigger").get<std::string>();
      for (const auto& f : j.at("fields")) r.fields.insert(f.get<std::string>());
      r.window = j.value("window", std::size_t{3});
      if (r.trigger.empty() || r.fields.empty()) fail("rule needs a trigger and a field");
      rules.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      fail(path.string() + " line " + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      fail(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return rules;
}

std::vector<FilterRule> default_filter_rules() {
  return {
      {"point", {"PTS", "TEAM-PTS"}, 3},
      {"assist", {"AST", "TEAM-AST"}, 3},
      {"rebound", {"REB", "OREB", "DREB", "TEAM-REB"}, 3},
      {"board", {"REB", "OREB", "DREB", "TEAM-REB"}, 3},
      {"turnover", {"TO", "TEAM-TOV"}, 3},
      {"steal", {"STL"}, 3},
      {"block", {"BLK"}, 3},
      {"minute", {"MIN"}, 3},
      {"percent", {"FG_PCT", "FG3_PCT", "FT_PCT", "TEAM-FG_PCT", "TEAM-FG3_PCT", "TEAM-FT_PCT"}, 3},
  };
}

}  // namespace softtpl

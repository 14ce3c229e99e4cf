#include "softtpl/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "softtpl/error.hpp"

namespace softtpl {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_terminal_punct(char c) { return c == '.' || c == ',' || c == '!' || c == '?'; }

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

[[noreturn]] void fail(const std::string& what) { throw Error("corpus", what); }

}  // namespace

Record::Record(std::vector<Entry> entries, std::size_t max_entries)
    : entries_(std::move(entries)) {
  if (entries_.empty()) fail("record has no entries");
  if (entries_.size() > max_entries) {
    fail("record has " + std::to_string(entries_.size()) + " entries, maximum is " +
         std::to_string(max_entries));
  }
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (e.field.empty()) fail("record has an empty field name");
    if (!seen.insert(e.field).second) fail("duplicate field '" + e.field + "' in record");
    if (e.value.empty()) fail("field '" + e.field + "' has an empty value");
    if (std::any_of(e.value.begin(), e.value.end(), is_space)) {
      fail("value of field '" + e.field + "' contains whitespace");
    }
  }
}

const std::string* Record::find(const std::string& field) const {
  for (const auto& e : entries_) {
    if (e.field == field) return &e.value;
  }
  return nullptr;
}

std::vector<std::string> Record::fields() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.field);
  return out;
}

std::vector<std::string> Record::values() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j == i) break;
    std::string_view chunk = text.substr(i, j - i);
    std::size_t stem = chunk.size();
    while (stem > 0 && is_terminal_punct(chunk[stem - 1])) --stem;
    if (stem > 0) out.push_back(ascii_lower(chunk.substr(0, stem)));
    for (std::size_t k = stem; k < chunk.size(); ++k) out.emplace_back(1, chunk[k]);
    i = j;
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

const NormalizationMap& NormalizationMap::defaults() {
  static const NormalizationMap map{{
      {{"familyfriendly", "yes"}, "family_friendly"},
      {{"familyfriendly", "no"}, "not_family_friendly"},
  }};
  return map;
}

std::string normalize_value(const std::string& field, std::string_view raw,
                            const NormalizationMap& map) {
  std::string lowered = ascii_lower(raw);
  std::string value;
  bool pending_space = false;
  for (char c : lowered) {
    if (is_space(c)) {
      pending_space = !value.empty();
      continue;
    }
    if (pending_space) value += '_';
    pending_space = false;
    value += c;
  }
  if (value.empty()) fail("empty value for field '" + field + "'");
  auto it = map.rewrites.find({ascii_lower(field), value});
  if (it != map.rewrites.end()) return it->second;
  return value;
}

// ---------------------------------------------------------------------------

const std::string& Vocabulary::pad_token() {
  static const std::string s = "<pad>";
  return s;
}
const std::string& Vocabulary::bos_token() {
  static const std::string s = "<s>";
  return s;
}
const std::string& Vocabulary::eos_token() {
  static const std::string s = "</s>";
  return s;
}
const std::string& Vocabulary::unk_token() {
  static const std::string s = "<unk>";
  return s;
}
const std::string& Vocabulary::mask_token() {
  static const std::string s = "<M>";
  return s;
}

Vocabulary::Vocabulary() {
  add(pad_token());
  add(bos_token());
  add(eos_token());
  add(unk_token());
  add(mask_token());
}

Vocabulary Vocabulary::from_tokens(std::span<const std::string> ordinary) {
  Vocabulary v;
  for (const auto& t : ordinary) {
    if (t.empty()) fail("vocabulary token is empty");
    if (v.contains(t)) fail("vocabulary token '" + t + "' appears twice");
    v.add(t);
  }
  return v;
}

void Vocabulary::add(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail("vocabulary id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xffu;  // separator outside the UTF-8 byte range
    h *= 1099511628211ull;
  }
  return h;
}

Vocabulary build_vocabulary(std::span<const CorpusPair> corpus, int min_count) {
  if (corpus.empty()) fail("cannot build a vocabulary from an empty corpus");
  if (min_count < 1) fail("min_count must be >= 1");

  std::unordered_map<std::string, long> counts;
  for (const auto& pair : corpus) {
    for (const auto& t : pair.text) ++counts[t];
    for (const auto& e : pair.record.entries()) {
      ++counts[e.field];
      ++counts[e.value];
    }
  }

  Vocabulary reserved;
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [token, n] : counts) {
    if (n >= min_count && !reserved.contains(token)) kept.emplace_back(token, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> ordered;
  ordered.reserve(kept.size());
  for (auto& [token, n] : kept) ordered.push_back(token);
  return Vocabulary::from_tokens(ordered);
}

// ---------------------------------------------------------------------------

CorpusPair parse_corpus_line(std::string_view line, std::size_t line_number,
                             const NormalizationMap& map) {
  const std::string where = "line " + std::to_string(line_number) + ": ";
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) fail("expected a JSON object");
    if (!j.contains("id") || !j["id"].is_string()) fail("missing string field 'id'");
    if (!j.contains("record") || !j["record"].is_array()) fail("missing array field 'record'");
    if (!j.contains("text") || !j["text"].is_string()) fail("missing string field 'text'");

    std::vector<Entry> entries;
    for (const auto& e : j["record"]) {
      if (!e.is_object() || !e.contains("field") || !e.contains("value") ||
          !e["field"].is_string() || !e["value"].is_string()) {
        fail("record entries must be {\"field\": string, \"value\": string}");
      }
      auto field = e["field"].get<std::string>();
      entries.push_back({field, normalize_value(field, e["value"].get<std::string>(), map)});
    }
    Tokens text = tokenize(j["text"].get<std::string>());
    if (text.empty()) fail("text is empty");
    return CorpusPair{j["id"].get<std::string>(), Record(std::move(entries)), std::move(text)};
  } catch (const Error& e) {
    throw Error("corpus", where + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error("corpus", where + "malformed JSON: " + e.what());
  }
}

std::string format_corpus_line(const CorpusPair& pair) {
  nlohmann::ordered_json j;
  j["id"] = pair.id;
  auto entries = nlohmann::ordered_json::array();
  for (const auto& e : pair.record.entries()) {
    nlohmann::ordered_json o;
    o["field"] = e.field;
    o["value"] = e.value;
    entries.push_back(std::move(o));
  }
  j["record"] = std::move(entries);
  j["text"] = join_tokens(pair.text);
  return j.dump();
}

std::vector<CorpusPair> load_corpus(const std::filesystem::path& path,
                                    const NormalizationMap& map) {
  std::ifstream in(path);
  if (!in) fail("cannot open corpus file " + path.string());
  std::vector<CorpusPair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_corpus_line(line, n, map));
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, std::span<const CorpusPair> corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write corpus file " + path.string());
  for (const auto& pair : corpus) out << format_corpus_line(pair) << '\n';
  if (!out) fail("write failed for " + path.string());
}

}  // namespace softtpl

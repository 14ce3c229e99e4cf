#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"

namespace softtpl {

// Box-score alignment: turns (sentence, score table) into a Record.

struct ScoreRow {
  std::string entity;
  std::string field;
  std::string value;
};

// Rows whose value equals their own entity (e.g. {dwight_howard, PLAYER,
// dwight_howard}) declare the field under which that entity's name is
// recorded. Entities without such a row are recorded under "ENTITY".
class ScoreTable {
 public:
  explicit ScoreTable(std::vector<ScoreRow> rows);

  const std::vector<ScoreRow>& rows() const noexcept { return rows_; }
  const std::set<std::string>& lexicon() const noexcept { return lexicon_; }
  std::string name_field(const std::string& entity) const;

 private:
  std::vector<ScoreRow> rows_;
  std::set<std::string> lexicon_;
  std::map<std::string, std::string> name_fields_;
};

struct FilterRule {
  std::string trigger;                // matched as a token prefix: "assist" hits "assists"
  std::set<std::string> fields;       // fields allowed when the trigger fires
  std::size_t window = 3;             // tokens after the number that are inspected

  bool fires_after(std::span<const std::string> tokens, std::size_t number_pos) const;
};

struct ParsedNumber {
  int value = 0;
  std::size_t consumed = 0;

  bool operator==(const ParsedNumber&) const = default;
};

// Digit tokens and English cardinals 0-999, e.g. "twelve", "twenty-two",
// "twenty two", "one hundred and five". Empty when the window head is not
// numeric.
std::optional<ParsedNumber> words_to_number(std::span<const std::string> window);

struct EntityMatch {
  std::size_t position = 0;  // index in the rewritten sentence
  std::string token;         // underscore-joined entity

  bool operator==(const EntityMatch&) const = default;
};

struct EntityScan {
  Tokens tokens;  // sentence with multi-word entities collapsed
  std::vector<EntityMatch> matches;
};

// Longest match, left to right. Lexicon entries may be space- or
// underscore-separated; both normalize to the underscore-joined form.
EntityScan find_entities(std::span<const std::string> sentence,
                         const std::set<std::string>& lexicon);

Record align_records(std::span<const std::string> sentence, const ScoreTable& table,
                     std::span<const FilterRule> rules);

ScoreTable load_score_table(const std::filesystem::path& path);
std::vector<FilterRule> load_filter_rules(const std::filesystem::path& path);

// Starter rule set for box-score text.
std::vector<FilterRule> default_filter_rules();

}  // namespace softtpl

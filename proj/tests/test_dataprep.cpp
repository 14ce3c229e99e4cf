#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "softtpl/dataprep.hpp"
#include "softtpl/error.hpp"

#include "oracles.hpp"

using namespace softtpl;
using softtpl::oracle::render;

namespace {

ScoreTable nba_table() {
  return ScoreTable({
      {"Dwight Howard", "PLAYER", "Dwight Howard"},
      {"Dwight Howard", "PTS", "10"},
      {"Dwight Howard", "AST", "10"},
      {"Dwight Howard", "REB", "15"},
      {"Dwight Howard", "STL", "2"},
      {"Magic", "TEAM", "Magic"},
      {"Magic", "TEAM-PTS", "101"},
  });
}

Tokens words(std::string_view s) {
  Tokens out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("words_to_number examples") {
  CHECK(words_to_number(Tokens{"twelve"}) == ParsedNumber{12, 1});
  CHECK(words_to_number(Tokens{"twenty-two", "points"}) == ParsedNumber{22, 1});
  CHECK(words_to_number(Tokens{"one", "hundred", "and", "five"}) == ParsedNumber{105, 4});
  CHECK(words_to_number(Tokens{"18"}) == ParsedNumber{18, 1});
  CHECK(words_to_number(Tokens{"Twelve"}) == ParsedNumber{12, 1});
  CHECK_FALSE(words_to_number(Tokens{"points"}));
  CHECK_FALSE(words_to_number(Tokens{"twenty-points"}));
  CHECK_FALSE(words_to_number(std::span<const std::string>{}));
  // "and" not followed by a number is left alone
  CHECK(words_to_number(Tokens{"two", "hundred", "and", "counting"}) == ParsedNumber{200, 2});
}

TEST_CASE("words_to_number round-trips every cardinal 0-999") {
  for (int n = 0; n <= 999; ++n) {
    for (int style = 0; style < 2; ++style) {
      for (bool with_and : {false, true}) {
        Tokens t = render(n, style, with_and);
        const std::size_t len = t.size();
        t.push_back("points");
        const auto r = words_to_number(t);
        REQUIRE(r);
        CHECK(r->value == n);
        CHECK(r->consumed == len);
      }
    }
    const auto d = words_to_number(Tokens{std::to_string(n)});
    REQUIRE(d);
    CHECK(d->value == n);
  }
}

TEST_CASE("find_entities longest match") {
  const std::set<std::string> lex{"dwight howard"};
  const auto s = find_entities(words("Dwight Howard scored"), lex);
  REQUIRE(s.matches.size() == 1);
  CHECK(s.matches[0] == EntityMatch{0, "dwight_howard"});
  CHECK(s.tokens == Tokens{"dwight_howard", "scored"});
  CHECK(find_entities(words("nobody scored"), lex).matches.empty());

  // both insertion orders, longest wins
  for (const auto& lexicon : {std::set<std::string>{"golden curry", "the golden curry"},
                              std::set<std::string>{"the golden curry", "golden curry"}}) {
    const auto r = find_entities(words("try the golden curry today"), lexicon);
    REQUIRE(r.matches.size() == 1);
    CHECK(r.matches[0] == EntityMatch{1, "the_golden_curry"});
    CHECK(r.tokens == Tokens{"try", "the_golden_curry", "today"});
  }
  const auto r = find_entities(words("golden curry and the golden curry"),
                               std::set<std::string>{"golden curry", "the golden curry"});
  REQUIRE(r.matches.size() == 2);
  CHECK(r.matches[0] == EntityMatch{0, "golden_curry"});
  CHECK(r.matches[1] == EntityMatch{2, "the_golden_curry"});
}

TEST_CASE("align_records basic pairing") {
  const auto table = nba_table();
  const auto rules = default_filter_rules();
  const Record r = align_records(words("dwight_howard scored 15 rebounds"), table, rules);
  CHECK(r == Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"REB", "15"}}));
}

TEST_CASE("align_records filter disambiguates equal values") {
  const auto table = nba_table();
  const auto rules = default_filter_rules();
  CHECK(align_records(words("dwight_howard handed out 10 assists"), table, rules) ==
        Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"AST", "10"}}));
  CHECK(align_records(words("dwight_howard scored ten points"), table, rules) ==
        Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"PTS", "10"}}));
  // no trigger: both rows survive, in table order
  CHECK(align_records(words("dwight_howard had 10"), table, rules) ==
        Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"PTS", "10"}, {"AST", "10"}}));
}

TEST_CASE("align_records with the table example") {
  const ScoreTable t({{"Dwight Howard", "PLAYER", "Dwight Howard"}, {"Dwight Howard", "PTS", "10"}});
  const auto r = align_records(words("dwight_howard scored 10 points"), t, default_filter_rules());
  CHECK(r == Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"PTS", "10"}}));
}

TEST_CASE("align_records multiple entities get suffixed fields") {
  const auto r = align_records(words("dwight_howard had 15 rebounds as the magic scored 101 points"),
                               nba_table(), default_filter_rules());
  CHECK(r == Record(std::vector<Entry>{{"PLAYER", "dwight_howard"}, {"REB", "15"}, {"TEAM_2", "magic"},
                     {"TEAM-PTS_2", "101"}}));
}

TEST_CASE("align_records errors") {
  const auto table = nba_table();
  CHECK_THROWS_AS(align_records(Tokens{}, table, default_filter_rules()), Error);
  CHECK_THROWS_AS(align_records(words("nobody scored 10 points"), table, default_filter_rules()), Error);
}

TEST_CASE("aligned values appear in the sentence or the table") {
  const auto table = nba_table();
  const auto rules = default_filter_rules();
  const Tokens s = words("dwight_howard had 15 rebounds , 2 steals and 10 points for the magic");
  const Record r = align_records(s, table, rules);
  for (const auto& e : r.entries()) {
    bool in_sentence = std::find(s.begin(), s.end(), e.value) != s.end();
    bool in_table = std::any_of(table.rows().begin(), table.rows().end(),
                                [&](const ScoreRow& row) { return row.value == e.value; });
    CHECK((in_sentence || in_table));
  }
}

TEST_CASE("adding filter rules never adds rows") {
  const auto table = nba_table();
  const auto all_rules = default_filter_rules();
  const std::vector<Tokens> sentences{
      words("dwight_howard had 10 assists and 15 rebounds"),
      words("dwight_howard had 10 , 15 and 2"),
      words("dwight_howard scored 10 points with 2 steals"),
      words("the magic put up 101 points behind dwight_howard 's 10 boards"),
  };
  std::mt19937 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<FilterRule> subset;
    for (const auto& r : all_rules) {
      if (rng() % 2) subset.push_back(r);
    }
    std::vector<FilterRule> superset = subset;
    superset.push_back(all_rules[rng() % all_rules.size()]);
    for (const auto& s : sentences) {
      std::optional<Record> small, big;
      try { small = align_records(s, table, subset); } catch (const Error&) {}
      try { big = align_records(s, table, superset); } catch (const Error&) {}
      if (!big) continue;
      REQUIRE(small);
      for (const auto& e : big->entries()) {
        const std::string* v = small->find(e.field);
        CHECK((v && *v == e.value));
      }
    }
  }
}

TEST_CASE("score table validation") {
  CHECK_THROWS_AS((void)ScoreTable({{"a", "PTS", "1"}, {"a", "PTS", "2"}}), Error);
  CHECK_THROWS_AS((void)ScoreTable({{"a", "", "1"}}), Error);
  const ScoreTable t({{"A B", "PTS", "1"}});
  CHECK(t.lexicon() == std::set<std::string>{"a_b"});
  CHECK(t.name_field("a_b") == "ENTITY");
}

TEST_CASE("rule and table files load") {
  const auto rules = load_filter_rules(std::filesystem::path(SOFTTPL_GOLDEN_DIR) / "../../data/filter_rules.jsonl");
  CHECK(rules.size() == default_filter_rules().size());
  for (std::size_t i = 0; i < rules.size(); ++i) {
    CHECK(rules[i].trigger == default_filter_rules()[i].trigger);
    CHECK(rules[i].fields == default_filter_rules()[i].fields);
    CHECK(rules[i].window == 3);
  }
  const auto dir = std::filesystem::temp_directory_path() / "softtpl_tests";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "table.jsonl");
    out << R"({"entity":"Dwight Howard","field":"PTS","value":10})" << '\n';
    out << R"({"entity":"Dwight Howard","field":"PLAYER","value":"Dwight Howard"})" << '\n';
  }
  const auto t = load_score_table(dir / "table.jsonl");
  CHECK(t.rows().size() == 2);
  CHECK(t.rows()[0].value == "10");
  CHECK(t.name_field("dwight_howard") == "PLAYER");
  {
    std::ofstream out(dir / "rules.jsonl");
    out << R"({"trigger":"x","fields":[]})" << '\n';
  }
  CHECK_THROWS_AS(load_filter_rules(dir / "rules.jsonl"), Error);
}

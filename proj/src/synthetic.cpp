#include <algorithm>
#include <cstdio>
#include <random>
#include <set>

#include "softtpl/corpus.hpp"
#include "softtpl/error.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("corpus", "synthetic spec: " + what); }

constexpr std::string_view kSlot = "{}";

}  // namespace

SyntheticSpec SyntheticSpec::restaurant() {
  SyntheticSpec s;
  s.fields = {
      {"name",
       {"the_golden_curry", "cocum", "strada", "the_punter", "fitzbillies", "the_phoenix",
        "the_waterman", "alimentum", "aromi", "blue_spice", "browns_cambridge", "clowns",
        "cotto", "giraffe", "green_man", "loch_fyne", "the_cricketers", "the_eagle", "the_mill",
        "the_plough", "the_rice_boat", "wildwood"},
       true},
      {"eatType", {"restaurant", "coffee_shop", "pub"}},
      {"food", {"italian", "french", "japanese", "chinese", "indian", "english", "fast_food"}},
      {"priceRange",
       {"cheap", "moderate", "expensive", "less_than_£20", "£20-25", "more_than_£30"}},
      {"customerRating", {"low", "average", "high", "1_out_of_5", "3_out_of_5", "5_out_of_5"}},
      {"area", {"riverside", "city_centre"}},
      {"familyFriendly", {"family_friendly", "not_family_friendly"}},
      {"near",
       {"cafe_rouge", "zizzi", "the_bakers", "cafe_sicilia", "the_sorrento", "burger_king",
        "crowne_plaza_hotel", "rainbow_vegetarian_cafe", "all_bar_one", "raja_indian_cuisine",
        "the_portland_arms", "express_by_holiday_inn"}},
  };
  s.patterns = {
      {"plain",
       "",
       {{"name", "{} is a place"},
        {"eatType", "of the {} type"},
        {"food", "serving {} food"},
        {"priceRange", "with {} prices"},
        {"customerRating", ", rated {} by diners"},
        {"area", "in the {} area"},
        {"near", "near {}"},
        {"familyFriendly", "and it is {}"}},
       "."},
      {"looking-for",
       "looking for",
       {{"food", "{} food"},
        {"area", "in the {} area"},
        {"near", "near {}"},
        {"name", "? come try {}"},
        {"eatType", ", a {}"},
        {"customerRating", ", which has a {} customer rating"},
        {"priceRange", "and is priced {}"},
        {"familyFriendly", ". it is {}"}},
       "."},
      {"along-the",
       "",
       {{"area", "along the {}"},
        {"near", "near {}"},
        {"food", ", there is a {} food"},
        {"eatType", "{}"},
        {"name", "called {}"},
        {"customerRating", ". it has a {} customer rating"},
        {"familyFriendly", "since it is {}"},
        {"priceRange", "and prices are {}"}},
       "."},
      {"they-serve",
       "",
       {{"name", "{} is a"},
        {"familyFriendly", "{}"},
        {"eatType", "{}"},
        {"priceRange", "in the {} range"},
        {"food", ". they serve {} food"},
        {"near", "and can be found near {}"},
        {"area", "in {}"},
        {"customerRating", ". they have a {} customer rating"}},
       "."},
      {"visit",
       "for",
       {{"food", "{} food"},
        {"priceRange", "at {} prices"},
        {"customerRating", "with a {} rating"},
        {"name", ", visit {}"},
        {"eatType", ", a {}"},
        {"area", "located at {}"},
        {"near", "close to {}"},
        {"familyFriendly", "that is {}"}},
       "!"},
      {"rating-first",
       "",
       {{"customerRating", "with a customer rating of {} ,"},
        {"name", "{}"},
        {"eatType", "is a {}"},
        {"food", "offering {} cuisine"},
        {"familyFriendly", "which is {}"},
        {"priceRange", "and costs {}"},
        {"area", "in the {}"},
        {"near", "by {}"}},
       "."},
  };
  return s;
}

void SyntheticSpec::validate() const {
  if (fields.empty()) fail("no fields");
  if (patterns.empty()) fail("no patterns");
  std::set<std::string> names;
  std::set<std::string> all_values;
  std::size_t required = 0;
  for (const auto& f : fields) {
    if (f.name.empty()) fail("empty field name");
    if (!names.insert(f.name).second) fail("duplicate field " + f.name);
    if (f.values.empty()) fail("field " + f.name + " has no values");
    for (const auto& v : f.values) {
      if (v.empty() || v.find_first_of(" \t\n") != std::string::npos) {
        fail("field " + f.name + " has a value that is not a single token");
      }
      if (tokenize(v) != Tokens{v}) fail("value '" + v + "' does not survive tokenization");
      if (!all_values.insert(v).second) fail("value '" + v + "' is shared between fields");
    }
    if (f.required) ++required;
  }
  if (min_fields < 1 || min_fields > max_fields) fail("invalid min/max fields");
  if (max_fields > fields.size() || max_fields > Record::kDefaultMaxEntries) {
    fail("max_fields exceeds the field inventory");
  }
  if (required > max_fields) fail("more required fields than max_fields");
  if (target_mean_fields < static_cast<double>(std::max(min_fields, required)) ||
      target_mean_fields > static_cast<double>(max_fields)) {
    fail("target_mean_fields outside [min_fields, max_fields]");
  }
  for (const auto& p : patterns) {
    std::set<std::string> covered;
    for (const auto& c : p.clauses) {
      if (!names.count(c.field)) fail("pattern " + p.name + " names unknown field " + c.field);
      if (!covered.insert(c.field).second) fail("pattern " + p.name + " repeats " + c.field);
      auto first = c.text.find(kSlot);
      if (first == std::string::npos || c.text.find(kSlot, first + 1) != std::string::npos) {
        fail("clause for " + c.field + " in " + p.name + " needs exactly one {}");
      }
    }
    if (covered.size() != names.size()) fail("pattern " + p.name + " does not cover every field");
    std::string connectors = p.prefix + " " + p.suffix;
    for (const auto& c : p.clauses) {
      std::string t = c.text;
      t.replace(t.find(kSlot), kSlot.size(), " ");
      connectors += " " + t;
    }
    for (const auto& tok : tokenize(connectors)) {
      if (all_values.count(tok)) fail("pattern " + p.name + " uses value token " + tok);
    }
  }
}

std::vector<CorpusPair> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();

  std::size_t required = 0;
  for (const auto& f : spec.fields) required += f.required ? 1 : 0;
  const std::size_t optional = spec.fields.size() - required;
  const double p_include =
      optional == 0 ? 0.0
                    : std::clamp((spec.target_mean_fields - static_cast<double>(required)) /
                                     static_cast<double>(optional),
                                 0.0, 1.0);

  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution include(p_include);

  std::vector<CorpusPair> out;
  out.reserve(spec.pairs);
  for (std::size_t n = 0; n < spec.pairs; ++n) {
    std::uniform_int_distribution<std::size_t> pick_pattern(0, spec.patterns.size() - 1);
    const auto& pattern = spec.patterns[pick_pattern(rng)];

    std::vector<bool> present(spec.fields.size());
    std::size_t count = 0;
    do {
      count = 0;
      for (std::size_t i = 0; i < spec.fields.size(); ++i) {
        present[i] = spec.fields[i].required || include(rng);
        count += present[i] ? 1 : 0;
      }
    } while (count < spec.min_fields || count > spec.max_fields);

    std::vector<Entry> entries;
    for (std::size_t i = 0; i < spec.fields.size(); ++i) {
      if (!present[i]) continue;
      const auto& f = spec.fields[i];
      std::uniform_int_distribution<std::size_t> pick_value(0, f.values.size() - 1);
      entries.push_back({f.name, f.values[pick_value(rng)]});
    }
    Record record(std::move(entries));

    std::string sentence = pattern.prefix;
    for (const auto& clause : pattern.clauses) {
      const std::string* value = record.find(clause.field);
      if (!value) continue;
      std::string text = clause.text;
      text.replace(text.find(kSlot), kSlot.size(), *value);
      sentence += " " + text;
    }
    sentence += " " + pattern.suffix;

    char id[32];
    std::snprintf(id, sizeof id, "syn-%06zu", n);
    out.push_back(CorpusPair{id, std::move(record), tokenize(sentence)});
  }
  return out;
}

}  // namespace softtpl

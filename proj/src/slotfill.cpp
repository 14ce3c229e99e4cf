#include "softtpl/slotfill.hpp"

#include <algorithm>

namespace softtpl {

namespace {

// "PTS_2" -> "PTS": later entities in a record carry a numeric suffix.
std::string base_field(const std::string& f) {
  const auto us = f.rfind('_');
  if (us == std::string::npos || us + 1 == f.size()) return f;
  const bool digits = std::all_of(f.begin() + static_cast<std::ptrdiff_t>(us) + 1, f.end(),
                                  [](unsigned char c) { return c >= '0' && c <= '9'; });
  return digits ? f.substr(0, us) : f;
}

}  // namespace

std::size_t Template::slot_count() const {
  return static_cast<std::size_t>(
      std::count_if(slots.begin(), slots.end(), [](const auto& s) { return s.has_value(); }));
}

Template extract_template(const Record& exemplar_record, const Tokens& exemplar,
                          std::span<const FilterRule> rules) {
  Template t{exemplar, std::vector<std::optional<std::string>>(exemplar.size())};
  for (std::size_t i = 0; i < exemplar.size(); ++i) {
    std::vector<std::string> fields;
    for (const auto& e : exemplar_record.entries()) {
      if (e.value == exemplar[i]) fields.push_back(e.field);
    }
    if (fields.empty()) continue;
    if (fields.size() > 1) {
      std::vector<std::string> allowed = fields;
      for (const auto& rule : rules) {
        if (!rule.fires_after(exemplar, i + 1)) continue;
        std::erase_if(allowed,
                      [&](const std::string& f) { return !rule.fields.contains(base_field(f)); });
      }
      if (!allowed.empty()) fields = std::move(allowed);
    }
    t.slots[i] = fields.front();
  }
  return t;
}

Template extract_template(const Record& exemplar_record, const Tokens& exemplar) {
  static const std::vector<FilterRule> rules = default_filter_rules();
  return extract_template(exemplar_record, exemplar, rules);
}

Tokens fill_template(const Template& tpl, const Record& record) {
  Tokens out = tpl.tokens;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!tpl.slots[i]) continue;
    if (const std::string* v = record.find(*tpl.slots[i])) out[i] = *v;
  }
  return out;
}

Tokens slot_fill(const Record& record, const Record& exemplar_record, const Tokens& exemplar) {
  return fill_template(extract_template(exemplar_record, exemplar), record);
}

}  // namespace softtpl

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"
#include "softtpl/dataprep.hpp"

namespace softtpl {

// Exemplar tokens with some positions marked as slots for a field of x_e.
struct Template {
  Tokens tokens;
  std::vector<std::optional<std::string>> slots;  // field name per position

  std::size_t slot_count() const;
  bool operator==(const Template&) const = default;
};

// A token equal to one x_e value becomes a slot for that field. A token equal
// to several values is resolved by the keyword rules firing after it, then by
// record order.
Template extract_template(const Record& exemplar_record, const Tokens& exemplar,
                          std::span<const FilterRule> rules);
Template extract_template(const Record& exemplar_record, const Tokens& exemplar);

// Slots whose field is missing from `record` keep the exemplar token.
Tokens fill_template(const Template& tpl, const Record& record);

Tokens slot_fill(const Record& record, const Record& exemplar_record, const Tokens& exemplar);

}  // namespace softtpl

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"

namespace softtpl {

// T(x): the set of field names of a record, kept sorted.
class FieldSet {
 public:
  explicit FieldSet(const Record& record);
  explicit FieldSet(std::vector<std::string> fields);

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t size() const noexcept { return names_.size(); }

  bool operator==(const FieldSet&) const = default;
  auto operator<=>(const FieldSet&) const = default;

 private:
  std::vector<std::string> names_;
};

// |T(a) u T(b)| - |T(a) n T(b)|, i.e. the size of the symmetric difference.
std::size_t field_set_distance(const FieldSet& a, const FieldSet& b);
std::size_t field_set_distance(const Record& a, const Record& b);

struct RetrievalOptions {
  std::size_t max_distance = 5;
  bool prefer_equal_size = true;
  std::uint64_t seed = 0;
};

struct Retrieved {
  std::size_t pool_index;
  std::size_t distance;
};

// Groups a pool by field signature so a query touches each distinct field
// set once instead of every pool entry.
class ExemplarIndex {
 public:
  explicit ExemplarIndex(std::span<const CorpusPair> pool);

  // Pool indices within `max_distance` of `query`, excluding `query_id`,
  // narrowed to equal field count when requested and possible. Ascending.
  std::vector<std::size_t> candidates(const Record& query, const std::string& query_id,
                                      std::size_t max_distance, bool prefer_equal_size) const;

  // Uniform draw among candidates from a generator seeded by
  // (options.seed, stream). Throws Error("retrieval") when nothing qualifies.
  Retrieved retrieve(const Record& query, const std::string& query_id,
                     const RetrievalOptions& options, std::uint64_t stream) const;

  std::span<const CorpusPair> pool() const noexcept { return pool_; }

 private:
  struct Group {
    FieldSet fields;
    std::vector<std::size_t> members;
  };
  std::span<const CorpusPair> pool_;
  std::vector<Group> groups_;
};

struct Exemplar {
  Record record;
  Tokens text;
  std::string id;
  std::size_t distance;
};

Exemplar retrieve_exemplar(const CorpusPair& query, std::span<const CorpusPair> pool,
                           const RetrievalOptions& options);

// Deterministic 64-bit mixing of a seed with a stream number.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace softtpl

#include "softtpl/retrieval.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "softtpl/error.hpp"

namespace softtpl {

FieldSet::FieldSet(const Record& record) : FieldSet(record.fields()) {}

FieldSet::FieldSet(std::vector<std::string> fields) : names_(std::move(fields)) {
  std::sort(names_.begin(), names_.end());
  names_.erase(std::unique(names_.begin(), names_.end()), names_.end());
  if (names_.empty()) throw Error("retrieval", "field set is empty");
}

std::size_t field_set_distance(const FieldSet& a, const FieldSet& b) {
  const auto& x = a.names();
  const auto& y = b.names();
  std::size_t common = 0;
  auto i = x.begin();
  auto j = y.begin();
  while (i != x.end() && j != y.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++common;
      ++i;
      ++j;
    }
  }
  const std::size_t all = x.size() + y.size() - common;
  return all - common;
}

std::size_t field_set_distance(const Record& a, const Record& b) {
  return field_set_distance(FieldSet(a), FieldSet(b));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over a combined state
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

ExemplarIndex::ExemplarIndex(std::span<const CorpusPair> pool) : pool_(pool) {
  std::map<FieldSet, std::size_t> slot;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    FieldSet fs(pool[i].record);
    auto [it, inserted] = slot.emplace(fs, groups_.size());
    if (inserted) groups_.push_back({std::move(fs), {}});
    groups_[it->second].members.push_back(i);
  }
}

std::vector<std::size_t> ExemplarIndex::candidates(const Record& query,
                                                   const std::string& query_id,
                                                   std::size_t max_distance,
                                                   bool prefer_equal_size) const {
  const FieldSet q(query);
  std::vector<std::size_t> near;
  std::vector<std::size_t> same_size;
  for (const auto& g : groups_) {
    if (field_set_distance(q, g.fields) > max_distance) continue;
    const bool equal = g.fields.size() == q.size();
    for (std::size_t m : g.members) {
      if (pool_[m].id == query_id) continue;
      near.push_back(m);
      if (equal) same_size.push_back(m);
    }
  }
  auto& chosen = (prefer_equal_size && !same_size.empty()) ? same_size : near;
  std::sort(chosen.begin(), chosen.end());
  return std::move(chosen);
}

Retrieved ExemplarIndex::retrieve(const Record& query, const std::string& query_id,
                                  const RetrievalOptions& options, std::uint64_t stream) const {
  if (pool_.empty()) throw Error("retrieval", "exemplar pool is empty");
  auto c = candidates(query, query_id, options.max_distance, options.prefer_equal_size);
  if (c.empty()) {
    throw Error("retrieval", "no exemplar within distance " + std::to_string(options.max_distance) +
                                 " for '" + query_id + "'");
  }
  std::mt19937_64 rng(derive_seed(options.seed, stream));
  std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
  const std::size_t idx = c[pick(rng)];
  return {idx, field_set_distance(query, pool_[idx].record)};
}

Exemplar retrieve_exemplar(const CorpusPair& query, std::span<const CorpusPair> pool,
                           const RetrievalOptions& options) {
  ExemplarIndex index(pool);
  auto r = index.retrieve(query.record, query.id, options, 0);
  const auto& p = pool[r.pool_index];
  return {p.record, p.text, p.id, r.distance};
}

}  // namespace softtpl

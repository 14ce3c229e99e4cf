#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"
#include "softtpl/metrics.hpp"
#include "softtpl/training.hpp"

namespace softtpl {

// Line of a retrieval output file.
struct TripleRef {
  std::string id;
  std::string exemplar_id;
  std::size_t distance = 0;
};

std::vector<TripleRef> load_triple_refs(const std::filesystem::path& path);
void save_triple_refs(const std::filesystem::path& path, std::span<const TripleRef> refs);

// Joins references with their query (from `corpus`) and exemplar (from `pool`).
std::vector<TrainingTriple> resolve_triples(std::span<const TripleRef> refs,
                                            std::span<const CorpusPair> corpus,
                                            std::span<const CorpusPair> pool);

std::vector<EvalInstance> to_eval_instances(std::span<const TrainingTriple> triples);

std::vector<Generation> load_generations(const std::filesystem::path& path);
void save_generations(const std::filesystem::path& path, std::span<const Generation> gens);

// Entry point; `args` excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace softtpl

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"

namespace softtpl {

// Tokens treated as content when masking: every record value in a dataset
// plus anything that looks like a numeral.
class ContentLexicon {
 public:
  explicit ContentLexicon(std::set<std::string> values);
  static ContentLexicon from_corpus(std::span<const CorpusPair> corpus);
  static ContentLexicon from_json(const std::string& text);

  bool contains(const std::string& token) const;
  static bool is_numeral(const std::string& token);

  const std::set<std::string>& values() const noexcept { return values_; }
  std::uint64_t hash() const;
  std::string to_json() const;

 private:
  std::set<std::string> values_;
};

Tokens mask_content(const Tokens& tokens, const ContentLexicon& lexicon);

// Corpus BLEU-4 on unmasked tokens, 0-100. Orders that no candidate is long
// enough to contain are left out of the geometric mean.
double corpus_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references);

// corpus_bleu after masking both sides.
double m_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references,
              const ContentLexicon& lexicon);

struct InstanceScores {
  double incl_new = 0;
  double excl_old = 0;
  double precision = 0;
  double recall = 0;
};

InstanceScores content_fidelity(const Tokens& generated, const Record& x, const Record& x_e,
                                const ContentLexicon& lexicon);

struct EvalReport {
  double m_bleu = 0;
  double incl_new = 0;
  double excl_old = 0;
  double precision = 0;
  double recall = 0;
  std::size_t count = 0;

  std::string to_json() const;
};

struct EvalInstance {
  std::string id;
  Record x;
  Record x_e;
  Tokens exemplar;
  std::size_t distance = 0;
};

struct Generation {
  std::string id;
  Tokens tokens;
};

// Macro-averaged fidelity, corpus-level m-BLEU against the exemplars.
// Throws Error("metrics") when ids disagree position by position.
EvalReport evaluate(std::span<const EvalInstance> instances, std::span<const Generation> generations,
                    const ContentLexicon& lexicon,
                    std::vector<InstanceScores>* per_instance = nullptr);

// One report per retrieval distance, ascending.
std::map<std::size_t, EvalReport> evaluate_by_distance(std::span<const EvalInstance> instances,
                                                       std::span<const Generation> generations,
                                                       const ContentLexicon& lexicon);

// Tab-separated table: distance, count and the five scores.
std::string format_distance_table(const std::map<std::size_t, EvalReport>& table);

}  // namespace softtpl

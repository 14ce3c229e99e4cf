#include "softtpl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "softtpl/error.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("metrics", what); }

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  if (t.size() < n) return counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    ++counts[Ngram(t.begin() + static_cast<std::ptrdiff_t>(i),
                   t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

double percent(std::size_t num, std::size_t den) {
  return den == 0 ? 100.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ContentLexicon::ContentLexicon(std::set<std::string> values) : values_(std::move(values)) {
  if (values_.empty()) fail("content lexicon is empty");
}

ContentLexicon ContentLexicon::from_corpus(std::span<const CorpusPair> corpus) {
  std::set<std::string> v;
  for (const auto& p : corpus) {
    for (const auto& e : p.record.entries()) v.insert(e.value);
  }
  return ContentLexicon(std::move(v));
}

ContentLexicon ContentLexicon::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.contains("values") || !j["values"].is_array()) {
    fail("malformed lexicon file");
  }
  std::set<std::string> v;
  for (const auto& x : j["values"]) v.insert(x.get<std::string>());
  return ContentLexicon(std::move(v));
}

bool ContentLexicon::is_numeral(const std::string& token) {
  if (token.empty()) return false;
  bool digit = false, dot = false;
  for (std::size_t i = 0; i < token.size(); ++i) {
    const char c = token[i];
    if (c >= '0' && c <= '9') {
      digit = true;
    } else if (c == '.' && !dot && i > 0 && i + 1 < token.size()) {
      dot = true;
    } else {
      return false;
    }
  }
  return digit;
}

bool ContentLexicon::contains(const std::string& token) const {
  return values_.contains(token) || is_numeral(token);
}

std::uint64_t ContentLexicon::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (char c : std::string("numerals:digits")) mix(static_cast<unsigned char>(c));
  for (const auto& v : values_) {
    mix(0xff);
    for (char c : v) mix(static_cast<unsigned char>(c));
  }
  return h;
}

std::string ContentLexicon::to_json() const {
  nlohmann::ordered_json j;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  j["hash"] = buf;
  j["numerals"] = "digits with at most one inner decimal point";
  j["values"] = std::vector<std::string>(values_.begin(), values_.end());
  return j.dump();
}

Tokens mask_content(const Tokens& tokens, const ContentLexicon& lexicon) {
  Tokens out = tokens;
  for (auto& t : out) {
    if (lexicon.contains(t)) t = Vocabulary::mask_token();
  }
  return out;
}

double corpus_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.empty()) fail("BLEU needs at least one candidate");
  if (candidates.size() != references.size()) {
    fail("BLEU got " + std::to_string(candidates.size()) + " candidates and " +
         std::to_string(references.size()) + " references");
  }
  std::size_t cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += candidates[i].size();
    ref_len += references[i].size();
  }
  if (cand_len == 0) return 0.0;

  double log_sum = 0;
  int orders = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand = ngram_counts(candidates[i], n);
      const auto ref = ngram_counts(references[i], n);
      for (const auto& [g, c] : cand) {
        total += c;
        if (auto it = ref.find(g); it != ref.end()) matched += std::min(c, it->second);
      }
    }
    if (total == 0) continue;
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    ++orders;
  }
  const double precision = std::exp(log_sum / orders);
  const double bp = cand_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return 100.0 * bp * precision;
}

double m_bleu(std::span<const Tokens> candidates, std::span<const Tokens> references,
              const ContentLexicon& lexicon) {
  std::vector<Tokens> c, r;
  c.reserve(candidates.size());
  r.reserve(references.size());
  for (const auto& t : candidates) c.push_back(mask_content(t, lexicon));
  for (const auto& t : references) r.push_back(mask_content(t, lexicon));
  return corpus_bleu(c, r);
}

InstanceScores content_fidelity(const Tokens& generated, const Record& x, const Record& x_e,
                                const ContentLexicon& lexicon) {
  const std::set<std::string> present(generated.begin(), generated.end());
  const auto new_values = x.values();
  const std::set<std::string> new_set(new_values.begin(), new_values.end());

  std::size_t expressed = 0;
  for (const auto& v : new_set) expressed += present.contains(v) ? 1 : 0;

  std::set<std::string> old_only;
  for (const auto& v : x_e.values()) {
    if (!new_set.contains(v)) old_only.insert(v);
  }
  std::size_t excluded = 0;
  for (const auto& v : old_only) excluded += present.contains(v) ? 0 : 1;

  std::size_t hits = 0, correct = 0;
  for (const auto& t : present) {
    if (!lexicon.contains(t)) continue;
    ++hits;
    correct += new_set.contains(t) ? 1 : 0;
  }

  InstanceScores s;
  s.incl_new = percent(expressed, new_set.size());
  s.excl_old = percent(excluded, old_only.size());
  s.precision = percent(correct, hits);
  s.recall = s.incl_new;
  return s;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["m_bleu"] = m_bleu;
  j["incl_new"] = incl_new;
  j["excl_old"] = excl_old;
  j["precision"] = precision;
  j["recall"] = recall;
  j["count"] = count;
  return j.dump();
}

EvalReport evaluate(std::span<const EvalInstance> instances, std::span<const Generation> generations,
                    const ContentLexicon& lexicon, std::vector<InstanceScores>* per_instance) {
  if (instances.empty()) fail("nothing to evaluate");
  if (instances.size() != generations.size()) {
    fail(std::to_string(instances.size()) + " instances but " +
         std::to_string(generations.size()) + " generations");
  }
  EvalReport r;
  std::vector<Tokens> cands, refs;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i].id != generations[i].id) {
      fail("instance " + instances[i].id + " paired with generation " + generations[i].id);
    }
    const auto s = content_fidelity(generations[i].tokens, instances[i].x, instances[i].x_e, lexicon);
    if (per_instance) per_instance->push_back(s);
    r.incl_new += s.incl_new;
    r.excl_old += s.excl_old;
    r.precision += s.precision;
    r.recall += s.recall;
    cands.push_back(generations[i].tokens);
    refs.push_back(instances[i].exemplar);
  }
  const double n = static_cast<double>(instances.size());
  r.incl_new /= n;
  r.excl_old /= n;
  r.precision /= n;
  r.recall /= n;
  r.count = instances.size();
  r.m_bleu = m_bleu(cands, refs, lexicon);
  return r;
}

std::map<std::size_t, EvalReport> evaluate_by_distance(std::span<const EvalInstance> instances,
                                                       std::span<const Generation> generations,
                                                       const ContentLexicon& lexicon) {
  if (instances.size() != generations.size()) fail("instances and generations differ in length");
  std::map<std::size_t, std::pair<std::vector<EvalInstance>, std::vector<Generation>>> groups;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto& g = groups[instances[i].distance];
    g.first.push_back(instances[i]);
    g.second.push_back(generations[i]);
  }
  std::map<std::size_t, EvalReport> out;
  for (const auto& [d, g] : groups) out[d] = evaluate(g.first, g.second, lexicon);
  return out;
}

std::string format_distance_table(const std::map<std::size_t, EvalReport>& table) {
  std::ostringstream out;
  out << "distance\tcount\tm_bleu\tincl_new\texcl_old\tprecision\trecall\n";
  char buf[256];
  for (const auto& [d, r] : table) {
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n", d, r.count, r.m_bleu,
                  r.incl_new, r.excl_old, r.precision, r.recall);
    out << buf;
  }
  return out.str();
}

}  // namespace softtpl

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace softtpl {

using Tokens = std::vector<std::string>;

struct Entry {
  std::string field;
  std::string value;

  bool operator==(const Entry&) const = default;
};

// An ordered set of (field, value) pairs. Values are single normalized tokens
// and field names are unique; the constructor enforces both.
class Record {
 public:
  static constexpr std::size_t kDefaultMaxEntries = 12;

  explicit Record(std::vector<Entry> entries,
                  std::size_t max_entries = kDefaultMaxEntries);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  const std::string* find(const std::string& field) const;
  std::vector<std::string> fields() const;
  std::vector<std::string> values() const;

  bool operator==(const Record&) const = default;

 private:
  std::vector<Entry> entries_;
};

struct CorpusPair {
  std::string id;
  Record record;
  Tokens text;
};

// Lowercases, splits on whitespace and peels trailing . , ! ? off each chunk
// into their own tokens.
Tokens tokenize(std::string_view text);

std::string join_tokens(const Tokens& tokens);

// Rewrites for values that cannot be aligned with surface text verbatim,
// keyed by (lowercased field, lowercased raw value).
struct NormalizationMap {
  std::map<std::pair<std::string, std::string>, std::string> rewrites;

  static const NormalizationMap& defaults();
};

std::string normalize_value(const std::string& field, std::string_view raw,
                            const NormalizationMap& map = NormalizationMap::defaults());

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumReserved = 5;

  static const std::string& pad_token();
  static const std::string& bos_token();
  static const std::string& eos_token();
  static const std::string& unk_token();
  static const std::string& mask_token();

  // Reserved entries only.
  Vocabulary();

  // Rebuilds a vocabulary from its non-reserved tokens in id order.
  static Vocabulary from_tokens(std::span<const std::string> ordinary);

  std::optional<int> find(const std::string& token) const;
  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // FNV-1a over all tokens in id order; used to tie checkpoints to a vocabulary.
  std::uint64_t hash() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Counts tokens from texts, field names and values. Ids are assigned by
// descending frequency, ties broken lexicographically.
Vocabulary build_vocabulary(std::span<const CorpusPair> corpus, int min_count);

// Corpus files hold one JSON object per line: {"id", "record", "text"}.
CorpusPair parse_corpus_line(std::string_view line, std::size_t line_number,
                             const NormalizationMap& map = NormalizationMap::defaults());
std::string format_corpus_line(const CorpusPair& pair);

std::vector<CorpusPair> load_corpus(const std::filesystem::path& path,
                                    const NormalizationMap& map = NormalizationMap::defaults());
void save_corpus(const std::filesystem::path& path, std::span<const CorpusPair> corpus);

// ---------------------------------------------------------------------------
// Synthetic restaurant-style corpus.

struct SyntheticSpec {
  struct Field {
    std::string name;
    std::vector<std::string> values;
    bool required = false;
  };
  // One field realized inside a pattern; `{}` marks where its value goes.
  struct Clause {
    std::string field;
    std::string text;
  };
  struct Pattern {
    std::string name;
    std::string prefix;
    std::vector<Clause> clauses;
    std::string suffix;
  };

  std::vector<Field> fields;
  std::vector<Pattern> patterns;
  std::size_t min_fields = 3;
  std::size_t max_fields = 8;
  double target_mean_fields = 5.38;
  std::size_t pairs = 2000;
  std::uint64_t seed = 7;
  std::string version = "restaurant-v1";

  // Eight restaurant fields and six sentence patterns.
  static SyntheticSpec restaurant();

  void validate() const;
};

std::vector<CorpusPair> generate_synthetic(const SyntheticSpec& spec);

}  // namespace softtpl

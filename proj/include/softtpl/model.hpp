#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "softtpl/corpus.hpp"

namespace softtpl {

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

struct ModelDims {
  int vocab = 0;
  int fields = 0;
  int embed = 32;
  int hidden = 64;

  bool operator==(const ModelDims&) const = default;
};

// Field names known to the record encoder. Index 0 is the shared slot for
// unseen fields.
class FieldTable {
 public:
  FieldTable();
  explicit FieldTable(std::span<const std::string> names);
  static FieldTable from_corpus(std::span<const CorpusPair> corpus);

  int id(const std::string& field) const;
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  bool operator==(const FieldTable& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
};

// All learnable tensors. Vectors are stored as single-column matrices so
// every tensor can be visited uniformly by name.
template <typename Real>
struct ModelParams {
  ModelDims dims;
  Mat<Real> token_embed;     // V x d
  Mat<Real> field_embed;     // F x d
  Mat<Real> record_proj;     // h x 2d, applied to [field ; value]
  Mat<Real> record_bias;     // h x 1
  Mat<Real> enc_w;           // 4h x (d + h), gate order i f o g
  Mat<Real> enc_b;           // 4h x 1
  Mat<Real> dec_w;           // 4h x (d + 2h), input [token ; prev attentional ; prev hidden]
  Mat<Real> dec_b;           // 4h x 1
  Mat<Real> attn_exemplar;   // h x h, general score h' A s
  Mat<Real> attn_record;     // h x h
  Mat<Real> combine_w;       // h x 2h, applied to [context ; hidden]
  Mat<Real> combine_b;       // h x 1
  Mat<Real> out_w;           // V x h
  Mat<Real> out_b;           // V x 1
  Mat<Real> gate_w;          // 1 x h
  Mat<Real> gate_b;          // 1 x 1

  static ModelParams zeros(const ModelDims& dims);
  static ModelParams random(const ModelDims& dims, std::uint64_t seed, Real scale = Real(0.1));

  template <typename F>
  void for_each(F&& f) {
    f("token_embed", token_embed);
    f("field_embed", field_embed);
    f("record_proj", record_proj);
    f("record_bias", record_bias);
    f("enc_w", enc_w);
    f("enc_b", enc_b);
    f("dec_w", dec_w);
    f("dec_b", dec_b);
    f("attn_exemplar", attn_exemplar);
    f("attn_record", attn_record);
    f("combine_w", combine_w);
    f("combine_b", combine_b);
    f("out_w", out_w);
    f("out_b", out_b);
    f("gate_w", gate_w);
    f("gate_b", gate_b);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const char* name, Mat<Real>& m) { f(name, static_cast<const Mat<Real>&>(m)); });
  }

  template <typename Other>
  ModelParams<Other> cast() const;

  void set_zero();
  void scale(Real s);
  ModelParams& operator+=(const ModelParams& other);
  std::size_t scalar_count() const;
  bool all_finite() const;
  // Throws Error("model") if any tensor shape disagrees with `dims`.
  void check_shapes() const;
};

// Vocabulary, field table and parameters travel together.
template <typename Real>
struct Model {
  Vocabulary vocab;
  FieldTable fields;
  ModelParams<Real> params;
};

// ---------------------------------------------------------------------------
// Forward pieces. The *Cache structs keep what the backward pass needs.

template <typename Real>
struct LstmCache {
  Vec<Real> input;
  Vec<Real> i, f, o, g;
  Vec<Real> c_prev, c, tanh_c, h;
};

template <typename Real>
struct RecordEncoding {
  Mat<Real> states;                 // m x h
  std::vector<int> field_ids;
  std::vector<int> value_ids;       // vocabulary ids (UNK when unseen)
  std::vector<std::string> values;  // copyable surface tokens
  Mat<Real> inputs;                 // m x 2d, cached [field ; value]
};

template <typename Real>
struct ExemplarEncoding {
  Mat<Real> states;  // n x h
  Vec<Real> final_c;
  std::vector<int> token_ids;
  std::vector<LstmCache<Real>> steps;
};

template <typename Real>
struct EncodedSources {
  ExemplarEncoding<Real> exemplar;
  RecordEncoding<Real> record;
  Mat<Real> exemplar_keys;  // n x h, row j = (A_e s_j)'
  Mat<Real> record_keys;    // m x h
};

template <typename Real>
struct DecoderState {
  Vec<Real> h;
  Vec<Real> c;
  Vec<Real> attentional;  // previous step's attentional hidden state, fed back as input
};

// One decoding step: attentional hidden state, gate and the two component
// distributions. The mixture P_out = g * P_V + (1 - g) * P_x is implied.
template <typename Real>
struct DecoderStep {
  Vec<Real> h;
  Real gate = Real(1);
  Vec<Real> p_vocab;
  Vec<Real> p_copy;
};

template <typename Real>
struct StepCache {
  LstmCache<Real> lstm;
  Vec<Real> attention;  // joint weights over [exemplar ; record]
  Vec<Real> context;
  Vec<Real> combined;   // [context ; h]
  int input_id = 0;
  DecoderStep<Real> out;
};

template <typename Real>
RecordEncoding<Real> encode_record(const ModelParams<Real>& params, const FieldTable& fields,
                                   const Vocabulary& vocab, const Record& record);

template <typename Real>
ExemplarEncoding<Real> encode_exemplar(const ModelParams<Real>& params, const Vocabulary& vocab,
                                       const Tokens& exemplar);

template <typename Real>
EncodedSources<Real> encode_sources(const ModelParams<Real>& params, const FieldTable& fields,
                                    const Vocabulary& vocab, const Record& record,
                                    const Tokens& exemplar);

template <typename Real>
DecoderState<Real> initial_state(const ModelParams<Real>& params,
                                 const EncodedSources<Real>& sources);

// Full step with cache; `decode_step` is the cache-free convenience form.
template <typename Real>
DecoderState<Real> step_forward(const ModelParams<Real>& params, const DecoderState<Real>& prev,
                                int input_id, const EncodedSources<Real>& sources,
                                StepCache<Real>& cache);

template <typename Real>
std::pair<DecoderStep<Real>, DecoderState<Real>> decode_step(const ModelParams<Real>& params,
                                                             const DecoderState<Real>& prev,
                                                             int input_id,
                                                             const EncodedSources<Real>& sources);

// Decoder input id for a surface token: copied values outside the
// vocabulary are fed as UNK.
inline int input_id_for(const Vocabulary& vocab, const std::string& token) {
  return vocab.id(token);
}

// g * P_V[token] + (1 - g) * sum of P_x over record slots whose value is token.
template <typename Real>
Real token_probability(const DecoderStep<Real>& step, const EncodedSources<Real>& sources,
                       const Vocabulary& vocab, const std::string& token);

// Mixture probability over every emittable surface token (vocabulary plus
// copyable values outside it). Index < vocab.size() is a vocabulary id; the
// rest follow `extra` order.
template <typename Real>
struct OutputDistribution {
  std::vector<Real> prob;
  std::vector<std::string> extra;
};

template <typename Real>
OutputDistribution<Real> output_distribution(const DecoderStep<Real>& step,
                                             const EncodedSources<Real>& sources,
                                             const Vocabulary& vocab);

struct BeamResult {
  Tokens tokens;
  double score = 0.0;  // sum of log-probabilities, EOS included when finished
  bool finished = false;
};

template <typename Real>
BeamResult beam_search_scored(const Model<Real>& model, const Record& record,
                              const Tokens& exemplar, int width, int max_len);

template <typename Real>
Tokens beam_search(const Model<Real>& model, const Record& record, const Tokens& exemplar,
                   int width, int max_len);

// ---------------------------------------------------------------------------
// Checkpoints: a versioned binary container. Tensors are always written as
// row-major little-endian 64-bit floats regardless of training precision.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Model<Real>& model);

template <typename Real>
Model<Real> load_checkpoint(const std::filesystem::path& path);

// Rejects a checkpoint whose vocabulary hash differs from `expected`.
template <typename Real>
Model<Real> load_checkpoint(const std::filesystem::path& path, const Vocabulary& expected);

}  // namespace softtpl

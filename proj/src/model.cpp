#include "softtpl/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "softtpl/error.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("model", what); }

template <typename Real>
Vec<Real> sigmoid(const Vec<Real>& z) {
  return (Real(1) / (Real(1) + (-z.array()).exp())).matrix();
}

template <typename Real>
Real sigmoid(Real z) {
  return Real(1) / (Real(1) + std::exp(-z));
}

template <typename Real>
Vec<Real> softmax(const Vec<Real>& z) {
  if (z.size() == 0) return z;
  const Real m = z.maxCoeff();
  Vec<Real> e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

template <typename Real>
void lstm_forward(const Mat<Real>& w, const Mat<Real>& b, Vec<Real> input,
                  const Vec<Real>& c_prev, LstmCache<Real>& cache) {
  const Eigen::Index h = c_prev.size();
  Vec<Real> z = w * input + b.col(0);
  cache.input = std::move(input);
  cache.i = sigmoid<Real>(z.segment(0, h));
  cache.f = sigmoid<Real>(z.segment(h, h));
  cache.o = sigmoid<Real>(z.segment(2 * h, h));
  cache.g = z.segment(3 * h, h).array().tanh().matrix();
  cache.c_prev = c_prev;
  cache.c = cache.f.cwiseProduct(c_prev) + cache.i.cwiseProduct(cache.g);
  cache.tanh_c = cache.c.array().tanh().matrix();
  cache.h = cache.o.cwiseProduct(cache.tanh_c);
}

}  // namespace

// ---------------------------------------------------------------------------

FieldTable::FieldTable() : names_{"<unk-field>"} {}

FieldTable::FieldTable(std::span<const std::string> names) : FieldTable() {
  for (const auto& n : names) {
    if (std::find(names_.begin(), names_.end(), n) != names_.end()) {
      fail("field table lists '" + n + "' twice");
    }
    names_.push_back(n);
  }
}

FieldTable FieldTable::from_corpus(std::span<const CorpusPair> corpus) {
  std::set<std::string> all;
  for (const auto& p : corpus) {
    for (const auto& e : p.record.entries()) all.insert(e.field);
  }
  std::vector<std::string> sorted(all.begin(), all.end());
  return FieldTable(sorted);
}

int FieldTable::id(const std::string& field) const {
  for (std::size_t i = 1; i < names_.size(); ++i) {
    if (names_[i] == field) return static_cast<int>(i);
  }
  return 0;
}

// ---------------------------------------------------------------------------

template <typename Real>
ModelParams<Real> ModelParams<Real>::zeros(const ModelDims& d) {
  if (d.vocab < Vocabulary::kNumReserved || d.fields < 1 || d.embed < 1 || d.hidden < 1) {
    fail("invalid model dimensions");
  }
  ModelParams p;
  p.dims = d;
  const int h = d.hidden, e = d.embed;
  p.token_embed = Mat<Real>::Zero(d.vocab, e);
  p.field_embed = Mat<Real>::Zero(d.fields, e);
  p.record_proj = Mat<Real>::Zero(h, 2 * e);
  p.record_bias = Mat<Real>::Zero(h, 1);
  p.enc_w = Mat<Real>::Zero(4 * h, e + h);
  p.enc_b = Mat<Real>::Zero(4 * h, 1);
  p.dec_w = Mat<Real>::Zero(4 * h, e + 2 * h);
  p.dec_b = Mat<Real>::Zero(4 * h, 1);
  p.attn_exemplar = Mat<Real>::Zero(h, h);
  p.attn_record = Mat<Real>::Zero(h, h);
  p.combine_w = Mat<Real>::Zero(h, 2 * h);
  p.combine_b = Mat<Real>::Zero(h, 1);
  p.out_w = Mat<Real>::Zero(d.vocab, h);
  p.out_b = Mat<Real>::Zero(d.vocab, 1);
  p.gate_w = Mat<Real>::Zero(1, h);
  p.gate_b = Mat<Real>::Zero(1, 1);
  return p;
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::random(const ModelDims& d, std::uint64_t seed, Real scale) {
  ModelParams p = zeros(d);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-static_cast<double>(scale), static_cast<double>(scale));
  p.for_each([&](const char*, Mat<Real>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(u(rng));
  });
  // forget gates start open
  p.enc_b.block(d.hidden, 0, d.hidden, 1).array() += Real(1);
  p.dec_b.block(d.hidden, 0, d.hidden, 1).array() += Real(1);
  return p;
}

template <typename Real>
template <typename Other>
ModelParams<Other> ModelParams<Real>::cast() const {
  ModelParams<Other> out = ModelParams<Other>::zeros(dims);
  std::vector<const Mat<Real>*> src;
  for_each([&](const char*, const Mat<Real>& m) { src.push_back(&m); });
  std::size_t k = 0;
  out.for_each([&](const char*, Mat<Other>& m) { m = src[k++]->template cast<Other>(); });
  return out;
}

template <typename Real>
void ModelParams<Real>::set_zero() {
  for_each([](const char*, Mat<Real>& m) { m.setZero(); });
}

template <typename Real>
void ModelParams<Real>::scale(Real s) {
  for_each([s](const char*, Mat<Real>& m) { m *= s; });
}

template <typename Real>
ModelParams<Real>& ModelParams<Real>::operator+=(const ModelParams& other) {
  std::vector<const Mat<Real>*> src;
  other.for_each([&](const char*, const Mat<Real>& m) { src.push_back(&m); });
  std::size_t k = 0;
  for_each([&](const char*, Mat<Real>& m) { m += *src[k++]; });
  return *this;
}

template <typename Real>
std::size_t ModelParams<Real>::scalar_count() const {
  std::size_t n = 0;
  for_each([&](const char*, const Mat<Real>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename Real>
bool ModelParams<Real>::all_finite() const {
  bool ok = true;
  for_each([&](const char*, const Mat<Real>& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <typename Real>
void ModelParams<Real>::check_shapes() const {
  const ModelParams ref = zeros(dims);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> want;
  ref.for_each([&](const char*, const Mat<Real>& m) { want.emplace_back(m.rows(), m.cols()); });
  std::size_t k = 0;
  for_each([&](const char* name, const Mat<Real>& m) {
    if (m.rows() != want[k].first || m.cols() != want[k].second) {
      fail(std::string("tensor ") + name + " has shape " + std::to_string(m.rows()) + "x" +
           std::to_string(m.cols()) + ", expected " + std::to_string(want[k].first) + "x" +
           std::to_string(want[k].second));
    }
    ++k;
  });
}

// ---------------------------------------------------------------------------

template <typename Real>
RecordEncoding<Real> encode_record(const ModelParams<Real>& params, const FieldTable& fields,
                                   const Vocabulary& vocab, const Record& record) {
  const int m = static_cast<int>(record.size());
  if (m == 0) fail("cannot encode an empty record");
  const int e = params.dims.embed;
  RecordEncoding<Real> enc;
  enc.inputs.resize(m, 2 * e);
  for (int j = 0; j < m; ++j) {
    const auto& entry = record.entries()[static_cast<std::size_t>(j)];
    const int fid = fields.id(entry.field);
    const int vid = vocab.id(entry.value);
    if (fid >= params.dims.fields || vid >= params.dims.vocab) {
      fail("field table or vocabulary larger than the parameter tables");
    }
    enc.field_ids.push_back(fid);
    enc.value_ids.push_back(vid);
    enc.values.push_back(entry.value);
    enc.inputs.row(j).head(e) = params.field_embed.row(fid);
    enc.inputs.row(j).tail(e) = params.token_embed.row(vid);
  }
  Mat<Real> pre = enc.inputs * params.record_proj.transpose();
  pre.rowwise() += params.record_bias.col(0).transpose();
  enc.states = pre.array().tanh().matrix();
  return enc;
}

template <typename Real>
ExemplarEncoding<Real> encode_exemplar(const ModelParams<Real>& params, const Vocabulary& vocab,
                                       const Tokens& exemplar) {
  if (exemplar.empty()) fail("cannot encode an empty exemplar");
  const int h = params.dims.hidden, e = params.dims.embed;
  const int n = static_cast<int>(exemplar.size());
  ExemplarEncoding<Real> enc;
  enc.states.resize(n, h);
  enc.steps.resize(static_cast<std::size_t>(n));
  Vec<Real> hp = Vec<Real>::Zero(h);
  Vec<Real> cp = Vec<Real>::Zero(h);
  for (int t = 0; t < n; ++t) {
    const int id = vocab.id(exemplar[static_cast<std::size_t>(t)]);
    if (id >= params.dims.vocab) fail("vocabulary larger than the embedding table");
    enc.token_ids.push_back(id);
    Vec<Real> x(e + h);
    x << params.token_embed.row(id).transpose(), hp;
    auto& cache = enc.steps[static_cast<std::size_t>(t)];
    lstm_forward(params.enc_w, params.enc_b, std::move(x), cp, cache);
    hp = cache.h;
    cp = cache.c;
    enc.states.row(t) = hp.transpose();
  }
  enc.final_c = cp;
  return enc;
}

template <typename Real>
EncodedSources<Real> encode_sources(const ModelParams<Real>& params, const FieldTable& fields,
                                    const Vocabulary& vocab, const Record& record,
                                    const Tokens& exemplar) {
  EncodedSources<Real> s;
  s.exemplar = encode_exemplar(params, vocab, exemplar);
  s.record = encode_record(params, fields, vocab, record);
  s.exemplar_keys = s.exemplar.states * params.attn_exemplar.transpose();
  s.record_keys = s.record.states * params.attn_record.transpose();
  return s;
}

template <typename Real>
DecoderState<Real> initial_state(const ModelParams<Real>& params,
                                 const EncodedSources<Real>& sources) {
  const auto& ex = sources.exemplar;
  return {ex.states.row(ex.states.rows() - 1).transpose(), ex.final_c,
          Vec<Real>::Zero(params.dims.hidden)};
}

template <typename Real>
DecoderState<Real> step_forward(const ModelParams<Real>& params, const DecoderState<Real>& prev,
                                int input_id, const EncodedSources<Real>& sources,
                                StepCache<Real>& cache) {
  const int h = params.dims.hidden, e = params.dims.embed;
  if (prev.h.size() != h || prev.c.size() != h || prev.attentional.size() != h ||
      sources.exemplar.states.cols() != h || sources.record.states.cols() != h ||
      sources.exemplar_keys.cols() != h || sources.record_keys.cols() != h) {
    fail("decoder state or sources do not match the hidden size");
  }
  if (input_id < 0 || input_id >= params.dims.vocab) fail("decoder input id out of range");

  cache.input_id = input_id;
  Vec<Real> x(e + 2 * h);
  x << params.token_embed.row(input_id).transpose(), prev.attentional, prev.h;
  lstm_forward(params.dec_w, params.dec_b, std::move(x), prev.c, cache.lstm);
  const Vec<Real>& ht = cache.lstm.h;

  const Eigen::Index n = sources.exemplar_keys.rows();
  const Eigen::Index m = sources.record_keys.rows();
  Vec<Real> scores(n + m);
  scores.head(n) = sources.exemplar_keys * ht;
  scores.tail(m) = sources.record_keys * ht;
  cache.attention = softmax<Real>(scores);
  cache.context = sources.exemplar.states.transpose() * cache.attention.head(n) +
                  sources.record.states.transpose() * cache.attention.tail(m);

  cache.combined.resize(2 * h);
  cache.combined << cache.context, ht;
  auto& out = cache.out;
  out.h = (params.combine_w * cache.combined + params.combine_b.col(0)).array().tanh().matrix();
  out.p_vocab = softmax<Real>(params.out_w * out.h + params.out_b.col(0));
  out.gate = sigmoid<Real>(params.gate_w.row(0).dot(out.h) + params.gate_b(0, 0));
  out.p_copy = softmax<Real>(Vec<Real>(scores.tail(m)));

  return {cache.lstm.h, cache.lstm.c, out.h};
}

template <typename Real>
std::pair<DecoderStep<Real>, DecoderState<Real>> decode_step(const ModelParams<Real>& params,
                                                             const DecoderState<Real>& prev,
                                                             int input_id,
                                                             const EncodedSources<Real>& sources) {
  StepCache<Real> cache;
  DecoderState<Real> next = step_forward(params, prev, input_id, sources, cache);
  return {std::move(cache.out), std::move(next)};
}

template <typename Real>
Real token_probability(const DecoderStep<Real>& step, const EncodedSources<Real>& sources,
                       const Vocabulary& vocab, const std::string& token) {
  Real p = 0;
  if (auto id = vocab.find(token); id && *id < step.p_vocab.size()) {
    p += step.gate * step.p_vocab(*id);
  }
  const auto& values = sources.record.values;
  for (std::size_t j = 0; j < values.size(); ++j) {
    if (values[j] == token) p += (Real(1) - step.gate) * step.p_copy(static_cast<Eigen::Index>(j));
  }
  return p;
}

template <typename Real>
OutputDistribution<Real> output_distribution(const DecoderStep<Real>& step,
                                             const EncodedSources<Real>& sources,
                                             const Vocabulary& vocab) {
  OutputDistribution<Real> d;
  const auto V = static_cast<std::size_t>(step.p_vocab.size());
  d.prob.resize(V);
  for (std::size_t v = 0; v < V; ++v) d.prob[v] = step.gate * step.p_vocab(static_cast<Eigen::Index>(v));
  const auto& values = sources.record.values;
  for (std::size_t j = 0; j < values.size(); ++j) {
    const Real mass = (Real(1) - step.gate) * step.p_copy(static_cast<Eigen::Index>(j));
    if (auto id = vocab.find(values[j])) {
      d.prob[static_cast<std::size_t>(*id)] += mass;
      continue;
    }
    auto it = std::find(d.extra.begin(), d.extra.end(), values[j]);
    if (it == d.extra.end()) {
      d.extra.push_back(values[j]);
      d.prob.push_back(mass);
    } else {
      d.prob[V + static_cast<std::size_t>(it - d.extra.begin())] += mass;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

namespace {

bool searchable(std::size_t index) {
  return index != static_cast<std::size_t>(Vocabulary::kPad) &&
         index != static_cast<std::size_t>(Vocabulary::kBos) &&
         index != static_cast<std::size_t>(Vocabulary::kUnk) &&
         index != static_cast<std::size_t>(Vocabulary::kMask);
}

}  // namespace

template <typename Real>
BeamResult beam_search_scored(const Model<Real>& model, const Record& record,
                              const Tokens& exemplar, int width, int max_len) {
  if (width < 1) fail("beam width must be >= 1");
  if (max_len < 1) fail("maximum decoding length must be >= 1");
  const auto& params = model.params;
  const auto& vocab = model.vocab;
  const EncodedSources<Real> sources = encode_sources(params, model.fields, vocab, record, exemplar);

  struct Hyp {
    Tokens tokens;
    DecoderState<Real> state;
    int input_id;
    double score;
  };
  struct Expansion {
    double score;
    std::size_t hyp;
    std::string token;
    bool eos;
  };

  std::vector<Hyp> live{{{}, initial_state(params, sources), Vocabulary::kBos, 0.0}};
  std::vector<BeamResult> finished;

  for (int t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Expansion> expansions;
    std::vector<DecoderState<Real>> next_states;
    next_states.reserve(live.size());
    for (std::size_t k = 0; k < live.size(); ++k) {
      auto [step, next] = decode_step(params, live[k].state, live[k].input_id, sources);
      next_states.push_back(std::move(next));
      const auto dist = output_distribution(step, sources, vocab);
      for (std::size_t c = 0; c < dist.prob.size(); ++c) {
        if (c < vocab.size() && !searchable(c)) continue;
        const double p = static_cast<double>(dist.prob[c]);
        if (!(p > 0.0)) continue;
        const std::string& tok = c < vocab.size() ? vocab.token(static_cast<int>(c))
                                                  : dist.extra[c - vocab.size()];
        expansions.push_back({live[k].score + std::log(p), k, tok,
                              c == static_cast<std::size_t>(Vocabulary::kEos)});
      }
    }
    const auto better = [](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.hyp < b.hyp;
    };
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(width), expansions.size());
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep),
                      expansions.end(), better);

    std::vector<Hyp> next_live;
    for (std::size_t r = 0; r < keep; ++r) {
      const auto& ex = expansions[r];
      const auto& parent = live[ex.hyp];
      if (ex.eos) {
        finished.push_back({parent.tokens, ex.score, true});
        continue;
      }
      Hyp child{parent.tokens, next_states[ex.hyp], input_id_for(vocab, ex.token), ex.score};
      child.tokens.push_back(ex.token);
      next_live.push_back(std::move(child));
    }
    live = std::move(next_live);
  }

  const auto by_score = [](const BeamResult& a, const BeamResult& b) { return a.score < b.score; };
  if (!finished.empty()) {
    // first maximal element: earlier-finished wins ties
    auto best = finished.begin();
    for (auto it = finished.begin(); it != finished.end(); ++it) {
      if (by_score(*best, *it)) best = it;
    }
    return *best;
  }
  BeamResult best{{}, -std::numeric_limits<double>::infinity(), false};
  for (const auto& h : live) {
    if (h.score > best.score) best = {h.tokens, h.score, false};
  }
  return best;
}

template <typename Real>
Tokens beam_search(const Model<Real>& model, const Record& record, const Tokens& exemplar,
                   int width, int max_len) {
  return beam_search_scored(model, record, exemplar, width, max_len).tokens;
}

// ---------------------------------------------------------------------------

#define SOFTTPL_INSTANTIATE(Real)                                                                   \
  template struct ModelParams<Real>;                                                                \
  template RecordEncoding<Real> encode_record(const ModelParams<Real>&, const FieldTable&,          \
                                              const Vocabulary&, const Record&);                    \
  template ExemplarEncoding<Real> encode_exemplar(const ModelParams<Real>&, const Vocabulary&,      \
                                                  const Tokens&);                                   \
  template EncodedSources<Real> encode_sources(const ModelParams<Real>&, const FieldTable&,         \
                                               const Vocabulary&, const Record&, const Tokens&);    \
  template DecoderState<Real> initial_state(const ModelParams<Real>&, const EncodedSources<Real>&); \
  template DecoderState<Real> step_forward(const ModelParams<Real>&, const DecoderState<Real>&,     \
                                           int, const EncodedSources<Real>&, StepCache<Real>&);     \
  template std::pair<DecoderStep<Real>, DecoderState<Real>> decode_step(                            \
      const ModelParams<Real>&, const DecoderState<Real>&, int, const EncodedSources<Real>&);       \
  template Real token_probability(const DecoderStep<Real>&, const EncodedSources<Real>&,            \
                                  const Vocabulary&, const std::string&);                           \
  template OutputDistribution<Real> output_distribution(const DecoderStep<Real>&,                   \
                                                        const EncodedSources<Real>&,                \
                                                        const Vocabulary&);                         \
  template BeamResult beam_search_scored(const Model<Real>&, const Record&, const Tokens&, int,     \
                                         int);                                                      \
  template Tokens beam_search(const Model<Real>&, const Record&, const Tokens&, int, int);

SOFTTPL_INSTANTIATE(float)
SOFTTPL_INSTANTIATE(double)
SOFTTPL_INSTANTIATE(long double)
#undef SOFTTPL_INSTANTIATE

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<long double> ModelParams<double>::cast<long double>() const;

}  // namespace softtpl

#include "softtpl/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "softtpl/error.hpp"
#include "softtpl/kernels.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("training", what); }

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename Real>
void lstm_backward(const Mat<Real>& w, const LstmCache<Real>& c, const Vec<Real>& dh,
                   const Vec<Real>& dc_in, Mat<Real>& dw, Mat<Real>& db, Vec<Real>& dx,
                   Vec<Real>& dc_prev) {
  const Eigen::Index h = dh.size();
  const Vec<Real> one_minus_tc2 = (Real(1) - c.tanh_c.array().square()).matrix();
  const Vec<Real> dc = dh.cwiseProduct(c.o).cwiseProduct(one_minus_tc2) + dc_in;
  Vec<Real> dz(4 * h);
  dz.segment(0, h) = dc.cwiseProduct(c.g).cwiseProduct(c.i.cwiseProduct((Real(1) - c.i.array()).matrix()));
  dz.segment(h, h) = dc.cwiseProduct(c.c_prev).cwiseProduct(c.f.cwiseProduct((Real(1) - c.f.array()).matrix()));
  dz.segment(2 * h, h) = dh.cwiseProduct(c.tanh_c).cwiseProduct(c.o.cwiseProduct((Real(1) - c.o.array()).matrix()));
  dz.segment(3 * h, h) = dc.cwiseProduct(c.i).cwiseProduct((Real(1) - c.g.array().square()).matrix());
  dw.noalias() += dz * c.input.transpose();
  db.col(0) += dz;
  dx.noalias() = w.transpose() * dz;
  dc_prev = dc.cwiseProduct(c.f);
}

struct PassWeights {
  double content_nll, style_nll, content_cov, style_cov;
};

PassWeights weights_for(const LossOptions& o) {
  PassWeights w{o.lambda, 1.0 - o.lambda, 0.0, 0.0};
  switch (o.coverage) {
    case CoverageMode::both:
      w.content_cov = w.style_cov = o.eta / 2.0;
      break;
    case CoverageMode::content:
      w.content_cov = o.eta;
      break;
    case CoverageMode::style:
      w.style_cov = o.eta;
      break;
  }
  return w;
}

double combine_coverage(const LossOptions& o, double content_cov, double style_cov) {
  switch (o.coverage) {
    case CoverageMode::content:
      return content_cov;
    case CoverageMode::style:
      return style_cov;
    case CoverageMode::both:
      break;
  }
  return (content_cov + style_cov) / 2.0;
}

LossBreakdown breakdown(const LossOptions& o, double content_nll, double style_nll,
                        double content_cov, double style_cov) {
  LossBreakdown b;
  b.content_nll = content_nll;
  b.style_nll = style_nll;
  b.joint = o.lambda * content_nll + (1.0 - o.lambda) * style_nll;
  b.coverage = combine_coverage(o, content_cov, style_cov);
  b.total = b.joint + o.eta * b.coverage;
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::string to_string(CoverageMode m) {
  switch (m) {
    case CoverageMode::content:
      return "content";
    case CoverageMode::style:
      return "style";
    case CoverageMode::both:
      break;
  }
  return "both";
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (epochs_full > 0 && !(lambda > 0.0 && lambda < 1.0)) {
    fail("lambda must lie in (0, 1) for the full training phase");
  }
  if (!(eta >= 0.0)) fail("eta must be >= 0");
  if (!(learning_rate > 0.0)) fail("learning rate must be > 0");
  if (epochs_pretrain < 0 || epochs_full < 0) fail("epoch counts must be >= 0");
  if (batch_size < 1) fail("batch size must be >= 1");
  if (beam_width < 1) fail("beam width must be >= 1");
  if (max_len < 1) fail("max decode length must be >= 1");
  if (embed < 1 || hidden < 1) fail("model sizes must be >= 1");
  if (min_count < 1) fail("min_count must be >= 1");
  if (!(prob_floor > 0.0 && prob_floor < 1.0)) fail("prob_floor must lie in (0, 1)");
  if (!(init_scale > 0.0)) fail("init_scale must be > 0");
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string val = trim(std::string_view(line).substr(eq + 1));
    const auto where = "config line " + std::to_string(n) + " (" + key + "): ";
    auto as_double = [&] {
      double v = 0;
      auto r = std::from_chars(val.data(), val.data() + val.size(), v);
      if (r.ec != std::errc() || r.ptr != val.data() + val.size()) fail(where + "not a number");
      return v;
    };
    auto as_long = [&] {
      long long v = 0;
      auto r = std::from_chars(val.data(), val.data() + val.size(), v);
      if (r.ec != std::errc() || r.ptr != val.data() + val.size()) fail(where + "not an integer");
      return v;
    };
    auto as_bool = [&] {
      if (val == "true" || val == "1") return true;
      if (val == "false" || val == "0") return false;
      fail(where + "expected true or false");
    };
    if (key == "lambda") c.lambda = as_double();
    else if (key == "eta") c.eta = as_double();
    else if (key == "lr") c.learning_rate = as_double();
    else if (key == "epochs_pretrain") c.epochs_pretrain = static_cast<int>(as_long());
    else if (key == "epochs_full") c.epochs_full = static_cast<int>(as_long());
    else if (key == "batch_size") c.batch_size = static_cast<int>(as_long());
    else if (key == "width") c.beam_width = static_cast<int>(as_long());
    else if (key == "max_len") c.max_len = static_cast<int>(as_long());
    else if (key == "max_distance") c.max_distance = static_cast<std::size_t>(as_long());
    else if (key == "prefer_equal_size") c.prefer_equal_size = as_bool();
    else if (key == "frozen_triples") c.frozen_triples = as_bool();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_long());
    else if (key == "precision") {
      if (val == "f32") c.precision = Precision::f32;
      else if (val == "f64") c.precision = Precision::f64;
      else fail(where + "expected f32 or f64");
    } else if (key == "embed") c.embed = static_cast<int>(as_long());
    else if (key == "hidden") c.hidden = static_cast<int>(as_long());
    else if (key == "min_count") c.min_count = static_cast<int>(as_long());
    else if (key == "prob_floor") c.prob_floor = as_double();
    else if (key == "init_scale") c.init_scale = as_double();
    else if (key == "coverage") {
      if (val == "both") c.coverage = CoverageMode::both;
      else if (val == "content") c.coverage = CoverageMode::content;
      else if (val == "style") c.coverage = CoverageMode::style;
      else fail(where + "expected both, content or style");
    } else {
      fail("config line " + std::to_string(n) + ": unknown key '" + key + "'");
    }
  }
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::format() const {
  std::ostringstream out;
  out << "lambda = " << fmt_double(lambda) << '\n'
      << "eta = " << fmt_double(eta) << '\n'
      << "lr = " << fmt_double(learning_rate) << '\n'
      << "epochs_pretrain = " << epochs_pretrain << '\n'
      << "epochs_full = " << epochs_full << '\n'
      << "batch_size = " << batch_size << '\n'
      << "width = " << beam_width << '\n'
      << "max_len = " << max_len << '\n'
      << "max_distance = " << max_distance << '\n'
      << "prefer_equal_size = " << (prefer_equal_size ? "true" : "false") << '\n'
      << "frozen_triples = " << (frozen_triples ? "true" : "false") << '\n'
      << "seed = " << seed << '\n'
      << "precision = " << to_string(precision) << '\n'
      << "embed = " << embed << '\n'
      << "hidden = " << hidden << '\n'
      << "min_count = " << min_count << '\n'
      << "prob_floor = " << fmt_double(prob_floor) << '\n'
      << "init_scale = " << fmt_double(init_scale) << '\n'
      << "coverage = " << to_string(coverage) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------

TrainingTriple make_triple(const CorpusPair& pair, const CorpusPair& exemplar) {
  return {pair.id, pair.record, pair.text, exemplar.record, exemplar.text,
          field_set_distance(pair.record, exemplar.record)};
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  content_nll += o.content_nll;
  style_nll += o.style_nll;
  joint += o.joint;
  coverage += o.coverage;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  return {content_nll * s, style_nll * s, joint * s, coverage * s, total * s};
}

template <typename Real>
Mat<Real> SequencePass<Real>::copy_dists() const {
  const auto m = sources.record.states.rows();
  Mat<Real> out(static_cast<Eigen::Index>(steps.size()), m);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    out.row(static_cast<Eigen::Index>(t)) = steps[t].out.p_copy.transpose();
  }
  return out;
}

template <typename Real>
SequencePass<Real> sequence_forward(const Model<Real>& model, const Record& record,
                                    const Tokens& exemplar, const Tokens& target,
                                    double prob_floor) {
  if (target.empty()) fail("target sequence is empty");
  SequencePass<Real> pass;
  pass.sources = encode_sources(model.params, model.fields, model.vocab, record, exemplar);
  pass.targets = target;
  if (pass.targets.back() != Vocabulary::eos_token()) pass.targets.push_back(Vocabulary::eos_token());

  const Real floor = static_cast<Real>(prob_floor);
  DecoderState<Real> state = initial_state(model.params, pass.sources);
  int input = Vocabulary::kBos;
  pass.steps.resize(pass.targets.size());
  for (std::size_t t = 0; t < pass.targets.size(); ++t) {
    auto& cache = pass.steps[t];
    state = step_forward(model.params, state, input, pass.sources, cache);
    const Real p = token_probability(cache.out, pass.sources, model.vocab, pass.targets[t]);
    const bool clamped = !(p >= floor);
    pass.probs.push_back(p);
    pass.clamped.push_back(clamped);
    pass.nll -= std::log(clamped ? floor : p);
    const auto vid = model.vocab.find(pass.targets[t]);
    pass.target_ids.push_back(vid && *vid < model.params.dims.vocab ? *vid : -1);
    input = model.vocab.id(pass.targets[t]);
  }
  return pass;
}

template <typename Real>
NllResult<Real> sequence_nll(const Model<Real>& model, const Record& record,
                             const Tokens& exemplar, const Tokens& target, double prob_floor) {
  auto pass = sequence_forward(model, record, exemplar, target, prob_floor);
  return {pass.nll, pass.copy_dists()};
}

template <typename Real>
Real coverage_penalty(const Mat<Real>& copy_dists, std::size_t record_size) {
  const auto m = static_cast<Eigen::Index>(record_size);
  if (copy_dists.rows() > 0 && copy_dists.cols() != m) {
    fail("copy distributions have " + std::to_string(copy_dists.cols()) + " slots, record has " +
         std::to_string(record_size));
  }
  Vec<Real> aggregate = Vec<Real>::Zero(m);
  for (Eigen::Index t = 0; t < copy_dists.rows(); ++t) aggregate += copy_dists.row(t).transpose();
  return (aggregate.array() - Real(1)).square().sum();
}


template <typename Real>
void sequence_backward(const ModelParams<Real>& P, const SequencePass<Real>& pass,
                       Real nll_weight, Real cov_weight, ModelParams<Real>& G) {
  const int h = P.dims.hidden, e = P.dims.embed;
  const auto& src = pass.sources;
  const auto& values = src.record.values;
  const Eigen::Index n = src.exemplar.states.rows();
  const Eigen::Index m = src.record.states.rows();

  Mat<Real> d_ex_states = Mat<Real>::Zero(n, h);
  Mat<Real> d_rec_states = Mat<Real>::Zero(m, h);
  Mat<Real> d_ex_keys = Mat<Real>::Zero(n, h);
  Mat<Real> d_rec_keys = Mat<Real>::Zero(m, h);

  // d coverage / d P_x, identical at every step
  Vec<Real> gamma = Vec<Real>::Zero(m);
  if (cov_weight != Real(0)) {
    Vec<Real> aggregate = Vec<Real>::Zero(m);
    for (const auto& s : pass.steps) aggregate += s.out.p_copy;
    gamma = (Real(2) * cov_weight) * (aggregate.array() - Real(1)).matrix();
  }

  Vec<Real> dh_next = Vec<Real>::Zero(h);
  Vec<Real> dc_next = Vec<Real>::Zero(h);
  Vec<Real> dattn_next = Vec<Real>::Zero(h);
  Vec<Real> dx(e + 2 * h), dc_prev(h);
  Vec<Real> mask(m);

  for (std::size_t t = pass.steps.size(); t-- > 0;) {
    const auto& c = pass.steps[t];
    const auto& out = c.out;
    const Real g = out.gate;
    Vec<Real> dattn = dattn_next;
    Vec<Real> d_rec_scores = Vec<Real>::Zero(m);

    if (nll_weight != Real(0) && !pass.clamped[t]) {
      const std::string& y = pass.targets[t];
      const Real coef = -nll_weight / pass.probs[t];
      for (std::size_t j = 0; j < values.size(); ++j) {
        mask(static_cast<Eigen::Index>(j)) = values[j] == y ? Real(1) : Real(0);
      }
      const Eigen::Index yid = pass.target_ids[t];
      const Real a = yid >= 0 ? out.p_vocab(yid) : Real(0);
      const Real b = mask.dot(out.p_copy);

      if (yid >= 0) {
        Vec<Real> dlogits = -(coef * g * a) * out.p_vocab;
        dlogits(yid) += coef * g * a;
        G.out_w.noalias() += dlogits * out.h.transpose();
        G.out_b.col(0) += dlogits;
        dattn.noalias() += P.out_w.transpose() * dlogits;
      }
      const Real dgate = coef * (a - b) * g * (Real(1) - g);
      G.gate_w.row(0) += dgate * out.h.transpose();
      G.gate_b(0, 0) += dgate;
      dattn += dgate * P.gate_w.row(0).transpose();
      d_rec_scores += (coef * (Real(1) - g)) *
                      (out.p_copy.cwiseProduct(mask) - b * out.p_copy);
    }
    if (cov_weight != Real(0)) {
      const Real gp = gamma.dot(out.p_copy);
      d_rec_scores += out.p_copy.cwiseProduct((gamma.array() - gp).matrix());
    }

    // attentional state
    const Vec<Real> dpre = dattn.cwiseProduct((Real(1) - out.h.array().square()).matrix());
    G.combine_w.noalias() += dpre * c.combined.transpose();
    G.combine_b.col(0) += dpre;
    const Vec<Real> dcombined = P.combine_w.transpose() * dpre;
    const auto dctx = dcombined.head(h);
    Vec<Real> dh = dcombined.tail(h) + dh_next;

    // context and joint attention
    const auto att_e = c.attention.head(n);
    const auto att_r = c.attention.tail(m);
    d_ex_states.noalias() += att_e * dctx.transpose();
    d_rec_states.noalias() += att_r * dctx.transpose();
    Vec<Real> datt(n + m);
    datt.head(n) = src.exemplar.states * dctx;
    datt.tail(m) = src.record.states * dctx;
    Vec<Real> dscores = c.attention.cwiseProduct((datt.array() - c.attention.dot(datt)).matrix());
    dscores.tail(m) += d_rec_scores;

    const Vec<Real>& ht = c.lstm.h;
    dh.noalias() += src.exemplar_keys.transpose() * dscores.head(n);
    dh.noalias() += src.record_keys.transpose() * dscores.tail(m);
    d_ex_keys.noalias() += dscores.head(n) * ht.transpose();
    d_rec_keys.noalias() += dscores.tail(m) * ht.transpose();

    lstm_backward(P.dec_w, c.lstm, dh, dc_next, G.dec_w, G.dec_b, dx, dc_prev);
    G.token_embed.row(c.input_id) += dx.head(e).transpose();
    dattn_next = dx.segment(e, h);
    dh_next = dx.tail(h);
    dc_next = dc_prev;
  }

  // initial decoder state is the final exemplar state; the initial attentional state is constant
  d_ex_states.row(n - 1) += dh_next.transpose();

  // keys = states * A'
  G.attn_exemplar.noalias() += d_ex_keys.transpose() * src.exemplar.states;
  G.attn_record.noalias() += d_rec_keys.transpose() * src.record.states;
  d_ex_states.noalias() += d_ex_keys * P.attn_exemplar;
  d_rec_states.noalias() += d_rec_keys * P.attn_record;

  // record encoder
  const Mat<Real> drec_pre =
      d_rec_states.cwiseProduct((Real(1) - src.record.states.array().square()).matrix());
  G.record_proj.noalias() += drec_pre.transpose() * src.record.inputs;
  G.record_bias.col(0) += drec_pre.colwise().sum().transpose();
  const Mat<Real> dinputs = drec_pre * P.record_proj;
  for (Eigen::Index j = 0; j < m; ++j) {
    G.field_embed.row(src.record.field_ids[static_cast<std::size_t>(j)]) += dinputs.row(j).head(e);
    G.token_embed.row(src.record.value_ids[static_cast<std::size_t>(j)]) += dinputs.row(j).tail(e);
  }

  // exemplar encoder
  Vec<Real> dh_carry = Vec<Real>::Zero(h);
  Vec<Real> dc_carry = dc_next;
  Vec<Real> dxe(e + h), dce(h);
  for (Eigen::Index t = n; t-- > 0;) {
    const Vec<Real> dh_t = d_ex_states.row(t).transpose() + dh_carry;
    const auto& cache = src.exemplar.steps[static_cast<std::size_t>(t)];
    lstm_backward(P.enc_w, cache, dh_t, dc_carry, G.enc_w, G.enc_b, dxe, dce);
    G.token_embed.row(src.exemplar.token_ids[static_cast<std::size_t>(t)]) += dxe.head(e).transpose();
    dh_carry = dxe.tail(h);
    dc_carry = dce;
  }
}

template <typename Real>
LossBreakdown total_loss(const Model<Real>& model, const TrainingTriple& triple,
                         const LossOptions& options) {
  const auto content = sequence_forward(model, triple.x, triple.y_e, triple.y_x, options.prob_floor);
  const auto style = sequence_forward(model, triple.x_e, triple.y_e, triple.y_e, options.prob_floor);
  return breakdown(options, static_cast<double>(content.nll), static_cast<double>(style.nll),
                   static_cast<double>(coverage_penalty(content.copy_dists(), triple.x.size())),
                   static_cast<double>(coverage_penalty(style.copy_dists(), triple.x_e.size())));
}

template <typename Real>
void require_finite(const ModelParams<Real>& grad) {
  grad.for_each([](const char* name, const Mat<Real>& m) {
    if (!m.allFinite()) fail(std::string("non-finite gradient in tensor ") + name);
  });
}

template <typename Real>
LossBreakdown accumulate_gradients(const Model<Real>& model, const TrainingTriple& triple,
                                   const LossOptions& options, ModelParams<Real>& grad) {
  const PassWeights w = weights_for(options);
  const auto content = sequence_forward(model, triple.x, triple.y_e, triple.y_x, options.prob_floor);
  const auto style = sequence_forward(model, triple.x_e, triple.y_e, triple.y_e, options.prob_floor);
  if (w.content_nll != 0.0 || w.content_cov != 0.0) {
    sequence_backward(model.params, content, static_cast<Real>(w.content_nll),
                      static_cast<Real>(w.content_cov), grad);
  }
  if (w.style_nll != 0.0 || w.style_cov != 0.0) {
    sequence_backward(model.params, style, static_cast<Real>(w.style_nll),
                      static_cast<Real>(w.style_cov), grad);
  }
  return breakdown(options, static_cast<double>(content.nll), static_cast<double>(style.nll),
                   static_cast<double>(coverage_penalty(content.copy_dists(), triple.x.size())),
                   static_cast<double>(coverage_penalty(style.copy_dists(), triple.x_e.size())));
}

template <typename Real>
GradientResult<Real> gradients(const Model<Real>& model, const TrainingTriple& triple,
                               const LossOptions& options) {
  GradientResult<Real> r{{}, ModelParams<Real>::zeros(model.params.dims)};
  r.loss = accumulate_gradients(model, triple, options, r.grad);
  require_finite(r.grad);
  return r;
}

// ---------------------------------------------------------------------------

template <typename Real>
Adam<Real>::Adam(const ModelDims& dims, double learning_rate, double beta1, double beta2,
                 double epsilon)
    : lr_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      eps_(epsilon),
      m_(ModelParams<Real>::zeros(dims)),
      v_(ModelParams<Real>::zeros(dims)) {
  if (!(learning_rate >= 0.0)) fail("learning rate must be >= 0");
}

template <typename Real>
void Adam<Real>::step(ModelParams<Real>& params, const ModelParams<Real>& grad) {
  ++t_;
  const Real b1 = static_cast<Real>(beta1_), b2 = static_cast<Real>(beta2_);
  const Real c1 = static_cast<Real>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const Real c2 = static_cast<Real>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const Real lr = static_cast<Real>(lr_), eps = static_cast<Real>(eps_);

  std::vector<const Mat<Real>*> gs;
  grad.for_each([&](const char*, const Mat<Real>& g) { gs.push_back(&g); });
  std::vector<Mat<Real>*> ms, vs;
  m_.for_each([&](const char*, Mat<Real>& x) { ms.push_back(&x); });
  v_.for_each([&](const char*, Mat<Real>& x) { vs.push_back(&x); });
  std::size_t k = 0;
  params.for_each([&](const char*, Mat<Real>& p) {
    const auto& g = gs[k]->array();
    auto m = ms[k]->array();
    auto v = vs[k]->array();
    m = b1 * m + (Real(1) - b1) * g;
    v = b2 * v + (Real(1) - b2) * g.square();
    if (lr != Real(0)) p.array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    ++k;
  });
}

// ---------------------------------------------------------------------------

GradCheckReport check_gradient(const ReferenceLoss& loss, const ModelParams<long double>& at,
                               const ModelParams<double>& analytic, double epsilon,
                               std::size_t min_samples, std::uint64_t seed) {
  if (!(epsilon > 0.0)) fail("gradient check epsilon must be > 0");
  struct Slot {
    std::size_t tensor;
    Eigen::Index index;
  };
  std::vector<std::string> names;
  std::vector<Eigen::Index> sizes;
  std::vector<Slot> nonzero;
  {
    std::size_t k = 0;
    analytic.for_each([&](const char* name, const Mat<double>& g) {
      names.emplace_back(name);
      sizes.push_back(g.size());
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        if (g.data()[i] != 0.0) nonzero.push_back({k, i});
      }
      ++k;
    });
  }

  std::mt19937_64 rng(derive_seed(seed, 0x67c));
  std::vector<Slot> picks;
  // one uniform draw per tensor so every tensor is represented
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (sizes[k] == 0) continue;
    picks.push_back({k, std::uniform_int_distribution<Eigen::Index>(0, sizes[k] - 1)(rng)});
  }
  const std::size_t target = std::max(min_samples, picks.size());
  const std::size_t from_nonzero = std::min(nonzero.size(), (target + 1) / 2);
  std::shuffle(nonzero.begin(), nonzero.end(), rng);
  for (std::size_t i = 0; i < from_nonzero; ++i) picks.push_back(nonzero[i]);
  const Eigen::Index total = std::accumulate(sizes.begin(), sizes.end(), Eigen::Index{0});
  std::uniform_int_distribution<Eigen::Index> any(0, total - 1);
  while (picks.size() < target) {
    Eigen::Index flat = any(rng);
    std::size_t k = 0;
    while (flat >= sizes[k]) flat -= sizes[k++];
    picks.push_back({k, flat});
  }

  ModelParams<long double> probe = at;
  std::vector<Mat<long double>*> probe_t;
  probe.for_each([&](const char*, Mat<long double>& m) { probe_t.push_back(&m); });
  std::vector<const Mat<double>*> grad_t;
  analytic.for_each([&](const char*, const Mat<double>& m) { grad_t.push_back(&m); });

  GradCheckReport report;
  for (const auto& s : picks) {
    long double& x = probe_t[s.tensor]->data()[s.index];
    const long double saved = x;
    const long double eps = epsilon;
    x = saved + eps;
    const long double up = loss(probe);
    x = saved - eps;
    const long double down = loss(probe);
    x = saved;
    const double numeric = static_cast<double>((up - down) / (2 * eps));
    const double a = grad_t[s.tensor]->data()[s.index];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    ++report.checked;
    if (report.worst_tensor.empty() || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_tensor = names[s.tensor];
    }
  }
  return report;
}

GradCheckReport gradient_check(const Model<double>& model, const TrainingTriple& triple,
                               const LossOptions& options, double epsilon,
                               std::size_t min_samples, std::uint64_t seed) {
  const auto analytic = gradients(model, triple, options);
  Model<long double> work{model.vocab, model.fields, model.params.cast<long double>()};
  auto loss = [&](const ModelParams<long double>& p) {
    work.params = p;
    const auto content = sequence_forward(work, triple.x, triple.y_e, triple.y_x, options.prob_floor);
    const auto style = sequence_forward(work, triple.x_e, triple.y_e, triple.y_e, options.prob_floor);
    const long double cc = coverage_penalty(content.copy_dists(), triple.x.size());
    const long double cs = coverage_penalty(style.copy_dists(), triple.x_e.size());
    const long double lambda = options.lambda, eta = options.eta;
    long double cov = (cc + cs) / 2;
    if (options.coverage == CoverageMode::content) cov = cc;
    if (options.coverage == CoverageMode::style) cov = cs;
    return lambda * content.nll + (1 - lambda) * style.nll + eta * cov;
  };
  return check_gradient(loss, work.params, analytic.grad, epsilon, min_samples, seed);
}

// ---------------------------------------------------------------------------

std::string format_epoch_log(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["phase"] = log.phase;
  j["content_nll"] = log.mean.content_nll;
  j["style_nll"] = log.mean.style_nll;
  j["coverage"] = log.mean.coverage;
  j["total"] = log.mean.total;
  return j.dump();
}

std::vector<TrainingTriple> build_triples(std::span<const CorpusPair> corpus,
                                          const ExemplarIndex& index,
                                          const RetrievalOptions& options, std::uint64_t stream_base,
                                          std::size_t* skipped) {
  std::vector<TrainingTriple> out;
  out.reserve(corpus.size());
  std::size_t missing = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& pair = corpus[i];
    if (index.candidates(pair.record, pair.id, options.max_distance, options.prefer_equal_size)
            .empty()) {
      ++missing;
      continue;
    }
    const auto r = index.retrieve(pair.record, pair.id, options, stream_base + i);
    out.push_back(make_triple(pair, index.pool()[r.pool_index]));
  }
  if (skipped) *skipped = missing;
  return out;
}

namespace {

constexpr std::uint64_t kInitStream = 0x1a17;
constexpr std::uint64_t kShuffleStream = 0x5f1e;

std::vector<CorpusPair> joined(std::span<const CorpusPair> a, std::span<const CorpusPair> b) {
  std::vector<CorpusPair> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  return all;
}

}  // namespace

template <typename Real>
Model<Real> init_model(std::span<const CorpusPair> corpus, std::span<const CorpusPair> pool,
                       const TrainConfig& config) {
  config.validate();
  const auto all = joined(corpus, pool);
  Model<Real> model{build_vocabulary(all, config.min_count), FieldTable::from_corpus(all), {}};
  const ModelDims dims{static_cast<int>(model.vocab.size()), static_cast<int>(model.fields.size()),
                       config.embed, config.hidden};
  model.params = ModelParams<Real>::random(dims, derive_seed(config.seed, kInitStream),
                                           static_cast<Real>(config.init_scale));
  return model;
}

template <typename Real>
TrainResult<Real> train(std::span<const CorpusPair> corpus, std::span<const CorpusPair> pool,
                        const TrainConfig& config, const EpochCallback& on_epoch) {
  return train_from(init_model<Real>(corpus, pool, config), corpus, pool, config, 0, on_epoch);
}

template <typename Real>
TrainResult<Real> train_from(Model<Real> model, std::span<const CorpusPair> corpus,
                             std::span<const CorpusPair> pool, const TrainConfig& config,
                             int first_epoch, const EpochCallback& on_epoch) {
  config.validate();
  if (corpus.empty()) fail("training corpus is empty");
  if (pool.empty()) fail("retrieval pool is empty");
  if (first_epoch < 0) fail("first epoch must be >= 0");
  model.params.check_shapes();

  const ExemplarIndex index(pool);
  const int total_epochs = config.epochs_pretrain + config.epochs_full;
  TrainResult<Real> result{std::move(model), {}, false, {}};
  auto& params = result.model.params;
  std::optional<Adam<Real>> adam;

  for (int epoch = first_epoch; epoch < total_epochs; ++epoch) {
    const int phase = epoch < config.epochs_pretrain ? 1 : 2;
    const LossOptions options = phase == 1 ? LossOptions::pretrain(config) : LossOptions::full(config);
    if (!adam || epoch == config.epochs_pretrain) {
      adam.emplace(params.dims, config.learning_rate);
    }

    const RetrievalOptions ropts{config.max_distance, config.prefer_equal_size, config.seed};
    const std::uint64_t stream_base =
        config.frozen_triples ? 0 : static_cast<std::uint64_t>(epoch) << 32;
    EpochLog log;
    log.epoch = epoch + 1;
    log.phase = phase;
    auto triples = build_triples(corpus, index, ropts, stream_base, &log.skipped);
    if (triples.empty()) fail("no training pair has an exemplar within the distance bound");
    std::mt19937_64 rng(derive_seed(config.seed, kShuffleStream + static_cast<std::uint64_t>(epoch)));
    std::shuffle(triples.begin(), triples.end(), rng);

    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t start = 0; start < triples.size(); start += bs) {
      const std::size_t len = std::min(bs, triples.size() - start);
      const std::span<const TrainingTriple> batch(triples.data() + start, len);
      BatchGradient<Real> bg;
      try {
        bg = batch_gradient_parallel(result.model, batch, options);
      } catch (const Error& e) {
        result.diverged = true;
        result.message = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
        return result;
      }
      if (!std::isfinite(bg.loss.total)) {
        result.diverged = true;
        result.message = "epoch " + std::to_string(epoch + 1) + ": non-finite loss";
        return result;
      }
      ModelParams<Real> before = params;
      adam->step(params, bg.grad);
      if (!params.all_finite()) {
        params = std::move(before);
        result.diverged = true;
        result.message = "epoch " + std::to_string(epoch + 1) + ": non-finite parameters";
        return result;
      }
      log.mean += bg.loss.scaled(static_cast<double>(len));
    }
    log.triples = triples.size();
    log.mean = log.mean.scaled(1.0 / static_cast<double>(triples.size()));
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

template <typename Real>
double teacher_forced_accuracy(const Model<Real>& model, std::span<const TrainingTriple> triples,
                               bool style_pass) {
  std::size_t hits = 0, steps = 0;
  for (const auto& tr : triples) {
    const auto& record = style_pass ? tr.x_e : tr.x;
    const auto& target = style_pass ? tr.y_e : tr.y_x;
    const auto pass = sequence_forward(model, record, tr.y_e, target);
    for (std::size_t t = 0; t < pass.steps.size(); ++t) {
      const auto dist = output_distribution(pass.steps[t].out, pass.sources, model.vocab);
      const auto best = static_cast<std::size_t>(
          std::max_element(dist.prob.begin(), dist.prob.end()) - dist.prob.begin());
      const std::string& tok = best < model.vocab.size() ? model.vocab.token(static_cast<int>(best))
                                                         : dist.extra[best - model.vocab.size()];
      hits += tok == pass.targets[t] ? 1 : 0;
      ++steps;
    }
  }
  return steps == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(steps);
}

#define SOFTTPL_INSTANTIATE(Real)                                                                  \
  template struct SequencePass<Real>;                                                              \
  template SequencePass<Real> sequence_forward(const Model<Real>&, const Record&, const Tokens&,   \
                                               const Tokens&, double);                             \
  template NllResult<Real> sequence_nll(const Model<Real>&, const Record&, const Tokens&,          \
                                        const Tokens&, double);                                    \
  template Real coverage_penalty(const Mat<Real>&, std::size_t);                                   \
  template void sequence_backward(const ModelParams<Real>&, const SequencePass<Real>&, Real, Real, \
                                  ModelParams<Real>&);                                             \
  template LossBreakdown total_loss(const Model<Real>&, const TrainingTriple&, const LossOptions&); \
  template void require_finite(const ModelParams<Real>&);                                          \
  template LossBreakdown accumulate_gradients(const Model<Real>&, const TrainingTriple&,           \
                                              const LossOptions&, ModelParams<Real>&);             \
  template GradientResult<Real> gradients(const Model<Real>&, const TrainingTriple&,               \
                                          const LossOptions&);                                     \
  template class Adam<Real>;                                                                       \
  template Model<Real> init_model(std::span<const CorpusPair>, std::span<const CorpusPair>,        \
                                  const TrainConfig&);                                             \
  template TrainResult<Real> train(std::span<const CorpusPair>, std::span<const CorpusPair>,       \
                                   const TrainConfig&, const EpochCallback&);                      \
  template TrainResult<Real> train_from(Model<Real>, std::span<const CorpusPair>,                  \
                                        std::span<const CorpusPair>, const TrainConfig&, int,      \
                                        const EpochCallback&);                                     \
  template double teacher_forced_accuracy(const Model<Real>&, std::span<const TrainingTriple>,     \
                                          bool);

SOFTTPL_INSTANTIATE(float)
SOFTTPL_INSTANTIATE(double)

template struct SequencePass<long double>;
template SequencePass<long double> sequence_forward(const Model<long double>&, const Record&,
                                                    const Tokens&, const Tokens&, double);
template long double coverage_penalty(const Mat<long double>&, std::size_t);

}  // namespace softtpl

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "softtpl/error.hpp"
#include "softtpl/retrieval.hpp"
#include "softtpl/training.hpp"

using namespace softtpl;

namespace {

Model<double> small_model(std::vector<std::string> words, std::vector<std::string> fields, int d, int h,
                          std::uint64_t seed, double scale = 0.5) {
  Model<double> m{Vocabulary::from_tokens(words), FieldTable(fields), {}};
  m.params = ModelParams<double>::random(
      {static_cast<int>(m.vocab.size()), static_cast<int>(m.fields.size()), d, h}, seed, scale);
  return m;
}

// Plain-loop forward pass of the whole model, written without Eigen
// expressions, for cross-checking the library NLL.
struct Oracle {
  const ModelParams<double>& P;
  const Model<double>& M;
  int d, h;

  using V = std::vector<double>;

  V row(const Mat<double>& m, int r) const {
    V out(static_cast<std::size_t>(m.cols()));
    for (int c = 0; c < m.cols(); ++c) out[c] = m(r, c);
    return out;
  }
  V affine(const Mat<double>& w, const Mat<double>& b, const V& x) const {
    V out(static_cast<std::size_t>(w.rows()));
    for (int r = 0; r < w.rows(); ++r) {
      double s = b(r, 0);
      for (int c = 0; c < w.cols(); ++c) s += w(r, c) * x[c];
      out[r] = s;
    }
    return out;
  }
  static double sig(double z) { return 1 / (1 + std::exp(-z)); }
  static V cat(std::initializer_list<V> parts) {
    V out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
  }
  static V softmax(const V& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    V e(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
    for (auto& v : e) v /= s;
    return e;
  }
  void lstm(const Mat<double>& w, const Mat<double>& b, const V& x, V& hs, V& cs) const {
    const V z = affine(w, b, x);
    for (int k = 0; k < h; ++k) {
      const double i = sig(z[k]), f = sig(z[h + k]), o = sig(z[2 * h + k]), g = std::tanh(z[3 * h + k]);
      cs[k] = f * cs[k] + i * g;
      hs[k] = o * std::tanh(cs[k]);
    }
  }

  double nll(const Record& r, const Tokens& ex, const Tokens& target, double floor) const {
    // record states
    std::vector<V> rec;
    for (const auto& e : r.entries()) {
      const V in = cat({row(P.field_embed, M.fields.id(e.field)), row(P.token_embed, M.vocab.id(e.value))});
      V s = affine(P.record_proj, P.record_bias, in);
      for (auto& v : s) v = std::tanh(v);
      rec.push_back(s);
    }
    // exemplar states
    std::vector<V> exs;
    V hs(h, 0.0), cs(h, 0.0);
    for (const auto& t : ex) {
      lstm(P.enc_w, P.enc_b, cat({row(P.token_embed, M.vocab.id(t)), hs}), hs, cs);
      exs.push_back(hs);
    }
    V att(h, 0.0);
    int input = Vocabulary::kBos;
    Tokens tgt = target;
    tgt.push_back(Vocabulary::eos_token());
    double total = 0;
    for (const auto& y : tgt) {
      lstm(P.dec_w, P.dec_b, cat({row(P.token_embed, input), att, hs}), hs, cs);
      V scores;
      for (const auto& s : exs) {
        double v = 0;
        for (int a = 0; a < h; ++a)
          for (int b = 0; b < h; ++b) v += hs[a] * P.attn_exemplar(a, b) * s[b];
        scores.push_back(v);
      }
      V rec_scores;
      for (const auto& s : rec) {
        double v = 0;
        for (int a = 0; a < h; ++a)
          for (int b = 0; b < h; ++b) v += hs[a] * P.attn_record(a, b) * s[b];
        scores.push_back(v);
        rec_scores.push_back(v);
      }
      const V alpha = softmax(scores);
      V ctx(h, 0.0);
      for (std::size_t j = 0; j < exs.size(); ++j)
        for (int k = 0; k < h; ++k) ctx[k] += alpha[j] * exs[j][k];
      for (std::size_t j = 0; j < rec.size(); ++j)
        for (int k = 0; k < h; ++k) ctx[k] += alpha[exs.size() + j] * rec[j][k];
      att = affine(P.combine_w, P.combine_b, cat({ctx, hs}));
      for (auto& v : att) v = std::tanh(v);
      const V pv = softmax(affine(P.out_w, P.out_b, att));
      double gz = P.gate_b(0, 0);
      for (int k = 0; k < h; ++k) gz += P.gate_w(0, k) * att[k];
      const double g = sig(gz);
      const V px = softmax(rec_scores);
      double p = 0;
      if (auto id = M.vocab.find(y)) p += g * pv[*id];
      for (std::size_t j = 0; j < rec.size(); ++j)
        if (r.entries()[j].value == y) p += (1 - g) * px[j];
      total -= std::log(std::max(p, floor));
      input = M.vocab.id(y);
    }
    return total;
  }
};

TrainingTriple triple_of(Record x, Tokens yx, Record xe, Tokens ye) {
  return {"t", std::move(x), std::move(yx), std::move(xe), std::move(ye), 0};
}

const std::vector<std::string> kWords{"the", "food", "is", "near", "italian", "riverside", ".", "cheap"};
const std::vector<std::string> kFields{"area", "food", "name", "price"};

TrainingTriple restaurant_triple() {
  return triple_of(Record(std::vector<Entry>{{"name", "zizzi"}, {"food", "italian"}, {"price", "cheap"}}),
                   {"zizzi", "is", "cheap", "italian", "food", "."},
                   Record(std::vector<Entry>{{"name", "cocum"}, {"area", "riverside"}}),
                   {"cocum", "is", "near", "riverside", "."});
}

}  // namespace

TEST_CASE("config parses, formats and round-trips") {
  const auto c = TrainConfig::parse(
      "# comment\nlambda = 0.3\neta=0\nepochs_pretrain = 4\ncoverage = style\nprecision = f32\nseed = 99\n");
  CHECK(c.lambda == 0.3);
  CHECK(c.eta == 0.0);
  CHECK(c.epochs_pretrain == 4);
  CHECK(c.coverage == CoverageMode::style);
  CHECK(c.precision == Precision::f32);
  CHECK(c.seed == 99);
  const auto back = TrainConfig::parse(c.format());
  CHECK(back.format() == c.format());
  CHECK_THROWS_AS(TrainConfig::parse("lamda = 0.3\n"), Error);
  CHECK_THROWS_AS(TrainConfig::parse("lambda = 2\n").validate(), Error);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 0\n").validate(), Error);
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(TrainConfig::parse("lambda 0.3\n"), Error);
}

TEST_CASE("library NLL matches an independent plain-loop forward pass") {
  // V = 6: the five reserved tokens plus one word
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = small_model({"a"}, {"f", "g"}, 3, 4, seed, 0.8);
    REQUIRE(m.vocab.size() == 6);
    const Record r(std::vector<Entry>{{"f", "v"}, {"g", "a"}});
    const Tokens ex{"a", "a", "v"};
    const Tokens target{"v", "a"};  // three steps with EOS
    const Oracle o{m.params, m, 3, 4};
    const auto nll = sequence_nll(m, r, ex, target, 1e-12);
    CHECK(nll.nll == doctest::Approx(o.nll(r, ex, target, 1e-12)).epsilon(1e-12));
    CHECK(nll.copy_dists.rows() == 3);
  }
  const auto m = small_model(kWords, kFields, 5, 6, 3);
  const auto t = restaurant_triple();
  const Oracle o{m.params, m, 5, 6};
  CHECK(sequence_nll(m, t.x, t.y_e, t.y_x).nll == doctest::Approx(o.nll(t.x, t.y_e, t.y_x, 1e-12)).epsilon(1e-12));
}

TEST_CASE("uniform vocabulary distribution gives L log V") {
  auto m = small_model(kWords, kFields, 4, 5, 1);
  m.params.set_zero();
  m.params.gate_b(0, 0) = 1000;  // all mass on the vocabulary
  const Tokens target{"the", "food", "is", "cheap"};
  const auto nll = sequence_nll(m, Record(std::vector<Entry>{{"food", "italian"}}), Tokens{"the"}, target);
  const double L = static_cast<double>(target.size() + 1);
  CHECK(nll.nll == doctest::Approx(L * std::log(static_cast<double>(m.vocab.size()))).epsilon(1e-12));
}

TEST_CASE("probability floor keeps impossible targets finite") {
  auto m = small_model(kWords, kFields, 4, 5, 2);
  const Record r(std::vector<Entry>{{"food", "italian"}});
  const auto pass = sequence_forward(m, r, Tokens{"the"}, Tokens{"unheard"}, 1e-12);
  CHECK(pass.clamped[0]);
  CHECK(pass.probs[0] == 0.0);
  CHECK(std::isfinite(pass.nll));
  CHECK(pass.nll >= -std::log(1e-12));
  ModelParams<double> grad = ModelParams<double>::zeros(m.params.dims);
  sequence_backward(m.params, pass, 1.0, 1.0, grad);
  CHECK(grad.all_finite());
}

TEST_CASE("coverage penalty closed forms") {
  Mat<double> id = Mat<double>::Identity(3, 3);
  CHECK(coverage_penalty<double>(id, 3) == 0.0);
  Mat<double> half(1, 2);
  half << 0.5, 0.5;
  CHECK(coverage_penalty<double>(half, 2) == doctest::Approx(0.5).epsilon(1e-15));
  for (int m : {1, 2, 5}) {
    for (int T : {1, 3, 7}) {
      Mat<double> u = Mat<double>::Constant(T, m, 1.0 / m);
      const double expect = m * std::pow(static_cast<double>(T) / m - 1, 2);
      CHECK(std::abs(coverage_penalty<double>(u, static_cast<std::size_t>(m)) - expect) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(coverage_penalty<double>(half, 3), Error);
  CHECK(coverage_penalty<double>(Mat<double>(0, 4), 4) == 4.0);
  Mat<double> two(2, 2);
  two << 0.5, 0.5, 0.5, 0.5;
  CHECK(coverage_penalty<double>(two, 2) == 0.0);

  // depends only on the aggregate, so step order is irrelevant
  Mat<double> steps(3, 3);
  steps << 0.7, 0.2, 0.1, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4;
  Mat<double> flipped = steps.colwise().reverse();
  CHECK(coverage_penalty<double>(steps, 3) == doctest::Approx(coverage_penalty<double>(flipped, 3)).epsilon(1e-15));
}

TEST_CASE("loss combinations") {
  const auto m = small_model(kWords, kFields, 4, 5, 4);
  const auto t = restaurant_triple();
  const double c = sequence_nll(m, t.x, t.y_e, t.y_x).nll;
  const auto style = sequence_nll(m, t.x_e, t.y_e, t.y_e);
  const double s = style.nll;
  const double cs = coverage_penalty<double>(style.copy_dists, t.x_e.size());
  const double cc = coverage_penalty<double>(sequence_nll(m, t.x, t.y_e, t.y_x).copy_dists, t.x.size());

  auto only_content = total_loss(m, t, {1.0, 0.0, 1e-12, CoverageMode::both});
  CHECK(only_content.total == doctest::Approx(c).epsilon(1e-14));
  auto only_style = total_loss(m, t, {0.0, 0.0, 1e-12, CoverageMode::both});
  CHECK(only_style.total == doctest::Approx(s).epsilon(1e-14));
  auto full = total_loss(m, t, {0.2, 1.0, 1e-12, CoverageMode::both});
  CHECK(full.total == doctest::Approx(0.2 * c + 0.8 * s + (cc + cs) / 2).epsilon(1e-14));
  CHECK(total_loss(m, t, {0.2, 1.0, 1e-12, CoverageMode::content}).coverage == doctest::Approx(cc));
  CHECK(total_loss(m, t, {0.2, 1.0, 1e-12, CoverageMode::style}).coverage == doctest::Approx(cs));

  const auto g = gradients(m, t, {0.2, 1.0, 1e-12, CoverageMode::both});
  CHECK(g.loss.total == doctest::Approx(full.total).epsilon(1e-14));
}

TEST_CASE("check_gradient is exact on a quadratic") {
  const auto m = small_model(kWords, kFields, 3, 4, 5);
  const auto at = m.params.cast<long double>();
  ModelParams<double> analytic = m.params;
  analytic.scale(3.0);
  const ReferenceLoss quad = [](const ModelParams<long double>& p) {
    long double s = 0;
    p.for_each([&](const char*, const Mat<long double>& x) { s += 1.5L * x.squaredNorm(); });
    return s;
  };
  const auto rep = check_gradient(quad, at, analytic, 1e-5, 300, 1);
  CHECK(rep.checked >= 300);
  CHECK(rep.max_rel_error <= 1e-10);

  // a wrong gradient is caught
  ModelParams<double> wrong = analytic;
  wrong.out_w.array() += 1.0;
  CHECK(check_gradient(quad, at, wrong, 1e-5, 300, 1).max_rel_error > 1e-3);
}

TEST_CASE("analytic gradients agree with central differences") {
  const auto m = small_model(kWords, kFields, 4, 5, 6, 0.3);
  const auto t = restaurant_triple();
  for (const LossOptions& o : {LossOptions{0.2, 1.0, 1e-12, CoverageMode::both},
                               LossOptions{0.0, 0.0, 1e-12, CoverageMode::both},
                               LossOptions{1.0, 0.5, 1e-12, CoverageMode::content},
                               LossOptions{0.5, 2.0, 1e-12, CoverageMode::style}}) {
    const auto rep = gradient_check(m, t, o, 1e-5, 150, 2);
    INFO("worst tensor " << rep.worst_tensor);
    CHECK(rep.max_rel_error <= 1e-4);
  }
  // coarser steps are no more accurate, up to the extended-precision roundoff
  // floor (about 1e-19 * loss / epsilon relative to the smallest sampled gradient)
  const LossOptions o{0.2, 1.0, 1e-12, CoverageMode::both};
  const double coarse = gradient_check(m, t, o, 1e-3, 150, 2).max_rel_error;
  const double fine = gradient_check(m, t, o, 1e-5, 150, 2).max_rel_error;
  CHECK(fine <= std::max(coarse, 1e-5));
}

TEST_CASE("embeddings of unused tokens and fields get no gradient") {
  const auto m = small_model(kWords, kFields, 4, 5, 7);
  const auto t = restaurant_triple();
  const auto g = gradients(m, t, {0.2, 1.0, 1e-12, CoverageMode::both});
  // "the" appears nowhere in inputs, records or exemplar
  CHECK(g.grad.token_embed.row(m.vocab.id("the")).isZero(0.0));
  CHECK(g.grad.field_embed.row(0).isZero(0.0));
  // decoder targets are never fed back after EOS
  CHECK(g.grad.token_embed.row(Vocabulary::kEos).isZero(0.0));
  CHECK_FALSE(g.grad.token_embed.row(m.vocab.id("is")).isZero(0.0));
}

TEST_CASE("Adam with zero learning rate leaves parameters unchanged") {
  auto m = small_model(kWords, kFields, 4, 5, 8);
  const auto before = m.params;
  Adam<double> adam(m.params.dims, 0.0);
  const auto g = gradients(m, restaurant_triple(), {0.2, 1.0, 1e-12, CoverageMode::both});
  adam.step(m.params, g.grad);
  adam.step(m.params, g.grad);
  CHECK(adam.steps_taken() == 2);
  CHECK(m.params.out_w == before.out_w);
  CHECK(m.params.dec_w == before.dec_w);

  Adam<double> moving(m.params.dims, 0.01);
  moving.step(m.params, g.grad);
  // first bias-corrected step moves every non-zero-gradient entry by about lr
  const double delta = (m.params.out_w - before.out_w).cwiseAbs().maxCoeff();
  CHECK(delta == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("training is deterministic and pretraining reduces the style loss") {
  auto spec = SyntheticSpec::restaurant();
  spec.pairs = 60;
  spec.seed = 3;
  const auto corpus = generate_synthetic(spec);
  TrainConfig c;
  c.embed = 8;
  c.hidden = 12;
  c.epochs_pretrain = 3;
  c.epochs_full = 1;
  c.batch_size = 8;
  c.learning_rate = 0.01;
  c.seed = 5;
  std::vector<EpochLog> seen;
  const auto a = train<double>(corpus, corpus, c, [&](const EpochLog& l) { seen.push_back(l); });
  const auto b = train<double>(corpus, corpus, c);
  CHECK_FALSE(a.diverged);
  REQUIRE(a.log.size() == 4);
  CHECK(seen.size() == 4);
  CHECK(a.log[0].phase == 1);
  CHECK(a.log[3].phase == 2);
  CHECK(a.log[2].mean.style_nll < a.log[0].mean.style_nll);
  CHECK(a.model.params.out_w == b.model.params.out_w);
  CHECK(a.model.params.enc_w == b.model.params.enc_w);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(format_epoch_log(a.log[i]) == format_epoch_log(b.log[i]));

  // resuming at the phase boundary matches the uninterrupted run
  TrainConfig pre = c;
  pre.epochs_full = 0;
  const auto p = train<double>(corpus, corpus, pre);
  const auto resumed = train_from<double>(p.model, corpus, corpus, c, c.epochs_pretrain);
  CHECK(resumed.model.params.out_w == a.model.params.out_w);

  ExemplarIndex index(corpus);
  RetrievalOptions ro;
  ro.seed = c.seed;
  ro.max_distance = c.max_distance;
  const auto triples = build_triples(corpus, index, ro, 0);
  const double acc = teacher_forced_accuracy(a.model, triples, true);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_CASE("style loss falls over twenty pretraining epochs on fifty pairs") {
  auto spec = SyntheticSpec::restaurant();
  spec.pairs = 50;
  const auto corpus = generate_synthetic(spec);
  TrainConfig c;
  c.embed = 8;
  c.hidden = 16;
  c.epochs_pretrain = 20;
  c.epochs_full = 0;
  c.learning_rate = 0.01;
  const auto r = train<double>(corpus, corpus, c);
  REQUIRE(r.log.size() == 20);
  // mean over consecutive five-epoch windows decreases
  double prev = INFINITY;
  for (int w = 0; w < 4; ++w) {
    double s = 0;
    for (int e = 0; e < 5; ++e) s += r.log[static_cast<std::size_t>(5 * w + e)].mean.style_nll;
    CHECK(s < prev);
    prev = s;
  }
  CHECK(r.log.back().mean.style_nll < r.log.front().mean.style_nll);
}

TEST_CASE("training reports divergence instead of returning garbage") {
  auto spec = SyntheticSpec::restaurant();
  spec.pairs = 20;
  const auto corpus = generate_synthetic(spec);
  TrainConfig c;
  c.embed = 4;
  c.hidden = 4;
  c.epochs_pretrain = 1;
  c.epochs_full = 0;
  c.init_scale = 1e300;
  const auto r = train<double>(corpus, corpus, c);
  CHECK(r.diverged);
  CHECK_FALSE(r.message.empty());
  CHECK(r.model.params.all_finite());
}

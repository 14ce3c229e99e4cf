// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "softtpl/cli.hpp"
#include "softtpl/dataprep.hpp"
#include "softtpl/kernels.hpp"
#include "softtpl/metrics.hpp"
#include "softtpl/retrieval.hpp"
#include "softtpl/slotfill.hpp"
#include "softtpl/training.hpp"

using namespace softtpl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// shared experiment for the training criteria

constexpr std::uint64_t kSeed = 7;
constexpr std::uint64_t kEvalRetrievalSeed = 99;

TrainConfig experiment_config() {
  TrainConfig c;
  c.seed = kSeed;
  c.max_distance = 2;
  c.epochs_pretrain = 15;
  c.epochs_full = 10;
  return c;
}

struct Experiment {
  std::vector<CorpusPair> corpus;  // training corpus, also the exemplar pool
  std::vector<CorpusPair> held;    // evaluation queries
  ContentLexicon lexicon;
  std::optional<Model<double>> pretrained;
  double pretrain_seconds = 0;
  std::optional<Model<double>> full, no_coverage;
  std::string failure;

  Experiment()
      : corpus(generate_synthetic(SyntheticSpec::restaurant())),
        held(held_out()),
        lexicon(ContentLexicon::from_corpus(corpus)) {}

  static std::vector<CorpusPair> held_out() {
    auto spec = SyntheticSpec::restaurant();
    spec.seed = kSeed + 1;
    spec.pairs = 300;
    auto held = generate_synthetic(spec);
    for (auto& p : held) p.id = "held-" + p.id;
    return held;
  }

  const Model<double>* pretrain() {
    if (pretrained) return &*pretrained;
    auto c = experiment_config();
    c.epochs_full = 0;
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto t0 = Clock::now();
    auto r = train<double>(corpus, corpus, c);
    pretrain_seconds = seconds_since(t0);
    omp_set_num_threads(saved);
    if (r.diverged) {
      failure = "pretraining diverged: " + r.message;
      return nullptr;
    }
    pretrained = std::move(r.model);
    return &*pretrained;
  }

  const Model<double>* finish(double eta) {
    auto& slot = eta > 0 ? full : no_coverage;
    if (slot) return &*slot;
    const auto* base = pretrain();
    if (!base) return nullptr;
    auto c = experiment_config();
    c.eta = eta;
    auto r = train_from<double>(*base, corpus, corpus, c, c.epochs_pretrain);
    if (r.diverged) {
      failure = "full training diverged: " + r.message;
      return nullptr;
    }
    slot = std::move(r.model);
    return &*slot;
  }

  std::vector<TrainingTriple> eval_triples(std::size_t max_distance) const {
    const ExemplarIndex index(corpus);
    return build_triples(held, index, {max_distance, true, kEvalRetrievalSeed}, 0);
  }

  EvalReport score(const std::vector<TrainingTriple>& triples, const std::vector<Tokens>& out) const {
    std::vector<Generation> gens;
    for (std::size_t i = 0; i < triples.size(); ++i) gens.push_back({triples[i].id, out[i]});
    return evaluate(to_eval_instances(triples), gens, lexicon);
  }

  EvalReport model_report(const Model<double>& m, std::size_t max_distance) const {
    const auto t = eval_triples(max_distance);
    const auto cfg = experiment_config();
    return score(t, generate_parallel(m, t, cfg.beam_width, cfg.max_len));
  }

  EvalReport slotfill_report(std::size_t max_distance) const {
    const auto t = eval_triples(max_distance);
    std::vector<Tokens> out;
    for (const auto& tr : t) out.push_back(slot_fill(tr.x, tr.x_e, tr.y_e));
    return score(t, out);
  }
};

Experiment& experiment() {
  static Experiment e;
  return e;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  auto spec = SyntheticSpec::restaurant();
  for (auto& f : spec.fields) f.values.resize(std::min<std::size_t>(f.values.size(), 2));
  spec.patterns.resize(1);
  spec.pairs = 200;
  const auto corpus = generate_synthetic(spec);
  TrainConfig c;
  c.embed = 8;
  c.hidden = 8;
  c.init_scale = 0.3;
  c.seed = kSeed;
  const auto model = init_model<double>(corpus, corpus, c);
  const ExemplarIndex index(corpus);
  auto triples = build_triples(corpus, index, {5, true, kSeed}, 0);
  triples.erase(triples.begin() + 12, triples.end());
  const LossOptions options = LossOptions::full(c);
  double worst = 0;
  std::size_t scalars = 0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto r = gradient_check(model, triples[i], options, 1e-5, 200, i);
    worst = std::max(worst, r.max_rel_error);
    scalars += r.checked;
  }
  const double secs = seconds_since(t0);
  const bool ok = model.vocab.size() <= 50 && worst <= 1e-4 && secs < 120;
  return {ok, "V=" + std::to_string(model.vocab.size()) + " triples=" + std::to_string(triples.size()) +
                  " scalars=" + std::to_string(scalars) + " max_rel_err=" + num(worst) + " (<=1e-4) time=" +
                  num(secs, 3) + "s (<120s)"};
}

Outcome distribution_normalization() {
  auto spec = SyntheticSpec::restaurant();
  spec.pairs = 100;
  const auto corpus = generate_synthetic(spec);
  std::mt19937_64 rng(kSeed);
  double worst_v = 0, worst_x = 0, worst_union = 0;
  int steps = 0;
  for (std::uint64_t s = 0; steps < 1000; ++s) {
    TrainConfig c;
    c.embed = 8;
    c.hidden = 12;
    c.init_scale = 0.5 + static_cast<double>(s % 4);
    c.seed = s;
    const auto m = init_model<double>(corpus, corpus, c);
    const auto& q = corpus[rng() % corpus.size()];
    const auto& ex = corpus[rng() % corpus.size()];
    const auto src = encode_sources(m.params, m.fields, m.vocab, q.record, ex.text);
    auto state = initial_state(m.params, src);
    std::set<std::string> uni(m.vocab.tokens().begin(), m.vocab.tokens().end());
    for (const auto& v : q.record.values()) uni.insert(v);
    for (int t = 0; t < 25 && steps < 1000; ++t, ++steps) {
      const int input = static_cast<int>(rng() % m.vocab.size());
      auto [step, next] = decode_step(m.params, state, input, src);
      worst_v = std::max(worst_v, std::abs(step.p_vocab.sum() - 1.0));
      worst_x = std::max(worst_x, std::abs(step.p_copy.sum() - 1.0));
      double total = 0;
      for (const auto& tok : uni) total += token_probability(step, src, m.vocab, tok);
      worst_union = std::max(worst_union, std::abs(total - 1.0));
      state = next;
    }
  }
  const bool ok = worst_v <= 1e-6 && worst_x <= 1e-6 && worst_union <= 1e-6;
  return {ok, "steps=" + std::to_string(steps) + " max|sum P_V-1|=" + num(worst_v) + " max|sum P_x-1|=" +
                  num(worst_x) + " max|union-1|=" + num(worst_union) + " (<=1e-6)"};
}

Outcome coverage_zero_case() {
  std::mt19937_64 rng(kSeed);
  bool zero_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 6);
    // dyadic mixture of permutation matrices: every column sums to exactly 1
    Mat<double> dists = Mat<double>::Zero(m, m);
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    for (double w : {0.5, 0.25, 0.125, 0.125}) {
      std::shuffle(perm.begin(), perm.end(), rng);
      for (int t = 0; t < m; ++t) dists(t, perm[static_cast<std::size_t>(t)]) += w;
    }
    zero_ok = zero_ok && coverage_penalty<double>(dists, static_cast<std::size_t>(m)) == 0.0;
  }
  double worst = 0;
  auto hand = [&](const Mat<double>& d, std::size_t m, double expect) {
    worst = std::max(worst, std::abs(coverage_penalty<double>(d, m) - expect));
  };
  hand(Mat<double>(0, 4), 4, 4.0);
  Mat<double> a(2, 2);
  a << 0.5, 0.5, 0.5, 0.5;
  hand(a, 2, 0.0);
  Mat<double> b(1, 3);
  b << 0.2, 0.3, 0.5;
  hand(b, 3, 0.8 * 0.8 + 0.7 * 0.7 + 0.5 * 0.5);
  Mat<double> c(3, 2);
  c << 0.9, 0.1, 0.6, 0.4, 0.75, 0.25;
  hand(c, 2, 1.25 * 1.25 + 0.25 * 0.25);
  for (int m = 1; m <= 5; ++m) {
    for (int T = 1; T <= 8; ++T) {
      hand(Mat<double>::Constant(T, m, 1.0 / m), static_cast<std::size_t>(m),
           m * (static_cast<double>(T) / m - 1) * (static_cast<double>(T) / m - 1));
    }
  }
  const bool ok = zero_ok && worst <= 1e-12;
  return {ok, std::string("exact zero on 200 doubly stochastic cases: ") + (zero_ok ? "yes" : "no") +
                  "; max closed-form error=" + num(worst) + " (<=1e-12)"};
}

Outcome slotfill_identity() {
  const auto t0 = Clock::now();
  auto spec = SyntheticSpec::restaurant();
  spec.pairs = 1000;
  const auto corpus = generate_synthetic(spec);
  const auto lexicon = ContentLexicon::from_corpus(corpus);
  const ExemplarIndex index(corpus);
  std::string scores;
  bool ok = true;
  for (std::size_t d : {1u, 2u, 3u, 4u, 5u}) {
    std::size_t skipped = 0;
    const auto triples = build_triples(corpus, index, {d, true, kSeed}, 0, &skipped);
    std::vector<Generation> gens;
    for (const auto& t : triples) gens.push_back({t.id, slot_fill(t.x, t.x_e, t.y_e)});
    const auto r = evaluate(to_eval_instances(triples), gens, lexicon);
    ok = ok && r.m_bleu == 100.0;
    scores += " d" + std::to_string(d) + "=" + num(r.m_bleu, 17) + "(n=" + std::to_string(r.count) + ")";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 10;
  return {ok, "m-BLEU" + scores + " time=" + num(secs, 3) + "s (<10s)"};
}

Outcome style_autoencoding() {
  auto& e = experiment();
  const auto* m = e.pretrain();
  if (!m) return {false, e.failure};
  const ExemplarIndex index(e.corpus);
  const auto triples = build_triples(e.corpus, index, {experiment_config().max_distance, true, kSeed}, 0);
  const double acc = teacher_forced_accuracy(*m, triples, true);
  const bool ok = acc >= 0.95 && e.pretrain_seconds < 900;
  return {ok, "epochs=" + std::to_string(experiment_config().epochs_pretrain) + " accuracy=" + num(acc, 6) +
                  " (>=0.95) time=" + num(e.pretrain_seconds, 4) + "s on one thread (<900s)"};
}

Outcome joint_training_balance() {
  auto& e = experiment();
  const auto* full = e.finish(1.0);
  const auto* plain = e.finish(0.0);
  if (!full || !plain) return {false, e.failure};
  const auto untrained = init_model<double>(e.corpus, e.corpus, experiment_config());
  const auto rf = e.model_report(*full, 2);
  const auto r0 = e.model_report(*plain, 2);
  const auto ru = e.model_report(untrained, 2);
  const auto rs = e.slotfill_report(2);
  const bool ok = rf.incl_new > ru.incl_new && rf.incl_new > rs.incl_new && rf.m_bleu >= 50 &&
                  rf.incl_new >= r0.incl_new;
  return {ok, "incl_new trained=" + num(rf.incl_new, 6) + " untrained=" + num(ru.incl_new, 6) +
                  " slotfill=" + num(rs.incl_new, 6) + " eta0=" + num(r0.incl_new, 6) +
                  "; m-BLEU trained=" + num(rf.m_bleu, 6) + " (>=50)"};
}

Outcome distance_sweep() {
  auto& e = experiment();
  const auto* full = e.finish(1.0);
  if (!full) return {false, e.failure};
  std::vector<double> slot, model;
  for (std::size_t d = 1; d <= 4; ++d) {
    slot.push_back(e.slotfill_report(d).excl_old);
    model.push_back(e.model_report(*full, d).excl_old);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < slot.size(); ++i) monotone = monotone && slot[i] <= slot[i - 1];
  const double slot_drop = slot.front() - slot.back();
  const double model_drop = model.front() - model.back();
  const bool ok = monotone && model_drop < slot_drop;
  std::string detail = "excl_old slotfill";
  for (double v : slot) detail += " " + num(v, 5);
  detail += " | model";
  for (double v : model) detail += " " + num(v, 5);
  detail += " | drop slotfill=" + num(slot_drop, 5) + " model=" + num(model_drop, 5);
  return {ok, detail};
}

Outcome retrieval_oracle() {
  std::mt19937_64 rng(kSeed);
  std::size_t distance_mismatch = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto a = oracle::random_record(rng), b = oracle::random_record(rng);
    distance_mismatch += field_set_distance(a, b) != oracle::oracle_distance(a, b);
  }
  std::size_t queries = 0, candidate_mismatch = 0;
  for (std::size_t n : {1u, 10u, 500u, 10000u}) {
    const auto pool = oracle::random_pool(n, n);
    const ExemplarIndex index(pool);
    for (int k = 0; k < 40; ++k, ++queries) {
      const bool member = k % 2 == 0;
      const auto& q = member ? pool[rng() % n] : CorpusPair{"query", oracle::random_record(rng), {"x"}};
      const std::size_t d = rng() % 5;
      const bool prefer = rng() % 2;
      candidate_mismatch +=
          index.candidates(q.record, q.id, d, prefer) != oracle::oracle_candidates(q.record, q.id, pool, d, prefer);
    }
  }
  const bool ok = distance_mismatch == 0 && candidate_mismatch == 0;
  return {ok, "distance mismatches=" + std::to_string(distance_mismatch) + "/10000; candidate-set mismatches=" +
                  std::to_string(candidate_mismatch) + "/" + std::to_string(queries) + " (pools up to 10000)"};
}

Outcome number_words() {
  std::size_t checked = 0, failed = 0;
  for (int n = 0; n <= 999; ++n) {
    for (int style = 0; style < 2; ++style) {
      for (bool with_and : {false, true}) {
        auto t = oracle::render(n, style, with_and);
        const auto len = t.size();
        t.push_back("points");
        const auto r = words_to_number(t);
        ++checked;
        failed += !(r && r->value == n && r->consumed == len);
      }
    }
  }
  return {failed == 0, "round-trips=" + std::to_string(checked - failed) + "/" + std::to_string(checked)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "softtpl_acceptance";
  fs::remove_all(root);
  const std::vector<std::string> artifacts{"corpus.jsonl",     "triples.jsonl",    "model.ckpt",
                                           "model.ckpt.log.jsonl", "gen.jsonl",   "slot.jsonl",
                                           "report.json",      "report.json.instances.jsonl",
                                           "slot_report.json", "sweep.tsv"};
  std::string error;
  for (const std::string run_name : {"a", "b"}) {
    const auto dir = root / run_name;
    fs::create_directories(dir);
    auto p = [&](const std::string& n) { return (dir / n).string(); };
    std::ofstream(p("cfg.txt")) << "embed = 16\nhidden = 24\nbatch_size = 8\nlr = 0.005\nprecision = f64\n";
    const std::vector<std::vector<std::string>> steps{
        {"gen-synthetic", "--pairs", "200", "--seed", "7", "--out", p("corpus.jsonl")},
        {"retrieve", "--corpus", p("corpus.jsonl"), "--max-distance", "2", "--seed", "7", "--out", p("triples.jsonl")},
        {"train", "--corpus", p("corpus.jsonl"), "--config", p("cfg.txt"), "--epochs-pretrain", "2",
         "--epochs-full", "2", "--max-distance", "2", "--seed", "7", "--out", p("model.ckpt")},
        {"generate", "--model", p("model.ckpt"), "--triples", p("triples.jsonl"), "--corpus", p("corpus.jsonl"),
         "--width", "5", "--max-len", "50", "--seed", "7", "--out", p("gen.jsonl")},
        {"slotfill", "--triples", p("triples.jsonl"), "--corpus", p("corpus.jsonl"), "--out", p("slot.jsonl")},
        {"evaluate", "--triples", p("triples.jsonl"), "--gen", p("gen.jsonl"), "--corpus", p("corpus.jsonl"),
         "--plot", p("sweep.tsv"), "--out", p("report.json")},
        {"evaluate", "--triples", p("triples.jsonl"), "--gen", p("slot.jsonl"), "--corpus", p("corpus.jsonl"),
         "--out", p("slot_report.json")},
    };
    for (const auto& s : steps) {
      std::ostringstream out, err;
      if (run(s, out, err) != 0) error = s[0] + " failed: " + err.str();
    }
  }
  if (!error.empty()) return {false, error};
  std::size_t same = 0;
  std::string differing;
  for (const auto& f : artifacts) {
    const auto a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    if (!a.empty() && a == b) {
      ++same;
    } else {
      differing += " " + f;
    }
  }
  return {same == artifacts.size(), "identical artifacts=" + std::to_string(same) + "/" +
                                        std::to_string(artifacts.size()) +
                                        (differing.empty() ? "" : " differing:" + differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"distribution normalization", distribution_normalization},
      {"coverage zero case and closed forms", coverage_zero_case},
      {"slot-filling m-BLEU identity", slotfill_identity},
      {"style auto-encoding after pretraining", style_autoencoding},
      {"joint-training balance", joint_training_balance},
      {"distance-sweep trend", distance_sweep},
      {"retrieval oracle", retrieval_oracle},
      {"number-word round trip", number_words},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << o.detail
              << " [" << num(seconds_since(t0), 3) << "s]" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size()
            << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}

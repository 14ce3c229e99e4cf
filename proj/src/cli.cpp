#include "softtpl/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <unordered_map>

#include <CLI11.hpp>
#include <json.hpp>

#include "softtpl/dataprep.hpp"
#include "softtpl/error.hpp"
#include "softtpl/kernels.hpp"
#include "softtpl/retrieval.hpp"
#include "softtpl/slotfill.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("cli", what); }

// A module error tied to one input instance.
struct InstanceError : Error {
  InstanceError(const Error& e, std::string id)
      : Error(e.module(), e.what()), instance(std::move(id)) {}
  std::string instance;
};

template <typename F>
auto for_instance(const std::string& id, F&& f) {
  try {
    return f();
  } catch (const InstanceError&) {
    throw;
  } catch (const Error& e) {
    throw InstanceError(e, id);
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path.string());
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t") == std::string::npos; }

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Manifest {
  explicit Manifest(std::string name) : command(std::move(name)) {}

  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> lexicon_hash;

  void write(const std::filesystem::path& out) const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["seed"] = seed;
    j["version"] = SOFTTPL_VERSION;
    j["lexicon_hash"] = lexicon_hash ? nlohmann::ordered_json(hex64(*lexicon_hash)) : nullptr;
    auto f = open_out(out.string() + ".manifest.json");
    f << j.dump(2) << '\n';
  }
};

struct Flags {
  std::string corpus, pool, triples, config, out, plot, model, gen, sentences, table, rules;
  std::uint64_t seed = 1;
  std::size_t pairs = 2000;
  int width = 5;
  int max_len = 50;
  std::size_t max_distance = 5;
  double lambda = 0.2, eta = 1.0, lr = 0.001;
  int epochs_pretrain = 10, epochs_full = 10;
  std::string precision = "f64";
  std::size_t samples = 10;
};

std::vector<CorpusPair> pool_or_corpus(const Flags& f, const std::vector<CorpusPair>& corpus) {
  return f.pool.empty() ? corpus : load_corpus(f.pool);
}

TrainConfig resolve_config(const Flags& f, const CLI::App& sub) {
  TrainConfig c = f.config.empty() ? TrainConfig{} : TrainConfig::load(f.config);
  auto given = [&](const char* name) { return sub.count(name) > 0; };
  if (given("--seed")) c.seed = f.seed;
  if (given("--lambda")) c.lambda = f.lambda;
  if (given("--eta")) c.eta = f.eta;
  if (given("--lr")) c.learning_rate = f.lr;
  if (given("--epochs-pretrain")) c.epochs_pretrain = f.epochs_pretrain;
  if (given("--epochs-full")) c.epochs_full = f.epochs_full;
  if (given("--max-distance")) c.max_distance = f.max_distance;
  if (given("--width")) c.beam_width = f.width;
  if (given("--max-len")) c.max_len = f.max_len;
  if (given("--precision")) c.precision = f.precision == "f32" ? Precision::f32 : Precision::f64;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

int cmd_gen_synthetic(const Flags& f, std::ostream& out) {
  SyntheticSpec spec = SyntheticSpec::restaurant();
  spec.seed = f.seed;
  spec.pairs = f.pairs;
  const auto corpus = generate_synthetic(spec);
  save_corpus(f.out, corpus);
  Manifest m("gen-synthetic");
  m.config["pairs"] = f.pairs;
  m.config["spec_version"] = spec.version;
  m.outputs["corpus"] = f.out;
  m.seed = f.seed;
  m.write(f.out);
  out << "wrote " << corpus.size() << " pairs to " << f.out << '\n';
  return 0;
}

int cmd_prepare_nba(const Flags& f, std::ostream& out) {
  const auto table = load_score_table(f.table);
  const auto rules = f.rules.empty() ? default_filter_rules() : load_filter_rules(f.rules);
  std::vector<CorpusPair> corpus;
  const auto lines = read_lines(f.sentences);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    char id[32];
    std::snprintf(id, sizeof id, "nba-%06zu", i + 1);
    corpus.push_back(for_instance(id, [&] {
      const Tokens sentence = tokenize(lines[i]);
      const auto scan = find_entities(sentence, table.lexicon());
      return CorpusPair{id, align_records(scan.tokens, table, rules), scan.tokens};
    }));
  }
  save_corpus(f.out, corpus);
  Manifest m("prepare-nba");
  m.inputs["sentences"] = f.sentences;
  m.inputs["table"] = f.table;
  m.inputs["rules"] = f.rules.empty() ? nlohmann::ordered_json("builtin") : nlohmann::ordered_json(f.rules);
  m.outputs["corpus"] = f.out;
  m.seed = f.seed;
  m.write(f.out);
  out << "wrote " << corpus.size() << " pairs to " << f.out << '\n';
  return 0;
}

int cmd_retrieve(const Flags& f, std::ostream& out) {
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const ExemplarIndex index(pool);
  const RetrievalOptions opts{f.max_distance, true, f.seed};
  std::vector<TripleRef> refs;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& q = corpus[i];
    const auto r = for_instance(q.id, [&] { return index.retrieve(q.record, q.id, opts, i); });
    refs.push_back({q.id, pool[r.pool_index].id, r.distance});
  }
  save_triple_refs(f.out, refs);
  Manifest m("retrieve");
  m.config["max_distance"] = f.max_distance;
  m.config["prefer_equal_size"] = true;
  m.inputs["corpus"] = f.corpus;
  m.inputs["pool"] = f.pool.empty() ? f.corpus : f.pool;
  m.outputs["triples"] = f.out;
  m.seed = f.seed;
  m.write(f.out);
  out << "wrote " << refs.size() << " triples to " << f.out << '\n';
  return 0;
}

template <typename Real>
TrainResult<Real> run_training(const std::vector<CorpusPair>& corpus,
                               const std::vector<CorpusPair>& pool, const TrainConfig& c,
                               std::ostream& log) {
  return train<Real>(corpus, pool, c, [&](const EpochLog& e) { log << format_epoch_log(e) << '\n'; });
}

int cmd_train(const Flags& f, const CLI::App& sub, std::ostream& out) {
  const TrainConfig c = resolve_config(f, sub);
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const std::string log_path = f.out + ".log.jsonl";
  auto log = open_out(log_path);
  bool diverged = false;
  std::string message;
  if (c.precision == Precision::f64) {
    auto r = run_training<double>(corpus, pool, c, log);
    save_checkpoint(f.out, r.model);
    diverged = r.diverged;
    message = r.message;
  } else {
    auto r = run_training<float>(corpus, pool, c, log);
    save_checkpoint(f.out, r.model);
    diverged = r.diverged;
    message = r.message;
  }
  Manifest m("train");
  std::istringstream cfg(c.format());
  for (std::string line; std::getline(cfg, line);) {
    const auto eq = line.find(" = ");
    m.config[line.substr(0, eq)] = line.substr(eq + 3);
  }
  m.inputs["corpus"] = f.corpus;
  m.inputs["pool"] = f.pool.empty() ? f.corpus : f.pool;
  m.outputs["checkpoint"] = f.out;
  m.outputs["log"] = log_path;
  m.seed = c.seed;
  m.write(f.out);
  if (diverged) {
    throw Error("training", "diverged (" + message + "); last good parameters saved to " + f.out);
  }
  out << "wrote checkpoint " << f.out << '\n';
  return 0;
}

template <typename Real>
std::vector<Tokens> decode_all(const Flags& f, const std::vector<TrainingTriple>& triples) {
  const auto model = load_checkpoint<Real>(f.model);
  // serial per-instance fallback to name the failing id
  try {
    return generate_parallel(model, triples, f.width, f.max_len);
  } catch (const Error&) {
    std::vector<Tokens> out;
    for (const auto& t : triples) {
      out.push_back(for_instance(t.id, [&] { return beam_search(model, t.x, t.y_e, f.width, f.max_len); }));
    }
    return out;
  }
}

int cmd_generate(const Flags& f, std::ostream& out) {
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const auto triples = resolve_triples(load_triple_refs(f.triples), corpus, pool);
  const auto texts = f.precision == "f32" ? decode_all<float>(f, triples) : decode_all<double>(f, triples);
  std::vector<Generation> gens;
  for (std::size_t i = 0; i < triples.size(); ++i) gens.push_back({triples[i].id, texts[i]});
  save_generations(f.out, gens);
  Manifest m("generate");
  m.config["width"] = f.width;
  m.config["max_len"] = f.max_len;
  m.config["precision"] = f.precision;
  m.inputs["model"] = f.model;
  m.inputs["triples"] = f.triples;
  m.inputs["corpus"] = f.corpus;
  m.inputs["pool"] = f.pool.empty() ? f.corpus : f.pool;
  m.outputs["generations"] = f.out;
  m.seed = f.seed;
  m.write(f.out);
  out << "wrote " << gens.size() << " generations to " << f.out << '\n';
  return 0;
}

int cmd_slotfill(const Flags& f, std::ostream& out) {
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const auto triples = resolve_triples(load_triple_refs(f.triples), corpus, pool);
  std::vector<Generation> gens;
  for (const auto& t : triples) gens.push_back({t.id, slot_fill(t.x, t.x_e, t.y_e)});
  save_generations(f.out, gens);
  Manifest m("slotfill");
  m.inputs["triples"] = f.triples;
  m.inputs["corpus"] = f.corpus;
  m.inputs["pool"] = f.pool.empty() ? f.corpus : f.pool;
  m.outputs["generations"] = f.out;
  m.seed = f.seed;
  m.write(f.out);
  out << "wrote " << gens.size() << " generations to " << f.out << '\n';
  return 0;
}

int cmd_evaluate(const Flags& f, std::ostream& out) {
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const auto triples = resolve_triples(load_triple_refs(f.triples), corpus, pool);
  const auto instances = to_eval_instances(triples);
  const auto gens = load_generations(f.gen);
  std::vector<CorpusPair> all = corpus;
  if (!f.pool.empty()) all.insert(all.end(), pool.begin(), pool.end());
  const auto lexicon = ContentLexicon::from_corpus(all);

  std::vector<InstanceScores> per;
  const EvalReport report = evaluate(instances, gens, lexicon, &per);
  open_out(f.out) << report.to_json() << '\n';
  {
    auto inst = open_out(f.out + ".instances.jsonl");
    for (std::size_t i = 0; i < per.size(); ++i) {
      nlohmann::ordered_json j;
      j["id"] = instances[i].id;
      j["distance"] = instances[i].distance;
      j["incl_new"] = per[i].incl_new;
      j["excl_old"] = per[i].excl_old;
      j["precision"] = per[i].precision;
      j["recall"] = per[i].recall;
      inst << j.dump() << '\n';
    }
  }
  const std::string lexicon_path = f.out + ".lexicon.json";
  open_out(lexicon_path) << lexicon.to_json() << '\n';

  Manifest m("evaluate");
  m.inputs["triples"] = f.triples;
  m.inputs["corpus"] = f.corpus;
  m.inputs["pool"] = f.pool.empty() ? f.corpus : f.pool;
  m.inputs["generations"] = f.gen;
  m.outputs["report"] = f.out;
  m.outputs["instances"] = f.out + ".instances.jsonl";
  m.outputs["lexicon"] = lexicon_path;
  if (!f.plot.empty()) {
    open_out(f.plot) << format_distance_table(evaluate_by_distance(instances, gens, lexicon));
    m.outputs["plot"] = f.plot;
  }
  m.seed = f.seed;
  m.lexicon_hash = lexicon.hash();
  m.write(f.out);
  out << report.to_json() << '\n';
  return 0;
}

int cmd_gradcheck(const Flags& f, const CLI::App& sub, std::ostream& out) {
  TrainConfig c = resolve_config(f, sub);
  if (f.config.empty()) {
    c.embed = 8;
    c.hidden = 8;
  }
  const auto corpus = load_corpus(f.corpus);
  const auto pool = pool_or_corpus(f, corpus);
  const auto model = init_model<double>(corpus, pool, c);
  const ExemplarIndex index(pool);
  const auto triples = build_triples(corpus, index, {c.max_distance, c.prefer_equal_size, c.seed}, 0);
  const LossOptions options = LossOptions::full(c);
  GradCheckReport worst;
  const std::size_t n = std::min(f.samples, triples.size());
  if (n == 0) fail("no triple within the distance bound");
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = for_instance(triples[i].id,
                                [&] { return gradient_check(model, triples[i], options, 1e-5, 200, c.seed + i); });
    worst.checked += r.checked;
    if (r.max_rel_error >= worst.max_rel_error) {
      worst.max_rel_error = r.max_rel_error;
      worst.worst_tensor = r.worst_tensor;
    }
  }
  nlohmann::ordered_json j;
  j["triples"] = n;
  j["checked"] = worst.checked;
  j["max_rel_error"] = worst.max_rel_error;
  j["worst_tensor"] = worst.worst_tensor;
  out << j.dump() << '\n';
  if (!f.out.empty()) {
    open_out(f.out) << j.dump() << '\n';
    Manifest m("gradcheck");
    m.config["embed"] = c.embed;
    m.config["hidden"] = c.hidden;
    m.config["lambda"] = c.lambda;
    m.config["eta"] = c.eta;
    m.inputs["corpus"] = f.corpus;
    m.outputs["report"] = f.out;
    m.seed = c.seed;
    m.write(f.out);
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<TripleRef> load_triple_refs(const std::filesystem::path& path) {
  std::vector<TripleRef> refs;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const auto j = nlohmann::json::parse(lines[i], nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("exemplar_id") ||
        !j.contains("distance") || !j["id"].is_string() || !j["exemplar_id"].is_string() ||
        !j["distance"].is_number_unsigned()) {
      fail(path.string() + " line " + std::to_string(i + 1) + ": malformed triple");
    }
    refs.push_back({j["id"], j["exemplar_id"], j["distance"].get<std::size_t>()});
  }
  return refs;
}

void save_triple_refs(const std::filesystem::path& path, std::span<const TripleRef> refs) {
  auto out = open_out(path);
  for (const auto& r : refs) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["exemplar_id"] = r.exemplar_id;
    j["distance"] = r.distance;
    out << j.dump() << '\n';
  }
}

std::vector<TrainingTriple> resolve_triples(std::span<const TripleRef> refs,
                                            std::span<const CorpusPair> corpus,
                                            std::span<const CorpusPair> pool) {
  std::unordered_map<std::string, std::size_t> qi, pi;
  for (std::size_t i = 0; i < corpus.size(); ++i) qi.emplace(corpus[i].id, i);
  for (std::size_t i = 0; i < pool.size(); ++i) pi.emplace(pool[i].id, i);
  std::vector<TrainingTriple> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    auto q = qi.find(r.id);
    auto p = pi.find(r.exemplar_id);
    if (q == qi.end()) fail("triple " + r.id + ": id not in corpus");
    if (p == pi.end()) fail("triple " + r.id + ": exemplar " + r.exemplar_id + " not in pool");
    out.push_back(make_triple(corpus[q->second], pool[p->second]));
    if (out.back().distance != r.distance) {
      fail("triple " + r.id + ": recorded distance " + std::to_string(r.distance) +
           " disagrees with the records");
    }
  }
  return out;
}

std::vector<EvalInstance> to_eval_instances(std::span<const TrainingTriple> triples) {
  std::vector<EvalInstance> out;
  out.reserve(triples.size());
  for (const auto& t : triples) out.push_back({t.id, t.x, t.x_e, t.y_e, t.distance});
  return out;
}

std::vector<Generation> load_generations(const std::filesystem::path& path) {
  std::vector<Generation> gens;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const auto j = nlohmann::json::parse(lines[i], nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j.contains("text") ||
        !j["id"].is_string() || !j["text"].is_string()) {
      fail(path.string() + " line " + std::to_string(i + 1) + ": malformed generation");
    }
    gens.push_back({j["id"], tokenize(j["text"].get<std::string>())});
  }
  return gens;
}

void save_generations(const std::filesystem::path& path, std::span<const Generation> gens) {
  auto out = open_out(path);
  for (const auto& g : gens) {
    nlohmann::ordered_json j;
    j["id"] = g.id;
    j["text"] = join_tokens(g.tokens);
    out << j.dump() << '\n';
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Exemplar-guided data-to-text toolkit", "softtpl"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", SOFTTPL_VERSION);
  Flags f;

  auto add_out = [&](CLI::App* s, bool required = true) {
    auto* o = s->add_option("--out", f.out, "output path");
    if (required) o->required();
  };
  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", f.seed, "random seed"); };
  auto add_corpus = [&](CLI::App* s) {
    s->add_option("--corpus", f.corpus, "corpus file")->required();
    s->add_option("--pool", f.pool, "exemplar pool (defaults to the corpus)");
  };
  auto add_train_flags = [&](CLI::App* s) {
    s->add_option("--config", f.config, "key = value config file");
    s->add_option("--lambda", f.lambda, "content/style balance");
    s->add_option("--eta", f.eta, "coverage weight");
    s->add_option("--lr", f.lr, "Adam learning rate");
    s->add_option("--epochs-pretrain", f.epochs_pretrain, "pretraining epochs");
    s->add_option("--epochs-full", f.epochs_full, "full training epochs");
    s->add_option("--max-distance", f.max_distance, "retrieval distance bound");
    s->add_option("--width", f.width, "beam width");
    s->add_option("--max-len", f.max_len, "maximum decoding length");
    s->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  };

  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic restaurant corpus");
  add_seed(gen);
  gen->add_option("--pairs", f.pairs, "number of pairs");
  add_out(gen);

  auto* nba = app.add_subcommand("prepare-nba", "align box-score sentences with a score table");
  nba->add_option("--sentences", f.sentences, "one sentence per line")->required();
  nba->add_option("--table", f.table, "score table rows")->required();
  nba->add_option("--rules", f.rules, "filter rules (built-in set when omitted)");
  add_seed(nba);
  add_out(nba);

  auto* ret = app.add_subcommand("retrieve", "pick an exemplar for every corpus pair");
  add_corpus(ret);
  ret->add_option("--max-distance", f.max_distance, "retrieval distance bound");
  add_seed(ret);
  add_out(ret);

  auto* tr = app.add_subcommand("train", "train a model");
  add_corpus(tr);
  add_train_flags(tr);
  add_seed(tr);
  add_out(tr);

  auto* ge = app.add_subcommand("generate", "beam-search decode a triples file");
  ge->add_option("--model", f.model, "checkpoint")->required();
  ge->add_option("--triples", f.triples, "retrieval output")->required();
  add_corpus(ge);
  ge->add_option("--width", f.width, "beam width");
  ge->add_option("--max-len", f.max_len, "maximum decoding length");
  ge->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  add_seed(ge);
  add_out(ge);

  auto* sf = app.add_subcommand("slotfill", "slot-filling baseline over a triples file");
  sf->add_option("--triples", f.triples, "retrieval output")->required();
  add_corpus(sf);
  add_seed(sf);
  add_out(sf);

  auto* ev = app.add_subcommand("evaluate", "score generations");
  ev->add_option("--triples", f.triples, "retrieval output")->required();
  ev->add_option("--gen", f.gen, "generations file")->required();
  add_corpus(ev);
  ev->add_option("--plot", f.plot, "per-distance score table");
  add_seed(ev);
  add_out(ev);

  auto* gc = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  add_corpus(gc);
  add_train_flags(gc);
  gc->add_option("--samples", f.samples, "number of triples to check");
  add_seed(gc);
  add_out(gc, false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << SOFTTPL_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_synthetic(f, out);
    if (*nba) return cmd_prepare_nba(f, out);
    if (*ret) return cmd_retrieve(f, out);
    if (*tr) return cmd_train(f, *tr, out);
    if (*ge) return cmd_generate(f, out);
    if (*sf) return cmd_slotfill(f, out);
    if (*ev) return cmd_evaluate(f, out);
    if (*gc) return cmd_gradcheck(f, *gc, out);
  } catch (const InstanceError& e) {
    err << "error [" << e.module() << "] instance " << e.instance << ": " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    err << "error [" << e.module() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error [io]: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace softtpl

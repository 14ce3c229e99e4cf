#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "softtpl/corpus.hpp"
#include "softtpl/model.hpp"
#include "softtpl/retrieval.hpp"

namespace softtpl {

enum class Precision { f32, f64 };
enum class CoverageMode { both, content, style };

std::string to_string(Precision p);
std::string to_string(CoverageMode m);

struct TrainConfig {
  double lambda = 0.2;
  double eta = 1.0;
  double learning_rate = 0.001;
  int epochs_pretrain = 10;
  int epochs_full = 10;
  int batch_size = 16;
  int beam_width = 5;
  int max_len = 50;
  std::size_t max_distance = 5;
  bool prefer_equal_size = true;
  bool frozen_triples = false;
  std::uint64_t seed = 1;
  Precision precision = Precision::f64;
  int embed = 32;
  int hidden = 64;
  int min_count = 1;
  double prob_floor = 1e-12;
  double init_scale = 0.1;
  CoverageMode coverage = CoverageMode::both;

  // Throws Error("training") on out-of-range values.
  void validate() const;

  // Flat `key = value` lines; `#` starts a comment.
  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
  std::string format() const;
};

struct LossOptions {
  double lambda = 0.2;
  double eta = 1.0;
  double prob_floor = 1e-12;
  CoverageMode coverage = CoverageMode::both;

  static LossOptions pretrain(const TrainConfig& c) { return {0.0, 0.0, c.prob_floor, c.coverage}; }
  static LossOptions full(const TrainConfig& c) { return {c.lambda, c.eta, c.prob_floor, c.coverage}; }
};

struct TrainingTriple {
  std::string id;
  Record x;
  Tokens y_x;
  Record x_e;
  Tokens y_e;
  std::size_t distance;
};

TrainingTriple make_triple(const CorpusPair& pair, const CorpusPair& exemplar);

// Minimization form: total = lambda * content_nll + (1 - lambda) * style_nll
// + eta * coverage.
struct LossBreakdown {
  double content_nll = 0;
  double style_nll = 0;
  double joint = 0;
  double coverage = 0;
  double total = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
};

// Teacher-forced pass over one target, with everything backprop needs.
template <typename Real>
struct SequencePass {
  EncodedSources<Real> sources;
  std::vector<StepCache<Real>> steps;
  Tokens targets;              // target tokens, EOS appended
  std::vector<int> target_ids; // vocabulary id per target, -1 outside the vocabulary
  std::vector<Real> probs;     // unfloored mixture probability per step
  std::vector<bool> clamped;   // probability fell below the floor
  Real nll = 0;

  // P_x at every step, one row per step.
  Mat<Real> copy_dists() const;
};

template <typename Real>
SequencePass<Real> sequence_forward(const Model<Real>& model, const Record& record,
                                    const Tokens& exemplar, const Tokens& target,
                                    double prob_floor = 1e-12);

template <typename Real>
struct NllResult {
  Real nll;
  Mat<Real> copy_dists;  // steps x record size
};

template <typename Real>
NllResult<Real> sequence_nll(const Model<Real>& model, const Record& record,
                             const Tokens& exemplar, const Tokens& target,
                             double prob_floor = 1e-12);

// sum_j (sum_t P_x[t, j] - 1)^2
template <typename Real>
Real coverage_penalty(const Mat<Real>& copy_dists, std::size_t record_size);

// Accumulates d(nll_weight * nll + cov_weight * coverage)/d(params) into grad.
template <typename Real>
void sequence_backward(const ModelParams<Real>& params, const SequencePass<Real>& pass,
                       Real nll_weight, Real cov_weight, ModelParams<Real>& grad);

template <typename Real>
LossBreakdown total_loss(const Model<Real>& model, const TrainingTriple& triple,
                         const LossOptions& options);

template <typename Real>
struct GradientResult {
  LossBreakdown loss;
  ModelParams<Real> grad;
};

// Throws Error("training") naming the first tensor with a non-finite entry.
template <typename Real>
GradientResult<Real> gradients(const Model<Real>& model, const TrainingTriple& triple,
                               const LossOptions& options);

// Throws Error("training") naming the first tensor with a non-finite entry.
template <typename Real>
void require_finite(const ModelParams<Real>& grad);

// Same as `gradients` but accumulates into an existing buffer.
template <typename Real>
LossBreakdown accumulate_gradients(const Model<Real>& model, const TrainingTriple& triple,
                                   const LossOptions& options, ModelParams<Real>& grad);

template <typename Real>
class Adam {
 public:
  Adam(const ModelDims& dims, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);

  void step(ModelParams<Real>& params, const ModelParams<Real>& grad);
  long steps_taken() const noexcept { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  ModelParams<Real> m_, v_;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_tensor;
};

// Central differences on a subsample of scalars (at least `min_samples`,
// every tensor represented, half drawn from entries with non-zero analytic
// gradient). Relative error is |a - n| / max(|a|, |n|, 1e-8). The reference
// loss runs in extended precision so that gradients far smaller than the loss
// are still resolved at epsilon = 1e-5.
using ReferenceLoss = std::function<long double(const ModelParams<long double>&)>;

GradCheckReport check_gradient(const ReferenceLoss& loss, const ModelParams<long double>& at,
                               const ModelParams<double>& analytic, double epsilon,
                               std::size_t min_samples = 200, std::uint64_t seed = 0);

GradCheckReport gradient_check(const Model<double>& model, const TrainingTriple& triple,
                               const LossOptions& options, double epsilon,
                               std::size_t min_samples = 200, std::uint64_t seed = 0);

struct EpochLog {
  int epoch = 0;
  int phase = 1;
  LossBreakdown mean;
  std::size_t triples = 0;
  std::size_t skipped = 0;  // pairs with no exemplar in range
};

std::string format_epoch_log(const EpochLog& log);

template <typename Real>
struct TrainResult {
  Model<Real> model;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string message;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Builds the vocabulary and field table from corpus and pool, then runs the
// pretraining phase (lambda = 0, eta = 0) followed by the full phase.
template <typename Real>
TrainResult<Real> train(std::span<const CorpusPair> corpus, std::span<const CorpusPair> pool,
                        const TrainConfig& config, const EpochCallback& on_epoch = {});

// Continues from an existing model at epoch `first_epoch` (0-based over both
// phases). Optimizer state restarts, so resuming at a phase boundary matches
// an uninterrupted run.
template <typename Real>
TrainResult<Real> train_from(Model<Real> model, std::span<const CorpusPair> corpus,
                             std::span<const CorpusPair> pool, const TrainConfig& config,
                             int first_epoch, const EpochCallback& on_epoch = {});

template <typename Real>
Model<Real> init_model(std::span<const CorpusPair> corpus, std::span<const CorpusPair> pool,
                       const TrainConfig& config);

// Triples for one epoch: each corpus pair gets an exemplar from the pool.
std::vector<TrainingTriple> build_triples(std::span<const CorpusPair> corpus,
                                          const ExemplarIndex& index,
                                          const RetrievalOptions& options, std::uint64_t stream_base,
                                          std::size_t* skipped = nullptr);

// Fraction of teacher-forced steps (EOS included) whose argmax output token
// equals the target.
template <typename Real>
double teacher_forced_accuracy(const Model<Real>& model, std::span<const TrainingTriple> triples,
                               bool style_pass);

}  // namespace softtpl

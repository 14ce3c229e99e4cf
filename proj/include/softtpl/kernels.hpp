#pragma once

#include <span>

#include "softtpl/model.hpp"
#include "softtpl/training.hpp"

namespace softtpl {

// Batch-level kernels. The OpenMP versions evaluate examples concurrently and
// combine their results with a pairwise tree whose shape depends only on the
// batch size, so output is bit-identical for any thread count. The serial
// versions accumulate left to right and are kept as the reference.

template <typename Real>
struct BatchGradient {
  ModelParams<Real> grad;  // mean over the batch
  LossBreakdown loss;      // mean over the batch
};

template <typename Real>
BatchGradient<Real> batch_gradient_serial(const Model<Real>& model,
                                          std::span<const TrainingTriple> batch,
                                          const LossOptions& options);

template <typename Real>
BatchGradient<Real> batch_gradient_parallel(const Model<Real>& model,
                                            std::span<const TrainingTriple> batch,
                                            const LossOptions& options);

// Beam-search decoding of many triples; output order follows input order.
template <typename Real>
std::vector<Tokens> generate_serial(const Model<Real>& model, std::span<const TrainingTriple> triples,
                                    int width, int max_len);

template <typename Real>
std::vector<Tokens> generate_parallel(const Model<Real>& model,
                                      std::span<const TrainingTriple> triples, int width,
                                      int max_len);

}  // namespace softtpl

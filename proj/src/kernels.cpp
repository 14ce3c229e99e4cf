#include "softtpl/kernels.hpp"

#include <exception>


#include "softtpl/error.hpp"

namespace softtpl {

namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("training", what); }

// Pairwise reduction in place: after the loop slot 0 holds the combination of
// all slots. The tree depends only on the slot count.
template <typename T, typename Combine>
void tree_reduce(std::vector<T>& slots, Combine combine) {
  const std::size_t n = slots.size();
  for (std::size_t stride = 1; stride < n; stride *= 2) {
    const std::size_t pairs = (n + 2 * stride - 1) / (2 * stride);
#pragma omp parallel for schedule(static)
    for (std::size_t p = 0; p < pairs; ++p) {
      const std::size_t i = p * 2 * stride;
      if (i + stride < n) combine(slots[i], slots[i + stride]);
    }
  }
}

template <typename Real>
void finish(BatchGradient<Real>& out, std::size_t count) {
  const double inv = 1.0 / static_cast<double>(count);
  out.grad.scale(static_cast<Real>(inv));
  out.loss = out.loss.scaled(inv);
  require_finite(out.grad);
}

}  // namespace

template <typename Real>
BatchGradient<Real> batch_gradient_serial(const Model<Real>& model,
                                          std::span<const TrainingTriple> batch,
                                          const LossOptions& options) {
  if (batch.empty()) fail("empty batch");
  BatchGradient<Real> out{ModelParams<Real>::zeros(model.params.dims), {}};
  for (const auto& triple : batch) {
    out.loss += accumulate_gradients(model, triple, options, out.grad);
  }
  finish(out, batch.size());
  return out;
}

template <typename Real>
BatchGradient<Real> batch_gradient_parallel(const Model<Real>& model,
                                            std::span<const TrainingTriple> batch,
                                            const LossOptions& options) {
  if (batch.empty()) fail("empty batch");
  const std::size_t n = batch.size();
  std::vector<BatchGradient<Real>> slots(n);
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      slots[i].grad = ModelParams<Real>::zeros(model.params.dims);
      slots[i].loss = accumulate_gradients(model, batch[i], options, slots[i].grad);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  tree_reduce(slots, [](BatchGradient<Real>& a, const BatchGradient<Real>& b) {
    a.grad += b.grad;
    a.loss += b.loss;
  });
  BatchGradient<Real> out = std::move(slots[0]);
  finish(out, n);
  return out;
}

template <typename Real>
std::vector<Tokens> generate_serial(const Model<Real>& model, std::span<const TrainingTriple> triples,
                                    int width, int max_len) {
  std::vector<Tokens> out;
  out.reserve(triples.size());
  for (const auto& t : triples) out.push_back(beam_search(model, t.x, t.y_e, width, max_len));
  return out;
}

template <typename Real>
std::vector<Tokens> generate_parallel(const Model<Real>& model,
                                      std::span<const TrainingTriple> triples, int width,
                                      int max_len) {
  const std::size_t n = triples.size();
  std::vector<Tokens> out(n);
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      out[i] = beam_search(model, triples[i].x, triples[i].y_e, width, max_len);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }
  return out;
}

#define SOFTTPL_INSTANTIATE(Real)                                                                  \
  template BatchGradient<Real> batch_gradient_serial(const Model<Real>&,                          \
                                                     std::span<const TrainingTriple>,             \
                                                     const LossOptions&);                          \
  template BatchGradient<Real> batch_gradient_parallel(const Model<Real>&,                        \
                                                       std::span<const TrainingTriple>,           \
                                                       const LossOptions&);                        \
  template std::vector<Tokens> generate_serial(const Model<Real>&,                                 \
                                               std::span<const TrainingTriple>, int, int);         \
  template std::vector<Tokens> generate_parallel(const Model<Real>&,                               \
                                                 std::span<const TrainingTriple>, int, int);

SOFTTPL_INSTANTIATE(float)
SOFTTPL_INSTANTIATE(double)

}  // namespace softtpl

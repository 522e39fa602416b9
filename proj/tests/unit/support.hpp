#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "bswitch/nn.hpp"
#include "bswitch/tensor.hpp"

namespace bswitch::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values) v = u(rng);
  return t;
}

/// Builds a scalar from the differentiated variable.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Contracts a tensor-valued output to a scalar with fixed random weights so
/// every output coordinate contributes to the gradient.
inline Var weighted_sum(Tape& tape, Var out, std::uint64_t seed) {
  return sum(mul(out, tape.constant(random_tensor(out.shape(), seed))));
}

inline double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  return f(tape, tape.constant(x)).value().item();
}

inline Tensor analytic_gradient(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  const Var v = tape.variable(x);
  const Var out = f(tape, v);
  return backward(tape, out).at(v);
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t probes = 0;
};

/// Central differences with step h on `probes` randomly chosen coordinates
/// (all coordinates when probes >= size).
inline GradCheck check_gradient(const ScalarFn& f, const Tensor& x, std::size_t probes, std::uint64_t seed,
                                double h = 1e-5) {
  const Tensor g = analytic_gradient(f, x);
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (probes < idx.size()) {
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(probes);
  }
  GradCheck result;
  for (std::size_t i : idx) {
    Tensor plus = x, minus = x;
    plus.values[i] += h;
    minus.values[i] -= h;
    const double numeric = (evaluate(f, plus) - evaluate(f, minus)) / (2.0 * h);
    result.max_relative_error = std::max(result.max_relative_error, relative_error(g.values[i], numeric));
    ++result.probes;
  }
  return result;
}

/// Tiny conv model on 6x6x1 inputs for fast model-level tests.
inline Sequential small_cnn(std::uint64_t seed) {
  return Sequential({6, 6, 1},
                    {layer::Conv{3, 3}, layer::MaxPool{2}, layer::Flatten{}, layer::Dense{5},
                     layer::Dropout{0.5}, layer::Dense{10, Activation::kNone}},
                    seed);
}

/// Labelled dataset of random 6x6x1 images whose class is decided by a
/// fixed linear rule, so small models can learn it.
inline Dataset toy_dataset(std::size_t n, std::uint64_t seed) {
  Dataset ds;
  ds.images = random_tensor({n, 6, 6, 1}, seed, 0.0, 1.0);
  const Tensor w = random_tensor({36, 10}, seed + 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> score(10, 0.0);
    for (std::size_t p = 0; p < 36; ++p) {
      for (std::size_t k = 0; k < 10; ++k) score[k] += ds.images.values[i * 36 + p] * w.values[p * 10 + k];
    }
    ds.labels.push_back(argmax(score));
  }
  ds.name = "toy";
  return ds;
}

}  // namespace bswitch::testing

#ifndef MTNER_TESTS_TEST_UTIL_H_
#define MTNER_TESTS_TEST_UTIL_H_

#include <cmath>
#include <vector>

#include "mtner/random.h"
#include "mtner/tensor.h"

namespace mtner::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

// Weighted sum with fixed pseudo-random weights, so every output element
// influences the scalar differently.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return sum(mul(y, w));
}

}  // namespace mtner::testing

#endif  // MTNER_TESTS_TEST_UTIL_H_

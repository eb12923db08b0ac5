#ifndef MTNER_GRAD_CHECK_H_
#define MTNER_GRAD_CHECK_H_

#include <cstdint>
#include <string>
#include <vector>

namespace mtner {

struct GradGroupResult {
  std::string group;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

struct GradSuiteResult {
  std::vector<GradGroupResult> groups;
  double max_rel_error = 0.0;
};

// Finite-difference check of the full training loss (entity NLL plus focal
// relation loss) against backprop, for sampled coordinates of every
// parameter, grouped by component. Toy model with every flag on.
GradSuiteResult run_gradient_suite(std::uint64_t seed, int d_h = 8, double eps = 1e-6,
                                   int coords_per_tensor = 3);

// cln, relation_mlp, conv, type_mlp, attention, pointer, embedding, other
std::string parameter_group(const std::string& param_name);

}  // namespace mtner

#endif  // MTNER_GRAD_CHECK_H_

#include <cmath>

#include "mtner/train_eval.h"

namespace mtner {

Tensor focal_relation_loss(const Tensor& logits, const RelationGrid& gold, double alpha,
                           double tau, Reduction reduction) {
  const std::size_t cells = static_cast<std::size_t>(gold.n()) * gold.n();
  if (logits.size() != cells * kRelationClasses) {
    throw DimensionError("focal_relation_loss: logits " + shape_to_string(logits.shape()) +
                         " do not match a " + std::to_string(gold.n()) + "x" +
                         std::to_string(gold.n()) + " grid");
  }
  constexpr std::size_t c = kRelationClasses;
  auto z = logits.data();
  std::vector<double> probs(cells * c);
  std::vector<double> dloss_dp(cells);
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double* zi = z.data() + i * c;
    const double mx = std::max({zi[0], zi[1], zi[2]});
    double denom = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      probs[i * c + k] = std::exp(zi[k] - mx);
      denom += probs[i * c + k];
    }
    for (std::size_t k = 0; k < c; ++k) probs[i * c + k] /= denom;
    const int g = static_cast<int>(gold.cells()[i]);
    const double p = probs[i * c + g];
    const double q = 1.0 - p;
    const double logp = std::log(p + kLogEpsilon);
    const double weight = tau == 0.0 ? 1.0 : std::pow(q, tau);
    total += -alpha * weight * logp;
    // d/dp of -alpha q^tau log(p + eps)
    double dweight = 0.0;
    if (tau != 0.0) {
      if (q > 0.0) {
        dweight = -tau * std::pow(q, tau - 1.0);
      } else if (tau == 1.0) {
        dweight = -1.0;
      }
    }
    dloss_dp[i] = -alpha * (dweight * logp + weight / (p + kLogEpsilon));
  }
  const double norm = reduction == Reduction::kMean ? 1.0 / static_cast<double>(cells) : 1.0;
  Tensor out = make_output({}, {total * norm}, "focal_relation_loss");
  if (needs_record({logits})) {
    std::vector<int> labels(cells);
    for (std::size_t i = 0; i < cells; ++i) labels[i] = static_cast<int>(gold.cells()[i]);
    record_op(out, {logits}, [logits, out, probs = std::move(probs),
                              dloss_dp = std::move(dloss_dp), labels = std::move(labels),
                              norm]() mutable {
      const double g = out.grad()[0] * norm;
      auto gz = logits.grad_buffer();
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const double p = probs[i * c + labels[i]];
        for (std::size_t k = 0; k < c; ++k) {
          const double dp_dz = p * ((static_cast<int>(k) == labels[i] ? 1.0 : 0.0) - probs[i * c + k]);
          gz[i * c + k] += g * dloss_dp[i] * dp_dz;
        }
      }
    });
  }
  return out;
}

Tensor entity_nll(const Tensor& step_probs, const PointerTarget& gold) {
  if (step_probs.rank() != 2 || step_probs.dim(0) != gold.indices.size()) {
    throw DimensionError("entity_nll: " + std::to_string(gold.indices.size()) +
                         " gold steps but distributions of shape " +
                         shape_to_string(step_probs.shape()));
  }
  const std::size_t steps = step_probs.dim(0), slots = step_probs.dim(1);
  auto p = step_probs.data();
  double total = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const int g = gold.indices[t];
    if (g < 0 || static_cast<std::size_t>(g) >= slots) {
      throw DimensionError("entity_nll: gold index " + std::to_string(g) + " outside " +
                           std::to_string(slots) + " slots");
    }
    total -= std::log(p[t * slots + g] + kLogEpsilon);
  }
  const double inv = 1.0 / static_cast<double>(steps);
  Tensor out = make_output({}, {total * inv}, "entity_nll");
  if (needs_record({step_probs})) {
    record_op(out, {step_probs}, [step_probs, out, gold, inv, slots]() mutable {
      const double g = out.grad()[0] * inv;
      auto p = step_probs.data();
      auto gp = step_probs.grad_buffer();
      for (std::size_t t = 0; t < gold.indices.size(); ++t) {
        const std::size_t i = t * slots + gold.indices[t];
        gp[i] -= g / (p[i] + kLogEpsilon);
      }
    });
  }
  return out;
}

Tensor combined_loss(const Tensor& entity_loss, const Tensor& relation_loss, double w) {
  if (!relation_loss.defined()) return entity_loss;
  return add(entity_loss, scale(relation_loss, w));
}

}  // namespace mtner

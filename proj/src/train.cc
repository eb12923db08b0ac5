#include <cmath>
#include <sstream>

#include "mtner/random.h"
#include "mtner/train_eval.h"

namespace mtner {

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError(why); };
  if (!(w >= 0.0)) fail("w must be non-negative");
  if (!(alpha > 0.0)) fail("alpha must be positive");
  if (!(tau >= 0.0)) fail("tau must be non-negative");
  if (!(lr >= 0.0)) fail("lr must be non-negative");
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_size < 1) fail("batch_size must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (clip_norm < 0.0) fail("clip_norm must be non-negative");
  if (dev_fraction < 0.0 || dev_fraction >= 1.0) fail("dev_fraction must lie in [0, 1)");
}

namespace {

struct PreparedSentence {
  std::vector<int> ids;
  PointerTarget target;
  RelationGrid grid;
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParameterStore& params) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::kAdamW) {
      for (const auto& e : params.entries()) {
        first_.emplace_back(e.tensor.size(), 0.0);
        second_.emplace_back(e.tensor.size(), 0.0);
      }
    }
  }

  // Gradients are expected to already hold the batch mean.
  void step(ParameterStore& params) {
    ++steps_;
    const double bias1 = 1.0 - std::pow(cfg_.beta1, steps_);
    const double bias2 = 1.0 - std::pow(cfg_.beta2, steps_);
    const auto& entries = params.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor t = entries[p].tensor;
      if (!t.has_grad()) continue;
      auto value = t.mutable_data();
      auto grad = t.grad();
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < value.size(); ++i) {
          value[i] -= cfg_.lr * (grad[i] + cfg_.weight_decay * value[i]);
        }
        continue;
      }
      auto& m = first_[p];
      auto& v = second_[p];
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        const double update = (m[i] / bias1) / (std::sqrt(v[i] / bias2) + cfg_.adam_eps);
        value[i] -= cfg_.lr * (update + cfg_.weight_decay * value[i]);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  long steps_ = 0;
  std::vector<std::vector<double>> first_, second_;
};

void scale_and_clip(ParameterStore& params, double batch, double clip_norm) {
  double norm_sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) norm_sq += (g / batch) * (g / batch);
  }
  const double norm = std::sqrt(norm_sq);
  double factor = 1.0 / batch;
  if (clip_norm > 0.0 && norm > clip_norm) factor *= clip_norm / norm;
  for (const auto& e : params.entries()) {
    Tensor t = e.tensor;
    if (!t.has_grad()) continue;
    for (double& g : t.grad_buffer()) g *= factor;
  }
}

}  // namespace

TrainResult train(Seq2SeqNer& model, const Vocab& vocab, const std::vector<Sentence>& train_set,
                  const std::vector<Sentence>& dev_set, const TrainConfig& config) {
  config.validate();
  const ModelConfig& mc = model.config();
  std::vector<PreparedSentence> data;
  data.reserve(train_set.size());
  for (const auto& s : train_set) {
    data.push_back({vocab.encode(s.tokens), linearize_targets(s, mc.n_types), build_grid(s)});
  }

  TrainResult result;
  if (config.epochs == 0 || data.empty()) return result;

  Optimizer optimizer(config, model.params());
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Graph& graph = Graph::current();
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::vector<double>> best_snapshot;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      model.params().zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const PreparedSentence& ex = data[idx];
        graph.clear();
        try {
          ForwardResult fr = model.forward_teacher_forced(ex.ids, ex.target);
          Tensor l_entity = entity_nll(fr.step_probs, ex.target);
          Tensor l_relation;
          if (mc.use_rp) {
            l_relation = focal_relation_loss(fr.relation_logits, ex.grid, config.alpha,
                                             config.tau, config.relation_reduction);
          }
          Tensor loss = combined_loss(l_entity, l_relation, config.w);
          if (!std::isfinite(loss.item())) throw NumericError("non-finite loss");
          backward(loss);
          record.loss += loss.item();
          record.entity_loss += l_entity.item();
          if (l_relation.defined()) record.relation_loss += l_relation.item();
        } catch (const NumericError& e) {
          graph.clear();
          std::ostringstream msg;
          msg << "training diverged at epoch " << epoch << ", sentence " << idx << ": "
              << e.what();
          throw TrainingError(msg.str());
        }
      }
      graph.clear();
      scale_and_clip(model.params(), static_cast<double>(end - start), config.clip_norm);
      optimizer.step(model.params());
    }
    const double n = static_cast<double>(data.size());
    record.loss /= n;
    record.entity_loss /= n;
    record.relation_loss /= n;
    if (!dev_set.empty()) {
      record.dev = evaluate(model, vocab, dev_set);
      if (result.best_epoch < 0 || record.dev->f1 > result.best_dev_f1) {
        result.best_epoch = epoch;
        result.best_dev_f1 = record.dev->f1;
        best_snapshot = model.params().snapshot();
      }
    }
    result.epochs.push_back(std::move(record));
  }
  model.params().zero_grad();
  if (!best_snapshot.empty()) model.params().restore(best_snapshot);
  return result;
}

}  // namespace mtner

#ifndef MTNER_TRAIN_EVAL_H_
#define MTNER_TRAIN_EVAL_H_

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtner/corpus.h"
#include "mtner/model.h"
#include "mtner/relation_grid.h"
#include "mtner/tensor.h"
#include "mtner/type_base.h"

namespace mtner {

inline constexpr double kLogEpsilon = 1e-12;

// ---------------------------------------------------------------------------
// Losses

enum class Reduction { kMean, kSum };

// -alpha (1 - p)^tau log(p + 1e-12) per cell, p the softmax probability of
// the gold label; reduced over all N*N cells.
Tensor focal_relation_loss(const Tensor& logits, const RelationGrid& gold, double alpha,
                           double tau, Reduction reduction = Reduction::kMean);

// Mean over steps of -log(P_t[gold_t] + 1e-12).
Tensor entity_nll(const Tensor& step_probs, const PointerTarget& gold);

// l_entity + w * l_relation; an undefined relation loss contributes nothing.
Tensor combined_loss(const Tensor& entity_loss, const Tensor& relation_loss, double w);

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double boundary_precision = 0.0;
  double boundary_recall = 0.0;
  double boundary_f1 = 0.0;
  std::optional<double> relation_accuracy;
  long predicted = 0;
  long gold = 0;
  long matched = 0;
  long boundary_matched = 0;
  long discarded_runs = 0;
};

double f1_score(double precision, double recall);

// Multiset matching per sentence: a predicted mention matches a gold one when
// fragments and type agree; boundary matching ignores the type.
Metrics score_mentions(const std::vector<std::vector<EntityMention>>& gold,
                       const std::vector<std::vector<EntityMention>>& predicted);

// Reassigns a different random type to each predicted mention that exactly
// matches a gold mention, with probability `rate`. Fragments are untouched.
std::vector<std::vector<EntityMention>> corrupt_types(
    const std::vector<std::vector<EntityMention>>& gold,
    const std::vector<std::vector<EntityMention>>& predicted, double rate, int n_types,
    std::uint64_t seed);

int default_max_decode_length(int n_tokens);

struct Predictions {
  std::vector<std::vector<EntityMention>> mentions;
  long discarded_runs = 0;
};

Predictions predict(const Seq2SeqNer& model, const Vocab& vocab,
                    const std::vector<Sentence>& corpus);

Metrics evaluate(const Seq2SeqNer& model, const Vocab& vocab,
                 const std::vector<Sentence>& corpus);

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { kSgd, kAdamW };

struct TrainConfig {
  double w = 0.3;
  double alpha = 5.0;
  double tau = 1.0;
  double lr = 1e-3;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  double dev_fraction = 0.1;
  Reduction relation_reduction = Reduction::kMean;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double entity_loss = 0.0;
  double relation_loss = 0.0;
  std::optional<Metrics> dev;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;  // -1: no dev evaluation happened
  double best_dev_f1 = 0.0;
};

// Trains in place and leaves the model at its best dev-F1 epoch (or the last
// epoch when dev is empty).
TrainResult train(Seq2SeqNer& model, const Vocab& vocab, const std::vector<Sentence>& train_set,
                  const std::vector<Sentence>& dev_set, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentData {
  std::vector<Sentence> train;
  std::vector<Sentence> dev;
  Vocab vocab;
  TypeLexicon lexicon;
};

// Splits by the shuffle sub-seed, builds the vocabulary from all sentences.
ExperimentData prepare_data(const std::vector<Sentence>& corpus, const TypeLexicon& lexicon,
                            double dev_fraction, std::uint64_t seed);

struct RunResult {
  std::string run_id;
  ModelConfig model_config;
  TrainConfig train_config;
  TrainResult training;
  Metrics final_dev;
};

// Model init seed is derive_seed(train.seed, "init").
RunResult run_experiment(const ExperimentData& data, ModelConfig model_config,
                         const TrainConfig& train_config, const std::string& run_id);

struct AblationRow {
  std::string name;
  bool use_rp = false, use_tra = false, use_eta = false;
  std::vector<RunResult> runs;  // one per seed
  double median_dev_f1 = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // Baseline, +RP&TRA, +RP&ETA, +RP&TRA&ETA
};

AblationTable run_ablation(const ExperimentData& data, const ModelConfig& base_model,
                           const TrainConfig& base_train, const std::vector<std::uint64_t>& seeds,
                           int jobs = 1);

std::vector<double> default_w_grid();

std::vector<RunResult> sweep_w(const ExperimentData& data, const ModelConfig& model_config,
                               const TrainConfig& base_train, const std::vector<double>& w_values,
                               int jobs = 1);

// Runs `count` independent tasks on up to `jobs` threads.
void run_parallel(int count, int jobs, const std::function<void(int)>& task);

double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Reporting

nlohmann::json metrics_to_json(const Metrics& m);
nlohmann::json run_to_json(const RunResult& run);
nlohmann::json ablation_to_json(const AblationTable& table);
std::string ablation_to_text(const AblationTable& table);
nlohmann::json sweep_to_json(const std::vector<RunResult>& runs);
std::string sweep_to_text(const std::vector<RunResult>& runs);

}  // namespace mtner

#endif  // MTNER_TRAIN_EVAL_H_

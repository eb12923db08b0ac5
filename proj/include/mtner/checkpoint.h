#ifndef MTNER_CHECKPOINT_H_
#define MTNER_CHECKPOINT_H_

#include <filesystem>
#include <memory>
#include <stdexcept>

#include "mtner/config.h"
#include "mtner/corpus.h"
#include "mtner/model.h"
#include "mtner/type_base.h"

namespace mtner {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything needed to rebuild a trained model without the training corpus.
struct Checkpoint {
  ExperimentConfig config;
  Vocab vocab;
  TypeLexicon lexicon;
  std::unique_ptr<Seq2SeqNer> model;
};

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const Vocab& vocab, const TypeLexicon& lexicon, const Seq2SeqNer& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mtner

#endif  // MTNER_CHECKPOINT_H_

#ifndef MTNER_TYPE_BASE_H_
#define MTNER_TYPE_BASE_H_

#include <filesystem>
#include <string>
#include <vector>

#include "mtner/corpus.h"
#include "mtner/params.h"
#include "mtner/tensor.h"

namespace mtner {

struct LexiconEntry {
  std::vector<std::string> phrase;
  double frequency = 1.0;
};

// External entity base: for every type, the known entity phrases with their
// corpus frequencies.
struct TypeLexicon {
  std::vector<std::string> type_names;
  std::vector<std::vector<LexiconEntry>> entries;  // indexed by type id
};

// TSV lines: type_name <TAB> space separated phrase <TAB> frequency.
TypeLexicon load_lexicon(const std::filesystem::path& path,
                         const std::vector<std::string>& type_names);
TypeLexicon parse_lexicon(const std::string& text,
                          const std::vector<std::string>& type_names);
void save_lexicon(const std::filesystem::path& path, const TypeLexicon& lexicon);
std::string lexicon_to_text(const TypeLexicon& lexicon);

// Lexicon built from corpus mentions; frequency = number of mentions with
// that exact phrase and type. Types that never occur get a single entry
// consisting of their name.
TypeLexicon lexicon_from_corpus(const std::vector<Sentence>& corpus,
                                const std::vector<std::string>& type_names);

enum class PhraseWeighting { kFrequency, kUniform };

// Per-type mixture weights over vocabulary rows: theta_i = f_i / sum f, and a
// phrase contributes theta_i / |phrase| to each of its tokens.
RowMixture type_mixture(const TypeLexicon& lexicon, const Vocab& vocab,
                        PhraseWeighting weighting = PhraseWeighting::kFrequency);

// E_T = mixture applied to the token embedding table; |T| x d.
Tensor compute_type_embeddings(const RowMixture& mixture, const Tensor& token_embed);

enum class Activation { kTanh, kRelu, kIdentity };

Tensor activate(const Tensor& x, Activation act);

struct TypeKeyValues {
  Tensor keys;    // |T| x d_h
  Tensor values;  // |T| x d_h
  std::vector<Tensor> key_heads;    // N_h tensors of |T| x d_h/N_h
  std::vector<Tensor> value_heads;
};

// Shared down/up bottleneck MLP followed by per-site key and value maps.
// A site is one attention layer that consumes type slots.
class TypeProjector {
 public:
  TypeProjector() = default;
  TypeProjector(ParameterStore& store, int d_h, int d_down, int d_up, int n_heads,
                int n_sites, Activation act);

  int sites() const { return static_cast<int>(key_maps.size()); }
  Tensor bottleneck(const Tensor& type_embeddings) const;
  TypeKeyValues project(const Tensor& bottleneck_out, int site) const;
  TypeKeyValues project_from_embeddings(const Tensor& type_embeddings, int site) const;

  // Exposed for tests that pin the maps to known values.
  Tensor down_weight, down_bias, up_weight, up_bias;
  std::vector<Tensor> key_maps, key_biases, value_maps, value_biases;

 private:
  int n_heads_ = 1;
  Activation act_ = Activation::kTanh;
};

std::vector<Tensor> split_heads(const Tensor& x, int n_heads);

}  // namespace mtner

#endif  // MTNER_TYPE_BASE_H_

#ifndef MTNER_CORPUS_H_
#define MTNER_CORPUS_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mtner {

// Raised for malformed corpus files and invariant violations.
class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inclusive token range.
struct Fragment {
  int start = 0;
  int end = 0;
  auto operator<=>(const Fragment&) const = default;
};

// An entity as an ordered list of fragments. Two or more fragments make it
// discontinuous; mentions may overlap or nest freely.
struct EntityMention {
  std::vector<Fragment> fragments;
  int type_id = 0;

  // Token positions covered, in ascending order.
  std::vector<int> tokens() const;
  int first_token() const { return fragments.front().start; }
  int last_token() const { return fragments.back().end; }

  auto operator<=>(const EntityMention&) const = default;
};

struct Sentence {
  std::vector<std::string> tokens;
  std::vector<EntityMention> mentions;
};

// Throws CorpusError when the sentence violates its invariants.
void validate(const Sentence& sentence);
void validate(const EntityMention& mention, std::size_t n_tokens);

// Builds a mention from a sorted list of distinct token positions, merging
// consecutive positions into fragments.
EntityMention mention_from_tokens(const std::vector<int>& positions, int type_id);

std::vector<Sentence> load_corpus(const std::filesystem::path& path);
std::vector<Sentence> parse_corpus(const std::string& text);
void save_corpus(const std::filesystem::path& path,
                 const std::vector<Sentence>& corpus);
std::string sentence_to_json_line(const Sentence& sentence);

// One type name per line; line number is the type id.
std::vector<std::string> load_type_names(const std::filesystem::path& path);
void save_type_names(const std::filesystem::path& path,
                     const std::vector<std::string>& names);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;

  Vocab();
  // Adds the token if absent; returns its id.
  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnknown when absent
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

// Ids follow first occurrence order.
Vocab build_vocab(const std::vector<Sentence>& corpus);

// Pointer ids over [0, N) source positions, [N, N+T) type slots and N+T for
// end of sequence.
struct PointerTarget {
  std::vector<int> indices;
};

PointerTarget linearize_targets(const Sentence& sentence, int n_types);

struct DelinearizeResult {
  std::vector<EntityMention> mentions;
  int discarded_runs = 0;
};

// Never throws. Malformed runs are skipped and counted.
DelinearizeResult delinearize(const std::vector<int>& indices, int n_tokens,
                              int n_types);

// ---------------------------------------------------------------------------
// Synthetic data

// Each sentence is assigned one category: flat (only disjoint contiguous
// mentions), nested (contains a mention inside another), discontinuous
// (contains a multi-fragment mention) or, with the leftover probability,
// no entities at all.
struct SynthConfig {
  int filler_vocab = 60;
  int entity_words_per_type = 12;
  int n_types = 4;
  int min_length = 6;
  int max_length = 14;
  int max_groups = 2;
  double flat_rate = 0.4;
  double nested_rate = 0.25;
  double discontinuous_rate = 0.25;
  // Probability that a group is introduced by its type's trigger token.
  double trigger_rate = 0.8;
  // Probability that a filler slot reuses an entity word.
  double ambiguity_rate = 0.05;
};

enum class SentenceCategory { kNone, kFlat, kNested, kDiscontinuous };

SentenceCategory classify(const Sentence& sentence);

std::vector<Sentence> generate_synthetic(const SynthConfig& config, int n_sentences,
                                         std::uint64_t seed);

std::vector<std::string> synthetic_type_names(int n_types);

// Deterministic shuffle-and-split; returns (train, dev).
std::pair<std::vector<Sentence>, std::vector<Sentence>> split_corpus(
    const std::vector<Sentence>& corpus, double dev_fraction, std::uint64_t seed);

}  // namespace mtner

#endif  // MTNER_CORPUS_H_

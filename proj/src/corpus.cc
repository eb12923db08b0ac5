#include "mtner/corpus.h"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mtner/random.h"

namespace mtner {

using nlohmann::json;

std::vector<int> EntityMention::tokens() const {
  std::vector<int> out;
  for (const auto& f : fragments)
    for (int t = f.start; t <= f.end; ++t) out.push_back(t);
  return out;
}

void validate(const EntityMention& mention, std::size_t n_tokens) {
  if (mention.fragments.empty()) throw CorpusError("mention has no fragments");
  if (mention.type_id < 0) throw CorpusError("negative type id");
  int previous_end = -1;
  for (const auto& f : mention.fragments) {
    if (f.start < 0 || f.start > f.end) {
      throw CorpusError("fragment [" + std::to_string(f.start) + "," +
                        std::to_string(f.end) + "] is inverted or negative");
    }
    if (static_cast<std::size_t>(f.end) >= n_tokens) {
      throw CorpusError("fragment end " + std::to_string(f.end) +
                        " out of range for " + std::to_string(n_tokens) + " tokens");
    }
    if (f.start <= previous_end) {
      throw CorpusError("fragments overlap or are not sorted by start");
    }
    previous_end = f.end;
  }
}

void validate(const Sentence& sentence) {
  if (sentence.tokens.empty()) throw CorpusError("sentence has no tokens");
  for (const auto& m : sentence.mentions) validate(m, sentence.tokens.size());
}

EntityMention mention_from_tokens(const std::vector<int>& positions, int type_id) {
  EntityMention m;
  m.type_id = type_id;
  for (int p : positions) {
    if (!m.fragments.empty() && m.fragments.back().end + 1 == p) {
      m.fragments.back().end = p;
    } else {
      m.fragments.push_back({p, p});
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// I/O

namespace {

Sentence sentence_from_json(const json& j) {
  Sentence s;
  s.tokens = j.at("tokens").get<std::vector<std::string>>();
  if (j.contains("mentions")) {
    for (const auto& jm : j.at("mentions")) {
      EntityMention m;
      m.type_id = jm.at("type").get<int>();
      for (const auto& jf : jm.at("frags")) {
        if (!jf.is_array() || jf.size() != 2) {
          throw CorpusError("fragment must be a [start, end] pair");
        }
        m.fragments.push_back({jf[0].get<int>(), jf[1].get<int>()});
      }
      s.mentions.push_back(std::move(m));
    }
  }
  return s;
}

std::vector<Sentence> parse_lines(std::istream& in) {
  std::vector<Sentence> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Sentence s = sentence_from_json(json::parse(line));
      validate(s);
      corpus.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw CorpusError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

}  // namespace

std::vector<Sentence> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file " + path.string());
  return parse_lines(in);
}

std::vector<Sentence> parse_corpus(const std::string& text) {
  std::istringstream in(text);
  return parse_lines(in);
}

std::string sentence_to_json_line(const Sentence& sentence) {
  json mentions = json::array();
  for (const auto& m : sentence.mentions) {
    json frags = json::array();
    for (const auto& f : m.fragments) frags.push_back({f.start, f.end});
    mentions.push_back({{"frags", frags}, {"type", m.type_id}});
  }
  json j = {{"tokens", sentence.tokens}, {"mentions", mentions}};
  return j.dump();
}

void save_corpus(const std::filesystem::path& path,
                 const std::vector<Sentence>& corpus) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write corpus file " + path.string());
  for (const auto& s : corpus) out << sentence_to_json_line(s) << '\n';
  if (!out) throw CorpusError("write failed for " + path.string());
}

std::vector<std::string> load_type_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open type names file " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    names.push_back(line);
  }
  if (names.empty()) throw CorpusError("type names file " + path.string() + " is empty");
  return names;
}

void save_type_names(const std::filesystem::path& path,
                     const std::vector<std::string>& names) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write type names file " + path.string());
  for (const auto& n : names) out << n << '\n';
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocab::Vocab() {
  add("<pad>");
  add("<unk>");
}

int Vocab::add(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknown : it->second;
}

const std::string& Vocab::token(int id) const { return tokens_.at(id); }

bool Vocab::contains(const std::string& token) const { return ids_.count(token) > 0; }

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Vocab build_vocab(const std::vector<Sentence>& corpus) {
  if (corpus.empty()) throw CorpusError("cannot build a vocabulary from an empty corpus");
  Vocab vocab;
  for (const auto& s : corpus)
    for (const auto& t : s.tokens) vocab.add(t);
  return vocab;
}

// ---------------------------------------------------------------------------
// Pointer targets

PointerTarget linearize_targets(const Sentence& sentence, int n_types) {
  const int n = static_cast<int>(sentence.tokens.size());
  std::vector<EntityMention> ordered = sentence.mentions;
  std::sort(ordered.begin(), ordered.end(),
            [](const EntityMention& a, const EntityMention& b) {
              auto key = [](const EntityMention& m) {
                return std::tuple(m.first_token(), m.last_token(), m.type_id);
              };
              if (key(a) != key(b)) return key(a) < key(b);
              return a.fragments < b.fragments;
            });
  PointerTarget target;
  for (const auto& m : ordered) {
    if (m.type_id >= n_types) {
      throw CorpusError("mention type " + std::to_string(m.type_id) +
                        " exceeds type count " + std::to_string(n_types));
    }
    for (int t : m.tokens()) target.indices.push_back(t);
    target.indices.push_back(n + m.type_id);
  }
  target.indices.push_back(n + n_types);
  return target;
}

DelinearizeResult delinearize(const std::vector<int>& indices, int n_tokens,
                              int n_types) {
  DelinearizeResult result;
  const int eos = n_tokens + n_types;
  std::vector<int> run;
  bool run_valid = true;
  auto reset = [&] {
    run.clear();
    run_valid = true;
  };
  for (int idx : indices) {
    if (idx == eos) break;
    if (idx < 0 || idx > eos) {
      // Garbage id poisons the pending run.
      ++result.discarded_runs;
      reset();
      continue;
    }
    if (idx < n_tokens) {
      if (!run.empty() && idx <= run.back()) run_valid = false;
      run.push_back(idx);
      continue;
    }
    // Type slot closes the run.
    if (run.empty() || !run_valid) {
      ++result.discarded_runs;
    } else {
      result.mentions.push_back(mention_from_tokens(run, idx - n_tokens));
    }
    reset();
  }
  if (!run.empty()) ++result.discarded_runs;
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

SentenceCategory classify(const Sentence& sentence) {
  if (sentence.mentions.empty()) return SentenceCategory::kNone;
  for (const auto& m : sentence.mentions) {
    if (m.fragments.size() >= 2) return SentenceCategory::kDiscontinuous;
  }
  const auto& ms = sentence.mentions;
  for (std::size_t a = 0; a < ms.size(); ++a) {
    const auto ta = ms[a].tokens();
    for (std::size_t b = a + 1; b < ms.size(); ++b) {
      for (int t : ms[b].tokens()) {
        if (std::binary_search(ta.begin(), ta.end(), t)) return SentenceCategory::kNested;
      }
    }
  }
  return SentenceCategory::kFlat;
}

std::vector<std::string> synthetic_type_names(int n_types) {
  std::vector<std::string> names;
  for (int t = 0; t < n_types; ++t) names.push_back("TYPE" + std::to_string(t));
  return names;
}

namespace {

// A group is a contiguous token block together with mentions relative to
// the block start.
struct Group {
  std::vector<std::string> tokens;
  std::vector<EntityMention> mentions;
};

constexpr int kFlatMin = 1;
constexpr int kNestedMin = 2;
constexpr int kDiscontinuousMin = 4;

class SynthBuilder {
 public:
  SynthBuilder(const SynthConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  std::string entity_word(int type) {
    return "e" + std::to_string(type) + "_" +
           std::to_string(rng_.below(cfg_.entity_words_per_type));
  }

  std::string filler_word() {
    if (rng_.bernoulli(cfg_.ambiguity_rate)) {
      return entity_word(static_cast<int>(rng_.below(cfg_.n_types)));
    }
    return "w" + std::to_string(rng_.below(cfg_.filler_vocab));
  }

  void maybe_trigger(Group& g, int type, int& budget) {
    if (budget > 0 && rng_.bernoulli(cfg_.trigger_rate)) {
      g.tokens.push_back("trig" + std::to_string(type));
      --budget;
    }
  }

  void append_phrase(Group& g, int type, int length, std::vector<int>& positions) {
    for (int i = 0; i < length; ++i) {
      positions.push_back(static_cast<int>(g.tokens.size()));
      g.tokens.push_back(entity_word(type));
    }
  }

  // Each builder assumes budget >= its minimum length.
  Group flat(int budget) {
    Group g;
    const int type = static_cast<int>(rng_.below(cfg_.n_types));
    const int length = rng_.between(1, std::min(3, budget));
    budget -= length;
    maybe_trigger(g, type, budget);
    std::vector<int> pos;
    append_phrase(g, type, length, pos);
    g.mentions.push_back(mention_from_tokens(pos, type));
    return g;
  }

  Group nested(int budget) {
    Group g;
    const int outer = static_cast<int>(rng_.below(cfg_.n_types));
    int inner = outer;
    if (cfg_.n_types > 1) {
      inner = static_cast<int>(rng_.below(cfg_.n_types - 1));
      if (inner >= outer) ++inner;
    }
    const int head = rng_.between(1, std::min(2, budget - 1));
    const int tail = rng_.between(1, std::min(2, budget - head));
    budget -= head + tail;
    maybe_trigger(g, outer, budget);
    std::vector<int> outer_pos, inner_pos;
    append_phrase(g, outer, head, outer_pos);
    append_phrase(g, inner, tail, inner_pos);
    outer_pos.insert(outer_pos.end(), inner_pos.begin(), inner_pos.end());
    g.mentions.push_back(mention_from_tokens(outer_pos, outer));
    g.mentions.push_back(mention_from_tokens(inner_pos, inner));
    return g;
  }

  // head tail1 "and" tail2: (head tail1) is contiguous, (head .. tail2) is
  // discontinuous.
  Group discontinuous(int budget) {
    Group g;
    const int type = static_cast<int>(rng_.below(cfg_.n_types));
    const int head = rng_.between(1, std::min(2, budget - 3));
    budget -= head + 3;
    maybe_trigger(g, type, budget);
    std::vector<int> head_pos, tail1, tail2;
    append_phrase(g, type, head, head_pos);
    append_phrase(g, type, 1, tail1);
    g.tokens.push_back("and");
    append_phrase(g, type, 1, tail2);
    std::vector<int> first = head_pos, second = head_pos;
    first.insert(first.end(), tail1.begin(), tail1.end());
    second.insert(second.end(), tail2.begin(), tail2.end());
    g.mentions.push_back(mention_from_tokens(first, type));
    g.mentions.push_back(mention_from_tokens(second, type));
    return g;
  }

  Sentence sentence(SentenceCategory category) {
    int min_needed = 1;
    if (category == SentenceCategory::kNested) min_needed = kNestedMin;
    if (category == SentenceCategory::kDiscontinuous) min_needed = kDiscontinuousMin;
    const int length = std::max(rng_.between(cfg_.min_length, cfg_.max_length), min_needed);

    std::vector<Group> groups;
    int used = 0;
    if (category != SentenceCategory::kNone) {
      const int n_groups = rng_.between(1, cfg_.max_groups);
      for (int gi = 0; gi < n_groups; ++gi) {
        // One separator token between consecutive groups.
        const int budget = length - used - (gi > 0 ? 1 : 0);
        Group g;
        if (gi == 0 && category == SentenceCategory::kNested) {
          g = nested(budget);
        } else if (gi == 0 && category == SentenceCategory::kDiscontinuous) {
          g = discontinuous(budget);
        } else if (budget >= kFlatMin) {
          g = flat(budget);
        } else {
          break;
        }
        used += static_cast<int>(g.tokens.size()) + (gi > 0 ? 1 : 0);
        groups.push_back(std::move(g));
      }
    }

    // Distribute filler: interior gaps get one token each, the rest is
    // scattered over all gaps.
    const std::size_t n_gaps = groups.size() + 1;
    std::vector<int> gap(n_gaps, 0);
    int filler = length;
    for (const auto& g : groups) filler -= static_cast<int>(g.tokens.size());
    for (std::size_t i = 1; i + 1 < n_gaps; ++i) {
      gap[i] = 1;
      --filler;
    }
    for (int i = 0; i < filler; ++i) ++gap[rng_.below(n_gaps)];

    Sentence s;
    for (std::size_t i = 0; i < n_gaps; ++i) {
      for (int k = 0; k < gap[i]; ++k) s.tokens.push_back(filler_word());
      if (i < groups.size()) {
        const int offset = static_cast<int>(s.tokens.size());
        for (auto m : groups[i].mentions) {
          for (auto& f : m.fragments) {
            f.start += offset;
            f.end += offset;
          }
          s.mentions.push_back(std::move(m));
        }
        s.tokens.insert(s.tokens.end(), groups[i].tokens.begin(), groups[i].tokens.end());
      }
    }
    return s;
  }

 private:
  const SynthConfig& cfg_;
  Rng& rng_;
};

void check_config(const SynthConfig& c) {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("infeasible synthetic config: " + why);
  };
  if (c.n_types < 1) fail("need at least one type");
  if (c.filler_vocab < 1 || c.entity_words_per_type < 1) fail("empty word pools");
  if (c.min_length < 1 || c.min_length > c.max_length) fail("bad length range");
  if (c.max_groups < 1) fail("max_groups must be positive");
  for (double r : {c.flat_rate, c.nested_rate, c.discontinuous_rate, c.trigger_rate,
                   c.ambiguity_rate}) {
    if (r < 0.0 || r > 1.0) fail("rates must lie in [0, 1]");
  }
  if (c.flat_rate + c.nested_rate + c.discontinuous_rate > 1.0 + 1e-12) {
    fail("category rates sum above 1");
  }
  if (c.nested_rate > 0.0 && c.max_length < kNestedMin) {
    fail("nested entities need sentences of at least " + std::to_string(kNestedMin) +
         " tokens");
  }
  if (c.discontinuous_rate > 0.0 && c.max_length < kDiscontinuousMin) {
    fail("discontinuous entities need sentences of at least " +
         std::to_string(kDiscontinuousMin) + " tokens");
  }
}

}  // namespace

std::vector<Sentence> generate_synthetic(const SynthConfig& config, int n_sentences,
                                         std::uint64_t seed) {
  check_config(config);
  if (n_sentences < 0) throw std::invalid_argument("negative sentence count");
  Rng rng(seed);
  SynthBuilder builder(config, rng);
  std::vector<Sentence> corpus;
  corpus.reserve(n_sentences);
  std::vector<int> seen(4, 0);
  for (int i = 0; i < n_sentences; ++i) {
    const double u = rng.uniform();
    SentenceCategory cat = SentenceCategory::kNone;
    if (u < config.flat_rate) {
      cat = SentenceCategory::kFlat;
    } else if (u < config.flat_rate + config.nested_rate) {
      cat = SentenceCategory::kNested;
    } else if (u < config.flat_rate + config.nested_rate + config.discontinuous_rate) {
      cat = SentenceCategory::kDiscontinuous;
    }
    corpus.push_back(builder.sentence(cat));
    ++seen[static_cast<int>(cat)];
  }
  // Small corpora may miss a requested category. Overwrite from the end,
  // only taking slots whose category is unrequested or has spares.
  std::vector<SentenceCategory> assigned;
  for (const auto& sentence : corpus) assigned.push_back(classify(sentence));
  const std::pair<double, SentenceCategory> requested[] = {
      {config.flat_rate, SentenceCategory::kFlat},
      {config.nested_rate, SentenceCategory::kNested},
      {config.discontinuous_rate, SentenceCategory::kDiscontinuous}};
  for (const auto& [rate, cat] : requested) {
    if (rate <= 0.0 || seen[static_cast<int>(cat)] > 0) continue;
    for (int slot = n_sentences - 1; slot >= 0; --slot) {
      const int old_cat = static_cast<int>(assigned[slot]);
      if (assigned[slot] != SentenceCategory::kNone && seen[old_cat] <= 1) continue;
      corpus[slot] = builder.sentence(cat);
      --seen[old_cat];
      ++seen[static_cast<int>(cat)];
      assigned[slot] = cat;
      break;
    }
  }
  return corpus;
}

std::pair<std::vector<Sentence>, std::vector<Sentence>> split_corpus(
    const std::vector<Sentence>& corpus, double dev_fraction, std::uint64_t seed) {
  if (dev_fraction < 0.0 || dev_fraction >= 1.0) {
    throw std::invalid_argument("dev fraction must lie in [0, 1)");
  }
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_dev = static_cast<std::size_t>(dev_fraction * corpus.size() + 0.5);
  std::pair<std::vector<Sentence>, std::vector<Sentence>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_dev ? out.second : out.first).push_back(corpus[order[i]]);
  }
  return out;
}

}  // namespace mtner

#include <algorithm>
#include <map>

#include "mtner/random.h"

#include "mtner/train_eval.h"

namespace mtner {

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

namespace {

template <typename Key>
long multiset_overlap(const std::vector<Key>& a, const std::vector<Key>& b) {
  std::map<Key, long> counts;
  for (const auto& k : a) ++counts[k];
  long matched = 0;
  for (const auto& k : b) {
    auto it = counts.find(k);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++matched;
    }
  }
  return matched;
}

}  // namespace

Metrics score_mentions(const std::vector<std::vector<EntityMention>>& gold,
                       const std::vector<std::vector<EntityMention>>& predicted) {
  if (gold.size() != predicted.size()) {
    throw std::invalid_argument("score_mentions: " + std::to_string(gold.size()) +
                                " gold sentences but " + std::to_string(predicted.size()) +
                                " predicted");
  }
  Metrics m;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    m.gold += static_cast<long>(gold[s].size());
    m.predicted += static_cast<long>(predicted[s].size());
    m.matched += multiset_overlap(gold[s], predicted[s]);
    std::vector<std::vector<Fragment>> gb, pb;
    for (const auto& g : gold[s]) gb.push_back(g.fragments);
    for (const auto& p : predicted[s]) pb.push_back(p.fragments);
    m.boundary_matched += multiset_overlap(gb, pb);
  }
  auto ratio = [](long num, long den) {
    return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
  };
  m.precision = ratio(m.matched, m.predicted);
  m.recall = ratio(m.matched, m.gold);
  m.f1 = f1_score(m.precision, m.recall);
  m.boundary_precision = ratio(m.boundary_matched, m.predicted);
  m.boundary_recall = ratio(m.boundary_matched, m.gold);
  m.boundary_f1 = f1_score(m.boundary_precision, m.boundary_recall);
  return m;
}

std::vector<std::vector<EntityMention>> corrupt_types(
    const std::vector<std::vector<EntityMention>>& gold,
    const std::vector<std::vector<EntityMention>>& predicted, double rate, int n_types,
    std::uint64_t seed) {
  if (gold.size() != predicted.size()) {
    throw std::invalid_argument("corrupt_types: sentence counts differ");
  }
  if (n_types < 2) throw std::invalid_argument("corrupt_types: needs at least two types");
  Rng rng(seed);
  auto out = predicted;
  for (std::size_t s = 0; s < out.size(); ++s) {
    std::vector<EntityMention> unmatched = gold[s];
    for (auto& p : out[s]) {
      auto it = std::find(unmatched.begin(), unmatched.end(), p);
      if (it == unmatched.end()) continue;
      unmatched.erase(it);
      if (!rng.bernoulli(rate)) continue;
      const int shift = rng.between(1, n_types - 1);
      p.type_id = (p.type_id + shift) % n_types;
    }
  }
  return out;
}

int default_max_decode_length(int n_tokens) { return 4 * n_tokens + 2; }

Predictions predict(const Seq2SeqNer& model, const Vocab& vocab,
                    const std::vector<Sentence>& corpus) {
  Predictions out;
  const int n_types = model.config().n_types;
  for (const auto& s : corpus) {
    const std::vector<int> ids = vocab.encode(s.tokens);
    const int n = static_cast<int>(ids.size());
    PointerTarget generated = model.greedy_generate(ids, default_max_decode_length(n));
    DelinearizeResult parsed = delinearize(generated.indices, n, n_types);
    out.discarded_runs += parsed.discarded_runs;
    out.mentions.push_back(std::move(parsed.mentions));
  }
  return out;
}

Metrics evaluate(const Seq2SeqNer& model, const Vocab& vocab,
                 const std::vector<Sentence>& corpus) {
  Predictions pred = predict(model, vocab, corpus);
  std::vector<std::vector<EntityMention>> gold;
  for (const auto& s : corpus) gold.push_back(s.mentions);
  Metrics m = score_mentions(gold, pred.mentions);
  m.discarded_runs = pred.discarded_runs;

  if (model.config().use_rp && !corpus.empty()) {
    NoGradGuard no_grad;
    long correct = 0, total = 0;
    for (const auto& s : corpus) {
      const std::vector<int> ids = vocab.encode(s.tokens);
      Tensor logits = model.relation_logits(model.encode(ids));
      RelationGrid grid = build_grid(s);
      auto z = logits.data();
      for (std::size_t i = 0; i < grid.cells().size(); ++i) {
        const double* zi = z.data() + i * kRelationClasses;
        int best = 0;
        for (int k = 1; k < kRelationClasses; ++k)
          if (zi[k] > zi[best]) best = k;
        correct += best == static_cast<int>(grid.cells()[i]);
        ++total;
      }
    }
    m.relation_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  }
  return m;
}

}  // namespace mtner

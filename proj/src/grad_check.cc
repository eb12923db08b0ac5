#include "mtner/grad_check.h"

#include <algorithm>
#include <map>

#include "mtner/corpus.h"
#include "mtner/random.h"
#include "mtner/relation_grid.h"
#include "mtner/train_eval.h"
#include "mtner/type_base.h"

namespace mtner {

std::string parameter_group(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  auto has = [&](const char* p) { return name.find(p) != std::string::npos; };
  if (starts("cln.")) return "cln";
  if (starts("rel.conv")) return "conv";
  if (starts("rel.")) return "relation_mlp";
  if (starts("type.")) return "type_mlp";
  if (starts("pointer.")) return "pointer";
  if (starts("embed.")) return "embedding";
  if (has(".attn.") || has(".self.") || has(".cross.") || has(".relk.") || has(".relv.")) {
    return "attention";
  }
  return "other";
}

GradSuiteResult run_gradient_suite(std::uint64_t seed, int d_h, double eps,
                                   int coords_per_tensor) {
  // "t0 x t1 t2 y t3" with a nested pair and a discontinuous mention
  Sentence s;
  s.tokens = {"a", "b", "c", "d", "e", "f"};
  s.mentions = {mention_from_tokens({0, 1, 2}, 0), mention_from_tokens({1, 2}, 1),
                mention_from_tokens({3, 5}, 1)};
  const std::vector<std::string> type_names = {"A", "B"};
  Vocab vocab = build_vocab({s});
  TypeLexicon lexicon;
  lexicon.type_names = type_names;
  lexicon.entries = {{{{"a", "b", "c"}, 2.0}, {{"e"}, 1.0}},
                     {{{"b", "c"}, 1.0}, {{"d", "f"}, 3.0}}};

  ModelConfig mc;
  mc.d_h = d_h;
  mc.n_heads = 2;
  mc.d_ff = 2 * d_h;
  mc.d_rel = std::max(2, d_h / 2);
  mc.d_down = std::max(2, d_h / 2);
  mc.d_up = d_h;
  mc.n_types = 2;
  mc.vocab_size = static_cast<int>(vocab.size());
  Seq2SeqNer model(mc, type_mixture(lexicon, vocab), derive_seed(seed, "init"));

  const std::vector<int> ids = vocab.encode(s.tokens);
  const PointerTarget target = linearize_targets(s, mc.n_types);
  const RelationGrid grid = build_grid(s);
  auto loss_fn = [&]() {
    ForwardResult fr = model.forward_teacher_forced(ids, target);
    return combined_loss(entity_nll(fr.step_probs, target),
                         focal_relation_loss(fr.relation_logits, grid, 5.0, 1.0), 0.3);
  };

  Rng rng(derive_seed(seed, "coords"));
  std::map<std::string, std::vector<Coordinate>> by_group;
  for (const auto& e : model.params().entries()) {
    const std::size_t n = e.tensor.size();
    for (int c = 0; c < coords_per_tensor && c < static_cast<int>(n); ++c) {
      by_group[parameter_group(e.name)].push_back({e.tensor, rng.below(n)});
    }
  }
  GradSuiteResult result;
  for (const auto& [group, coords] : by_group) {
    const double err = finite_diff_check(loss_fn, coords, eps);
    result.groups.push_back({group, coords.size(), err});
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

}  // namespace mtner

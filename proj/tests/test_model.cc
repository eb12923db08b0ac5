#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "mtner/checkpoint.h"
#include "mtner/grad_check.h"
#include "mtner/model.h"
#include "mtner/relation_grid.h"
#include "mtner/train_eval.h"
#include "test_util.h"

using namespace mtner;
using mtner::testing::max_abs_diff;
using mtner::testing::random_tensor;

namespace {

struct Fixture {
  Vocab vocab;
  TypeLexicon lexicon;
  Fixture() {
    for (const char* t : {"a", "b", "c", "d", "e", "f", "g"}) vocab.add(t);
    lexicon = parse_lexicon("X\ta b\t2\nX\tc\t1\nY\td\t4\nY\te f\t1\n", {"X", "Y"});
  }
  ModelConfig config(bool rp = true, bool tra = true, bool eta = true) const {
    ModelConfig c;
    c.d_h = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.d_rel = 4;
    c.d_down = 4;
    c.d_up = 8;
    c.n_types = 2;
    c.n_layers_enc = 2;
    c.n_layers_dec = 2;
    c.vocab_size = static_cast<int>(vocab.size());
    c.use_rp = rp;
    c.use_tra = tra;
    c.use_eta = eta;
    return c;
  }
  Seq2SeqNer model(const ModelConfig& c, std::uint64_t seed = 7) const {
    return Seq2SeqNer(c, type_mixture(lexicon, vocab), seed);
  }
};

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

// Softmax(q k^T / sqrt(d)) v for one head, written out directly.
std::vector<double> plain_attention_row(const std::vector<double>& q,
                                        const std::vector<std::vector<double>>& keys,
                                        const std::vector<std::vector<double>>& values) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  std::vector<double> s(keys.size());
  double mx = -1e300;
  for (std::size_t j = 0; j < keys.size(); ++j) {
    s[j] = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) s[j] += q[k] * keys[j][k];
    s[j] *= scale;
    mx = std::max(mx, s[j]);
  }
  double z = 0.0;
  for (double& x : s) z += (x = std::exp(x - mx));
  std::vector<double> out(values[0].size(), 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j)
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += s[j] / z * values[j][k];
  return out;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> r(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) r[i][j] = t.at(i, j);
  return r;
}

}  // namespace

TEST_CASE("config validation") {
  Fixture f;
  ModelConfig c = f.config(false, true, false);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = f.config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = f.config();
  c.conv_kernel = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(f.config().validate());
}

TEST_CASE("cln examples") {
  Fixture f;
  ModelConfig c = f.config();
  c.d_h = 2;
  c.n_heads = 1;
  c.d_up = 2;
  c.d_down = 2;
  Seq2SeqNer m = f.model(c);
  fill(m.params().get("cln.alpha.w"), 0.0);
  fill(m.params().get("cln.alpha.b"), 1.0);
  fill(m.params().get("cln.beta.w"), 0.0);
  fill(m.params().get("cln.beta.b"), 0.0);
  Tensor r = m.cln(Tensor::from({2}, {5.0, -3.0}), Tensor::from({2}, {1.0, -1.0}));
  CHECK(std::abs(r.at(0) - 1.0 / (1.0 + c.eps_ln)) < 1e-15);
  CHECK(std::abs(r.at(1) + 1.0 / (1.0 + c.eps_ln)) < 1e-15);

  // constant h_j leaves exactly the shift
  fill(m.params().get("cln.beta.b"), 0.25);
  Rng rng(1);
  Tensor wb = m.params().get("cln.beta.w");
  for (double& x : wb.mutable_data()) x = rng.uniform(-1, 1);
  Tensor h_i = Tensor::from({2}, {0.3, -0.7});
  Tensor shift = add(reshape(matmul(reshape(h_i, {1, 2}), wb), {2}), Tensor::full({2}, 0.25));
  Tensor r2 = m.cln(h_i, Tensor::from({2}, {4.0, 4.0}));
  CHECK(max_abs_diff(r2, shift) == 0.0);
}

TEST_CASE("cln with identity conditioning reduces to layer norm") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  fill(m.params().get("cln.alpha.w"), 0.0);
  fill(m.params().get("cln.alpha.b"), 1.0);
  fill(m.params().get("cln.beta.w"), 0.0);
  fill(m.params().get("cln.beta.b"), 0.0);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor hi = random_tensor(rng, {8}, -3, 3, false), hj = random_tensor(rng, {8}, -3, 3, false);
    const auto st = layer_norm_stats(hj);
    Tensor r = m.cln(hi, hj);
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(std::abs(r.at(k) - (hj.at(k) - st.mean) / (st.stddev + 1e-5)) <= 1e-10);
    }
  }
}

TEST_CASE("cln grid matches pairwise cln") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  Rng rng(3);
  Tensor h = random_tensor(rng, {4, 8}, -1, 1, false);
  Tensor grid = m.cln_grid(h);
  CHECK(grid.shape() == Shape{4, 4, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      Tensor r = m.cln(slice_rows(h, i, 1), slice_rows(h, j, 1));
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(grid.at(i, j, k) - r.at(k)) < 1e-13);
    }
}

TEST_CASE("relation head examples") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  for (const char* name : {"rel.mlp1.w", "rel.mlp1.b", "rel.mlp2.w", "rel.mlp2.b"})
    fill(m.params().get(name), 0.0);
  Rng rng(4);
  Tensor r = random_tensor(rng, {2, 2, 4}, -1, 1, false);
  Tensor logits = m.relation_head(r);
  CHECK(logits.shape() == Shape{2, 2, 3});
  for (double x : logits.data()) CHECK(x == 0.0);
  Tensor p = softmax(reshape(logits, {4, 3}), 1);
  for (double x : p.data()) CHECK(std::abs(x - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("relation features examples") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  const std::vector<int> one = {2};
  EncoderOutput enc = m.encode(one);
  CHECK(enc.hidden.shape() == Shape{1, 8});
  CHECK(enc.relation.shape() == Shape{1, 1, 4});
  RelationAttentionBank bank = m.relation_features(enc);
  REQUIRE(bank.keys.size() == 2);
  CHECK(bank.keys[0].shape() == Shape{1, 8});
  CHECK(bank.values[1].shape() == Shape{1, 8});

  // zero grid and zero biases give zero banks
  EncoderOutput zero = enc;
  zero.relation = Tensor::zeros({3, 3, 4});
  RelationAttentionBank zb = m.relation_features(zero);
  for (const auto& t : zb.keys)
    for (double x : t.data()) CHECK(x == 0.0);
  for (const auto& t : zb.values)
    for (double x : t.data()) CHECK(x == 0.0);
}

TEST_CASE("max pooling over rows ignores row order") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(5);
    Tensor r = random_tensor(rng, {n, n, 3}, -1, 1, false);
    std::vector<int> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
    rng.shuffle(perm);
    Tensor flat = reshape(r, {n, n * 3});
    Tensor permuted = reshape(gather_rows(flat, perm), {n, n, 3});
    CHECK(max_abs_diff(max_over_first_axis(r), max_over_first_axis(permuted)) == 0.0);
  }
}

TEST_CASE("type augmented self attention") {
  Rng rng(6);
  Tensor q = random_tensor(rng, {3, 4}, -1, 1, false), k = random_tensor(rng, {3, 4}, -1, 1, false),
         v = random_tensor(rng, {3, 4}, -1, 1, false), tk = random_tensor(rng, {2, 4}, -1, 1, false),
         tv = random_tensor(rng, {2, 4}, -1, 1, false);
  AttentionResult plain = multi_head_attention(q, {{k, v}}, 2);
  AttentionResult masked = type_augmented_self_attention(q, k, v, tk, tv, 2, -1e9);
  CHECK(max_abs_diff(plain.output, masked.output) < 1e-12);
  AttentionResult none = type_augmented_self_attention(q, k, v, Tensor(), Tensor(), 2);
  CHECK(max_abs_diff(plain.output, none.output) == 0.0);

  AttentionResult full = type_augmented_self_attention(q, k, v, tk, tv, 2);
  REQUIRE(full.weights.size() == 2);
  for (const auto& w : full.weights) {
    CHECK(w.shape() == Shape{3, 5});
    for (std::size_t i = 0; i < 3; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) total += w.at(i, j);
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
  // single head against a direct computation over [K_T; K]
  AttentionResult one = type_augmented_self_attention(q, k, v, tk, tv, 1);
  auto keys = rows_of(concat({tk, k}, 0)), values = rows_of(concat({tv, v}, 0));
  for (std::size_t i = 0; i < 3; ++i) {
    auto want = plain_attention_row(rows_of(q)[i], keys, values);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(one.output.at(i, c) - want[c]) < 1e-12);
  }
}

TEST_CASE("relation and type cross attention") {
  Rng rng(7);
  const std::size_t n = 4, t = 2, m = 3, d = 6;
  Tensor q = random_tensor(rng, {m, d}, -1, 1, false), k = random_tensor(rng, {n, d}, -1, 1, false),
         v = random_tensor(rng, {n, d}, -1, 1, false), rk = random_tensor(rng, {n, d}, -1, 1, false),
         rv = random_tensor(rng, {n, d}, -1, 1, false), tk = random_tensor(rng, {t, d}, -1, 1, false),
         tv = random_tensor(rng, {t, d}, -1, 1, false);
  AttentionResult base = relation_type_cross_attention(q, Tensor(), Tensor(), Tensor(), Tensor(),
                                                       k, v, 2);
  CHECK(base.weights[0].shape() == Shape{m, n});
  AttentionResult full = relation_type_cross_attention(q, rk, rv, tk, tv, k, v, 2);
  CHECK(full.weights[0].shape() == Shape{m, 2 * n + t});

  // K_R = K and V_R = V: same as attending over two copies of every key
  AttentionResult dup = relation_type_cross_attention(q, k, v, Tensor(), Tensor(), k, v, 1);
  auto keys = rows_of(k), values = rows_of(v);
  auto keys2 = keys, values2 = values;
  keys2.insert(keys2.end(), keys.begin(), keys.end());
  values2.insert(values2.end(), values.begin(), values.end());
  for (std::size_t i = 0; i < m; ++i) {
    auto want = plain_attention_row(rows_of(q)[i], keys2, values2);
    for (std::size_t c = 0; c < d; ++c) CHECK(std::abs(dup.output.at(i, c) - want[c]) < 1e-12);
  }
  // doubling every key's mass leaves the normalised output unchanged
  CHECK(max_abs_diff(dup.output, multi_head_attention(q, {{k, v}}, 1).output) < 1e-12);

  CHECK_THROWS_AS(relation_type_cross_attention(q, rk, slice_rows(rv, 0, 2), Tensor(), Tensor(),
                                                k, v, 2),
                  DimensionError);
}

TEST_CASE("encode shapes and determinism") {
  Fixture f;
  Seq2SeqNer a = f.model(f.config()), b = f.model(f.config());
  const std::vector<int> ids = {2, 3, 4, 2};
  EncoderOutput ea = a.encode(ids), eb = b.encode(ids);
  CHECK(ea.hidden.shape() == Shape{4, 8});
  CHECK(ea.relation.shape() == Shape{4, 4, 4});
  CHECK(ea.type_embeddings.shape() == Shape{2, 8});
  CHECK(max_abs_diff(ea.hidden, eb.hidden) == 0.0);
  CHECK(a.params().fingerprint() == b.params().fingerprint());

  Seq2SeqNer no_eta = f.model(f.config(true, true, false));
  CHECK(max_abs_diff(no_eta.encode(ids).hidden, ea.hidden) > 1e-6);

  CHECK_THROWS(a.encode(std::vector<int>{}));
  CHECK_THROWS(a.encode(std::vector<int>{99}));
}

TEST_CASE("decode step is a distribution over every pointer slot") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  const std::vector<int> ids = {2, 5, 6};
  EncoderOutput enc = m.encode(ids);
  RelationAttentionBank bank = m.relation_features(enc);
  for (const std::vector<int>& prefix : {std::vector<int>{}, std::vector<int>{0, 1, 3},
                                         std::vector<int>{2, 4, 5}}) {
    Tensor p = m.decode_step(enc, bank, prefix);
    CHECK(p.size() == 6);
    double total = 0.0;
    for (double x : p.data()) total += x;
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(m.decode_step(enc, bank, std::vector<int>{6}), std::out_of_range);
  CHECK_THROWS_AS(m.decode_step(enc, bank, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("teacher forcing matches step by step decoding") {
  Fixture f;
  for (bool eta : {false, true}) {
    Seq2SeqNer m = f.model(f.config(true, true, eta));
    const std::vector<int> ids = {2, 3, 4, 5, 6};
    PointerTarget gold{{0, 1, 5, 2, 4, 6, 7}};
    ForwardResult fr = m.forward_teacher_forced(ids, gold);
    CHECK(fr.step_probs.shape() == Shape{gold.indices.size(), 8});
    CHECK(fr.relation_logits.shape() == Shape{5, 5, 3});
    EncoderOutput enc = m.encode(ids);
    RelationAttentionBank bank = m.relation_features(enc);
    for (std::size_t t = 0; t < gold.indices.size(); ++t) {
      std::vector<int> prefix(gold.indices.begin(), gold.indices.begin() + t);
      Tensor p = m.decode_step(enc, bank, prefix);
      for (std::size_t j = 0; j < p.size(); ++j) {
        CHECK(std::abs(p.at(j) - fr.step_probs.at(t, j)) <= 1e-10);
      }
    }
  }
  Seq2SeqNer m = f.model(f.config());
  ForwardResult eos_only = m.forward_teacher_forced(std::vector<int>{2, 3}, PointerTarget{{4}});
  CHECK(eos_only.step_probs.dim(0) == 1);
  Graph::current().clear();
}

TEST_CASE("teacher forcing is causal") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  const std::vector<int> ids = {2, 3, 4, 5};
  const PointerTarget gold{{0, 1, 4, 2, 5, 6}};
  Tensor base = m.forward_teacher_forced(ids, gold).step_probs;
  Rng rng(8);
  for (std::size_t t = 0; t < gold.indices.size(); ++t) {
    PointerTarget changed = gold;
    changed.indices[t] = (gold.indices[t] + 1 + static_cast<int>(rng.below(6))) % 7;
    Tensor p = m.forward_teacher_forced(ids, changed).step_probs;
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t j = 0; j < 7; ++j) CHECK(p.at(s, j) == base.at(s, j));
    if (t + 1 < gold.indices.size()) {
      double diff = 0.0;
      for (std::size_t j = 0; j < 7; ++j) diff += std::abs(p.at(t + 1, j) - base.at(t + 1, j));
      CHECK(diff > 0.0);
    }
  }
  Graph::current().clear();
}

TEST_CASE("masked full model matches the baseline forward pass") {
  Fixture f;
  ModelConfig masked_cfg = f.config();
  masked_cfg.auxiliary_score_offset = -1e9;
  Seq2SeqNer full = f.model(masked_cfg, 11);
  Seq2SeqNer baseline = f.model(f.config(false, false, false), 11);
  // every baseline parameter exists in the full model with identical values
  for (const auto& e : baseline.params().entries()) {
    REQUIRE(full.params().contains(e.name));
    CHECK(max_abs_diff(full.params().get(e.name), e.tensor) == 0.0);
  }
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = rng.between(1, 6);
    std::vector<int> ids(n);
    for (int& id : ids) id = rng.between(2, static_cast<int>(f.vocab.size()) - 1);
    PointerTarget gold;
    for (int s = 0; s < 5; ++s) gold.indices.push_back(rng.between(0, n + 1));
    gold.indices.push_back(n + 2);
    Tensor a = full.forward_teacher_forced(ids, gold).step_probs;
    Tensor b = baseline.forward_teacher_forced(ids, gold).step_probs;
    CHECK(max_abs_diff(a, b) <= 1e-6);
    CHECK(full.greedy_generate(ids, 10).indices == baseline.greedy_generate(ids, 10).indices);
  }
  Graph::current().clear();
}

TEST_CASE("baseline carries no auxiliary parameters") {
  Fixture f;
  Seq2SeqNer baseline = f.model(f.config(false, false, false));
  for (const auto& e : baseline.params().entries()) {
    const std::string g = parameter_group(e.name);
    CHECK(g != "cln");
    CHECK(g != "relation_mlp");
    CHECK(g != "conv");
    CHECK(g != "type_mlp");
    CHECK(e.name.find(".relk.") == std::string::npos);
  }
  EncoderOutput enc = baseline.encode(std::vector<int>{2, 3, 4});
  CHECK_FALSE(enc.relation.defined());
  CHECK(baseline.relation_features(enc).keys.empty());
  CHECK_THROWS_AS(baseline.relation_logits(enc), ConfigError);
}

TEST_CASE("greedy decoding") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  // Constant decoder output and a huge EOS vector make EOS the argmax.
  fill(m.params().get("dec1.ln3.gain"), 0.0);
  fill(m.params().get("dec1.ln3.bias"), 1.0);
  fill(m.params().get("pointer.eos"), 1e3);
  const std::vector<int> ids = {2, 3, 4};
  CHECK(m.greedy_generate(ids, 10).indices == std::vector<int>{3 + 2});

  Seq2SeqNer r = f.model(f.config(), 3);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int max_len = rng.between(1, 8);
    CHECK(static_cast<int>(r.greedy_generate(ids, max_len).indices.size()) <= max_len);
  }
  CHECK_THROWS(r.greedy_generate(ids, 0));
}

TEST_CASE("encoder and type embeddings share one table") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config());
  Tensor table = m.token_embedding_table();
  CHECK(table.same_storage(m.params().get("embed.tokens")));
  CHECK(max_abs_diff(m.type_embeddings(), compute_type_embeddings(m.type_mixture(), table)) == 0.0);
  table.mutable_data()[2 * 8] += 1.0;  // token "a", used by type X
  CHECK(max_abs_diff(m.type_embeddings(), compute_type_embeddings(m.type_mixture(), table)) == 0.0);

  Graph::current().clear();
  m.params().zero_grad();
  backward(sum(m.type_embeddings()));
  CHECK(table.grad()[2 * 8] != 0.0);

  ModelConfig frozen = f.config();
  frozen.freeze_type_embeddings = true;
  Seq2SeqNer fm = f.model(frozen);
  Tensor e = fm.type_embeddings();
  CHECK_FALSE(e.requires_grad());
  Graph::current().clear();
}

TEST_CASE("gradient suite over every parameter group") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GradSuiteResult r = run_gradient_suite(seed, 8, 1e-6, 5);
    std::set<std::string> groups;
    for (const auto& g : r.groups) {
      CAPTURE(g.group);
      CHECK(g.max_rel_error <= 1e-4);
      groups.insert(g.group);
    }
    for (const char* want : {"cln", "relation_mlp", "conv", "type_mlp", "attention", "pointer"})
      CHECK(groups.count(want) == 1);
  }
}

TEST_CASE("checkpoint round trip reproduces predictions") {
  Fixture f;
  Seq2SeqNer m = f.model(f.config(), 21);
  ExperimentConfig cfg;
  cfg.model = m.config();
  cfg.train.w = 0.4;
  const auto path = std::filesystem::temp_directory_path() / "mtner_test.ckpt";
  save_checkpoint(path, cfg, f.vocab, f.lexicon, m);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.config.train.w == 0.4);
  CHECK(ck.vocab.tokens() == f.vocab.tokens());
  CHECK(ck.model->params().fingerprint() == m.params().fingerprint());
  const std::vector<int> ids = {2, 4, 6, 3};
  CHECK(ck.model->greedy_generate(ids, 12).indices == m.greedy_generate(ids, 12).indices);

  const auto bad = std::filesystem::temp_directory_path() / "mtner_test_bad.ckpt";
  std::ofstream(bad) << "not a checkpoint\n";
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
}

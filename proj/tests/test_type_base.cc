#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mtner/params.h"
#include "mtner/type_base.h"
#include "test_util.h"

using namespace mtner;
using mtner::testing::max_abs_diff;
using mtner::testing::random_tensor;

namespace {

TypeLexicon parse(const std::string& text, const std::vector<std::string>& types) {
  return parse_lexicon(text, types);
}

Vocab vocab_of(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

void set_identity(Tensor t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) d[i * cols + i] = 1.0;
}

void set_zero(Tensor t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace

TEST_CASE("lexicon parsing") {
  auto lex = parse("location\tBeijing\t3\n", {"location"});
  REQUIRE(lex.entries.size() == 1);
  REQUIRE(lex.entries[0].size() == 1);
  CHECK(lex.entries[0][0].phrase == std::vector<std::string>{"Beijing"});
  CHECK(lex.entries[0][0].frequency == 3.0);
}

TEST_CASE("the four-city location lexicon") {
  auto lex = parse(
      "location\tBeijing\t1\nlocation\tAthens\t1\nlocation\tLondon\t1\n"
      "location\tNew York\t1\n",
      {"location"});
  REQUIRE(lex.entries[0].size() == 4);
  CHECK(lex.entries[0][3].phrase == std::vector<std::string>{"New", "York"});
}

TEST_CASE("lexicon errors") {
  CHECK_THROWS_AS(parse("", {"location"}), CorpusError);
  try {
    parse("location\tBeijing\t1\nplanet\tMars\t2\n", {"location"});
    FAIL("expected error");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse("location\tBeijing\t0\n", {"location"}), CorpusError);
  CHECK_THROWS_AS(parse("location\tBeijing\t-2\n", {"location"}), CorpusError);
  CHECK_THROWS_AS(parse("location\tBeijing\t1\n", {"location", "person"}), CorpusError);
}

TEST_CASE("lexicon file round trip") {
  auto lex = parse("A\tx y\t2.5\nB\tz\t1\nA\tw\t4\n", {"A", "B"});
  const auto p = std::filesystem::temp_directory_path() / "mtner_test_lex.tsv";
  save_lexicon(p, lex);
  auto back = load_lexicon(p, {"A", "B"});
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].size() == 2);
  CHECK(back.entries[0][0].frequency == 2.5);
  CHECK(back.entries[1][0].phrase == std::vector<std::string>{"z"});
}

TEST_CASE("lexicon frequencies recount corpus mentions") {
  Sentence s1, s2;
  s1.tokens = {"go", "to", "New", "York", "now"};
  s1.mentions = {mention_from_tokens({2, 3}, 0)};
  s2.tokens = {"New", "York", "and", "Paris", "Bob"};
  s2.mentions = {mention_from_tokens({0, 1}, 0), mention_from_tokens({3}, 0),
                 mention_from_tokens({4}, 1)};
  auto lex = lexicon_from_corpus({s1, s2}, {"LOC", "PER", "ORG"});
  REQUIRE(lex.entries.size() == 3);
  std::map<std::string, double> loc;
  for (const auto& e : lex.entries[0]) {
    std::string key;
    for (const auto& w : e.phrase) key += (key.empty() ? "" : " ") + w;
    loc[key] = e.frequency;
  }
  CHECK(loc["New York"] == 2.0);
  CHECK(loc["Paris"] == 1.0);
  CHECK(lex.entries[1].size() == 1);
  // unseen type falls back to its own name
  REQUIRE(lex.entries[2].size() == 1);
  CHECK(lex.entries[2][0].phrase == std::vector<std::string>{"ORG"});
}

TEST_CASE("type embedding examples") {
  Vocab v = vocab_of({"a", "b", "c"});
  Rng rng(1);
  Tensor table = random_tensor(rng, {v.size(), 4}, -1, 1, false);

  auto single = parse("T\ta\t1\n", {"T"});
  Tensor e1 = compute_type_embeddings(type_mixture(single, v), table);
  CHECK(max_abs_diff(e1, slice_rows(table, 2, 1)) < 1e-15);

  auto weighted = parse("T\ta\t3\nT\tb c\t1\n", {"T"});
  Tensor e2 = compute_type_embeddings(type_mixture(weighted, v), table);
  for (std::size_t k = 0; k < 4; ++k) {
    const double phrase2 = 0.5 * (table.at(3, k) + table.at(4, k));
    CHECK(std::abs(e2.at(0, k) - (0.75 * table.at(2, k) + 0.25 * phrase2)) < 1e-14);
  }

  Tensor zeros = Tensor::zeros({v.size(), 4});
  Tensor e_zero = compute_type_embeddings(type_mixture(weighted, v), zeros);
  for (double x : e_zero.data()) CHECK(x == 0.0);

  // unknown tokens use the unknown row
  auto unknown = parse("T\tzzz\t1\n", {"T"});
  Tensor e3 = compute_type_embeddings(type_mixture(unknown, v), table);
  CHECK(max_abs_diff(e3, slice_rows(table, Vocab::kUnknown, 1)) < 1e-15);

  auto uniform = type_mixture(weighted, v, PhraseWeighting::kUniform);
  double total = 0.0;
  for (auto [row, w] : uniform[0]) total += w;
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(uniform[0][0].second == 0.5);
}

TEST_CASE("mixture weights sum to one per type") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n_types = rng.between(1, 4);
    std::vector<std::string> names;
    std::string text;
    for (int t = 0; t < n_types; ++t) {
      names.push_back("T" + std::to_string(t));
      const int entries = rng.between(1, 5);
      for (int e = 0; e < entries; ++e) {
        text += names.back() + "\t";
        const int len = rng.between(1, 3);
        for (int k = 0; k < len; ++k) text += (k ? " " : "") + std::string("w") + std::to_string(rng.below(6));
        text += "\t" + std::to_string(rng.between(1, 50)) + "\n";
      }
    }
    Vocab v = vocab_of({"w0", "w1", "w2", "w3", "w4", "w5"});
    const RowMixture m = type_mixture(parse(text, names), v);
    REQUIRE(m.size() == static_cast<std::size_t>(n_types));
    for (const auto& row : m) {
      double total = 0.0;
      for (auto [r, w] : row) total += w;
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("type embeddings are linear in the embedding table") {
  Rng rng(5);
  Vocab v = vocab_of({"a", "b", "c", "d"});
  auto lex = parse("X\ta b\t2\nX\tc\t5\nY\td a\t1\n", {"X", "Y"});
  const RowMixture m = type_mixture(lex, v);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(rng, {v.size(), 3}, -1, 1, false);
    Tensor b = random_tensor(rng, {v.size(), 3}, -1, 1, false);
    const double c = rng.uniform(-3, 3);
    CHECK(max_abs_diff(compute_type_embeddings(m, scale(a, c)),
                       scale(compute_type_embeddings(m, a), c)) < 1e-13);
    CHECK(max_abs_diff(compute_type_embeddings(m, add(a, b)),
                       add(compute_type_embeddings(m, a), compute_type_embeddings(m, b))) < 1e-13);
  }
}

TEST_CASE("identity projections give K_T = V_T = E_T") {
  ParameterStore store(1);
  const int d = 6;
  TypeProjector proj(store, d, d, d, 1, 2, Activation::kIdentity);
  set_identity(proj.down_weight);
  set_zero(proj.down_bias);
  set_identity(proj.up_weight);
  set_zero(proj.up_bias);
  for (int s = 0; s < proj.sites(); ++s) {
    set_identity(proj.key_maps[s]);
    set_identity(proj.value_maps[s]);
    set_zero(proj.key_biases[s]);
    set_zero(proj.value_biases[s]);
  }
  Rng rng(2);
  Tensor e = random_tensor(rng, {3, static_cast<std::size_t>(d)}, -1, 1, false);
  for (int s = 0; s < 2; ++s) {
    TypeKeyValues kv = proj.project_from_embeddings(e, s);
    CHECK(max_abs_diff(kv.keys, e) == 0.0);
    CHECK(max_abs_diff(kv.values, e) == 0.0);
    REQUIRE(kv.key_heads.size() == 1);
    CHECK(max_abs_diff(kv.key_heads[0], e) == 0.0);
  }
}

TEST_CASE("projector head shapes at every site") {
  ParameterStore store(3);
  TypeProjector proj(store, 8, 4, 8, 2, 3, Activation::kTanh);
  Rng rng(4);
  Tensor e = random_tensor(rng, {4, 8}, -1, 1, false);
  for (int s = 0; s < 3; ++s) {
    TypeKeyValues kv = proj.project_from_embeddings(e, s);
    REQUIRE(kv.key_heads.size() == 2);
    REQUIRE(kv.value_heads.size() == 2);
    for (int h = 0; h < 2; ++h) {
      CHECK(kv.key_heads[h].shape() == Shape{4, 4});
      CHECK(kv.value_heads[h].shape() == Shape{4, 4});
    }
  }
  // sites have their own parameters
  CHECK(max_abs_diff(proj.project_from_embeddings(e, 0).keys,
                     proj.project_from_embeddings(e, 1).keys) > 0.0);
  CHECK_THROWS(TypeProjector(store, 9, 4, 8, 2, 1, Activation::kTanh));
}

TEST_CASE("zero type embeddings with zero biases project to zero") {
  ParameterStore store(5);
  TypeProjector proj(store, 8, 4, 8, 2, 1, Activation::kTanh);
  set_zero(proj.down_bias);
  set_zero(proj.up_bias);
  set_zero(proj.key_biases[0]);
  set_zero(proj.value_biases[0]);
  TypeKeyValues kv = proj.project_from_embeddings(Tensor::zeros({3, 8}), 0);
  for (double x : kv.keys.data()) CHECK(x == 0.0);
  for (double x : kv.values.data()) CHECK(x == 0.0);
}

TEST_CASE("split_heads slices columns") {
  Tensor x = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto heads = split_heads(x, 2);
  REQUIRE(heads.size() == 2);
  CHECK(heads[1].at(1, 0) == 7.0);
  CHECK_THROWS(split_heads(x, 3));
}

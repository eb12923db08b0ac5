#include "mtner/type_base.h"

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace mtner {

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> words;
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

TypeLexicon parse_stream(std::istream& in, const std::vector<std::string>& type_names) {
  TypeLexicon lex;
  lex.type_names = type_names;
  lex.entries.resize(type_names.size());
  std::map<std::string, int> type_ids;
  for (std::size_t i = 0; i < type_names.size(); ++i) type_ids[type_names[i]] = static_cast<int>(i);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "lexicon line " + std::to_string(line_no) + ": ";
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) throw CorpusError(where + "expected three tab-separated columns");
    const std::string type = line.substr(0, tab1);
    const std::string phrase = line.substr(tab1 + 1, tab2 - tab1 - 1);
    const std::string freq_text = line.substr(tab2 + 1);
    auto it = type_ids.find(type);
    if (it == type_ids.end()) throw CorpusError(where + "unknown type name '" + type + "'");
    LexiconEntry entry;
    entry.phrase = split_words(phrase);
    if (entry.phrase.empty()) throw CorpusError(where + "empty phrase");
    try {
      std::size_t used = 0;
      entry.frequency = std::stod(freq_text, &used);
      if (used != freq_text.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw CorpusError(where + "bad frequency '" + freq_text + "'");
    }
    if (!(entry.frequency > 0.0)) throw CorpusError(where + "frequency must be positive");
    lex.entries[it->second].push_back(std::move(entry));
  }
  for (std::size_t t = 0; t < type_names.size(); ++t) {
    if (lex.entries[t].empty()) {
      throw CorpusError("lexicon has no entry for type '" + type_names[t] + "'");
    }
  }
  return lex;
}

}  // namespace

TypeLexicon load_lexicon(const std::filesystem::path& path,
                         const std::vector<std::string>& type_names) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open lexicon " + path.string());
  return parse_stream(in, type_names);
}

TypeLexicon parse_lexicon(const std::string& text,
                          const std::vector<std::string>& type_names) {
  std::istringstream in(text);
  return parse_stream(in, type_names);
}

std::string lexicon_to_text(const TypeLexicon& lexicon) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (std::size_t t = 0; t < lexicon.entries.size(); ++t) {
    for (const auto& e : lexicon.entries[t]) {
      out << lexicon.type_names[t] << '\t' << join_words(e.phrase) << '\t' << e.frequency
          << '\n';
    }
  }
  return out.str();
}

void save_lexicon(const std::filesystem::path& path, const TypeLexicon& lexicon) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write lexicon " + path.string());
  out << lexicon_to_text(lexicon);
}

TypeLexicon lexicon_from_corpus(const std::vector<Sentence>& corpus,
                                const std::vector<std::string>& type_names) {
  std::vector<std::map<std::string, int>> counts(type_names.size());
  for (const auto& s : corpus) {
    for (const auto& m : s.mentions) {
      if (m.type_id >= static_cast<int>(type_names.size())) {
        throw CorpusError("mention type " + std::to_string(m.type_id) + " has no name");
      }
      std::vector<std::string> words;
      for (int t : m.tokens()) words.push_back(s.tokens[t]);
      ++counts[m.type_id][join_words(words)];
    }
  }
  TypeLexicon lex;
  lex.type_names = type_names;
  lex.entries.resize(type_names.size());
  for (std::size_t t = 0; t < type_names.size(); ++t) {
    for (const auto& [phrase, n] : counts[t]) {
      lex.entries[t].push_back({split_words(phrase), static_cast<double>(n)});
    }
    if (lex.entries[t].empty()) lex.entries[t].push_back({{type_names[t]}, 1.0});
  }
  return lex;
}

RowMixture type_mixture(const TypeLexicon& lexicon, const Vocab& vocab,
                        PhraseWeighting weighting) {
  RowMixture mixture(lexicon.entries.size());
  for (std::size_t t = 0; t < lexicon.entries.size(); ++t) {
    const auto& entries = lexicon.entries[t];
    if (entries.empty()) throw CorpusError("type " + std::to_string(t) + " has no lexicon entry");
    double total = 0.0;
    for (const auto& e : entries) total += weighting == PhraseWeighting::kFrequency ? e.frequency : 1.0;
    std::map<int, double> weights;
    for (const auto& e : entries) {
      const double theta = (weighting == PhraseWeighting::kFrequency ? e.frequency : 1.0) / total;
      const double share = theta / static_cast<double>(e.phrase.size());
      for (const auto& w : e.phrase) weights[vocab.id(w)] += share;
    }
    mixture[t].assign(weights.begin(), weights.end());
  }
  return mixture;
}

Tensor compute_type_embeddings(const RowMixture& mixture, const Tensor& token_embed) {
  return mix_rows(token_embed, mixture);
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kTanh: return tanh(x);
    case Activation::kRelu: return relu(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

std::vector<Tensor> split_heads(const Tensor& x, int n_heads) {
  const std::size_t d = x.dim(1);
  if (n_heads < 1 || d % n_heads != 0) {
    throw std::invalid_argument("hidden size " + std::to_string(d) +
                                " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (n_heads == 1) return {x};
  const std::size_t dh = d / n_heads;
  std::vector<Tensor> heads;
  for (int h = 0; h < n_heads; ++h) heads.push_back(slice_cols(x, h * dh, dh));
  return heads;
}

TypeProjector::TypeProjector(ParameterStore& store, int d_h, int d_down, int d_up,
                             int n_heads, int n_sites, Activation act)
    : n_heads_(n_heads), act_(act) {
  if (n_heads < 1 || d_h % n_heads != 0) {
    throw std::invalid_argument("hidden size " + std::to_string(d_h) +
                                " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  const auto dh = static_cast<std::size_t>(d_h);
  const auto down = static_cast<std::size_t>(d_down);
  const auto up = static_cast<std::size_t>(d_up);
  down_weight = store.create("type.down.w", {dh, down}, Init::xavier());
  down_bias = store.create("type.down.b", {down}, Init::zeros());
  up_weight = store.create("type.up.w", {down, up}, Init::xavier());
  up_bias = store.create("type.up.b", {up}, Init::zeros());
  for (int s = 0; s < n_sites; ++s) {
    const std::string p = "type.site" + std::to_string(s);
    key_maps.push_back(store.create(p + ".k.w", {up, dh}, Init::xavier()));
    key_biases.push_back(store.create(p + ".k.b", {dh}, Init::zeros()));
    value_maps.push_back(store.create(p + ".v.w", {up, dh}, Init::xavier()));
    value_biases.push_back(store.create(p + ".v.b", {dh}, Init::zeros()));
  }
}

Tensor TypeProjector::bottleneck(const Tensor& type_embeddings) const {
  Tensor h = activate(linear(type_embeddings, down_weight, down_bias), act_);
  return linear(h, up_weight, up_bias);
}

TypeKeyValues TypeProjector::project(const Tensor& bottleneck_out, int site) const {
  if (site < 0 || site >= sites()) throw std::out_of_range("type projector site out of range");
  TypeKeyValues kv;
  kv.keys = linear(bottleneck_out, key_maps[site], key_biases[site]);
  kv.values = linear(bottleneck_out, value_maps[site], value_biases[site]);
  kv.key_heads = split_heads(kv.keys, n_heads_);
  kv.value_heads = split_heads(kv.values, n_heads_);
  return kv;
}

TypeKeyValues TypeProjector::project_from_embeddings(const Tensor& type_embeddings,
                                                     int site) const {
  return project(bottleneck(type_embeddings), site);
}

}  // namespace mtner

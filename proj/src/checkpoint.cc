#include "mtner/checkpoint.h"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mtner {

namespace {

constexpr const char* kMagic = "mtner-checkpoint 1";

std::size_t read_count(std::istream& in, const std::string& section) {
  std::string line;
  if (!std::getline(in, line) || line.rfind(section + " ", 0) != 0) {
    throw CheckpointError("checkpoint: expected '" + section + " <count>'");
  }
  try {
    return std::stoul(line.substr(section.size() + 1));
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: bad count in '" + line + "'");
  }
}

std::vector<std::string> read_lines(std::istream& in, const std::string& section) {
  const std::size_t n = read_count(in, section);
  std::vector<std::string> lines(n);
  for (auto& l : lines) {
    if (!std::getline(in, l)) throw CheckpointError("checkpoint: truncated " + section);
  }
  return lines;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const Vocab& vocab, const TypeLexicon& lexicon, const Seq2SeqNer& model) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << kMagic << '\n';
  const auto entries = config_entries(config);
  out << "config " << entries.size() << '\n';
  for (const auto& [k, v] : entries) out << k << '=' << v << '\n';
  out << "types " << lexicon.type_names.size() << '\n';
  for (const auto& name : lexicon.type_names) out << name << '\n';
  // ids 0 and 1 are the reserved pad/unk entries
  out << "vocab " << vocab.size() - 2 << '\n';
  for (std::size_t i = 2; i < vocab.size(); ++i) out << vocab.token(static_cast<int>(i)) << '\n';
  const std::string lex = lexicon_to_text(lexicon);
  out << "lexicon " << std::count(lex.begin(), lex.end(), '\n') << '\n' << lex;
  model.params().save(out);
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  Checkpoint ck;
  std::string config_text;
  for (const auto& l : read_lines(in, "config")) config_text += l + '\n';
  ck.config = parse_config_text(config_text);
  const std::vector<std::string> types = read_lines(in, "types");
  for (const auto& token : read_lines(in, "vocab")) ck.vocab.add(token);
  std::string lex_text;
  for (const auto& l : read_lines(in, "lexicon")) lex_text += l + '\n';
  ck.lexicon = parse_lexicon(lex_text, types);

  ModelConfig mc = ck.config.model;
  mc.vocab_size = static_cast<int>(ck.vocab.size());
  mc.n_types = static_cast<int>(types.size());
  ck.model = std::make_unique<Seq2SeqNer>(
      mc, type_mixture(ck.lexicon, ck.vocab, mc.phrase_weighting), 0);
  try {
    ck.model->params().load(in);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  return ck;
}

}  // namespace mtner

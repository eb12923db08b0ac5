// mtner command-line driver: data generation, training, evaluation and the
// ablation / loss-weight experiments.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtner/checkpoint.h"
#include "mtner/config.h"
#include "mtner/corpus.h"
#include "mtner/grad_check.h"
#include "mtner/random.h"
#include "mtner/train_eval.h"
#include "mtner/type_base.h"

namespace fs = std::filesystem;
using namespace mtner;

namespace {

// Bad flag combinations and config values exit with this code.
constexpr int kUsageExit = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string config_path;
  std::string corpus_path;
  std::string dev_path;
  std::string types_path;
  std::string lexicon_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool use_rp = false, use_tra = false, use_eta = false;
  std::optional<double> w, alpha, tau, lr;
  std::optional<int> epochs;
  std::vector<std::string> settings;  // --set key=value
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_corpus) {
  cmd->add_option("--config", f.config_path, "key=value config file");
  auto* corpus = cmd->add_option("--corpus", f.corpus_path, "JSONL corpus");
  if (needs_corpus) corpus->required();
  cmd->add_option("--types", f.types_path, "type names, one per line (default: types.txt next to the corpus)");
  cmd->add_option("--lexicon", f.lexicon_path, "type lexicon TSV (default: lexicon.tsv next to the corpus, else derived)");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--jobs", f.jobs, "parallel runs")->check(CLI::PositiveNumber);
  cmd->add_flag("--use-rp", f.use_rp, "enable relation prediction");
  cmd->add_flag("--use-tra", f.use_tra, "enable relation attention (needs --use-rp)");
  cmd->add_flag("--use-eta", f.use_eta, "enable type attention");
  cmd->add_option("--w", f.w, "relation loss weight");
  cmd->add_option("--alpha", f.alpha, "focal alpha");
  cmd->add_option("--tau", f.tau, "focal tau");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--set", f.settings, "extra key=value config override (repeatable)");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig cfg;
  try {
    if (!f.config_path.empty()) cfg = load_config(f.config_path);
    for (const auto& s : f.settings) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  // Any ablation flag on the command line names the complete set of enabled
  // components; otherwise the config decides.
  if (f.use_rp || f.use_tra || f.use_eta) {
    cfg.model.use_rp = f.use_rp;
    cfg.model.use_tra = f.use_tra;
    cfg.model.use_eta = f.use_eta;
  }
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.w) cfg.train.w = *f.w;
  if (f.alpha) cfg.train.alpha = *f.alpha;
  if (f.tau) cfg.train.tau = *f.tau;
  if (f.lr) cfg.train.lr = *f.lr;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (cfg.model.use_tra && !cfg.model.use_rp) {
    throw UsageError(
        "--use-tra requires --use-rp: relation attention reads the relation prediction grid");
  }
  try {
    cfg.train.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

fs::path sibling_or(const std::string& given, const std::string& corpus, const char* name) {
  if (!given.empty()) return given;
  return fs::path(corpus).parent_path() / name;
}

TypeLexicon resolve_lexicon(const CommonFlags& f, const std::vector<Sentence>& corpus,
                            const std::vector<std::string>& types) {
  const fs::path lex = sibling_or(f.lexicon_path, f.corpus_path, "lexicon.tsv");
  if (!f.lexicon_path.empty() || fs::exists(lex)) return load_lexicon(lex, types);
  return lexicon_from_corpus(corpus, types);
}

ExperimentData load_data(const CommonFlags& f, const ExperimentConfig& cfg) {
  const auto corpus = load_corpus(f.corpus_path);
  const auto types = load_type_names(sibling_or(f.types_path, f.corpus_path, "types.txt"));
  const TypeLexicon lexicon = resolve_lexicon(f, corpus, types);
  if (f.dev_path.empty()) {
    return prepare_data(corpus, lexicon, cfg.train.dev_fraction,
                        derive_seed(cfg.train.seed, "data"));
  }
  ExperimentData data;
  data.train = corpus;
  data.dev = load_corpus(f.dev_path);
  std::vector<Sentence> all = data.train;
  all.insert(all.end(), data.dev.begin(), data.dev.end());
  data.vocab = build_vocab(all);
  data.lexicon = lexicon;
  return data;
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// Written before any training so a crashed run still records what it was.
fs::path write_manifest(const std::string& command, const CommonFlags& f,
                        const ExperimentConfig& cfg, const nlohmann::json& extra = {}) {
  fs::create_directories(f.out_dir);
  nlohmann::json m = {{"command", command},
                      {"config_path", f.config_path},
                      {"corpus", f.corpus_path},
                      {"config", config_to_json(cfg)},
                      {"seed", cfg.train.seed},
                      {"out_dir", f.out_dir},
                      {"started_at", utc_now()}};
  if (!extra.is_null()) m["extra"] = extra;
  const fs::path path = fs::path(f.out_dir) / "manifest.json";
  write_json(path, m);
  write_text(fs::path(f.out_dir) / "config.txt", config_to_text(cfg));
  return path;
}

void finish_manifest(const fs::path& path) {
  std::ifstream in(path);
  nlohmann::json m = nlohmann::json::parse(in);
  m["finished_at"] = utc_now();
  write_json(path, m);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw UsageError("--seeds: '" + item + "' is not a seed");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

// Category rates left at their defaults shrink proportionally so that the
// explicitly given ones fit, e.g. --flat-rate 1.0 alone means all flat.
void fit_default_rates(SynthConfig& synth, bool flat_set, bool nested_set, bool disc_set) {
  double* rates[] = {&synth.flat_rate, &synth.nested_rate, &synth.discontinuous_rate};
  const bool given[] = {flat_set, nested_set, disc_set};
  double fixed = 0.0, free = 0.0;
  for (int i = 0; i < 3; ++i) (given[i] ? fixed : free) += *rates[i];
  if (fixed + free <= 1.0 || free == 0.0) return;
  const double room = std::max(0.0, 1.0 - fixed);
  for (int i = 0; i < 3; ++i)
    if (!given[i]) *rates[i] *= room / free;
}

int cmd_gen_data(const SynthConfig& synth, int sentences, std::uint64_t seed,
                 const std::string& out_dir) {
  const auto corpus = generate_synthetic(synth, sentences, derive_seed(seed, "data"));
  const auto types = synthetic_type_names(synth.n_types);
  fs::create_directories(out_dir);
  save_corpus(fs::path(out_dir) / "corpus.jsonl", corpus);
  save_type_names(fs::path(out_dir) / "types.txt", types);
  save_lexicon(fs::path(out_dir) / "lexicon.tsv", lexicon_from_corpus(corpus, types));
  std::cout << "wrote " << corpus.size() << " sentences to " << out_dir << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f) {
  const ExperimentConfig cfg = resolve_config(f);
  const ExperimentData data = load_data(f, cfg);
  const fs::path manifest = write_manifest("train", f, cfg);
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(data.vocab.size());
  mc.n_types = static_cast<int>(data.lexicon.type_names.size());
  Seq2SeqNer model(mc, type_mixture(data.lexicon, data.vocab, mc.phrase_weighting),
                   derive_seed(cfg.train.seed, "init"));
  RunResult run;
  run.run_id = "train/seed" + std::to_string(cfg.train.seed);
  run.model_config = mc;
  run.train_config = cfg.train;
  run.training = train(model, data.vocab, data.train, data.dev, cfg.train);
  if (!data.dev.empty()) run.final_dev = evaluate(model, data.vocab, data.dev);
  save_checkpoint(fs::path(f.out_dir) / "model.ckpt", {mc, cfg.train}, data.vocab, data.lexicon,
                  model);
  write_json(fs::path(f.out_dir) / "metrics.json", run_to_json(run));
  finish_manifest(manifest);
  std::cout << "dev F1 " << run.final_dev.f1 << " (boundary F1 " << run.final_dev.boundary_f1
            << ", best epoch " << run.training.best_epoch << ")\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_path,
             const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto corpus = load_corpus(corpus_path);
  const Metrics m = evaluate(*ck.model, ck.vocab, corpus);
  const nlohmann::json j = metrics_to_json(m);
  fs::create_directories(out_dir);
  write_json(fs::path(out_dir) / "eval_metrics.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const CommonFlags& f, const std::string& seeds_text) {
  const ExperimentConfig cfg = resolve_config(f);
  const auto seeds = parse_seed_list(seeds_text);
  const ExperimentData data = load_data(f, cfg);
  const fs::path manifest = write_manifest("ablate", f, cfg, {{"seeds", seeds}});
  const AblationTable table = run_ablation(data, cfg.model, cfg.train, seeds, f.jobs);
  const std::string text = ablation_to_text(table);
  write_json(fs::path(f.out_dir) / "ablation.json", ablation_to_json(table));
  write_text(fs::path(f.out_dir) / "ablation.txt", text);
  finish_manifest(manifest);
  std::cout << text;
  return 0;
}

int cmd_sweep_w(const CommonFlags& f, const std::vector<double>& grid) {
  const ExperimentConfig cfg = resolve_config(f);
  const auto values = grid.empty() ? default_w_grid() : grid;
  const ExperimentData data = load_data(f, cfg);
  const fs::path manifest = write_manifest("sweep-w", f, cfg, {{"w_grid", values}});
  const auto runs = sweep_w(data, cfg.model, cfg.train, values, f.jobs);
  const std::string text = sweep_to_text(runs);
  write_json(fs::path(f.out_dir) / "sweep_w.json", sweep_to_json(runs));
  write_text(fs::path(f.out_dir) / "sweep_w.txt", text);
  finish_manifest(manifest);
  std::cout << text;
  return 0;
}

int cmd_grad_check(std::uint64_t seed, int d_h) {
  const GradSuiteResult r = run_gradient_suite(seed, d_h);
  for (const auto& g : r.groups) {
    std::printf("%-14s coords=%-4zu max_rel_error=%.3e\n", g.group.c_str(), g.coordinates,
                g.max_rel_error);
  }
  std::printf("max relative error %.3e\n", r.max_rel_error);
  return r.max_rel_error <= 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-to-sequence NER with relation and type auxiliary tasks"};
  app.require_subcommand(1);

  SynthConfig synth;
  int sentences = 2200;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus, type names and lexicon");
  gen->add_option("--sentences", sentences, "number of sentences")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "data seed");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--n-types", synth.n_types, "entity types");
  auto* flat_opt = gen->add_option("--flat-rate", synth.flat_rate, "share of flat sentences");
  auto* nested_opt =
      gen->add_option("--nested-rate", synth.nested_rate, "share of nested sentences");
  auto* disc_opt = gen->add_option("--discontinuous-rate", synth.discontinuous_rate,
                                   "share of discontinuous sentences");
  gen->add_option("--trigger-rate", synth.trigger_rate, "probability of a type trigger word");
  gen->add_option("--ambiguity-rate", synth.ambiguity_rate,
                  "probability a filler slot reuses an entity word");
  gen->add_option("--min-length", synth.min_length, "minimum sentence length");
  gen->add_option("--max-length", synth.max_length, "maximum sentence length");
  gen->add_option("--filler-vocab", synth.filler_vocab, "filler word count");
  gen->add_option("--entity-words", synth.entity_words_per_type, "entity words per type");

  CommonFlags train_flags, ablate_flags, sweep_flags;
  auto* train_cmd = app.add_subcommand("train", "train one model");
  add_common(train_cmd, train_flags, true);
  train_cmd->add_option("--dev", train_flags.dev_path, "dev corpus (default: split the corpus)");

  std::string eval_checkpoint, eval_corpus, eval_out = ".";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "model.ckpt from train")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "JSONL corpus")->required();
  eval_cmd->add_option("--out", eval_out, "output directory");

  std::string seeds_text = "1,2,3";
  auto* ablate_cmd = app.add_subcommand("ablate", "train the four component configurations");
  add_common(ablate_cmd, ablate_flags, true);
  ablate_cmd->add_option("--dev", ablate_flags.dev_path, "dev corpus (default: split the corpus)");
  ablate_cmd->add_option("--seeds", seeds_text, "comma separated run seeds");

  std::vector<double> w_grid;
  auto* sweep_cmd = app.add_subcommand("sweep-w", "train across relation loss weights");
  add_common(sweep_cmd, sweep_flags, true);
  sweep_cmd->add_option("--dev", sweep_flags.dev_path, "dev corpus (default: split the corpus)");
  sweep_cmd->add_option("--w-grid", w_grid, "weights (default 0.1 .. 0.9)")->delimiter(',');

  std::uint64_t grad_seed = 1;
  int grad_dh = 8;
  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference check of every parameter group");
  grad_cmd->add_option("--seed", grad_seed, "init seed");
  grad_cmd->add_option("--d-h", grad_dh, "hidden size")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      fit_default_rates(synth, flat_opt->count() > 0, nested_opt->count() > 0,
                        disc_opt->count() > 0);
      return cmd_gen_data(synth, sentences, gen_seed, gen_out);
    }
    if (*train_cmd) return cmd_train(train_flags);
    if (*eval_cmd) return cmd_eval(eval_checkpoint, eval_corpus, eval_out);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, seeds_text);
    if (*sweep_cmd) return cmd_sweep_w(sweep_flags, w_grid);
    if (*grad_cmd) return cmd_grad_check(grad_seed, grad_dh);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

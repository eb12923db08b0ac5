#include "mtner/config.h"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace mtner {

std::string format_double(double value) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

#define INT_FIELD(name, path)                                                           \
  Field{name, [](const ExperimentConfig& c) { return std::to_string(c.path); },        \
        [](ExperimentConfig& c, const std::string& v) {                                 \
          c.path = static_cast<decltype(c.path)>(parse_int(name, v));                   \
        }}
#define DOUBLE_FIELD(name, path)                                                        \
  Field{name, [](const ExperimentConfig& c) { return format_double(c.path); },         \
        [](ExperimentConfig& c, const std::string& v) { c.path = parse_double(name, v); }}
#define BOOL_FIELD(name, path)                                                          \
  Field{name, [](const ExperimentConfig& c) { return std::string(c.path ? "true" : "false"); }, \
        [](ExperimentConfig& c, const std::string& v) { c.path = parse_bool(name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      INT_FIELD("d_h", model.d_h),
      INT_FIELD("n_layers_enc", model.n_layers_enc),
      INT_FIELD("n_layers_dec", model.n_layers_dec),
      INT_FIELD("n_heads", model.n_heads),
      INT_FIELD("d_ff", model.d_ff),
      INT_FIELD("d_rel", model.d_rel),
      INT_FIELD("conv_kernel", model.conv_kernel),
      INT_FIELD("d_down", model.d_down),
      INT_FIELD("d_up", model.d_up),
      INT_FIELD("n_types", model.n_types),
      INT_FIELD("vocab_size", model.vocab_size),
      DOUBLE_FIELD("eps_ln", model.eps_ln),
      BOOL_FIELD("use_rp", model.use_rp),
      BOOL_FIELD("use_tra", model.use_tra),
      BOOL_FIELD("use_eta", model.use_eta),
      Field{"type_activation",
            [](const ExperimentConfig& c) {
              switch (c.model.type_activation) {
                case Activation::kTanh: return std::string("tanh");
                case Activation::kRelu: return std::string("relu");
                case Activation::kIdentity: return std::string("identity");
              }
              return std::string("tanh");
            },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "tanh") c.model.type_activation = Activation::kTanh;
              else if (v == "relu") c.model.type_activation = Activation::kRelu;
              else if (v == "identity") c.model.type_activation = Activation::kIdentity;
              else throw ConfigError("config: type_activation must be tanh, relu or identity");
            }},
      Field{"phrase_weighting",
            [](const ExperimentConfig& c) {
              return std::string(c.model.phrase_weighting == PhraseWeighting::kFrequency
                                     ? "frequency" : "uniform");
            },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "frequency") c.model.phrase_weighting = PhraseWeighting::kFrequency;
              else if (v == "uniform") c.model.phrase_weighting = PhraseWeighting::kUniform;
              else throw ConfigError("config: phrase_weighting must be frequency or uniform");
            }},
      BOOL_FIELD("freeze_type_embeddings", model.freeze_type_embeddings),
      BOOL_FIELD("source_input_from_encoder", model.source_input_from_encoder),
      DOUBLE_FIELD("auxiliary_score_offset", model.auxiliary_score_offset),
      DOUBLE_FIELD("w", train.w),
      DOUBLE_FIELD("alpha", train.alpha),
      DOUBLE_FIELD("tau", train.tau),
      DOUBLE_FIELD("lr", train.lr),
      INT_FIELD("epochs", train.epochs),
      INT_FIELD("batch_size", train.batch_size),
      INT_FIELD("seed", train.seed),
      Field{"optimizer",
            [](const ExperimentConfig& c) {
              return std::string(c.train.optimizer == OptimizerKind::kSgd ? "sgd" : "adamw");
            },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "sgd") c.train.optimizer = OptimizerKind::kSgd;
              else if (v == "adamw") c.train.optimizer = OptimizerKind::kAdamW;
              else throw ConfigError("config: optimizer must be sgd or adamw");
            }},
      DOUBLE_FIELD("weight_decay", train.weight_decay),
      DOUBLE_FIELD("beta1", train.beta1),
      DOUBLE_FIELD("beta2", train.beta2),
      DOUBLE_FIELD("adam_eps", train.adam_eps),
      DOUBLE_FIELD("clip_norm", train.clip_norm),
      DOUBLE_FIELD("dev_fraction", train.dev_fraction),
      Field{"relation_reduction",
            [](const ExperimentConfig& c) {
              return std::string(c.train.relation_reduction == Reduction::kMean ? "mean" : "sum");
            },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "mean") c.train.relation_reduction = Reduction::kMean;
              else if (v == "sum") c.train.relation_reduction = Reduction::kSum;
              else throw ConfigError("config: relation_reduction must be mean or sum");
            }},
  };
  return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(config));
  return out;
}

std::string config_to_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, v] : config_entries(config)) out += k + "=" + v + "\n";
  return out;
}

nlohmann::json config_to_json(const ExperimentConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : config_entries(config)) j[k] = v;
  return j;
}

}  // namespace mtner

#include <algorithm>
#include <atomic>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "mtner/config.h"
#include "mtner/random.h"
#include "mtner/train_eval.h"

namespace mtner {

ExperimentData prepare_data(const std::vector<Sentence>& corpus, const TypeLexicon& lexicon,
                            double dev_fraction, std::uint64_t seed) {
  ExperimentData data;
  auto [train_set, dev_set] = split_corpus(corpus, dev_fraction, derive_seed(seed, "split"));
  data.train = std::move(train_set);
  data.dev = std::move(dev_set);
  data.vocab = build_vocab(corpus);
  data.lexicon = lexicon;
  return data;
}

RunResult run_experiment(const ExperimentData& data, ModelConfig model_config,
                         const TrainConfig& train_config, const std::string& run_id) {
  model_config.vocab_size = static_cast<int>(data.vocab.size());
  model_config.n_types = static_cast<int>(data.lexicon.entries.size());
  Seq2SeqNer model(model_config,
                   type_mixture(data.lexicon, data.vocab, model_config.phrase_weighting),
                   derive_seed(train_config.seed, "init"));
  RunResult run;
  run.run_id = run_id;
  run.model_config = model_config;
  run.train_config = train_config;
  run.training = train(model, data.vocab, data.train, data.dev, train_config);
  if (!data.dev.empty()) run.final_dev = evaluate(model, data.vocab, data.dev);
  return run;
}

void run_parallel(int count, int jobs, const std::function<void(int)>& task) {
  jobs = std::max(1, std::min(jobs, count));
  if (jobs == 1) {
    for (int i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (int j = 0; j < jobs; ++j) {
    workers.emplace_back([&]() {
      for (int i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationTable run_ablation(const ExperimentData& data, const ModelConfig& base_model,
                           const TrainConfig& base_train, const std::vector<std::uint64_t>& seeds,
                           int jobs) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  struct Arm {
    const char* name;
    bool rp, tra, eta;
  };
  const Arm arms[] = {{"Baseline", false, false, false},
                      {"+RP&TRA", true, true, false},
                      {"+RP&ETA", true, false, true},
                      {"+RP&TRA&ETA", true, true, true}};
  AblationTable table;
  for (const auto& arm : arms) {
    AblationRow row;
    row.name = arm.name;
    row.use_rp = arm.rp;
    row.use_tra = arm.tra;
    row.use_eta = arm.eta;
    row.runs.resize(seeds.size());
    table.rows.push_back(std::move(row));
  }
  const int n_seeds = static_cast<int>(seeds.size());
  run_parallel(4 * n_seeds, jobs, [&](int task) {
    AblationRow& row = table.rows[task / n_seeds];
    const std::uint64_t seed = seeds[task % n_seeds];
    ModelConfig mc = base_model;
    mc.use_rp = row.use_rp;
    mc.use_tra = row.use_tra;
    mc.use_eta = row.use_eta;
    TrainConfig tc = base_train;
    tc.seed = seed;
    row.runs[task % n_seeds] =
        run_experiment(data, mc, tc, row.name + std::string("/seed") + std::to_string(seed));
  });
  for (auto& row : table.rows) {
    std::vector<double> f1s;
    for (const auto& r : row.runs) f1s.push_back(r.final_dev.f1);
    row.median_dev_f1 = median(f1s);
  }
  return table;
}

std::vector<double> default_w_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

std::vector<RunResult> sweep_w(const ExperimentData& data, const ModelConfig& model_config,
                               const TrainConfig& base_train, const std::vector<double>& w_values,
                               int jobs) {
  if (w_values.empty()) throw std::invalid_argument("sweep_w: no w values");
  std::vector<RunResult> runs(w_values.size());
  run_parallel(static_cast<int>(w_values.size()), jobs, [&](int i) {
    TrainConfig tc = base_train;
    tc.w = w_values[i];
    runs[i] = run_experiment(data, model_config, tc, "w=" + format_double(w_values[i]));
  });
  return runs;
}

// ---------------------------------------------------------------------------
// Reporting

nlohmann::json metrics_to_json(const Metrics& m) {
  nlohmann::json j = {{"p", m.precision},
                      {"r", m.recall},
                      {"f1", m.f1},
                      {"boundary_p", m.boundary_precision},
                      {"boundary_r", m.boundary_recall},
                      {"boundary_f1", m.boundary_f1},
                      {"predicted", m.predicted},
                      {"gold", m.gold},
                      {"matched", m.matched},
                      {"boundary_matched", m.boundary_matched},
                      {"discarded_runs", m.discarded_runs}};
  j["relation_accuracy"] =
      m.relation_accuracy ? nlohmann::json(*m.relation_accuracy) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json run_to_json(const RunResult& run) {
  nlohmann::json per_epoch = nlohmann::json::array();
  for (const auto& e : run.training.epochs) {
    nlohmann::json je = {{"epoch", e.epoch},
                         {"loss", e.loss},
                         {"entity_loss", e.entity_loss},
                         {"relation_loss", e.relation_loss}};
    je["dev"] = e.dev ? metrics_to_json(*e.dev) : nlohmann::json(nullptr);
    per_epoch.push_back(std::move(je));
  }
  return {{"run_id", run.run_id},
          {"config", config_to_json({run.model_config, run.train_config})},
          {"per_epoch", per_epoch},
          {"best_epoch", run.training.best_epoch},
          {"final", metrics_to_json(run.final_dev)}};
}

nlohmann::json ablation_to_json(const AblationTable& table) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : row.runs) runs.push_back(run_to_json(r));
    out.push_back({{"name", row.name},
                   {"use_rp", row.use_rp},
                   {"use_tra", row.use_tra},
                   {"use_eta", row.use_eta},
                   {"median_dev_f1", row.median_dev_f1},
                   {"runs", runs}});
  }
  return out;
}

namespace {

std::string percent(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << 100.0 * v;
  return ss.str();
}

}  // namespace

std::string ablation_to_text(const AblationTable& table) {
  std::ostringstream out;
  out << std::left << std::setw(14) << "Model" << std::right << std::setw(9) << "P"
      << std::setw(9) << "R" << std::setw(9) << "F1" << std::setw(11) << "Bnd-F1"
      << std::setw(11) << "Rel-Acc" << std::setw(12) << "median-F1" << '\n';
  for (const auto& row : table.rows) {
    // Per-row figures use the run closest to the median F1.
    const RunResult* rep = &row.runs.front();
    for (const auto& r : row.runs) {
      if (std::abs(r.final_dev.f1 - row.median_dev_f1) <
          std::abs(rep->final_dev.f1 - row.median_dev_f1)) {
        rep = &r;
      }
    }
    const Metrics& m = rep->final_dev;
    out << std::left << std::setw(14) << row.name << std::right << std::setw(9)
        << percent(m.precision) << std::setw(9) << percent(m.recall) << std::setw(9)
        << percent(m.f1) << std::setw(11) << percent(m.boundary_f1) << std::setw(11)
        << (m.relation_accuracy ? percent(*m.relation_accuracy) : std::string("-"))
        << std::setw(12) << percent(row.median_dev_f1) << '\n';
  }
  return out.str();
}

nlohmann::json sweep_to_json(const std::vector<RunResult>& runs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json j = run_to_json(r);
    j["w"] = r.train_config.w;
    out.push_back(std::move(j));
  }
  return out;
}

std::string sweep_to_text(const std::vector<RunResult>& runs) {
  std::ostringstream out;
  out << std::setw(6) << "w" << std::setw(9) << "P" << std::setw(9) << "R" << std::setw(9)
      << "F1" << std::setw(11) << "Bnd-F1" << '\n';
  for (const auto& r : runs) {
    const Metrics& m = r.final_dev;
    out << std::setw(6) << format_double(r.train_config.w) << std::setw(9)
        << percent(m.precision) << std::setw(9) << percent(m.recall) << std::setw(9)
        << percent(m.f1) << std::setw(11) << percent(m.boundary_f1) << '\n';
  }
  return out.str();
}

}  // namespace mtner

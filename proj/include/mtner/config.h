#ifndef MTNER_CONFIG_H_
#define MTNER_CONFIG_H_

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mtner/model.h"
#include "mtner/train_eval.h"

namespace mtner {

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};

// key=value settings; '#' starts a comment. Unknown keys and malformed
// values raise ConfigError.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);
ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

// Every field in a fixed order, formatted so that parsing reproduces it.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& config);
std::string config_to_text(const ExperimentConfig& config);
nlohmann::json config_to_json(const ExperimentConfig& config);

std::string format_double(double value);

}  // namespace mtner

#endif  // MTNER_CONFIG_H_

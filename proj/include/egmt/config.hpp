#pragma once

#include "egmt/losses.hpp"
#include "egmt/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace egmt {

struct DataConfig {
  Index crop = 448;
  Index stride = 224;
  bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  Index epochs = 20;
  Index batch = 4;
  std::uint64_t seed = 0;
  Index checkpoint_every = 0;  // 0 keeps only the final checkpoint
  Index max_steps = 0;         // 0 runs every epoch
  bool multi_task = true;
  double clip_norm = 0.0;  // 0 disables clipping
  double tau = 1.0;
  bool class_weights_from_data = true;
  FusionLossConfig fusion;
  FocalConfig focal;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  bool operator==(const RunConfig&) const = default;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const RunConfig& c);

// Each overlays the keys present in `j` onto `base`; unknown keys are errors.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
DataConfig data_config_from_json(const nlohmann::json& j, DataConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Ablation names as used on the command line: ca, ta, cgha, mt, ti. Each disables a component.
void apply_ablation(RunConfig& cfg, const std::string& name);

}  // namespace egmt

#pragma once

#include "qatforge/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace qatforge {

/// Everything a CLI stage needs: topology, training settings, paths.
struct ExperimentConfig {
  std::string model = "lenet5";
  TrainConfig train;
  std::filesystem::path data_root;
  std::filesystem::path out_dir = "runs/default";
  /// Checkpoint a quantize/prune/compress/convert stage starts from.
  std::filesystem::path init;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Unknown keys are rejected so typos do not silently fall back to defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace qatforge

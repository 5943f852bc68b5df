#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tridet/trainer.hpp"

namespace tridet {

/// Scene counts for gen-data.
struct DataSizes {
  std::size_t base_train = 200;
  std::size_t base_test = 100;
  std::size_t incremental_train = 100;
  std::size_t test = 100;
  double cooccur = 0.5;
};

/// Everything a CLI run needs. Relative paths resolve against the working
/// directory; empty data/checkpoint dirs default to <out>/data and
/// <out>/checkpoints.
struct RunConfig {
  std::filesystem::path out_dir = "out";
  std::filesystem::path data_dir;
  std::filesystem::path checkpoint_dir;
  ClassSplit split{{1, 2, 3}, {4}};
  std::uint64_t seed = 0;
  DataSizes data;
  Schedule base_schedule{40, 2, 1e-2, 0.1, 0, 0.9};
  TrainConfig incremental;
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::vector<std::pair<double, double>> threshold_sweep;

  RunConfig();
  void validate() const;
  std::filesystem::path resolved_data_dir() const;
  std::filesystem::path resolved_checkpoint_dir() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unknown keys and ill-typed values raise ConfigError naming the key.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const RunConfig& config);

}  // namespace tridet

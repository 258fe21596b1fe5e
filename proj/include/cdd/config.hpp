#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdd/datagen.hpp"
#include "cdd/denoiser.hpp"
#include "cdd/schedule.hpp"
#include "cdd/trainer.hpp"

namespace cdd {

// Flat dotted-key configuration. Every key has a declared type and default;
// a key that is not declared is a ConfigError wherever it appears.
class ConfigMap {
 public:
  ConfigMap();  // all defaults

  // Loads a YAML document of nested maps; nested keys become dotted keys.
  static ConfigMap from_yaml(const std::string& text);
  static ConfigMap from_file(const std::filesystem::path& path);

  // "key=value" override.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& raw(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  // Keys in declaration order with their current text values.
  std::vector<std::pair<std::string, std::string>> entries() const;
  // Typed JSON object with nested sections.
  std::string to_json() const;
  // YAML document that loads back to the same map.
  std::string to_yaml() const;

 private:
  std::map<std::string, std::string> values_;
};

// Declared keys, in documentation order.
const std::vector<std::string>& config_keys();

struct RunConfig {
  std::uint64_t seed = 0;
  TaskConfig task;
  ScheduleConfig schedule;
  DenoiserConfig model;
  LoraConfig lora;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::string data_dir;
  TrainConfig pretrain;
  TrainConfig finetune;
  double shift_weight = 0.5;
  std::size_t finetune_n_train = 0;
  std::string base_checkpoint;
  std::size_t eval_n_per_condition = 0;
  std::size_t sample_n = 0;
  int sample_cond = -1;
};

// Builds and validates the typed run configuration.
RunConfig resolve(const ConfigMap& map);

}  // namespace cdd

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdd/denoiser.hpp"
#include "cdd/schedule.hpp"

namespace cdd {

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct BaseRef {
  std::string path;
  std::string sha256;  // of the referenced base.bin
};

// Directory layout:
//   manifest.json   schema, model config, config hash, section tables, hashes
//   base.bin        frozen or pretrained weights
//   adapters.bin    LoRA factors (present when adapters are attached)
//   optimizer.bin   first and second moments, named "m/<param>" and "v/<param>"
// Binary files are raw little-endian float64 in section order.
struct Checkpoint {
  DenoiserConfig model_config;
  ScheduleConfig schedule;
  std::optional<LoraConfig> lora;
  std::vector<StoredTensor> base;
  std::vector<StoredTensor> adapters;
  std::vector<StoredTensor> optimizer;
  std::uint64_t optimizer_steps = 0;
  int epoch = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::string train_config_json = "{}";
  std::optional<BaseRef> base_ref;

  std::string config_hash() const;
};

std::string config_hash(const DenoiserConfig& cfg);

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
// Verifies section sizes and file digests; IoError on any mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::vector<StoredTensor> store(const std::vector<NamedTensor>& tensors);

// Rebuilds the model, attaching adapters when the checkpoint has them.
Denoiser restore_model(const Checkpoint& ckpt);

}  // namespace cdd

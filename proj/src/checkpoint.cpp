#include "cdd/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

#include "cdd/errors.hpp"
#include "cdd/hash.hpp"
#include "cdd/io.hpp"

namespace cdd {

namespace {

constexpr int kCheckpointSchema = 1;

using Json = nlohmann::ordered_json;

std::string pack(const std::vector<StoredTensor>& tensors, Json& table) {
  std::string bytes;
  std::uint64_t offset = 0;
  table = Json::array();
  for (const StoredTensor& t : tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw UsageError("checkpoint: tensor '" + t.name + "' shape does not match data");
    }
    for (double v : t.values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char buf[8];
      std::memcpy(buf, &bits, 8);
      bytes.append(buf, 8);
    }
    table.push_back(Json{{"name", t.name},
                         {"shape", t.shape},
                         {"offset", offset},
                         {"count", t.values.size()}});
    offset += t.values.size();
  }
  return bytes;
}

std::vector<StoredTensor> unpack(const std::string& bytes, const nlohmann::json& table,
                                 const std::string& file) {
  std::vector<StoredTensor> out;
  const std::size_t total = bytes.size() / 8;
  if (bytes.size() % 8 != 0) throw IoError("checkpoint: " + file + " is truncated");
  for (const auto& entry : table) {
    StoredTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (count != shape_numel(t.shape) || offset + count > total) {
      throw IoError("checkpoint: section '" + t.name + "' out of bounds in " + file);
    }
    t.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + 8 * (offset + i), 8);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      t.values[i] = std::bit_cast<double>(bits);
    }
    out.push_back(std::move(t));
  }
  return out;
}

Json model_json(const DenoiserConfig& c) {
  return Json{{"K", c.K},           {"T", c.T},
              {"D", c.D},           {"d_model", c.d_model},
              {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
              {"d_cond", c.d_cond}, {"n_conditions", c.n_conditions},
              {"d_ff", c.d_ff}};
}

DenoiserConfig model_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.K = j.at("K");
  c.T = j.at("T");
  c.D = j.at("D");
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_cond = j.at("d_cond");
  c.n_conditions = j.at("n_conditions");
  c.d_ff = j.at("d_ff");
  return c;
}

}  // namespace

std::string config_hash(const DenoiserConfig& cfg) { return sha256_hex(cfg.canonical()); }

std::string Checkpoint::config_hash() const { return cdd::config_hash(model_config); }

std::vector<StoredTensor> store(const std::vector<NamedTensor>& tensors) {
  std::vector<StoredTensor> out;
  for (const NamedTensor& nt : tensors) {
    const auto d = nt.tensor.data();
    out.push_back({nt.name, nt.tensor.shape(), {d.begin(), d.end()}});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  ensure_directory(dir);
  Json m;
  m["schema_version"] = kCheckpointSchema;
  m["byte_order"] = "little";
  m["dtype"] = "f64";
  m["model_config"] = model_json(ckpt.model_config);
  m["config_hash"] = ckpt.config_hash();
  m["schedule"] = Json{{"K", ckpt.schedule.K},
                       {"T", ckpt.schedule.T},
                       {"terminal_mask_mass", ckpt.schedule.terminal_mask_mass},
                       {"terminal_uniform_mass", ckpt.schedule.terminal_uniform_mass}};
  if (ckpt.lora) {
    m["lora"] = Json{{"r", ckpt.lora->r},
                     {"alpha", ckpt.lora->alpha},
                     {"targets", to_string(ckpt.lora->targets)}};
  } else {
    m["lora"] = nullptr;
  }
  Json sections;
  const std::pair<const char*, const std::vector<StoredTensor>*> parts[] = {
      {"base", &ckpt.base}, {"adapters", &ckpt.adapters}, {"optimizer", &ckpt.optimizer}};
  for (const auto& [label, tensors] : parts) {
    if (tensors->empty() && std::string(label) != "base") continue;
    Json table;
    const std::string bytes = pack(*tensors, table);
    const std::string file = std::string(label) + ".bin";
    write_file(dir / file, bytes);
    sections[label] = Json{{"file", file}, {"sha256", sha256_hex(bytes)}, {"tensors", table}};
  }
  m["sections"] = sections;
  if (ckpt.base_ref) {
    m["base_ref"] = Json{{"path", ckpt.base_ref->path}, {"sha256", ckpt.base_ref->sha256}};
  }
  m["optimizer_steps"] = ckpt.optimizer_steps;
  m["epoch"] = ckpt.epoch;
  m["step"] = ckpt.step;
  m["rng_state"] = ckpt.rng_state;
  m["train_config"] = Json::parse(ckpt.train_config_json);
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const std::string text = read_file(dir / "manifest.json");
  Checkpoint ckpt;
  try {
    const auto m = nlohmann::json::parse(text);
    if (m.at("schema_version").get<int>() != kCheckpointSchema) {
      throw IoError("checkpoint: unsupported schema version in " + dir.string());
    }
    if (m.at("byte_order") != "little" || m.at("dtype") != "f64") {
      throw IoError("checkpoint: unsupported encoding in " + dir.string());
    }
    ckpt.model_config = model_from_json(m.at("model_config"));
    ckpt.model_config.validate();
    if (m.at("config_hash").get<std::string>() != ckpt.config_hash()) {
      throw IoError("checkpoint: config hash does not match model_config in " +
                    dir.string());
    }
    const auto& sc = m.at("schedule");
    ckpt.schedule.K = sc.at("K");
    ckpt.schedule.T = sc.at("T");
    ckpt.schedule.terminal_mask_mass = sc.at("terminal_mask_mass");
    ckpt.schedule.terminal_uniform_mass = sc.at("terminal_uniform_mass");
    ckpt.schedule.validate();
    if (ckpt.schedule.K != ckpt.model_config.K || ckpt.schedule.T != ckpt.model_config.T) {
      throw IoError("checkpoint: schedule (K, T) disagrees with the model in " + dir.string());
    }
    if (!m.at("lora").is_null()) {
      LoraConfig l;
      l.r = m["lora"].at("r");
      l.alpha = m["lora"].at("alpha");
      l.targets = parse_lora_targets(m["lora"].at("targets").get<std::string>());
      ckpt.lora = l;
    }
    for (auto it = m.at("sections").begin(); it != m.at("sections").end(); ++it) {
      const std::string file = it->at("file").get<std::string>();
      const std::string bytes = read_file(dir / file);
      if (sha256_hex(bytes) != it->at("sha256").get<std::string>()) {
        throw IoError("checkpoint: digest mismatch for " + (dir / file).string());
      }
      auto tensors = unpack(bytes, it->at("tensors"), file);
      if (it.key() == "base") {
        ckpt.base = std::move(tensors);
      } else if (it.key() == "adapters") {
        ckpt.adapters = std::move(tensors);
      } else if (it.key() == "optimizer") {
        ckpt.optimizer = std::move(tensors);
      } else {
        throw IoError("checkpoint: unknown section '" + it.key() + "'");
      }
    }
    if (m.contains("base_ref")) {
      ckpt.base_ref = BaseRef{m["base_ref"].at("path"), m["base_ref"].at("sha256")};
    }
    ckpt.optimizer_steps = m.at("optimizer_steps");
    ckpt.epoch = m.at("epoch");
    ckpt.step = m.at("step");
    ckpt.rng_state = m.at("rng_state");
    ckpt.train_config_json = m.at("train_config").dump();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (ckpt.lora && ckpt.adapters.empty()) {
    throw IoError("checkpoint: adapters declared but missing in " + dir.string());
  }
  return ckpt;
}

Denoiser restore_model(const Checkpoint& ckpt) {
  Rng init(0);
  Denoiser model(ckpt.model_config, init);
  const auto expected = model.base_parameters();
  if (expected.size() != ckpt.base.size()) {
    throw IoError("checkpoint: base tensor count does not match the model");
  }
  for (const StoredTensor& t : ckpt.base) model.assign(t.name, t.values);
  if (ckpt.lora) {
    model.attach_lora(*ckpt.lora, init);
    if (model.lora_parameters().size() != ckpt.adapters.size()) {
      throw IoError("checkpoint: adapter tensor count does not match the config");
    }
    for (const StoredTensor& t : ckpt.adapters) model.assign(t.name, t.values);
  }
  return model;
}

}  // namespace cdd

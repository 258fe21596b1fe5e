#include "cdd/config.hpp"

#include <charconv>
#include <limits>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "cdd/errors.hpp"
#include "cdd/io.hpp"

namespace cdd {

namespace {

enum class Kind { integer, unsigned64, real, optional_real, boolean, text };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;
};

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"seed", Kind::unsigned64, "0"},
      {"task.C", Kind::integer, "4"},
      {"task.K", Kind::integer, "8"},
      {"task.D", Kind::integer, "4"},
      {"task.concentration", Kind::real, "0.9"},
      {"task.min_condition_tv", Kind::real, "0.3"},
      {"schedule.T", Kind::integer, "10"},
      {"schedule.mask_mass", Kind::real, "0.9"},
      {"schedule.uniform_mass", Kind::real, "0.0999"},
      {"model.d_model", Kind::integer, "32"},
      {"model.n_layers", Kind::integer, "2"},
      {"model.n_heads", Kind::integer, "4"},
      {"model.d_cond", Kind::integer, "16"},
      {"model.d_ff", Kind::integer, "0"},
      {"lora.r", Kind::integer, "8"},
      {"lora.alpha", Kind::real, "16"},
      {"lora.targets", Kind::text, "q,k,v,p"},
      {"data.n_train", Kind::integer, "20000"},
      {"data.n_val", Kind::integer, "2000"},
      {"data.dir", Kind::text, ""},
      {"train.epochs", Kind::integer, "20"},
      {"train.batch_size", Kind::integer, "32"},
      {"train.learning_rate", Kind::optional_real, ""},
      {"train.weight_decay", Kind::real, "0"},
      {"train.lr_schedule", Kind::text, "constant"},
      {"finetune.phase", Kind::text, "finetune_lora_cdcd"},
      {"finetune.epochs", Kind::integer, "10"},
      {"finetune.batch_size", Kind::integer, "32"},
      {"finetune.learning_rate", Kind::optional_real, ""},
      {"finetune.weight_decay", Kind::real, "0"},
      {"finetune.lr_schedule", Kind::text, "constant"},
      {"finetune.lambda", Kind::real, "5e-5"},
      {"finetune.N", Kind::integer, "10"},
      {"finetune.clamp_negative", Kind::boolean, "false"},
      {"finetune.clamp_max", Kind::real, "1000"},
      {"finetune.shift_weight", Kind::real, "0.5"},
      {"finetune.n_train", Kind::integer, "2000"},
      {"finetune.base_checkpoint", Kind::text, ""},
      {"eval.n_per_condition", Kind::integer, "2000"},
      {"sample.n", Kind::integer, "100"},
      {"sample.cond", Kind::integer, "-1"},
  };
  return keys;
}

const KeySpec& spec_for(const std::string& key) {
  for (const KeySpec& k : schema())
    if (key == k.key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

void check_value(const KeySpec& spec, const std::string& value) {
  switch (spec.kind) {
    case Kind::integer: parse_integer<std::int64_t>(spec.key, value); break;
    case Kind::unsigned64: parse_integer<std::uint64_t>(spec.key, value); break;
    case Kind::real: parse_real(spec.key, value); break;
    case Kind::optional_real:
      if (!value.empty()) parse_real(spec.key, value);
      break;
    case Kind::boolean: parse_bool(spec.key, value); break;
    case Kind::text: break;
  }
}

void flatten(const YAML::Node& node, const std::string& prefix, ConfigMap& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string k = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? k : prefix + "." + k, out);
    }
    return;
  }
  if (prefix.empty()) throw ConfigError("config: top level must be a mapping");
  if (node.IsSequence()) {
    std::string joined;
    for (std::size_t i = 0; i < node.size(); ++i) {
      if (!node[i].IsScalar()) throw ConfigError("config key '" + prefix + "': nested list");
      if (i) joined += ',';
      joined += node[i].Scalar();
    }
    out.set(prefix, joined);
  } else if (node.IsNull()) {
    out.set(prefix, "");
  } else {
    out.set(prefix, node.Scalar());
  }
}

std::size_t non_negative(const ConfigMap& m, const std::string& key) {
  const auto v = m.get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

int small_int(const ConfigMap& m, const std::string& key) {
  const auto v = m.get_int(key);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError("config key '" + key + "' out of range");
  }
  return static_cast<int>(v);
}

TrainConfig train_section(const ConfigMap& m, const std::string& section) {
  TrainConfig t;
  t.epochs = small_int(m, section + ".epochs");
  t.batch_size = small_int(m, section + ".batch_size");
  if (!m.raw(section + ".learning_rate").empty()) {
    t.learning_rate = m.get_double(section + ".learning_rate");
  }
  t.weight_decay = m.get_double(section + ".weight_decay");
  t.lr_schedule = parse_lr_schedule(m.get_string(section + ".lr_schedule"));
  t.seed = m.get_u64("seed");
  return t;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const KeySpec& k : schema()) out.emplace_back(k.key);
    return out;
  }();
  return keys;
}

ConfigMap::ConfigMap() {
  for (const KeySpec& k : schema()) values_[k.key] = k.fallback;
}

ConfigMap ConfigMap::from_yaml(const std::string& text) {
  ConfigMap m;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: invalid YAML: ") + e.what());
  }
  if (root.IsNull()) return m;
  flatten(root, "", m);
  return m;
}

ConfigMap ConfigMap::from_file(const std::filesystem::path& path) {
  return from_yaml(read_file(path));
}

void ConfigMap::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void ConfigMap::set(const std::string& key, const std::string& value) {
  const KeySpec& spec = spec_for(key);
  check_value(spec, value);
  values_[key] = value;
}

const std::string& ConfigMap::raw(const std::string& key) const {
  spec_for(key);
  return values_.at(key);
}

std::int64_t ConfigMap::get_int(const std::string& key) const {
  return parse_integer<std::int64_t>(key, raw(key));
}

std::uint64_t ConfigMap::get_u64(const std::string& key) const {
  return parse_integer<std::uint64_t>(key, raw(key));
}

double ConfigMap::get_double(const std::string& key) const { return parse_real(key, raw(key)); }

bool ConfigMap::get_bool(const std::string& key) const { return parse_bool(key, raw(key)); }

const std::string& ConfigMap::get_string(const std::string& key) const { return raw(key); }

std::vector<std::pair<std::string, std::string>> ConfigMap::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const KeySpec& k : schema()) out.emplace_back(k.key, values_.at(k.key));
  return out;
}

std::string ConfigMap::to_json() const {
  nlohmann::ordered_json root = nlohmann::ordered_json::object();
  for (const KeySpec& k : schema()) {
    const std::string key = k.key;
    const std::string& v = values_.at(key);
    nlohmann::ordered_json value;
    switch (k.kind) {
      case Kind::integer: value = get_int(key); break;
      case Kind::unsigned64: value = get_u64(key); break;
      case Kind::real: value = get_double(key); break;
      case Kind::optional_real:
        value = v.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(get_double(key));
        break;
      case Kind::boolean: value = get_bool(key); break;
      case Kind::text: value = v; break;
    }
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      root[key] = value;
    } else {
      root[key.substr(0, dot)][key.substr(dot + 1)] = value;
    }
  }
  return root.dump(2);
}

std::string ConfigMap::to_yaml() const {
  YAML::Emitter out;
  out << YAML::BeginMap;
  std::string section;
  for (const KeySpec& k : schema()) {
    const std::string key = k.key;
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out << YAML::EndMap;
      if (!sec.empty()) out << YAML::Key << sec << YAML::Value << YAML::BeginMap;
      section = sec;
    }
    const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    const std::string& v = values_.at(key);
    out << YAML::Key << leaf << YAML::Value;
    if (v.empty() && k.kind == Kind::optional_real) {
      out << YAML::Null;
    } else if (k.kind == Kind::text) {
      out << YAML::DoubleQuoted << v;
    } else {
      out << v;
    }
  }
  if (!section.empty()) out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

RunConfig resolve(const ConfigMap& m) {
  RunConfig rc;
  rc.seed = m.get_u64("seed");

  rc.task.C = small_int(m, "task.C");
  rc.task.K = small_int(m, "task.K");
  rc.task.D = small_int(m, "task.D");
  rc.task.concentration = m.get_double("task.concentration");
  rc.task.min_condition_tv = m.get_double("task.min_condition_tv");
  rc.task.validate();

  rc.schedule.K = rc.task.K;
  rc.schedule.T = small_int(m, "schedule.T");
  rc.schedule.terminal_mask_mass = m.get_double("schedule.mask_mass");
  rc.schedule.terminal_uniform_mass = m.get_double("schedule.uniform_mass");
  rc.schedule.validate();

  rc.model.K = rc.task.K;
  rc.model.T = rc.schedule.T;
  rc.model.D = rc.task.D;
  rc.model.n_conditions = rc.task.C;
  rc.model.d_model = small_int(m, "model.d_model");
  rc.model.n_layers = small_int(m, "model.n_layers");
  rc.model.n_heads = small_int(m, "model.n_heads");
  rc.model.d_cond = small_int(m, "model.d_cond");
  rc.model.d_ff = small_int(m, "model.d_ff");
  rc.model.validate();

  rc.lora.r = small_int(m, "lora.r");
  rc.lora.alpha = m.get_double("lora.alpha");
  rc.lora.targets = parse_lora_targets(m.get_string("lora.targets"));
  rc.lora.validate(rc.model.d_model);

  rc.n_train = non_negative(m, "data.n_train");
  rc.n_val = non_negative(m, "data.n_val");
  rc.data_dir = m.get_string("data.dir");

  rc.pretrain = train_section(m, "train");
  rc.pretrain.phase = Phase::pretrain;
  rc.pretrain.validate(rc.model.d_model);

  rc.finetune = train_section(m, "finetune");
  rc.finetune.phase = parse_phase(m.get_string("finetune.phase"));
  if (rc.finetune.phase == Phase::pretrain) {
    throw ConfigError("config key 'finetune.phase' must name a fine-tuning phase");
  }
  rc.finetune.lambda =
      rc.finetune.phase == Phase::finetune_lora_cdcd ? m.get_double("finetune.lambda") : 0.0;
  rc.finetune.N = small_int(m, "finetune.N");
  rc.finetune.clamp_negative = m.get_bool("finetune.clamp_negative");
  rc.finetune.clamp_max = m.get_double("finetune.clamp_max");
  rc.finetune.lora = rc.lora;
  rc.finetune.validate(rc.model.d_model);
  rc.shift_weight = m.get_double("finetune.shift_weight");
  if (!(rc.shift_weight >= 0.0 && rc.shift_weight <= 1.0)) {
    throw ConfigError("config key 'finetune.shift_weight' must lie in [0, 1]");
  }
  rc.finetune_n_train = non_negative(m, "finetune.n_train");
  rc.base_checkpoint = m.get_string("finetune.base_checkpoint");

  rc.eval_n_per_condition = non_negative(m, "eval.n_per_condition");
  rc.sample_n = non_negative(m, "sample.n");
  rc.sample_cond = small_int(m, "sample.cond");
  if (rc.sample_cond < -1 || rc.sample_cond >= rc.task.C) {
    throw ConfigError("config key 'sample.cond' must be -1 or a valid condition id");
  }
  return rc;
}

}  // namespace cdd

#include "cdd/datagen.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

constexpr int kTaskSchemaVersion = 1;

std::size_t usize(int v) { return static_cast<std::size_t>(v); }

std::size_t table_size(int K, int D) {
  std::size_t n = 1;
  for (int i = 0; i < D; ++i) {
    n *= usize(K);
    if (n > kOracleGuard) return kOracleGuard + 1;
  }
  return n;
}

void require_guard(int K, int D) {
  if (table_size(K, D) > kOracleGuard) {
    throw UsageError("oracle: K^D exceeds the enumeration guard of " +
                     std::to_string(kOracleGuard));
  }
}

std::vector<double> random_row(int K, double concentration, Rng& rng) {
  // Flat Dirichlet via normalized exponentials.
  std::vector<double> row(usize(K));
  double total = 0.0;
  for (double& v : row) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    v = -std::log(u);
    total += v;
  }
  for (double& v : row) v = (1.0 - concentration) * v / total;
  row[rng.below(usize(K))] += concentration;
  return row;
}

MarkovSpec random_chain(int K, double concentration, Rng& rng) {
  MarkovSpec spec;
  spec.initial = random_row(K, concentration, rng);
  for (int i = 0; i < K; ++i) {
    auto row = random_row(K, concentration, rng);
    spec.transition.insert(spec.transition.end(), row.begin(), row.end());
  }
  return spec;
}

double tv(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

void check_row(std::span<const double> row, const char* what) {
  double s = 0.0;
  for (double v : row) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string("task: negative or non-finite entry in ") + what);
    }
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) {
    throw ConfigError(std::string("task: ") + what + " row does not sum to 1");
  }
}

}  // namespace

void TaskConfig::validate() const {
  if (C < 1 || K < 2 || D < 1) throw ConfigError("task: need C >= 1, K >= 2, D >= 1");
  if (!(concentration >= 0.0 && concentration < 1.0)) {
    throw ConfigError("task: concentration must lie in [0, 1)");
  }
  if (!(min_condition_tv >= 0.0 && min_condition_tv < 1.0)) {
    throw ConfigError("task: min_condition_tv must lie in [0, 1)");
  }
}

void SyntheticTask::validate() const {
  if (C < 1 || K < 2 || D < 1) throw ConfigError("task: need C >= 1, K >= 2, D >= 1");
  if (conditions.size() != usize(C)) {
    throw ConfigError("task: expected " + std::to_string(C) + " condition chains");
  }
  for (const MarkovSpec& m : conditions) {
    if (m.initial.size() != usize(K) || m.transition.size() != usize(K * K)) {
      throw ConfigError("task: chain tables have the wrong size");
    }
    check_row(m.initial, "initial");
    for (int i = 0; i < K; ++i) {
      check_row(std::span<const double>(m.transition).subspan(usize(i * K), usize(K)),
                "transition");
    }
  }
}

SyntheticTask make_task(const TaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::derive(seed, "datagen.task");
  SyntheticTask task;
  task.C = cfg.C;
  task.K = cfg.K;
  task.D = cfg.D;
  task.seed = seed;
  const bool check = table_size(cfg.K, cfg.D) <= kOracleGuard && cfg.min_condition_tv > 0.0;
  std::vector<std::vector<double>> tables;
  for (int c = 0; c < cfg.C; ++c) {
    constexpr int kMaxAttempts = 1000;
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      MarkovSpec spec = random_chain(cfg.K, cfg.concentration, rng);
      if (!check) {
        task.conditions.push_back(std::move(spec));
        accepted = true;
        break;
      }
      task.conditions.push_back(spec);
      task.C = c + 1;
      auto table = oracle_distribution(task, c);
      bool ok = true;
      for (const auto& other : tables) ok = ok && tv(table, other) >= cfg.min_condition_tv;
      if (ok) {
        tables.push_back(std::move(table));
        accepted = true;
      } else {
        task.conditions.pop_back();
      }
    }
    if (!accepted) {
      throw ConfigError("task: could not reach min_condition_tv = " +
                        std::to_string(cfg.min_condition_tv));
    }
  }
  task.C = cfg.C;
  return task;
}

SyntheticTask shift_task(const SyntheticTask& task, Rng& rng, double weight,
                         double concentration) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    throw ConfigError("shift_task: weight must lie in [0, 1]");
  }
  SyntheticTask out = task;
  for (MarkovSpec& m : out.conditions) {
    const MarkovSpec fresh = random_chain(task.K, concentration, rng);
    if (weight == 0.0) continue;
    for (std::size_t i = 0; i < m.initial.size(); ++i)
      m.initial[i] = (1.0 - weight) * m.initial[i] + weight * fresh.initial[i];
    for (std::size_t i = 0; i < m.transition.size(); ++i)
      m.transition[i] = (1.0 - weight) * m.transition[i] + weight * fresh.transition[i];
  }
  return out;
}

namespace {

TokenSequence sample_sequence(const SyntheticTask& task, int cond, Rng& rng) {
  const MarkovSpec& m = task.conditions.at(usize(cond));
  TokenSequence seq;
  seq.tokens.resize(usize(task.D));
  seq.tokens[0] = static_cast<int>(rng.categorical(m.initial));
  for (std::size_t i = 1; i < usize(task.D); ++i) {
    const auto prev = usize(seq.tokens[i - 1]);
    seq.tokens[i] = static_cast<int>(rng.categorical(
        std::span<const double>(m.transition).subspan(prev * usize(task.K), usize(task.K))));
  }
  return seq;
}

}  // namespace

void validate_dataset(const SyntheticTask& task, const Dataset& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Record& r = data.records[i];
    if (r.cond < 0 || r.cond >= task.C) {
      throw ConfigError("dataset: record " + std::to_string(i) + " has condition out of range");
    }
    if (r.seq.size() != usize(task.D)) {
      throw ConfigError("dataset: record " + std::to_string(i) + " has length " +
                        std::to_string(r.seq.size()) + ", expected " + std::to_string(task.D));
    }
    for (int tok : r.seq.tokens) {
      if (tok < 0 || tok >= task.K) {
        throw ConfigError("dataset: record " + std::to_string(i) + " has token " +
                          std::to_string(tok) + " outside [0, K)");
      }
    }
  }
}

Dataset sample_dataset(const SyntheticTask& task, std::size_t n, Rng& rng, Split split) {
  if (n == 0) throw UsageError("sample_dataset: n must be >= 1");
  Dataset data;
  data.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.below(usize(task.C)));
    data.records.push_back({c, sample_sequence(task, c, rng), split});
  }
  return data;
}

Dataset sample_per_condition(const SyntheticTask& task, std::size_t n_per_condition,
                             Rng& rng, Split split) {
  Dataset data;
  for (int c = 0; c < task.C; ++c)
    for (std::size_t i = 0; i < n_per_condition; ++i)
      data.records.push_back({c, sample_sequence(task, c, rng), split});
  return data;
}

double sequence_probability(const SyntheticTask& task, int cond,
                            std::span<const int> tokens) {
  if (cond < 0 || cond >= task.C) throw UsageError("oracle: condition out of range");
  if (tokens.size() != usize(task.D)) throw UsageError("oracle: wrong sequence length");
  const MarkovSpec& m = task.conditions[usize(cond)];
  for (int tok : tokens) {
    if (tok < 0 || tok >= task.K) return 0.0;
  }
  double p = m.initial[usize(tokens[0])];
  for (std::size_t i = 1; i < tokens.size(); ++i)
    p *= m.transition[usize(tokens[i - 1]) * usize(task.K) + usize(tokens[i])];
  return p;
}

std::size_t sequence_index(std::span<const int> tokens, int K) {
  std::size_t idx = 0;
  for (int tok : tokens) idx = idx * usize(K) + usize(tok);
  return idx;
}

std::vector<int> sequence_from_index(std::size_t index, int K, int D) {
  std::vector<int> tokens(usize(D));
  for (int i = D - 1; i >= 0; --i) {
    tokens[usize(i)] = static_cast<int>(index % usize(K));
    index /= usize(K);
  }
  return tokens;
}

std::vector<double> oracle_distribution(const SyntheticTask& task, int cond) {
  require_guard(task.K, task.D);
  const std::size_t n = table_size(task.K, task.D);
  std::vector<double> table(n);
  for (std::size_t idx = 0; idx < n; ++idx) {
    table[idx] = sequence_probability(task, cond, sequence_from_index(idx, task.K, task.D));
  }
  return table;
}

OracleDenoiser::OracleDenoiser(const SyntheticTask& task, const NoiseSchedule& schedule)
    : task_(task), schedule_(schedule) {
  require_guard(task.K, task.D);
  if (schedule.K() != task.K) throw UsageError("oracle denoiser: K mismatch");
  for (int c = 0; c < task.C; ++c) tables_.push_back(oracle_distribution(task, c));
}

CategoricalField OracleDenoiser::belief(const TokenSequence& xt, int t, int cond) const {
  if (cond < 0 || cond >= task_.C) throw UsageError("oracle denoiser: bad condition");
  if (xt.size() != usize(task_.D)) throw UsageError("oracle denoiser: bad length");
  std::vector<int> key = xt.tokens;
  key.push_back(t);
  key.push_back(cond);
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  const auto K = usize(task_.K), D = usize(task_.D);
  // likelihood[i][x0] = q(x_t[i] | x0)
  std::vector<double> lik(D * K);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t a = 0; a < K; ++a)
      lik[i * K + a] = schedule_.marginal_prob(xt.tokens[i], static_cast<int>(a), t);
  CategoricalField out(D, K);
  const auto& table = tables_[usize(cond)];
  double z = 0.0;
  std::vector<int> x0(D, 0);
  for (std::size_t idx = 0; idx < table.size(); ++idx) {
    if (table[idx] == 0.0) continue;
    std::size_t rem = idx;
    for (std::size_t i = D; i-- > 0;) {
      x0[i] = static_cast<int>(rem % K);
      rem /= K;
    }
    double w = table[idx];
    for (std::size_t i = 0; i < D && w > 0.0; ++i) w *= lik[i * K + usize(x0[i])];
    if (w == 0.0) continue;
    z += w;
    for (std::size_t i = 0; i < D; ++i) out.probs[i * K + usize(x0[i])] += w;
  }
  if (!(z > 0.0)) {
    throw DegeneratePairError("oracle denoiser: observed state impossible under condition " +
                              std::to_string(cond));
  }
  for (double& v : out.probs) v /= z;
  std::lock_guard lock(mu_);
  cache_.emplace(std::move(key), out);
  return out;
}

std::vector<CategoricalField> OracleDenoiser::predict(std::span<const TokenSequence> xt,
                                                      int t,
                                                      std::span<const int> conds) const {
  if (xt.size() != conds.size()) throw UsageError("oracle denoiser: batch mismatch");
  std::vector<CategoricalField> out;
  out.reserve(xt.size());
  for (std::size_t b = 0; b < xt.size(); ++b) out.push_back(belief(xt[b], t, conds[b]));
  return out;
}

std::string task_to_json(const SyntheticTask& task) {
  nlohmann::ordered_json j;
  j["schema_version"] = kTaskSchemaVersion;
  j["kind"] = "markov_task";
  j["C"] = task.C;
  j["K"] = task.K;
  j["D"] = task.D;
  j["seed"] = task.seed;
  auto& conds = j["conditions"] = nlohmann::ordered_json::array();
  for (const MarkovSpec& m : task.conditions) {
    nlohmann::ordered_json c;
    c["initial"] = m.initial;
    c["transition"] = m.transition;
    conds.push_back(std::move(c));
  }
  return j.dump(2) + "\n";
}

SyntheticTask task_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task: invalid JSON: ") + e.what());
  }
  if (j.value("schema_version", 0) != kTaskSchemaVersion) {
    throw ConfigError("task: unsupported schema version");
  }
  SyntheticTask task;
  try {
    task.C = j.at("C").get<int>();
    task.K = j.at("K").get<int>();
    task.D = j.at("D").get<int>();
    task.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& c : j.at("conditions")) {
      task.conditions.push_back({c.at("initial").get<std::vector<double>>(),
                                 c.at("transition").get<std::vector<double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task: malformed document: ") + e.what());
  }
  task.validate();
  return task;
}

std::string dataset_to_jsonl(const Dataset& data) {
  std::ostringstream os;
  for (const Record& r : data.records) {
    os << "{\"cond\":" << r.cond << ",\"tokens\":[";
    for (std::size_t i = 0; i < r.seq.size(); ++i) {
      if (i) os << ',';
      os << r.seq.tokens[i];
    }
    os << "]}\n";
  }
  return os.str();
}

Dataset dataset_from_jsonl(const std::string& text) {
  Dataset data;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Record r;
      r.cond = j.at("cond").get<int>();
      r.seq.tokens = j.at("tokens").get<std::vector<int>>();
      data.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset: line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

}  // namespace cdd

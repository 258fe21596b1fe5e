#pragma once

#include <filesystem>
#include <string>

#include "cdd/datagen.hpp"
#include "cdd/denoiser.hpp"
#include "cdd/schedule.hpp"

namespace fixtures {

inline cdd::DenoiserConfig tiny_model() {
  cdd::DenoiserConfig c;
  c.K = 4;
  c.T = 4;
  c.D = 3;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_cond = 4;
  c.n_conditions = 2;
  return c;
}

inline cdd::ScheduleConfig tiny_schedule() {
  cdd::ScheduleConfig s;
  s.K = 4;
  s.T = 4;
  return s;
}

inline cdd::TaskConfig tiny_task() {
  cdd::TaskConfig t;
  t.C = 2;
  t.K = 4;
  t.D = 3;
  t.min_condition_tv = 0.2;
  return t;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("cdd_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures

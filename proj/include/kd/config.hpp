#pragma once

#include <json.hpp>

#include <string>

#include "kd/data.hpp"
#include "kd/model.hpp"
#include "kd/train.hpp"

namespace kd {

// Run configuration file (JSON): data paths, model configs, training
// hyperparameters, and per-command blocks. Parsed leniently — every field
// has the library default.
struct RunConfig {
  nlohmann::json raw;
  std::string run_dir = "run";
  TrainConfig train;
  ReferenceNetConfig teacher_model = default_teacher_config();
  ReferenceNetConfig student_model = default_student_config();
};

nlohmann::json load_json_file(const std::string& path);

RunConfig parse_run_config(const nlohmann::json& j);

// Dotted-path override, e.g. "train.loss.alpha=0.2"; the value is parsed
// as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

TrainConfig train_config_from_json(const nlohmann::json& j);
ReferenceNetConfig model_config_from_json(const nlohmann::json& j);
std::vector<SiteProfile> site_profiles_from_json(const nlohmann::json& j);

}  // namespace kd

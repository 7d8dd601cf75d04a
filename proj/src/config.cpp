#include "kd/config.hpp"

#include <fstream>

namespace kd {

using nlohmann::json;

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  return json::parse(in);
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.cyclic_step_size = j.value("cyclic_step_size", c.cyclic_step_size);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.input_hw.first = j.value("input_h", c.input_hw.first);
  c.input_hw.second = j.value("input_w", c.input_hw.second);
  const std::string norm = j.value("normalization", std::string("minmax"));
  if (norm == "minmax") {
    c.normalization = Normalization::kMinMax;
  } else if (norm == "zscore") {
    c.normalization = Normalization::kZScore;
  } else {
    throw std::invalid_argument("config: unknown normalization '" + norm + "'");
  }
  const std::string mode = j.value("weighting_mode", std::string("as_written"));
  if (mode == "as_written") {
    c.weighting_mode = WeightingMode::kAsWritten;
  } else if (mode == "inverse") {
    c.weighting_mode = WeightingMode::kInverse;
  } else {
    throw std::invalid_argument("config: unknown weighting_mode '" + mode + "'");
  }
  if (j.contains("loss")) {
    const json& lj = j.at("loss");
    c.loss_weights.alpha1 = lj.value("alpha1", c.loss_weights.alpha1);
    c.loss_weights.alpha2 = lj.value("alpha2", c.loss_weights.alpha2);
    c.loss_weights.alpha = lj.value("alpha", c.loss_weights.alpha);
    c.loss_weights.beta = lj.value("beta", c.loss_weights.beta);
    c.loss_weights.temperature = lj.value("temperature", c.loss_weights.temperature);
    c.loss_weights.kl_reversed = lj.value("kl_reversed", c.loss_weights.kl_reversed);
    c.loss_weights.kl_temperature_sq = lj.value("kl_temperature_sq", c.loss_weights.kl_temperature_sq);
  }
  if (j.contains("pairing"))
    for (const json& p : j.at("pairing"))
      c.pairing.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  c.validate();
  return c;
}

ReferenceNetConfig model_config_from_json(const json& j) {
  ReferenceNetConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.tap_stages = j.value("tap_stages", c.tap_stages);
  c.validate();
  return c;
}

std::vector<SiteProfile> site_profiles_from_json(const json& j) {
  std::vector<SiteProfile> out;
  for (const json& s : j) {
    SiteProfile p;
    p.intensity_offset = s.value("intensity_offset", p.intensity_offset);
    p.contrast = s.value("contrast", p.contrast);
    p.noise_sigma = s.value("noise_sigma", p.noise_sigma);
    p.blur_sigma = s.value("blur_sigma", p.blur_sigma);
    out.push_back(p);
  }
  return out;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  c.raw = j;
  c.run_dir = j.value("run_dir", c.run_dir);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("model")) {
    const json& mj = j.at("model");
    if (mj.contains("teacher")) c.teacher_model = model_config_from_json(mj.at("teacher"));
    if (mj.contains("student")) c.student_model = model_config_from_json(mj.at("student"));
  }
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw std::invalid_argument("override '" + assignment + "': empty key segment");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

}  // namespace kd

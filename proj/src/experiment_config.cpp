#include "gendistill/experiment_config.hpp"

#include <fstream>

#include "gendistill/errors.hpp"
#include "gendistill/rng.hpp"
#include "gendistill/shapes.hpp"

namespace gendistill {

namespace {

nlohmann::json encode_json(const EncodeMode& m) {
  return {{"variant", to_string(m.variant)}, {"t_encode", m.t_encode}, {"seed", m.seed}};
}

EncodeMode encode_from(const nlohmann::json& j) {
  EncodeMode m;
  m.variant = parse_encode_variant(j.at("variant").get<std::string>());
  j.at("t_encode").get_to(m.t_encode);
  j.at("seed").get_to(m.seed);
  return m;
}

nlohmann::json teacher_train_json(const TeacherTrainOptions& o) {
  return {{"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"lr", o.lr},
          {"weight_decay", o.weight_decay},
          {"seed", o.seed},
          {"holdout_fraction", o.holdout_fraction}};
}

TeacherTrainOptions teacher_train_from(const nlohmann::json& j) {
  TeacherTrainOptions o;
  j.at("epochs").get_to(o.epochs);
  j.at("batch_size").get_to(o.batch_size);
  j.at("lr").get_to(o.lr);
  j.at("weight_decay").get_to(o.weight_decay);
  j.at("seed").get_to(o.seed);
  j.at("holdout_fraction").get_to(o.holdout_fraction);
  return o;
}

nlohmann::json interpreter_train_json(const InterpreterTrainOptions& o) {
  return {{"epochs", o.epochs},           {"batch_size", o.batch_size},
          {"lr", o.lr},                   {"weight_decay", o.weight_decay},
          {"beta1", o.beta1},             {"beta2", o.beta2},
          {"warmup_epochs", o.warmup_epochs}, {"horizontal_flip", o.horizontal_flip},
          {"encode", encode_json(o.encode)}, {"seed", o.seed}};
}

InterpreterTrainOptions interpreter_train_from(const nlohmann::json& j) {
  InterpreterTrainOptions o;
  j.at("epochs").get_to(o.epochs);
  j.at("batch_size").get_to(o.batch_size);
  j.at("lr").get_to(o.lr);
  j.at("weight_decay").get_to(o.weight_decay);
  j.at("beta1").get_to(o.beta1);
  j.at("beta2").get_to(o.beta2);
  j.at("warmup_epochs").get_to(o.warmup_epochs);
  j.at("horizontal_flip").get_to(o.horizontal_flip);
  o.encode = encode_from(j.at("encode"));
  j.at("seed").get_to(o.seed);
  return o;
}

// Keys whose defaults are empty maps but accept any level key.
bool is_open_map(const std::string& path) {
  return path.size() >= 16 && path.compare(path.size() - 16, 16, "teacher_channels") == 0;
}

void merge_strict(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (is_open_map(here)) {
      base[key] = value;
      continue;
    }
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else {
      const bool numeric_ok = slot.is_number() && value.is_number();
      if (!numeric_ok && slot.type() != value.type()) {
        throw ConfigError("config key '" + here + "' has type " + value.type_name() + ", expected " +
                          slot.type_name());
      }
      slot = value;
    }
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (d.num_unlabeled < 1) throw ConfigError("dataset.num_unlabeled must be >= 1");
  if (d.num_labeled < 1 || d.num_test < 1) throw ConfigError("dataset.num_labeled and dataset.num_test must be >= 1");
  if (d.num_interpreter_labeled < 1 || d.num_interpreter_labeled > d.num_labeled) {
    throw ConfigError("dataset.num_interpreter_labeled must be in [1, num_labeled]");
  }
  if (d.resolution % 32 != 0 || d.resolution <= 0) throw ConfigError("dataset.resolution must be a multiple of 32");
  if (d.num_classes < 2 || d.num_classes > kShapeForms + 1) {
    throw ConfigError("dataset.num_classes must be in [2, " + std::to_string(kShapeForms + 1) + "]");
  }
  d.spec.validate();
  d.spec.encode.validate(teacher.model.diffusion_steps);
  interpreter.train.encode.validate(teacher.model.diffusion_steps);
  backbone.validate();
  const std::map<int, int64_t> placeholder{{2, 1}, {3, 1}, {4, 1}, {5, 1}};
  auto reg = regressor;
  if (reg.teacher_channels.empty()) reg.teacher_channels = placeholder;
  reg.validate_for_input({d.resolution, d.resolution});
  auto interp = interpreter.model;
  if (interp.teacher_channels.empty()) interp.teacher_channels = placeholder;
  interp.validate();
  distill.validate();
  run.pretrain.validate();
  run.finetune.validate();
  if (interpreter.model.num_classes != d.num_classes) {
    throw ConfigError("interpreter.model.num_classes must equal dataset.num_classes");
  }
  if (interpreter.train.warmup_epochs >= interpreter.train.epochs && interpreter.train.epochs > 0) {
    throw ConfigError("interpreter.train.warmup_epochs must be < interpreter.train.epochs");
  }
  parse_sweep_axis(run.sweep_axis);
  if (teacher.train.batch_size < 1) throw ConfigError("teacher.train.batch_size must be >= 1");
}

void ExperimentConfig::set_seed(uint64_t seed) {
  teacher.model.seed = derive_seed({seed, 1});
  teacher.train.seed = derive_seed({seed, 2});
  backbone.seed = derive_seed({seed, 3});
  regressor.seed = derive_seed({seed, 4});
  interpreter.model.seed = derive_seed({seed, 5});
  interpreter.train.seed = derive_seed({seed, 6});
  interpreter.train.encode.seed = derive_seed({seed, 7});
  dataset.spec.encode.seed = derive_seed({seed, 8});
  run.pretrain.seed = derive_seed({seed, 9});
  run.finetune.seed = derive_seed({seed, 10});
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["teacher"] = {{"model", c.teacher.model}, {"train", teacher_train_json(c.teacher.train)}};
  j["dataset"] = {{"num_unlabeled", c.dataset.num_unlabeled},
                  {"num_labeled", c.dataset.num_labeled},
                  {"num_interpreter_labeled", c.dataset.num_interpreter_labeled},
                  {"num_test", c.dataset.num_test},
                  {"num_classes", c.dataset.num_classes},
                  {"resolution", c.dataset.resolution},
                  {"seed", c.dataset.seed},
                  {"spec", c.dataset.spec}};
  j["backbone"] = c.backbone;
  j["regressor"] = c.regressor;
  j["interpreter"] = {{"model", c.interpreter.model}, {"train", interpreter_train_json(c.interpreter.train)}};
  j["distill"] = c.distill;
  j["run"] = {{"pretrain", c.run.pretrain},
              {"finetune", c.run.finetune},
              {"loss", to_string(c.run.loss)},
              {"sweep_axis", c.run.sweep_axis},
              {"sweep_values", c.run.sweep_values}};
  j["output_dir"] = c.output_dir;
  return j;
}

ExperimentConfig parse_experiment_config(const nlohmann::json& doc) {
  nlohmann::json merged = to_json(ExperimentConfig{});
  merge_strict(merged, doc, "");
  ExperimentConfig c;
  try {
    merged.at("teacher").at("model").get_to(c.teacher.model);
    c.teacher.train = teacher_train_from(merged.at("teacher").at("train"));
    const auto& d = merged.at("dataset");
    d.at("num_unlabeled").get_to(c.dataset.num_unlabeled);
    d.at("num_labeled").get_to(c.dataset.num_labeled);
    d.at("num_interpreter_labeled").get_to(c.dataset.num_interpreter_labeled);
    d.at("num_test").get_to(c.dataset.num_test);
    d.at("num_classes").get_to(c.dataset.num_classes);
    d.at("resolution").get_to(c.dataset.resolution);
    d.at("seed").get_to(c.dataset.seed);
    d.at("spec").get_to(c.dataset.spec);
    merged.at("backbone").get_to(c.backbone);
    merged.at("regressor").get_to(c.regressor);
    merged.at("interpreter").at("model").get_to(c.interpreter.model);
    c.interpreter.train = interpreter_train_from(merged.at("interpreter").at("train"));
    merged.at("distill").get_to(c.distill);
    const auto& r = merged.at("run");
    r.at("pretrain").get_to(c.run.pretrain);
    r.at("finetune").get_to(c.run.finetune);
    c.run.loss = parse_loss_variant(r.at("loss").get<std::string>());
    r.at("sweep_axis").get_to(c.run.sweep_axis);
    r.at("sweep_values").get_to(c.run.sweep_values);
    merged.at("output_dir").get_to(c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &doc;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed --set key '" + key + "'");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace gendistill

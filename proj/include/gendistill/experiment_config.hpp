#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/backbone.hpp"
#include "gendistill/dataset.hpp"
#include "gendistill/harness.hpp"
#include "gendistill/interpreter.hpp"
#include "gendistill/losses.hpp"
#include "gendistill/regressor.hpp"
#include "gendistill/teacher.hpp"

namespace gendistill {

struct TeacherSection {
  TeacherConfig model;
  TeacherTrainOptions train;
};

/// Toy data sizes plus the feature-dataset spec.
struct DatasetSection {
  int64_t num_unlabeled = 2000;
  int64_t num_labeled = 200;
  /// Labeled images the interpreter sees (first of the labeled split).
  int64_t num_interpreter_labeled = 40;
  int64_t num_test = 200;
  int64_t num_classes = 5;
  int64_t resolution = 192;
  uint64_t seed = 0;
  DatasetSpec spec;
};

struct InterpreterSection {
  InterpreterConfig model;
  InterpreterTrainOptions train;
};

struct RunSection {
  RunConfig pretrain;
  FinetuneOptions finetune;
  LossVariant loss = LossVariant::kFeat;
  std::string sweep_axis = "encode_mode";
  std::vector<std::string> sweep_values{"deterministic", "stochastic"};
};

struct ExperimentConfig {
  TeacherSection teacher;
  DatasetSection dataset;
  BackboneConfig backbone;
  RegressorConfig regressor;
  InterpreterSection interpreter;
  DistillConfig distill;
  RunSection run;
  std::string output_dir = "runs";

  /// Cross-field checks run before any compute.
  void validate() const;
  /// Applies one seed to every stochastic component.
  void set_seed(uint64_t seed);
};

nlohmann::json to_json(const ExperimentConfig& c);

/// Parses a (possibly partial) document over the defaults. Throws
/// ConfigError naming the offending key for unknown keys or bad types.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);

/// Applies "section.key=value" to a config document. Values parse as JSON
/// when possible and as strings otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace gendistill

#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>

#include "gendistill/experiment_config.hpp"
#include "gendistill/harness.hpp"
#include "gendistill/interpreter.hpp"
#include "gendistill/teacher.hpp"

namespace gendistill {

/// The three toy splits an experiment draws from.
struct ToyData {
  torch::Tensor unlabeled;
  torch::Tensor labeled_images;
  torch::Tensor labeled_masks;
  torch::Tensor test_images;
  torch::Tensor test_masks;
};

ToyData build_toy_data(const DatasetSection& section);

/// Teacher archive with an optional interpreter under "interpreter/".
void save_teacher_bundle(const std::string& path, const DiffusionTeacher& teacher, const Interpreter& interpreter);
struct TeacherBundle {
  DiffusionTeacher teacher;
  std::shared_ptr<Interpreter> interpreter;  // null when the archive has none
};
TeacherBundle load_teacher_bundle(const std::string& path);

TeacherTrainResult train_teacher_for(const ExperimentConfig& config, const ToyData& data);
InterpreterTrainResult train_interpreter_for(const ExperimentConfig& config, const DiffusionTeacher& teacher,
                                             const ToyData& data);

/// Harness settings and inputs derived from an experiment config.
PipelineSettings pipeline_settings(const ExperimentConfig& config, const std::string& work_dir);
PipelineInputs pipeline_inputs(const DiffusionTeacher& teacher, const ToyData& data,
                               std::shared_ptr<Interpreter> interpreter);

/// "<command>-<12 hex digits of the config hash>"; equal configs share ids.
std::string run_id_for(const std::string& command, const nlohmann::json& config);

}  // namespace gendistill

#include "gendistill/pipeline.hpp"

#include <cstdio>

#include "gendistill/checkpoint.hpp"
#include "gendistill/errors.hpp"
#include "gendistill/rng.hpp"
#include "gendistill/shapes.hpp"

namespace gendistill {

ToyData build_toy_data(const DatasetSection& s) {
  ToyData d;
  d.unlabeled = generate_shapes_dataset(s.num_unlabeled, s.num_classes, s.resolution, derive_seed({s.seed, 1})).images;
  auto labeled = generate_shapes_dataset(s.num_labeled, s.num_classes, s.resolution, derive_seed({s.seed, 2}));
  auto test = generate_shapes_dataset(s.num_test, s.num_classes, s.resolution, derive_seed({s.seed, 3}));
  d.labeled_images = labeled.images;
  d.labeled_masks = labeled.masks;
  d.test_images = test.images;
  d.test_masks = test.masks;
  return d;
}

void save_teacher_bundle(const std::string& path, const DiffusionTeacher& teacher, const Interpreter& interpreter) {
  torch::serialize::OutputArchive archive;
  write_int(archive, "format_version", kCheckpointFormatVersion);
  teacher.save(archive);
  if (interpreter) {
    write_string(archive, "interpreter/config", nlohmann::json(interpreter->config()).dump());
    write_module(archive, "interpreter", *interpreter);
  }
  archive.save_to(path);
}

TeacherBundle load_teacher_bundle(const std::string& path) {
  auto archive = open_archive(path);
  TeacherBundle bundle{DiffusionTeacher::load(archive), nullptr};
  if (has_key(archive, "interpreter/config")) {
    InterpreterConfig cfg;
    try {
      cfg = nlohmann::json::parse(read_string(archive, "interpreter/config")).get<InterpreterConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad interpreter config in ") + path + ": " + e.what());
    }
    auto interpreter = std::make_shared<Interpreter>(cfg);
    read_module(archive, "interpreter", **interpreter);
    (*interpreter)->eval();
    bundle.interpreter = interpreter;
  }
  return bundle;
}

TeacherTrainResult train_teacher_for(const ExperimentConfig& config, const ToyData& data) {
  return train_teacher(data.unlabeled, config.teacher.model, config.teacher.train);
}

InterpreterTrainResult train_interpreter_for(const ExperimentConfig& config, const DiffusionTeacher& teacher,
                                             const ToyData& data) {
  const int64_t n = config.dataset.num_interpreter_labeled;
  auto model = config.interpreter.model;
  model.teacher_channels = teacher.feature_channels();
  return train_interpreter(teacher, data.labeled_images.narrow(0, 0, n), data.labeled_masks.narrow(0, 0, n), model,
                           config.distill, config.interpreter.train);
}

PipelineSettings pipeline_settings(const ExperimentConfig& config, const std::string& work_dir) {
  PipelineSettings s;
  s.backbone = config.backbone;
  s.regressor = config.regressor;
  s.distill = config.distill;
  s.dataset = config.dataset.spec;
  s.run = config.run.pretrain;
  s.finetune = config.run.finetune;
  s.loss = config.run.loss;
  s.num_classes = config.dataset.num_classes;
  s.work_dir = work_dir;
  return s;
}

PipelineInputs pipeline_inputs(const DiffusionTeacher& teacher, const ToyData& data,
                               std::shared_ptr<Interpreter> interpreter) {
  return PipelineInputs{teacher,
                        data.unlabeled,
                        {data.labeled_images, data.labeled_masks, data.test_images, data.test_masks},
                        std::move(interpreter)};
}

std::string run_id_for(const std::string& command, const nlohmann::json& config) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%012llx", static_cast<unsigned long long>(h & 0xffffffffffffULL));
  return command + "-" + buf;
}

}  // namespace gendistill

#pragma once

#include "gendistill/backbone.hpp"
#include "gendistill/interpreter.hpp"
#include "gendistill/regressor.hpp"
#include "gendistill/shapes.hpp"
#include "gendistill/teacher.hpp"

namespace dt_test {

// Same topology as the default teacher (4 resolutions, taps 3/6/9/12) at a
// width that keeps CPU tests fast.
inline gendistill::TeacherConfig small_teacher_config(uint64_t seed = 0) {
  gendistill::TeacherConfig cfg;
  cfg.unet.base_channels = 16;
  cfg.unet.head_channels = 16;
  cfg.sampling_steps = 4;
  cfg.seed = seed;
  return cfg;
}

inline gendistill::BackboneConfig small_backbone_config(uint64_t seed = 0) {
  gendistill::BackboneConfig cfg;
  cfg.stem_channels = 8;
  cfg.stage_channels = {16, 16, 32, 32};
  cfg.seed = seed;
  return cfg;
}

inline gendistill::RegressorConfig small_regressor_config(const gendistill::DiffusionTeacher& teacher) {
  gendistill::RegressorConfig cfg;
  cfg.fpn_channels = 32;
  cfg.pool_scales = {1, 2};
  cfg.teacher_channels = teacher.feature_channels();
  return cfg;
}

inline gendistill::InterpreterConfig small_interpreter_config(const gendistill::DiffusionTeacher& teacher,
                                                                int64_t classes) {
  gendistill::InterpreterConfig cfg;
  cfg.fuse_channels = 32;
  cfg.groups = 8;
  cfg.num_classes = classes;
  cfg.teacher_channels = teacher.feature_channels();
  return cfg;
}

}  // namespace dt_test

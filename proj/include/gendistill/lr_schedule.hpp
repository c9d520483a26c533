#pragma once

#include <cstdint>

namespace gendistill {

/// Linear warmup to base_lr followed by cosine decay to zero, per optimizer
/// step. lr(0) = base_lr / warmup_steps, lr(warmup_steps - 1) = base_lr and
/// lr(total_steps - 1) = 0.
class CosineWarmupSchedule {
 public:
  CosineWarmupSchedule(double base_lr, int64_t warmup_steps, int64_t total_steps);

  double lr(int64_t step) const;
  int64_t total_steps() const { return total_steps_; }
  int64_t warmup_steps() const { return warmup_steps_; }

 private:
  double base_lr_;
  int64_t warmup_steps_;
  int64_t total_steps_;
};

}  // namespace gendistill

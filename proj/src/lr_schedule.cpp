#include "gendistill/lr_schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gendistill/errors.hpp"

namespace gendistill {

CosineWarmupSchedule::CosineWarmupSchedule(double base_lr, int64_t warmup_steps, int64_t total_steps)
    : base_lr_(base_lr), warmup_steps_(warmup_steps), total_steps_(total_steps) {
  if (total_steps < 1 || warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("lr schedule requires 0 <= warmup_steps < total_steps");
  }
}

double CosineWarmupSchedule::lr(int64_t step) const {
  step = std::clamp<int64_t>(step, 0, total_steps_ - 1);
  if (step < warmup_steps_) {
    return base_lr_ * static_cast<double>(step + 1) / static_cast<double>(warmup_steps_);
  }
  const int64_t decay_steps = total_steps_ - warmup_steps_ - 1;
  if (decay_steps <= 0) return step == total_steps_ - 1 && warmup_steps_ > 0 ? 0.0 : base_lr_;
  const double progress = static_cast<double>(step - warmup_steps_) / static_cast<double>(decay_steps);
  return 0.5 * base_lr_ * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace gendistill

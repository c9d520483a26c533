#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace gendistill {

/// Forward-diffusion variance schedule. Index t runs over [0, T-1];
/// alpha_bar[t] = prod_{s<=t} (1 - beta[s]).
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  int64_t steps() const { return static_cast<int64_t>(beta.size()); }
  /// Throws ConfigError if betas leave (0, 1) or alpha_bar is inconsistent.
  void validate() const;
  /// Throws std::out_of_range if t is not a valid schedule index.
  void check_index(int64_t t) const;
};

/// Betas linearly interpolated from beta_min to beta_max inclusive.
NoiseSchedule make_linear_schedule(int64_t steps, double beta_min, double beta_max);

/// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise.
torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, int64_t t,
                       const torch::Tensor& noise);

/// Per-sample timesteps: t is a [B] integer tensor.
torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& noise);

}  // namespace gendistill

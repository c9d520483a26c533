#include "gendistill/schedule.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "gendistill/errors.hpp"

namespace gendistill {

void NoiseSchedule::validate() const {
  if (beta.empty() || beta.size() != alpha_bar.size()) {
    throw ConfigError("noise schedule must have matching, non-empty beta and alpha_bar");
  }
  double running = 1.0;
  for (size_t t = 0; t < beta.size(); ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw ConfigError("noise schedule beta outside (0, 1)");
    running *= 1.0 - beta[t];
    if (std::abs(alpha_bar[t] - running) > 1e-12 * running) {
      throw ConfigError("noise schedule alpha_bar is not the cumulative product of (1 - beta)");
    }
  }
}

void NoiseSchedule::check_index(int64_t t) const {
  if (t < 0 || t >= steps()) {
    std::ostringstream msg;
    msg << "timestep " << t << " outside schedule range [0, " << steps() - 1 << "]";
    throw std::out_of_range(msg.str());
  }
}

NoiseSchedule make_linear_schedule(int64_t steps, double beta_min, double beta_max) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("noise schedule requires 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (int64_t t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
    s.beta[t] = t == steps - 1 && steps > 1 ? beta_max : beta_min + (beta_max - beta_min) * frac;
    running *= 1.0 - s.beta[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, int64_t t,
                       const torch::Tensor& noise) {
  schedule.check_index(t);
  if (x0.sizes() != noise.sizes()) throw ShapeError("q_sample: noise shape differs from x0");
  const double ab = schedule.alpha_bar[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& noise) {
  if (x0.sizes() != noise.sizes()) throw ShapeError("q_sample: noise shape differs from x0");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ShapeError("q_sample: expected one timestep per sample");
  const auto t_cpu = t.to(torch::kLong).contiguous();
  const auto* idx = t_cpu.data_ptr<int64_t>();
  std::vector<double> signal(t.size(0)), noise_scale(t.size(0));
  for (int64_t b = 0; b < t.size(0); ++b) {
    schedule.check_index(idx[b]);
    signal[b] = std::sqrt(schedule.alpha_bar[idx[b]]);
    noise_scale[b] = std::sqrt(1.0 - schedule.alpha_bar[idx[b]]);
  }
  std::vector<int64_t> view(x0.dim(), 1);
  view[0] = x0.size(0);
  auto a = torch::tensor(signal, x0.options()).view(view);
  auto s = torch::tensor(noise_scale, x0.options()).view(view);
  return a * x0 + s * noise;
}

}  // namespace gendistill

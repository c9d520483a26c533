#pragma once

#include <torch/torch.h>

#include <random>
#include <vector>

#include "gendistill/pyramid.hpp"
#include "oracle.hpp"

namespace dt_test {

inline torch::Tensor to_tensor(const oracle::Array4& a) {
  return torch::tensor(a.data, torch::kFloat64).reshape({a.b, a.c, a.h, a.w}).clone();
}

inline oracle::Array4 to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  oracle::Array4 a(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), static_cast<int>(c.size(2)),
                   static_cast<int>(c.size(3)));
  std::copy(c.data_ptr<double>(), c.data_ptr<double>() + c.numel(), a.data.begin());
  return a;
}

inline oracle::Labels to_labels(const torch::Tensor& t) {
  auto c = t.contiguous();
  oracle::Labels l{static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), static_cast<int>(c.size(2)), {}};
  l.data.assign(c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel());
  return l;
}

inline oracle::Array4 random_array(std::mt19937_64& rng, int b, int c, int h, int w, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  oracle::Array4 a(b, c, h, w);
  for (auto& v : a.data) v = n(rng);
  return a;
}

inline torch::Tensor random_labels(std::mt19937_64& rng, int b, int h, int w, int k, bool with_ignore) {
  std::uniform_int_distribution<int64_t> cls(0, k - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int64_t> v(static_cast<size_t>(b * h * w));
  for (auto& x : v) x = (with_ignore && u(rng) < 0.1) ? 255 : cls(rng);
  return torch::tensor(v, torch::kInt64).reshape({b, h, w});
}

// Pyramid over levels 2..(2+n-1) for an input of `res` pixels.
inline gendistill::FeaturePyramid make_pyramid(const std::vector<torch::Tensor>& levels, int64_t res) {
  std::vector<gendistill::PyramidLevel> out;
  for (size_t i = 0; i < levels.size(); ++i) out.push_back({static_cast<int>(i) + 2, levels[i]});
  return gendistill::FeaturePyramid(out, {res, res});
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

}  // namespace dt_test

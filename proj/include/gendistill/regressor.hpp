#pragma once

#include <torch/torch.h>

#include <array>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/backbone.hpp"
#include "gendistill/pyramid.hpp"

namespace gendistill {

struct RegressorConfig {
  int64_t fpn_channels = 256;
  std::vector<int64_t> pool_scales{1, 2, 3, 6};
  /// Output channels per level; must match the teacher taps.
  std::map<int, int64_t> teacher_channels;
  uint64_t seed = 0;

  /// Structural checks (strictly increasing scales, levels 2..5 covered).
  void validate() const;
  /// Also checks every pool scale fits the level-5 spatial size of `input`.
  void validate_for_input(Resolution input) const;
};

void to_json(nlohmann::json& j, const RegressorConfig& c);
void from_json(const nlohmann::json& j, RegressorConfig& c);

/// conv -> batch norm -> ReLU.
class ConvNormActImpl : public torch::nn::Module {
 public:
  ConvNormActImpl(int64_t in_channels, int64_t out_channels, int64_t kernel);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(ConvNormAct);

/// Pyramid pooling over the deepest level, fused back to fpn_channels.
class PyramidPoolingImpl : public torch::nn::Module {
 public:
  PyramidPoolingImpl(int64_t in_channels, int64_t fpn_channels, std::vector<int64_t> scales);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::vector<int64_t> scales_;
  std::vector<ConvNormAct> branches_;
  ConvNormAct fuse_{nullptr};
};
TORCH_MODULE(PyramidPooling);

/// Maps student pyramid features into teacher feature space: PPM on level 5,
/// top-down pathway with lateral connections, a 3x3 fuse conv per level and
/// a plain 1x1 projection to the teacher's channel count.
class RegressorImpl : public torch::nn::Module {
 public:
  RegressorImpl(const RegressorConfig& config, const std::array<int64_t, 4>& student_channels);

  FeaturePyramid forward(const FeaturePyramid& student);

  const RegressorConfig& config() const { return config_; }

 private:
  RegressorConfig config_;
  PyramidPooling ppm_{nullptr};
  std::array<ConvNormAct, 3> laterals_{ConvNormAct{nullptr}, ConvNormAct{nullptr}, ConvNormAct{nullptr}};
  std::array<ConvNormAct, 4> fuse_{ConvNormAct{nullptr}, ConvNormAct{nullptr}, ConvNormAct{nullptr},
                                   ConvNormAct{nullptr}};
  std::array<torch::nn::Conv2d, 4> projections_{torch::nn::Conv2d{nullptr}, torch::nn::Conv2d{nullptr},
                                                torch::nn::Conv2d{nullptr}, torch::nn::Conv2d{nullptr}};
};
TORCH_MODULE(Regressor);

Regressor build_regressor(const RegressorConfig& config, const BackboneConfig& student);

/// Exact trainable parameter count of the regressor for a student config.
int64_t count_parameters(const RegressorConfig& config, const BackboneConfig& student);

}  // namespace gendistill

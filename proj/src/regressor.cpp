#include "gendistill/regressor.hpp"

#include <sstream>

#include "gendistill/errors.hpp"
#include "gendistill/init.hpp"

namespace gendistill {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void RegressorConfig::validate() const {
  if (fpn_channels <= 0) throw ConfigError("regressor.fpn_channels must be > 0");
  if (pool_scales.empty()) throw ConfigError("regressor.pool_scales must not be empty");
  for (size_t i = 0; i < pool_scales.size(); ++i) {
    if (pool_scales[i] < 1 || (i > 0 && pool_scales[i] <= pool_scales[i - 1])) {
      throw ConfigError("regressor.pool_scales must be positive and strictly increasing");
    }
  }
  if (fpn_channels < static_cast<int64_t>(pool_scales.size())) {
    throw ConfigError("regressor.fpn_channels smaller than the number of pool scales");
  }
  for (int level = FeaturePyramid::kMinLevel; level <= FeaturePyramid::kMaxLevel; ++level) {
    auto it = teacher_channels.find(level);
    if (it == teacher_channels.end() || it->second <= 0) {
      throw ConfigError("regressor.teacher_channels missing level " + std::to_string(level));
    }
  }
}

void RegressorConfig::validate_for_input(Resolution input) const {
  validate();
  const auto deepest = FeaturePyramid::level_resolution(input, FeaturePyramid::kMaxLevel);
  const int64_t limit = std::min(deepest.height, deepest.width);
  for (int64_t s : pool_scales) {
    if (s > limit) {
      std::ostringstream msg;
      msg << "pool scale " << s << " exceeds level-5 spatial size " << deepest.height << "x" << deepest.width;
      throw ConfigError(msg.str());
    }
  }
}

void to_json(nlohmann::json& j, const RegressorConfig& c) {
  nlohmann::json channels = nlohmann::json::object();
  for (const auto& [level, ch] : c.teacher_channels) channels[std::to_string(level)] = ch;
  j = nlohmann::json{{"fpn_channels", c.fpn_channels},
                     {"pool_scales", c.pool_scales},
                     {"teacher_channels", channels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RegressorConfig& c) {
  j.at("fpn_channels").get_to(c.fpn_channels);
  j.at("pool_scales").get_to(c.pool_scales);
  c.teacher_channels.clear();
  for (const auto& [key, value] : j.at("teacher_channels").items()) {
    c.teacher_channels[std::stoi(key)] = value.get<int64_t>();
  }
  j.at("seed").get_to(c.seed);
}

ConvNormActImpl::ConvNormActImpl(int64_t in_channels, int64_t out_channels, int64_t kernel) {
  conv_ = register_module(
      "conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, kernel).padding(kernel / 2).bias(false)));
  bn_ = register_module("bn", nn::BatchNorm2d(out_channels));
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) { return torch::relu(bn_->forward(conv_->forward(x))); }

PyramidPoolingImpl::PyramidPoolingImpl(int64_t in_channels, int64_t fpn_channels, std::vector<int64_t> scales)
    : scales_(std::move(scales)) {
  const int64_t branch_channels = fpn_channels / static_cast<int64_t>(scales_.size());
  for (size_t i = 0; i < scales_.size(); ++i) {
    branches_.push_back(
        register_module("pool" + std::to_string(scales_[i]), ConvNormAct(in_channels, branch_channels, 1)));
  }
  fuse_ = register_module(
      "fuse", ConvNormAct(in_channels + branch_channels * static_cast<int64_t>(scales_.size()), fpn_channels, 3));
}

torch::Tensor PyramidPoolingImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> parts{x};
  const std::vector<int64_t> size{x.size(2), x.size(3)};
  for (size_t i = 0; i < scales_.size(); ++i) {
    auto pooled = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({scales_[i], scales_[i]}));
    auto y = branches_[i]->forward(pooled);
    parts.push_back(F::interpolate(y, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(false)));
  }
  return fuse_->forward(torch::cat(parts, 1));
}

RegressorImpl::RegressorImpl(const RegressorConfig& config, const std::array<int64_t, 4>& student_channels)
    : config_(config) {
  config_.validate();
  const int64_t c = config_.fpn_channels;
  ppm_ = register_module("ppm", PyramidPooling(student_channels[3], c, config_.pool_scales));
  for (int i = 0; i < 3; ++i) {
    laterals_[i] = register_module("lateral" + std::to_string(i + 2), ConvNormAct(student_channels[i], c, 1));
  }
  for (int i = 0; i < 4; ++i) {
    const int level = i + 2;
    fuse_[i] = register_module("fuse" + std::to_string(level), ConvNormAct(c, c, 3));
    projections_[i] = register_module(
        "project" + std::to_string(level), nn::Conv2d(nn::Conv2dOptions(c, config_.teacher_channels.at(level), 1)));
  }
}

FeaturePyramid RegressorImpl::forward(const FeaturePyramid& student) {
  if (student.level_indices() != std::vector<int>{2, 3, 4, 5}) {
    throw ConfigError("regressor expects student levels {2,3,4,5}");
  }
  config_.validate_for_input(student.input_resolution());

  std::array<torch::Tensor, 4> top_down;
  top_down[3] = ppm_->forward(student.at(5));
  for (int i = 2; i >= 0; --i) {
    const auto& lateral_in = student.at(i + 2);
    auto up = F::interpolate(top_down[i + 1], F::InterpolateFuncOptions()
                                                  .size(std::vector<int64_t>{lateral_in.size(2), lateral_in.size(3)})
                                                  .mode(torch::kNearest));
    top_down[i] = laterals_[i]->forward(lateral_in) + up;
  }
  std::vector<PyramidLevel> out;
  for (int i = 0; i < 4; ++i) {
    out.push_back({i + 2, projections_[i]->forward(fuse_[i]->forward(top_down[i]))});
  }
  return FeaturePyramid(std::move(out), student.input_resolution());
}

Regressor build_regressor(const RegressorConfig& config, const BackboneConfig& student) {
  Regressor regressor(config, student.stage_channels);
  initialize_parameters(*regressor, config.seed);
  return regressor;
}

int64_t count_parameters(const RegressorConfig& config, const BackboneConfig& student) {
  Regressor regressor(config, student.stage_channels);
  return count_module_parameters(*regressor);
}

}  // namespace gendistill

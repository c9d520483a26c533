#include "gendistill/backbone.hpp"

#include <sstream>

#include "gendistill/errors.hpp"
#include "gendistill/init.hpp"

namespace gendistill {

namespace nn = torch::nn;

void BackboneConfig::validate() const {
  if (stem_channels <= 0) throw ConfigError("backbone.stem_channels must be > 0");
  for (size_t i = 0; i < 4; ++i) {
    if (stage_channels[i] <= 0) {
      throw ConfigError("backbone.stage_channels[" + std::to_string(i) + "] must be > 0");
    }
    if (blocks_per_stage[i] <= 0) {
      throw ConfigError("backbone.blocks_per_stage[" + std::to_string(i) + "] must be > 0");
    }
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"stem_channels", c.stem_channels},
                     {"stage_channels", c.stage_channels},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  j.at("stem_channels").get_to(c.stem_channels);
  j.at("stage_channels").get_to(c.stage_channels);
  j.at("blocks_per_stage").get_to(c.blocks_per_stage);
  j.at("seed").get_to(c.seed);
}

BasicBlockImpl::BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(out_channels));
  conv2_ = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module(
        "shortcut",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                       nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_->forward(conv1_->forward(x)));
  out = bn2_->forward(conv2_->forward(out));
  auto identity = shortcut_ ? shortcut_->forward(x) : x;
  return torch::relu(out + identity);
}

BackboneImpl::BackboneImpl(const BackboneConfig& config) : config_(config) {
  config_.validate();
  // Stem: conv stride 2 then max-pool stride 2, landing on level 2.
  stem_ = register_module(
      "stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, config_.stem_channels, 3).stride(2).padding(1).bias(false)),
                             nn::BatchNorm2d(config_.stem_channels), nn::ReLU(),
                             nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
  int64_t in_channels = config_.stem_channels;
  for (size_t s = 0; s < 4; ++s) {
    nn::Sequential stage;
    for (int64_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
      const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
      stage->push_back(BasicBlock(in_channels, config_.stage_channels[s], stride));
      in_channels = config_.stage_channels[s];
    }
    stages_[s] = register_module("stage" + std::to_string(s + 2), stage);
  }
}

void check_image_batch(const torch::Tensor& images) {
  if (!images.defined() || images.dim() != 4 || images.size(1) != 3) {
    throw ShapeError("expected images shaped [B,3,H,W]");
  }
  if (images.size(2) % 32 != 0 || images.size(3) % 32 != 0) {
    std::ostringstream msg;
    msg << "image size " << images.size(2) << "x" << images.size(3) << " not divisible by 32";
    throw ShapeError(msg.str());
  }
}

FeaturePyramid BackboneImpl::forward_features(const torch::Tensor& images) {
  check_image_batch(images);
  auto x = stem_->forward(images);
  std::vector<PyramidLevel> levels;
  for (size_t s = 0; s < 4; ++s) {
    x = stages_[s]->forward(x);
    levels.push_back({static_cast<int>(s) + 2, x});
  }
  return FeaturePyramid(std::move(levels), {images.size(2), images.size(3)});
}

Backbone build_backbone(const BackboneConfig& config) {
  config.validate();
  Backbone backbone(config);
  initialize_parameters(*backbone, config.seed);
  return backbone;
}

}  // namespace gendistill

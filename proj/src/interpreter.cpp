#include "gendistill/interpreter.hpp"

#include <numeric>

#include "gendistill/errors.hpp"
#include "gendistill/init.hpp"
#include "gendistill/lr_schedule.hpp"
#include "gendistill/metrics.hpp"
#include "gendistill/rng.hpp"

namespace gendistill {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

int64_t group_count(int64_t preferred, int64_t channels) {
  return channels % preferred == 0 ? preferred : std::gcd(preferred, channels);
}

torch::Tensor take_rows(const torch::Tensor& t, const std::vector<int64_t>& rows) {
  return t.index_select(0, torch::tensor(rows, torch::kLong));
}

}  // namespace

void InterpreterConfig::validate() const {
  if (fuse_channels <= 0) throw ConfigError("interpreter.fuse_channels must be > 0");
  if (groups <= 0 || fuse_channels % groups != 0) {
    throw ConfigError("interpreter.fuse_channels must be divisible by interpreter.groups");
  }
  if (num_classes < 2) throw ConfigError("interpreter.num_classes must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("interpreter.dropout_rate must be in [0, 1)");
  for (int level = FeaturePyramid::kMinLevel; level <= FeaturePyramid::kMaxLevel; ++level) {
    auto it = teacher_channels.find(level);
    if (it == teacher_channels.end() || it->second <= 0) {
      throw ConfigError("interpreter.teacher_channels missing level " + std::to_string(level));
    }
  }
}

void to_json(nlohmann::json& j, const InterpreterConfig& c) {
  nlohmann::json channels = nlohmann::json::object();
  for (const auto& [level, ch] : c.teacher_channels) channels[std::to_string(level)] = ch;
  j = nlohmann::json{{"fuse_channels", c.fuse_channels}, {"num_classes", c.num_classes},
                     {"groups", c.groups},               {"dropout_rate", c.dropout_rate},
                     {"teacher_channels", channels},     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, InterpreterConfig& c) {
  j.at("fuse_channels").get_to(c.fuse_channels);
  j.at("num_classes").get_to(c.num_classes);
  j.at("groups").get_to(c.groups);
  j.at("dropout_rate").get_to(c.dropout_rate);
  c.teacher_channels.clear();
  for (const auto& [key, value] : j.at("teacher_channels").items()) {
    c.teacher_channels[std::stoi(key)] = value.get<int64_t>();
  }
  j.at("seed").get_to(c.seed);
}

SeparableFuseBlockImpl::SeparableFuseBlockImpl(int64_t in_channels, int64_t out_channels, int64_t groups) {
  depthwise_ = register_module(
      "depthwise",
      nn::Conv2d(nn::Conv2dOptions(in_channels, in_channels, 3).padding(1).groups(in_channels).bias(false)));
  norm1_ = register_module("norm1", nn::GroupNorm(group_count(groups, in_channels), in_channels));
  pointwise_ = register_module("pointwise", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).bias(false)));
  norm2_ = register_module("norm2", nn::GroupNorm(group_count(groups, out_channels), out_channels));
}

torch::Tensor SeparableFuseBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::silu(norm1_->forward(depthwise_->forward(x)));
  return torch::silu(norm2_->forward(pointwise_->forward(y)));
}

InterpreterImpl::InterpreterImpl(const InterpreterConfig& config) : config_(config) {
  config_.validate();
  const int64_t c = config_.fuse_channels;
  int64_t running = config_.teacher_channels.at(FeaturePyramid::kMaxLevel);
  for (int level = FeaturePyramid::kMaxLevel; level > FeaturePyramid::kMinLevel; --level) {
    const std::string tag = std::to_string(level) + "to" + std::to_string(level - 1);
    reduce_.push_back(register_module("reduce" + tag, nn::Conv2d(nn::Conv2dOptions(running, c, 1))));
    fuse_.push_back(register_module(
        "fuse" + tag, SeparableFuseBlock(c + config_.teacher_channels.at(level - 1), c, config_.groups)));
    running = c;
  }
  dropout_ = register_module("dropout", nn::Dropout(config_.dropout_rate));
  classifier_ = register_module("classifier", nn::Conv2d(nn::Conv2dOptions(c, config_.num_classes, 1)));
}

torch::Tensor InterpreterImpl::forward(const FeaturePyramid& teacher_features) {
  if (teacher_features.level_indices() != std::vector<int>{2, 3, 4, 5}) {
    throw ShapeError("interpreter expects teacher levels {2,3,4,5}");
  }
  auto x = teacher_features.at(FeaturePyramid::kMaxLevel);
  size_t i = 0;
  for (int level = FeaturePyramid::kMaxLevel; level > FeaturePyramid::kMinLevel; --level, ++i) {
    const auto& skip = teacher_features.at(level - 1);
    if (skip.size(1) != config_.teacher_channels.at(level - 1)) {
      throw ShapeError("interpreter: channel mismatch at level " + std::to_string(level - 1));
    }
    x = reduce_[i]->forward(x);
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    x = fuse_[i]->forward(torch::cat({x, skip}, 1));
  }
  return classifier_->forward(dropout_->forward(x));
}

Interpreter build_interpreter(const InterpreterConfig& config) {
  Interpreter interpreter(config);
  initialize_parameters(*interpreter, config.seed);
  return interpreter;
}

torch::Tensor upsample_logits(const torch::Tensor& logits, int64_t height, int64_t width) {
  if (logits.size(2) == height && logits.size(3) == width) return logits;
  return F::interpolate(logits, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
}

torch::Tensor emit_soft_labels(Interpreter& interpreter, const FeaturePyramid& teacher_features) {
  torch::NoGradGuard no_grad;
  const bool was_training = interpreter->is_training();
  interpreter->eval();
  auto logits = interpreter->forward(teacher_features);
  if (was_training) interpreter->train();
  return logits;
}

double interpreter_miou(const DiffusionTeacher& teacher, Interpreter& interpreter, const torch::Tensor& images,
                        const torch::Tensor& masks, const EncodeMode& mode) {
  constexpr int64_t kChunk = 16;
  ConfusionMatrix confusion(interpreter->config().num_classes);
  const int64_t n = images.size(0);
  for (int64_t start = 0; start < n; start += kChunk) {
    const int64_t len = std::min(kChunk, n - start);
    std::vector<int64_t> ids(len);
    std::iota(ids.begin(), ids.end(), start);
    auto batch = images.narrow(0, start, len);
    auto logits = emit_soft_labels(interpreter, encode_features(teacher, batch, mode, ids, 0));
    auto pred = upsample_logits(logits, batch.size(2), batch.size(3)).argmax(1);
    confusion.update(pred, masks.narrow(0, start, len));
  }
  return confusion.mean_iou();
}

InterpreterTrainResult train_interpreter(const DiffusionTeacher& teacher, const torch::Tensor& images,
                                         const torch::Tensor& masks, const InterpreterConfig& config,
                                         const DistillConfig& losses, const InterpreterTrainOptions& options) {
  if (images.dim() != 4 || images.size(0) == 0) throw ConfigError("train_interpreter: no labeled samples");
  if (masks.dim() != 3 || masks.size(0) != images.size(0) || masks.size(1) != images.size(2) ||
      masks.size(2) != images.size(3)) {
    throw ShapeError("train_interpreter: masks must be [B,H,W] matching the images");
  }
  if (options.batch_size < 1) throw ConfigError("train_interpreter: batch_size must be >= 1");
  options.encode.validate(teacher.schedule().steps());

  InterpreterConfig cfg = config;
  if (cfg.teacher_channels.empty()) cfg.teacher_channels = teacher.feature_channels();
  InterpreterTrainResult result{build_interpreter(cfg), {}, {}};
  auto& model = result.interpreter;
  result.train_miou.push_back(interpreter_miou(teacher, model, images, masks, options.encode));
  if (options.epochs == 0) return result;

  torch::manual_seed(derive_seed({options.seed, 0x696e7470ULL}));
  const int64_t n = images.size(0);
  const int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  CosineWarmupSchedule schedule(options.lr, options.warmup_epochs * steps_per_epoch, options.epochs * steps_per_epoch);
  torch::optim::AdamW optimizer(model->parameters(), torch::optim::AdamWOptions(options.lr)
                                                         .betas({options.beta1, options.beta2})
                                                         .weight_decay(options.weight_decay));
  const auto labels_all = masks.to(torch::kLong);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    model->train();
    auto gen = make_generator({options.seed, 0x73687566ULL, static_cast<uint64_t>(epoch)});
    auto order = torch::randperm(n, gen, torch::kLong);
    double loss_sum = 0.0;
    for (int64_t start = 0; start < n; start += options.batch_size) {
      const int64_t len = std::min(options.batch_size, n - start);
      std::vector<int64_t> ids(order.data_ptr<int64_t>() + start, order.data_ptr<int64_t>() + start + len);
      auto x = take_rows(images, ids);
      auto y = take_rows(labels_all, ids);
      if (options.horizontal_flip) {
        for (int64_t i = 0; i < len; ++i) {
          if (flip_coin(options.seed, ids[i], epoch)) {
            x[i] = x[i].flip({2});
            y[i] = y[i].flip({1});
          }
        }
      }
      auto features = encode_features(teacher, x, options.encode, ids, epoch);
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(schedule.lr(step));
      }
      optimizer.zero_grad();
      auto logits = upsample_logits(model->forward(features), x.size(2), x.size(3));
      auto loss = interpreter_loss(logits, y, losses);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw DivergenceError("interpreter loss is not finite at epoch " + std::to_string(epoch));
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(len);
      ++step;
    }
    result.train_loss.push_back(loss_sum / static_cast<double>(n));
    result.train_miou.push_back(interpreter_miou(teacher, model, images, masks, options.encode));
  }
  model->eval();
  return result;
}

}  // namespace gendistill

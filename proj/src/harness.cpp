#include "gendistill/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "gendistill/cache.hpp"
#include "gendistill/checkpoint.hpp"
#include "gendistill/errors.hpp"
#include "gendistill/init.hpp"
#include "gendistill/lr_schedule.hpp"
#include "gendistill/rng.hpp"
#include "gendistill/segmentation.hpp"

namespace gendistill {

namespace nn = torch::nn;

double scaled_base_lr(int64_t batch_size) { return 4e-3 * static_cast<double>(batch_size) / 256.0; }

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("run.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("run.warmup_epochs must be in [0, epochs)");
  if (!(base_lr > 0.0)) throw ConfigError("run.base_lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("run.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("run.betas must be in [0, 1)");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},           {"batch_size", c.batch_size}, {"base_lr", c.base_lr},
                     {"weight_decay", c.weight_decay}, {"beta1", c.beta1},         {"beta2", c.beta2},
                     {"warmup_epochs", c.warmup_epochs}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("seed").get_to(c.seed);
}

void FinetuneOptions::validate() const {
  if (epochs < 1) throw ConfigError("finetune.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("finetune.warmup_epochs must be in [0, epochs)");
  if (!(lr > 0.0)) throw ConfigError("finetune.lr must be > 0");
  if (head_channels < 1) throw ConfigError("finetune.head_channels must be >= 1");
}

void to_json(nlohmann::json& j, const FinetuneOptions& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"warmup_epochs", c.warmup_epochs},
                     {"freeze", c.freeze},
                     {"horizontal_flip", c.horizontal_flip},
                     {"head_channels", c.head_channels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FinetuneOptions& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("freeze").get_to(c.freeze);
  j.at("horizontal_flip").get_to(c.horizontal_flip);
  j.at("head_channels").get_to(c.head_channels);
  j.at("seed").get_to(c.seed);
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::kFeat:
      return "feat";
    case LossVariant::kLabel:
      return "label";
    default:
      return "mix";
  }
}

LossVariant parse_loss_variant(const std::string& s) {
  if (s == "feat") return LossVariant::kFeat;
  if (s == "label") return LossVariant::kLabel;
  if (s == "mix") return LossVariant::kMix;
  throw ConfigError("unknown loss variant '" + s + "' (expected feat|label|mix)");
}

namespace {

using Clock = std::chrono::steady_clock;

void set_lr(torch::optim::AdamW& optimizer, double lr) {
  for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

[[noreturn]] void report_divergence(const FeaturePyramid& regressed, const FeaturePyramid& teacher,
                                    const DistillConfig& distill, int64_t epoch) {
  torch::NoGradGuard no_grad;
  for (int level : distill.levels) {
    const double mse =
        mse_level_loss(regressed.at(level), whiten(teacher.at(level), distill.eps), distill.mse_raw_sum).item<double>();
    const double at = at_level_loss(regressed.at(level), teacher.at(level), distill.p).item<double>();
    if (!std::isfinite(mse) || !std::isfinite(at)) {
      std::ostringstream msg;
      msg << "non-finite distillation loss at level " << level << " in epoch " << epoch + 1 << " (mse=" << mse
          << ", at=" << at << ")";
      throw DivergenceError(msg.str());
    }
  }
  throw DivergenceError("non-finite label distillation loss in epoch " + std::to_string(epoch + 1));
}

PretrainResult pretrain_impl(Backbone backbone, Regressor regressor, int64_t num_classes,
                             const EpochStreamFactory& data, const DistillConfig& distill, const RunConfig& run,
                             LossVariant variant) {
  distill.validate();
  run.validate();
  const auto started = Clock::now();
  torch::manual_seed(derive_seed({run.seed, 0x70726574ULL}));

  PretrainResult result;
  result.backbone = backbone;
  result.regressor = regressor;
  const bool uses_labels = variant != LossVariant::kFeat;
  std::vector<torch::Tensor> params = backbone->parameters();
  for (auto& p : regressor->parameters()) params.push_back(p);
  if (uses_labels) {
    result.logit_head = nn::Conv2d(nn::Conv2dOptions(regressor->config().teacher_channels.at(2), num_classes, 1));
    initialize_parameters(*result.logit_head, derive_seed({run.seed, 0x68656164ULL}));
    for (auto& p : result.logit_head->parameters()) params.push_back(p);
  }
  torch::optim::AdamW optimizer(
      params, torch::optim::AdamWOptions(run.base_lr).betas({run.beta1, run.beta2}).weight_decay(run.weight_decay));

  std::unique_ptr<RecordStream> stream = data(0);
  const int64_t n = stream->size();
  if (n == 0) throw ConfigError("pretraining dataset is empty");
  const int64_t steps_per_epoch = (n + run.batch_size - 1) / run.batch_size;
  CosineWarmupSchedule schedule(run.base_lr, run.warmup_epochs * steps_per_epoch, run.epochs * steps_per_epoch);

  int64_t step = 0;
  for (int64_t epoch = 0; epoch < run.epochs; ++epoch) {
    if (epoch > 0) stream = data(epoch);
    backbone->train();
    regressor->train();
    EpochLosses sums;
    int64_t seen = 0;
    std::vector<FeatureRecord> pending;
    auto flush = [&] {
      const FeatureBatch batch = collate(pending, false);
      const auto b = static_cast<double>(pending.size());
      pending.clear();
      if (uses_labels && !batch.soft_logits.defined()) {
        throw ConfigError("label distillation requires soft_logits on every record");
      }
      if (uses_labels && batch.soft_logits.size(1) != num_classes) {
        throw ConfigError("soft_logits class count does not match the interpreter");
      }
      set_lr(optimizer, schedule.lr(step));
      optimizer.zero_grad();
      const auto regressed = regressor->forward(backbone->forward_features(batch.images));
      const auto terms = feat_loss(regressed, batch.features, distill);
      torch::Tensor ld = torch::zeros({});
      torch::Tensor loss = terms.total;
      if (uses_labels) {
        ld = label_distill_loss(batch.soft_logits, result.logit_head->forward(regressed.at(2)), distill);
        loss = variant == LossVariant::kMix ? mix_loss(terms.total, ld, distill) : distill.lambda_ld * ld;
      }
      const double value = loss.item<double>();
      if (!std::isfinite(value)) report_divergence(regressed, batch.features, distill, epoch);
      loss.backward();
      optimizer.step();
      ++step;
      sums.mse += terms.mse.item<double>() * b;
      sums.at += terms.at.item<double>() * b;
      sums.ld += ld.item<double>() * b;
      sums.total += value * b;
      seen += static_cast<int64_t>(b);
    };
    while (auto record = stream->next()) {
      pending.push_back(std::move(*record));
      if (static_cast<int64_t>(pending.size()) == run.batch_size) flush();
    }
    if (!pending.empty()) flush();
    if (seen == 0) throw ConfigError("pretraining stream yielded no records in epoch " + std::to_string(epoch + 1));
    const auto denom = static_cast<double>(seen);
    result.report.epochs.push_back({epoch + 1, sums.mse / denom, sums.at / denom, sums.ld / denom, sums.total / denom});
  }
  backbone->eval();
  regressor->eval();

  auto& report = result.report;
  report.kind = "pretrain-" + to_string(variant);
  const auto& last = report.epochs.back();
  report.final_metrics = {{"final_mse", last.mse}, {"final_at", last.at}, {"final_ld", last.ld},
                          {"final_total", last.total}, {"first_total", report.epochs.front().total}};
  report.seeds = {{"run", run.seed}, {"backbone", backbone->config().seed}, {"regressor", regressor->config().seed}};
  report.config = {{"distill", distill}, {"run", run}, {"backbone", backbone->config()},
                   {"regressor", regressor->config()}, {"loss", to_string(variant)}};
  report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  return result;
}

}  // namespace

PretrainResult pretrain_feature_distill(Backbone backbone, Regressor regressor, const EpochStreamFactory& data,
                                        const DistillConfig& distill, const RunConfig& run) {
  return pretrain_impl(std::move(backbone), std::move(regressor), 0, data, distill, run, LossVariant::kFeat);
}

PretrainResult pretrain_mix_distill(Backbone backbone, Regressor regressor, const Interpreter& interpreter,
                                    const EpochStreamFactory& data, const DistillConfig& distill, const RunConfig& run,
                                    LossVariant variant) {
  if (!interpreter) throw ConfigError("mixed distillation needs a trained interpreter");
  if (variant == LossVariant::kFeat) throw ConfigError("pretrain_mix_distill: use the label or mix variant");
  return pretrain_impl(std::move(backbone), std::move(regressor), interpreter->config().num_classes, data, distill,
                       run, variant);
}

void save_pretrain_checkpoint(const std::string& path, const PretrainResult& result) {
  torch::serialize::OutputArchive archive;
  write_int(archive, "format_version", kCheckpointFormatVersion);
  write_string(archive, "backbone/config", nlohmann::json(result.backbone->config()).dump());
  write_module(archive, "backbone", *result.backbone);
  write_string(archive, "regressor/config", nlohmann::json(result.regressor->config()).dump());
  write_module(archive, "regressor", *result.regressor);
  archive.save_to(path);
}

Backbone load_backbone(const std::string& path) {
  auto archive = open_archive(path);
  BackboneConfig config;
  try {
    config = nlohmann::json::parse(read_string(archive, "backbone/config")).get<BackboneConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad backbone config in checkpoint: ") + e.what());
  }
  Backbone backbone(config);
  read_module(archive, "backbone", *backbone);
  backbone->eval();
  return backbone;
}

namespace {

void check_classes(const torch::Tensor& masks, int64_t num_classes, const char* split) {
  const auto valid = masks.masked_select(masks != kIgnoreIndex);
  if (valid.numel() > 0 && (valid.max().item<int64_t>() >= num_classes || valid.min().item<int64_t>() < 0)) {
    throw ConfigError(std::string("finetune: ") + split + " mask class ids exceed num_classes=" +
                      std::to_string(num_classes));
  }
}

}  // namespace

MetricsReport finetune_segmentation(Backbone backbone, const SegmentationSplit& data, int64_t num_classes,
                                    const FinetuneOptions& options) {
  options.validate();
  if (num_classes < 2) throw ConfigError("finetune: num_classes must be >= 2");
  const int64_t n = data.train_images.size(0);
  if (n == 0) throw ConfigError("finetune: no training images");
  check_classes(data.train_masks, num_classes, "train");
  check_classes(data.test_masks, num_classes, "test");
  const auto started = Clock::now();
  torch::manual_seed(derive_seed({options.seed, 0x66696e65ULL}));

  SegmentationHead head(backbone->config().stage_channels, options.head_channels, num_classes);
  initialize_parameters(*head, derive_seed({options.seed, 0x68656164ULL}));
  std::vector<torch::Tensor> params = head->parameters();
  if (options.freeze) {
    for (auto& p : backbone->parameters()) p.set_requires_grad(false);
  } else {
    for (auto& p : backbone->parameters()) params.push_back(p);
  }
  torch::optim::AdamW optimizer(params, torch::optim::AdamWOptions(options.lr).weight_decay(options.weight_decay));
  const int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  CosineWarmupSchedule schedule(options.lr, options.warmup_epochs * steps_per_epoch, options.epochs * steps_per_epoch);
  const auto masks = data.train_masks.to(torch::kLong);

  MetricsReport report;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    if (options.freeze) {
      backbone->eval();
    } else {
      backbone->train();
    }
    head->train();
    auto order = torch::randperm(n, make_generator({options.seed, 0x73687566ULL, static_cast<uint64_t>(epoch)}),
                                 torch::kLong);
    double loss_sum = 0.0;
    for (int64_t start = 0; start < n; start += options.batch_size) {
      const int64_t len = std::min(options.batch_size, n - start);
      const auto index = order.narrow(0, start, len);
      auto x = data.train_images.index_select(0, index).clone();
      auto y = masks.index_select(0, index).clone();
      if (options.horizontal_flip) {
        const auto* ids = index.data_ptr<int64_t>();
        for (int64_t i = 0; i < len; ++i) {
          if (!flip_coin(options.seed, ids[i], epoch)) continue;
          x[i] = x[i].flip({2});
          y[i] = y[i].flip({1});
        }
      }
      set_lr(optimizer, schedule.lr(step++));
      optimizer.zero_grad();
      FeaturePyramid features;
      if (options.freeze) {
        torch::NoGradGuard no_grad;
        features = backbone->forward_features(x);
      } else {
        features = backbone->forward_features(x);
      }
      auto logits = upsample_logits(head->forward(features), x.size(2), x.size(3));
      auto loss = torch::nn::functional::cross_entropy(
          logits, y, torch::nn::functional::CrossEntropyFuncOptions().ignore_index(kIgnoreIndex));
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw DivergenceError("finetune loss is not finite in epoch " + std::to_string(epoch + 1));
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(len);
    }
    report.epochs.push_back({epoch + 1, 0.0, 0.0, 0.0, loss_sum / static_cast<double>(n)});
  }
  if (options.freeze) {
    for (auto& p : backbone->parameters()) p.set_requires_grad(true);
  }

  backbone->eval();
  head->eval();
  ConfusionMatrix confusion(num_classes);
  {
    torch::NoGradGuard no_grad;
    const int64_t m = data.test_images.size(0);
    for (int64_t start = 0; start < m; start += 32) {
      const int64_t len = std::min<int64_t>(32, m - start);
      const auto x = data.test_images.narrow(0, start, len);
      auto logits = upsample_logits(head->forward(backbone->forward_features(x)), x.size(2), x.size(3));
      confusion.update(logits.argmax(1), data.test_masks.narrow(0, start, len));
    }
  }
  report.kind = options.freeze ? "readout" : "finetune";
  report.final_metrics = {{"miou", confusion.mean_iou()}, {"pixel_accuracy", confusion.pixel_accuracy()}};
  const auto iou = confusion.per_class_iou();
  for (size_t k = 0; k < iou.size(); ++k) report.final_metrics["iou_class" + std::to_string(k)] = 100.0 * iou[k];
  report.seeds = {{"finetune", options.seed}, {"backbone", backbone->config().seed}};
  report.config = {{"finetune", options}, {"num_classes", num_classes}, {"backbone", backbone->config()}};
  report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  return report;
}

EpochStreamFactory make_stream_factory(const PipelineInputs& inputs, const PipelineSettings& settings) {
  const bool with_soft = settings.loss != LossVariant::kFeat;
  if (with_soft && !inputs.interpreter) throw ConfigError("loss variant '" + to_string(settings.loss) + "' needs an interpreter");
  const auto interpreter = with_soft ? inputs.interpreter : nullptr;
  const auto spec = settings.dataset;
  const auto run = settings.run;
  const auto teacher = inputs.teacher;
  const auto images = inputs.unlabeled;

  EpochStreamFactory online;
  if (spec.mode == DatasetMode::kEncoded) {
    online = [=](int64_t epoch) -> std::unique_ptr<RecordStream> {
      auto perm = torch::randperm(images.size(0),
                                  make_generator({run.seed, 0x6f726465ULL, static_cast<uint64_t>(epoch)}), torch::kLong);
      std::vector<int64_t> order(perm.data_ptr<int64_t>(), perm.data_ptr<int64_t>() + perm.numel());
      return iterate_encoded(teacher, images, spec, epoch, {}, interpreter, std::move(order));
    };
  } else {
    const Resolution res{images.size(2), images.size(3)};
    const int64_t n = images.size(0);
    auto sampler = std::make_shared<DiffusionSampler>(teacher, res, teacher.config().sampling_steps);
    online = [=](int64_t epoch) -> std::unique_ptr<RecordStream> {
      return iterate_synthesized(sampler, n, spec, derive_seed({run.seed, static_cast<uint64_t>(epoch)}), interpreter);
    };
  }
  if (spec.cache == CacheMode::kOnline) return online;

  std::filesystem::create_directories(settings.work_dir);
  const std::string path = (std::filesystem::path(settings.work_dir) / "features.dtfc").string();
  auto first = online(0);
  export_cache(*first, path);
  return [path](int64_t) -> std::unique_ptr<RecordStream> { return load_cache(path); };
}

CycleResult run_pretrain_finetune_cycle(const PipelineInputs& inputs, const PipelineSettings& settings) {
  auto regressor_config = settings.regressor;
  if (regressor_config.teacher_channels.empty()) regressor_config.teacher_channels = inputs.teacher.feature_channels();
  regressor_config.validate_for_input({inputs.unlabeled.size(2), inputs.unlabeled.size(3)});
  auto backbone = build_backbone(settings.backbone);
  auto regressor = build_regressor(regressor_config, settings.backbone);
  const auto factory = make_stream_factory(inputs, settings);

  CycleResult out;
  if (settings.loss == LossVariant::kFeat) {
    out.pretrain = pretrain_feature_distill(backbone, regressor, factory, settings.distill, settings.run);
  } else {
    out.pretrain = pretrain_mix_distill(backbone, regressor, *inputs.interpreter, factory, settings.distill,
                                        settings.run, settings.loss);
  }
  out.pretrain.report.config["dataset"] = settings.dataset;
  out.finetune = finetune_segmentation(out.pretrain.backbone, inputs.segmentation, settings.num_classes,
                                       settings.finetune);
  return out;
}

ModeProbe probe_encode_mode(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode) {
  const int64_t n = images.size(0);
  if (n == 0) throw ConfigError("probe_encode_mode: no images");
  std::vector<int64_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  ModeProbe probe{to_string(mode.variant), 0.0, 0.0};
  int64_t changed = 0;
  for (int64_t start = 0; start < n; start += 16) {
    const int64_t len = std::min<int64_t>(16, n - start);
    const auto x = images.narrow(0, start, len);
    const std::span<const int64_t> chunk(ids.data() + start, len);
    const auto a = encode_features(teacher, x, mode, chunk, 0);
    const auto b = encode_features(teacher, x, mode, chunk, 1);
    for (int64_t i = 0; i < len; ++i) {
      const double d = max_abs_diff(a.slice_batch(i, 1), b.slice_batch(i, 1));
      probe.max_drift = std::max(probe.max_drift, d);
      if (d > 1e-6) ++changed;
    }
  }
  probe.fraction_changed = static_cast<double>(changed) / static_cast<double>(n);
  return probe;
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kEncodeMode:
      return "encode_mode";
    case SweepAxis::kTEncode:
      return "t_encode";
    default:
      return "loss_variant";
  }
}

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "encode_mode") return SweepAxis::kEncodeMode;
  if (s == "t_encode") return SweepAxis::kTEncode;
  if (s == "loss_variant") return SweepAxis::kLossVariant;
  throw ConfigError("unknown sweep axis '" + s + "' (expected encode_mode|t_encode|loss_variant)");
}

std::vector<SweepRow> run_ablation_sweep(SweepAxis axis, const std::vector<std::string>& values,
                                         const PipelineInputs& inputs, const PipelineSettings& base) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<PipelineSettings> plans;
  for (const auto& v : values) {
    PipelineSettings s = base;
    switch (axis) {
      case SweepAxis::kEncodeMode:
        s.dataset.encode.variant = parse_encode_variant(v);
        break;
      case SweepAxis::kTEncode: {
        size_t used = 0;
        int64_t t = 0;
        try {
          t = std::stoll(v, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != v.size()) throw ConfigError("t_encode sweep value '" + v + "' is not an integer");
        s.dataset.encode.t_encode = t;
        break;
      }
      case SweepAxis::kLossVariant:
        s.loss = parse_loss_variant(v);
        break;
    }
    s.dataset.encode.validate(inputs.teacher.schedule().steps());
    s.work_dir = (std::filesystem::path(base.work_dir) / (to_string(axis) + "_" + v)).string();
    plans.push_back(std::move(s));
  }

  std::vector<SweepRow> rows;
  for (size_t i = 0; i < values.size(); ++i) {
    SweepRow row;
    row.value = values[i];
    if (axis == SweepAxis::kEncodeMode) {
      const int64_t k = std::min<int64_t>(100, inputs.unlabeled.size(0));
      row.probe = probe_encode_mode(inputs.teacher, inputs.unlabeled.narrow(0, 0, k), plans[i].dataset.encode);
      const bool deterministic = plans[i].dataset.encode.variant == EncodeVariant::kDeterministic;
      if (deterministic && row.probe->max_drift > 1e-6) {
        throw std::runtime_error("deterministic encoding drifted across epochs");
      }
      if (!deterministic && row.probe->fraction_changed <= 0.99) {
        throw std::runtime_error("stochastic encoding did not vary across epochs");
      }
    }
    auto cycle = run_pretrain_finetune_cycle(inputs, plans[i]);
    row.pretrain = std::move(cycle.pretrain.report);
    row.finetune = std::move(cycle.finetune);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_table_markdown(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(3);
  out << "| " << to_string(axis) << " | mse | at | ld | total | mIoU | pixel acc |";
  const bool probes = !rows.empty() && rows.front().probe.has_value();
  if (probes) out << " epoch drift | changed |";
  out << "\n|---|---|---|---|---|---|---|" << (probes ? "---|---|" : "") << "\n";
  for (const auto& r : rows) {
    const auto& last = r.pretrain.epochs.back();
    out << "| " << r.value << " | " << last.mse << " | " << last.at << " | " << last.ld << " | " << last.total << " | "
        << r.finetune.final_metrics.at("miou") << " | " << r.finetune.final_metrics.at("pixel_accuracy") << " |";
    if (r.probe) out << " " << r.probe->max_drift << " | " << r.probe->fraction_changed << " |";
    out << "\n";
  }
  return out.str();
}

}  // namespace gendistill

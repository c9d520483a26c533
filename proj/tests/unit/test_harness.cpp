#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gendistill/cli.hpp"
#include "gendistill/errors.hpp"
#include "gendistill/harness.hpp"
#include "gendistill/lr_schedule.hpp"
#include "gendistill/metrics.hpp"
#include "gendistill/pipeline.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace gendistill;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::path(testing::TempDir()) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 32x32 toy world: small teacher, small student, pool scale 1 only.
struct ToyWorld {
  DiffusionTeacher teacher{dt_test::small_teacher_config(31)};
  ShapesDataset unlabeled = generate_shapes_dataset(48, 4, 32, 41);
  ShapesDataset labeled = generate_shapes_dataset(24, 4, 32, 42);
  ShapesDataset test = generate_shapes_dataset(16, 4, 32, 43);

  PipelineSettings settings() const {
    PipelineSettings s;
    s.backbone = dt_test::small_backbone_config(5);
    s.regressor.fpn_channels = 16;
    s.regressor.pool_scales = {1};
    s.regressor.teacher_channels = teacher.feature_channels();
    s.dataset.encode = {EncodeVariant::kStochastic, 150, 8};
    s.dataset.chunk_size = 8;
    s.run.epochs = 2;
    s.run.warmup_epochs = 1;
    s.run.batch_size = 16;
    s.run.seed = 6;
    s.finetune.epochs = 2;
    s.finetune.warmup_epochs = 1;
    s.finetune.head_channels = 16;
    s.finetune.seed = 7;
    s.num_classes = 4;
    return s;
  }

  PipelineInputs inputs(std::shared_ptr<Interpreter> interpreter = nullptr) const {
    return {teacher, unlabeled.images, {labeled.images, labeled.masks, test.images, test.masks}, std::move(interpreter)};
  }

  std::shared_ptr<Interpreter> interpreter() const {
    auto cfg = dt_test::small_interpreter_config(teacher, 4);
    return std::make_shared<Interpreter>(build_interpreter(cfg));
  }
};

const ToyWorld& world() {
  static const ToyWorld w;
  return w;
}

PretrainResult pretrain(const PipelineSettings& s, const PipelineInputs& in, LossVariant variant,
                        const DistillConfig& distill) {
  auto backbone = build_backbone(s.backbone);
  auto regressor = build_regressor(s.regressor, s.backbone);
  auto settings = s;
  settings.loss = variant;
  auto factory = make_stream_factory(in, settings);
  if (variant == LossVariant::kFeat) return pretrain_feature_distill(backbone, regressor, factory, distill, s.run);
  return pretrain_mix_distill(backbone, regressor, *in.interpreter, factory, distill, s.run, variant);
}

std::vector<const char*> argv_of(const std::vector<std::string>& args) {
  std::vector<const char*> out{"gendistill"};
  for (const auto& a : args) out.push_back(a.c_str());
  return out;
}

int cli(const std::vector<std::string>& args) {
  auto argv = argv_of(args);
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST(LrSchedule, WarmupPeakAndCosineFloor) {
  const double base = 0.01;
  CosineWarmupSchedule s(base, 10, 100);
  EXPECT_DOUBLE_EQ(s.lr(0), base / 10);
  EXPECT_DOUBLE_EQ(s.lr(9), base);
  EXPECT_LE(s.lr(99), 1e-3 * base);
  for (int64_t t = 10; t < 99; ++t) EXPECT_LE(s.lr(t + 1), s.lr(t));
  for (int64_t t = 0; t < 9; ++t) EXPECT_LT(s.lr(t), s.lr(t + 1));
}

TEST(RunConfig, DefaultsAndScaling) {
  RunConfig run;
  EXPECT_EQ(run.batch_size, 32);
  EXPECT_DOUBLE_EQ(run.base_lr, scaled_base_lr(32));
  EXPECT_DOUBLE_EQ(scaled_base_lr(256), 4e-3);
  EXPECT_EQ(run.weight_decay, 0.05);
  EXPECT_EQ(run.beta1, 0.9);
  EXPECT_EQ(run.beta2, 0.95);
  run.warmup_epochs = run.epochs;
  EXPECT_THROW(run.validate(), ConfigError);
}

TEST(ConfusionMatrix, MatchesSetOracleOnToyMask) {
  const std::vector<int64_t> truth{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 255, 255};
  const std::vector<int64_t> pred{0, 1, 1, 1, 0, 0, 1, 0, 2, 2, 1, 2, 2, 0, 0, 1};
  ConfusionMatrix cm(3);
  cm.update(torch::tensor(pred).reshape({4, 4}), torch::tensor(truth).reshape({4, 4}));
  const auto got = cm.per_class_iou();
  const auto want = oracle::oracle_iou(pred, truth, 3);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(got[k], want[k]);
  EXPECT_EQ(cm.row_sum(0), 4);
  EXPECT_EQ(cm.row_sum(1), 4);
  EXPECT_EQ(cm.row_sum(2), 6);
  EXPECT_EQ(cm.total(), 14);
  EXPECT_DOUBLE_EQ(cm.mean_iou(), 100.0 * (0.5 + 0.5 + 4.0 / 6.0) / 3.0);
  EXPECT_DOUBLE_EQ(cm.pixel_accuracy(), 100.0 * 10.0 / 14.0);
}

TEST(ConfusionMatrix, RangeAndAbsentClasses) {
  ConfusionMatrix cm(4);
  cm.update(torch::tensor({0, 0, 1}), torch::tensor({0, 0, 1}));
  EXPECT_TRUE(std::isnan(cm.per_class_iou()[3]));
  EXPECT_DOUBLE_EQ(cm.mean_iou(), 100.0);
  EXPECT_THROW(cm.update(torch::tensor({7}), torch::tensor({0})), ConfigError);
}

TEST(MetricsReport, JsonAndCsvRoundTrip) {
  MetricsReport r;
  r.run_id = "x";
  r.kind = "pretrain-feat";
  r.epochs = {{1, 0.5, 0.25, 0.0, 3.0}, {2, 0.125, 0.0625, 0.0, 0.75}};
  r.final_metrics = {{"miou", 42.5}};
  r.seeds = {{"run", 7}};
  r.wall_clock_seconds = 3.5;
  const auto dir = fresh_dir("metrics_roundtrip");
  r.write(dir.string());
  EXPECT_FALSE(read_file(dir / "metrics.json").find("wall_clock") != std::string::npos);
  auto back = MetricsReport::read(dir.string());
  EXPECT_EQ(back.to_json(true), r.to_json(true));
  EXPECT_EQ(read_file(dir / "losses.csv").substr(0, 23), "epoch,mse,at,ld,total\n1");
}

TEST(Pretrain, ConvergesOnToyEncodedData) {
  auto s = world().settings();
  s.run.epochs = 20;
  s.run.warmup_epochs = 2;
  s.backbone = BackboneConfig{};
  s.regressor.fpn_channels = RegressorConfig{}.fpn_channels;
  s.dataset.encode.variant = EncodeVariant::kDeterministic;
  auto inputs = world().inputs();
  inputs.unlabeled = generate_shapes_dataset(256, 4, 32, 44).images;
  auto r = pretrain(s, inputs, LossVariant::kFeat, DistillConfig{});
  ASSERT_EQ(r.report.epochs.size(), 20u);
  EXPECT_LT(r.report.epochs.back().total, 0.5 * r.report.epochs.front().total) << r.report.losses_csv();
  EXPECT_EQ(r.report.kind, "pretrain-feat");
}

TEST(Pretrain, SameSeedBitIdenticalCheckpoint) {
  const auto s = world().settings();
  const auto dir = fresh_dir("pretrain_determinism");
  auto a = pretrain(s, world().inputs(), LossVariant::kFeat, DistillConfig{});
  auto b = pretrain(s, world().inputs(), LossVariant::kFeat, DistillConfig{});
  // The archive embeds the file stem, so both copies share a name.
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  save_pretrain_checkpoint((dir / "a" / "checkpoint.pt").string(), a);
  save_pretrain_checkpoint((dir / "b" / "checkpoint.pt").string(), b);
  EXPECT_EQ(read_file(dir / "a" / "checkpoint.pt"), read_file(dir / "b" / "checkpoint.pt"));
  EXPECT_EQ(stable_dump(a.report.to_json()), stable_dump(b.report.to_json()));
  auto loaded = load_backbone((dir / "a" / "checkpoint.pt").string());
  EXPECT_EQ(loaded->config(), s.backbone);
}

TEST(Pretrain, MixWithZeroLabelWeightMatchesFeatureOnly) {
  const auto s = world().settings();
  DistillConfig distill;
  distill.lambda_ld = 0.0;
  auto feat = pretrain(s, world().inputs(), LossVariant::kFeat, distill);
  auto mix = pretrain(s, world().inputs(world().interpreter()), LossVariant::kMix, distill);
  ASSERT_EQ(feat.report.epochs.size(), mix.report.epochs.size());
  for (size_t e = 0; e < feat.report.epochs.size(); ++e) {
    EXPECT_NEAR(feat.report.epochs[e].total, mix.report.epochs[e].total, 1e-6);
  }
}

TEST(Pretrain, MixRequiresSoftLogits) {
  const auto s = world().settings();
  auto backbone = build_backbone(s.backbone);
  auto regressor = build_regressor(s.regressor, s.backbone);
  auto plain = make_stream_factory(world().inputs(), s);
  EXPECT_THROW(pretrain_mix_distill(backbone, regressor, *world().interpreter(), plain, DistillConfig{}, s.run),
               ConfigError);
}

TEST(Pretrain, LabelsNeverReachThePretrainingBatch) {
  auto records = materialize(*iterate_encoded(world().teacher, world().labeled.images.narrow(0, 0, 4),
                                              world().settings().dataset, 0, world().labeled.masks.narrow(0, 0, 4),
                                              world().interpreter()));
  ASSERT_TRUE(records[0].label.has_value());
  EXPECT_FALSE(collate(records, false).labels.defined());
  EXPECT_TRUE(collate(records, true).labels.defined());
  EXPECT_TRUE(collate(records, false).soft_logits.defined());
}

TEST(Pretrain, NonFiniteLossNamesTheLevel) {
  const auto s = world().settings();
  auto backbone = build_backbone(s.backbone);
  auto regressor = build_regressor(s.regressor, s.backbone);
  auto base = make_stream_factory(world().inputs(), s);
  EpochStreamFactory poisoned = [&](int64_t epoch) -> std::unique_ptr<RecordStream> {
    auto records = materialize(*base(epoch));
    for (auto& r : records) {
      std::vector<PyramidLevel> levels(r.teacher_features.begin(), r.teacher_features.end());
      levels[1].tensor = levels[1].tensor.clone().fill_(std::nan(""));
      r.teacher_features = FeaturePyramid(levels, r.teacher_features.input_resolution());
    }
    auto shared = std::make_shared<std::vector<FeatureRecord>>(std::move(records));
    const auto n = static_cast<int64_t>(shared->size());
    return std::make_unique<PrefetchStream>(n, 8, 8, 1, [shared](int64_t first, int64_t count) {
      return std::vector<FeatureRecord>(shared->begin() + first, shared->begin() + first + count);
    });
  };
  try {
    pretrain_feature_distill(backbone, regressor, poisoned, DistillConfig{}, s.run);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("level 3"), std::string::npos) << e.what();
  }
}

TEST(Finetune, RandomInitBaselineAndMetricSanity) {
  const auto s = world().settings();
  auto report = finetune_segmentation(build_backbone(s.backbone), world().inputs().segmentation, 4, s.finetune);
  EXPECT_EQ(report.kind, "finetune");
  const double miou = report.final_metrics.at("miou");
  EXPECT_GE(miou, 0.0);
  EXPECT_LE(miou, 100.0);
  EXPECT_EQ(report.epochs.size(), static_cast<size_t>(s.finetune.epochs));
  auto frozen_opts = s.finetune;
  frozen_opts.freeze = true;
  auto backbone = build_backbone(s.backbone);
  const auto before = torch::cat({backbone->parameters()[0].flatten().clone()});
  auto readout = finetune_segmentation(backbone, world().inputs().segmentation, 4, frozen_opts);
  EXPECT_EQ(readout.kind, "readout");
  EXPECT_TRUE(torch::equal(before, backbone->parameters()[0].flatten()));
  EXPECT_THROW(finetune_segmentation(build_backbone(s.backbone), world().inputs().segmentation, 3, s.finetune),
               ConfigError);
}

TEST(Interpreter, TrainingImprovesAndLeavesTeacherUntouched) {
  const auto& w = world();
  const auto digest = w.teacher.digest();
  InterpreterTrainOptions opts;
  opts.epochs = 8;
  opts.warmup_epochs = 1;
  opts.seed = 3;
  auto cfg = dt_test::small_interpreter_config(w.teacher, 4);
  auto a = train_interpreter(w.teacher, w.labeled.images, w.labeled.masks, cfg, DistillConfig{}, opts);
  auto b = train_interpreter(w.teacher, w.labeled.images, w.labeled.masks, cfg, DistillConfig{}, opts);
  EXPECT_EQ(w.teacher.digest(), digest);
  EXPECT_GT(a.train_miou.back(), a.train_miou.front());
  for (const auto& p : a.interpreter->named_parameters()) {
    EXPECT_TRUE(torch::equal(p.value(), b.interpreter->named_parameters()[p.key()])) << p.key();
  }
  EXPECT_THROW(train_interpreter(w.teacher, torch::empty({0, 3, 32, 32}), torch::empty({0, 32, 32}, torch::kLong), cfg,
                                 DistillConfig{}, opts),
               ConfigError);
}

TEST(Sweep, EncodeModeRowsAndProbes) {
  auto s = world().settings();
  s.run.epochs = 1;
  s.run.warmup_epochs = 0;
  s.finetune.epochs = 1;
  s.finetune.warmup_epochs = 0;
  auto rows = run_ablation_sweep(SweepAxis::kEncodeMode, {"deterministic", "stochastic"}, world().inputs(), s);
  ASSERT_EQ(rows.size(), 2u);
  ASSERT_TRUE(rows[0].probe && rows[1].probe);
  EXPECT_LE(rows[0].probe->max_drift, 1e-6);
  EXPECT_GT(rows[1].probe->fraction_changed, 0.99);
  const auto table = sweep_table_markdown(SweepAxis::kEncodeMode, rows);
  EXPECT_NE(table.find("deterministic"), std::string::npos);
  EXPECT_NE(table.find("stochastic"), std::string::npos);
}

TEST(Sweep, TEncodeRunsEveryValue) {
  auto s = world().settings();
  s.run.epochs = 1;
  s.run.warmup_epochs = 0;
  s.finetune.epochs = 1;
  s.finetune.warmup_epochs = 0;
  auto inputs = world().inputs();
  inputs.unlabeled = inputs.unlabeled.narrow(0, 0, 8);
  auto rows = run_ablation_sweep(SweepAxis::kTEncode, {"10", "50", "150", "500"}, inputs, s);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.pretrain.epochs.size(), 1u);
    EXPECT_TRUE(r.finetune.final_metrics.count("miou"));
  }
  EXPECT_THROW(run_ablation_sweep(SweepAxis::kTEncode, {"ten"}, inputs, s), ConfigError);
  EXPECT_THROW(parse_sweep_axis("noise"), ConfigError);
}

TEST(ExperimentConfig, ShippedDefaultsMatchRecipe) {
  ExperimentConfig c;
  EXPECT_EQ(c.distill.lambda_at, 10.0);
  EXPECT_EQ(c.distill.p, 2);
  EXPECT_EQ(c.distill.tau, 4.0);
  EXPECT_EQ(c.distill.lambda_d, 3.0);
  EXPECT_EQ(c.distill.lambda_ld, 1.0);
  EXPECT_EQ(c.regressor.pool_scales, (std::vector<int64_t>{1, 2, 3, 6}));
  EXPECT_EQ(c.regressor.fpn_channels, 256);
  EXPECT_EQ(c.interpreter.model.fuse_channels, 256);
  EXPECT_EQ(c.interpreter.model.groups, 32);
  EXPECT_EQ(c.interpreter.model.dropout_rate, 0.1);
  EXPECT_EQ(c.teacher.model.beta_min, 1e-4);
  EXPECT_EQ(c.teacher.model.beta_max, 2e-2);
  EXPECT_EQ(c.dataset.spec.encode.t_encode, 150);
  EXPECT_EQ(c.interpreter.train.encode.t_encode, 50);
  EXPECT_NO_THROW(c.validate());
}

TEST(ExperimentConfig, UnknownKeyIsNamed) {
  try {
    parse_experiment_config(nlohmann::json::parse(R"({"distill": {"lamda_at": 3}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lamda_at"), std::string::npos);
  }
  EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"distill": {"tau": "hot"}})")), ConfigError);
  EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"dataset": {"resolution": 50}})")), ConfigError);
}

TEST(ExperimentConfig, OverridesAndJsonRoundTrip) {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "distill.lambda_at=0");
  apply_override(doc, "run.loss=mix");
  apply_override(doc, "regressor.pool_scales=[1,2]");
  apply_override(doc, "dataset.resolution=64");
  auto c = parse_experiment_config(doc);
  EXPECT_EQ(c.distill.lambda_at, 0.0);
  EXPECT_EQ(c.run.loss, LossVariant::kMix);
  auto again = parse_experiment_config(to_json(c));
  EXPECT_EQ(to_json(again), to_json(c));
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
}

TEST(ExperimentConfig, SeedReachesEveryComponent) {
  ExperimentConfig a, b;
  a.set_seed(7);
  b.set_seed(8);
  EXPECT_NE(a.backbone.seed, b.backbone.seed);
  EXPECT_NE(a.backbone.seed, a.regressor.seed);
  EXPECT_NE(a.run.pretrain.seed, b.run.pretrain.seed);
  EXPECT_NE(a.dataset.spec.encode.seed, b.dataset.spec.encode.seed);
  EXPECT_EQ(run_id_for("pretrain", to_json(a)), run_id_for("pretrain", to_json(a)));
  EXPECT_NE(run_id_for("pretrain", to_json(a)), run_id_for("pretrain", to_json(b)));
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli_exit");
  const auto bad = (dir / "bad.json").string();
  std::ofstream(bad) << R"({"distill": {"lamda_at": 3}})";
  EXPECT_EQ(cli({"--config", bad, "pretrain"}), kExitValidation);
  EXPECT_EQ(cli({"frobnicate"}), kExitValidation);
  EXPECT_EQ(cli({"pretrain", "--bogus-flag"}), kExitValidation);
  EXPECT_EQ(cli({"report", "--runs", (dir / "missing").string()}), kExitValidation);
  EXPECT_EQ(cli({"--output", (dir / "runs").string(), "--set", "dataset.resolution=64", "--set",
                 "regressor.pool_scales=[1,2]", "finetune", "--checkpoint", (dir / "nope.pt").string()}),
            kExitRuntime);
}

TEST(Cli, PretrainFinetuneAndReport) {
  const auto dir = fresh_dir("cli_flow");
  const auto cfg = (dir / "tiny.json").string();
  std::ofstream(cfg) << R"({
    "teacher": {"model": {"base_channels": 16, "head_channels": 16}, "train": {"epochs": 1, "batch_size": 16}},
    "dataset": {"num_unlabeled": 16, "num_labeled": 8, "num_interpreter_labeled": 4, "num_test": 8,
                "num_classes": 3, "resolution": 32},
    "backbone": {"stem_channels": 8, "stage_channels": [8, 8, 16, 16]},
    "regressor": {"fpn_channels": 16, "pool_scales": [1]},
    "interpreter": {"model": {"num_classes": 3}},
    "run": {"pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8},
            "finetune": {"epochs": 1, "warmup_epochs": 0, "head_channels": 8}}
  })";
  const auto out = (dir / "runs").string();
  ASSERT_EQ(cli({"--config", cfg, "--seed", "7", "--output", out, "pretrain"}), kExitOk);
  fs::path run;
  for (const auto& e : fs::directory_iterator(out)) run = e.path();
  ASSERT_FALSE(run.empty());
  for (const char* f : {"checkpoint.pt", "metrics.json", "losses.csv", "timing.json", "config.json", "teacher.pt"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }
  const auto metrics = nlohmann::json::parse(read_file(run / "metrics.json"));
  const auto config = nlohmann::json::parse(read_file(run / "config.json"));
  EXPECT_EQ(metrics.at("config").at("run").at("pretrain").at("seed"), config.at("run").at("pretrain").at("seed"));
  EXPECT_EQ(metrics.at("kind"), "pretrain-feat");

  ASSERT_EQ(cli({"--config", cfg, "--seed", "7", "--output", out, "finetune", "--checkpoint",
                 (run / "checkpoint.pt").string()}),
            kExitOk);
  ASSERT_EQ(cli({"report", "--runs", out}), kExitOk);
  const auto md = read_file(fs::path(out) / "report.md");
  EXPECT_NE(md.find("pretrain-feat"), std::string::npos);
  EXPECT_NE(md.find("finetune"), std::string::npos);
  int svgs = 0;
  for (const auto& e : fs::directory_iterator(out)) svgs += e.path().extension() == ".svg";
  EXPECT_GE(svgs, 2);
}

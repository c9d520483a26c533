#include <gtest/gtest.h>

#include <cmath>

#include "gendistill/errors.hpp"
#include "gendistill/segmentation.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace gendistill;

namespace {

double max_param_diff(torch::nn::Module& a, torch::nn::Module& b) {
  auto pa = a.named_parameters(), pb = b.named_parameters();
  double m = 0.0;
  for (const auto& item : pa) m = std::max(m, (item.value() - pb[item.key()]).abs().max().item<double>());
  return m;
}

std::vector<std::array<int64_t, 2>> spatial(const FeaturePyramid& p) {
  std::vector<std::array<int64_t, 2>> out;
  for (const auto& l : p) out.push_back({l.tensor.size(2), l.tensor.size(3)});
  return out;
}

const std::vector<std::array<int64_t, 2>> k64Sizes{{16, 16}, {8, 8}, {4, 4}, {2, 2}};

}  // namespace

TEST(Backbone, SameSeedIdenticalParameters) {
  BackboneConfig cfg;
  cfg.seed = 7;
  auto a = build_backbone(cfg), b = build_backbone(cfg);
  EXPECT_EQ(max_param_diff(*a, *b), 0.0);
}

TEST(Backbone, ChannelsAndStrides) {
  auto bb = build_backbone(BackboneConfig{});
  bb->eval();
  auto p = bb->forward_features(torch::randn({2, 3, 64, 64}));
  EXPECT_EQ(p.level_indices(), (std::vector<int>{2, 3, 4, 5}));
  const int64_t channels[] = {32, 64, 128, 256};
  for (int l = 2; l <= 5; ++l) {
    EXPECT_EQ(p.at(l).size(0), 2);
    EXPECT_EQ(p.at(l).size(1), channels[l - 2]);
  }
  EXPECT_EQ(spatial(p), k64Sizes);
}

TEST(Backbone, NonSquareInput) {
  auto bb = build_backbone(dt_test::small_backbone_config());
  auto p = bb->forward_features(torch::randn({1, 3, 96, 64}));
  EXPECT_EQ(p.at(2).size(2), 24);
  EXPECT_EQ(p.at(2).size(3), 16);
}

TEST(Backbone, RejectsBadInputAndConfig) {
  auto bb = build_backbone(dt_test::small_backbone_config());
  EXPECT_THROW(bb->forward_features(torch::randn({1, 3, 50, 64})), ShapeError);
  BackboneConfig cfg;
  cfg.blocks_per_stage = {1, 0, 1, 1};
  EXPECT_THROW(build_backbone(cfg), ConfigError);
  cfg = {};
  cfg.stage_channels[2] = 0;
  EXPECT_THROW(build_backbone(cfg), ConfigError);
}

TEST(Backbone, EvalForwardIsPure) {
  auto bb = build_backbone(dt_test::small_backbone_config(3));
  bb->eval();
  auto x = torch::randn({2, 3, 64, 64});
  EXPECT_EQ(max_abs_diff(bb->forward_features(x), bb->forward_features(x)), 0.0);
}

TEST(Backbone, ShapesIndependentOfValues) {
  auto bb = build_backbone(dt_test::small_backbone_config());
  bb->eval();
  torch::NoGradGuard no_grad;
  const auto reference = spatial(bb->forward_features(torch::zeros({1, 3, 64, 64})));
  for (int i = 0; i < 100; ++i) {
    auto x = torch::randn({1, 3, 64, 64}) * (1.0 + i);
    EXPECT_EQ(spatial(bb->forward_features(x)), reference);
  }
}

TEST(Schedule, LinearEndpoints) {
  auto s = make_linear_schedule(1000, 1e-4, 2e-2);
  EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta.back(), 2e-2);
  EXPECT_DOUBLE_EQ(s.alpha_bar.front(), 1.0 - 1e-4);
}

TEST(Schedule, SingleStep) {
  auto s = make_linear_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.alpha_bar.size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.5);
}

TEST(Schedule, MonotoneAndRecurrent) {
  auto s = make_linear_schedule(1000, 1e-4, 2e-2);
  for (size_t t = 1; t < s.beta.size(); ++t) {
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_GE(s.beta[t], s.beta[t - 1]);
    EXPECT_LE(std::abs(s.alpha_bar[t] - s.alpha_bar[t - 1] * (1.0 - s.beta[t])), 1e-12 * s.alpha_bar[t]);
  }
  EXPECT_LT(s.alpha_bar.back(), 0.01);
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.1), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.2, 0.1), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.1, 1.0), ConfigError);
  EXPECT_THROW(make_linear_schedule(0, 0.1, 0.2), ConfigError);
}

TEST(QSample, ZeroNoiseAndRange) {
  auto s = make_linear_schedule(1000, 1e-4, 2e-2);
  auto x0 = torch::randn({2, 3, 4, 4}, torch::kFloat64);
  auto xt = q_sample(s, x0, 500, torch::zeros_like(x0));
  EXPECT_TRUE(torch::equal(xt, x0 * std::sqrt(s.alpha_bar[500])));
  EXPECT_THROW(q_sample(s, x0, 1000, torch::zeros_like(x0)), std::out_of_range);
  EXPECT_THROW(q_sample(s, x0, -1, torch::zeros_like(x0)), std::out_of_range);
}

TEST(QSample, LinearInInputs) {
  auto s = make_linear_schedule(1000, 1e-4, 2e-2);
  auto x0 = torch::randn({1, 3, 4, 4}, torch::kFloat64);
  auto eps = torch::randn({1, 3, 4, 4}, torch::kFloat64);
  const double a = -2.5;
  EXPECT_LT((q_sample(s, x0 * a, 321, eps * a) - q_sample(s, x0, 321, eps) * a).abs().max().item<double>(), 1e-14);
}

TEST(QSample, MonteCarloMoments) {
  auto s = make_linear_schedule(1000, 1e-4, 2e-2);
  const int64_t n = 10000, t = 300;
  const double x0_value = 0.6;
  auto x0 = torch::full({n, 1, 1, 1}, x0_value, torch::kFloat64);
  auto gen = at::detail::createCPUGenerator(123);
  auto xt = q_sample(s, x0, t, torch::randn({n, 1, 1, 1}, gen, torch::kFloat64));
  const double mean = xt.mean().item<double>(), var = xt.var().item<double>();
  const double want_var = 1.0 - s.alpha_bar[t];
  EXPECT_LT(std::abs(mean - std::sqrt(s.alpha_bar[t]) * x0_value), 3.0 * std::sqrt(want_var / n));
  EXPECT_LT(std::abs(var - want_var) / want_var, 0.05);
}

TEST(Teacher, TapsOnePerLevel) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  std::set<int> levels;
  for (const auto& [block, level] : teacher.tap_levels()) levels.insert(level);
  EXPECT_EQ(teacher.config().tap_blocks, (std::vector<int64_t>{3, 6, 9, 12}));
  EXPECT_EQ(levels, (std::set<int>{2, 3, 4, 5}));
  EXPECT_EQ(teacher.tap_levels().size(), 4u);
}

TEST(Teacher, RejectsDuplicateTapLevel) {
  auto cfg = dt_test::small_teacher_config();
  cfg.tap_blocks = {2, 3, 9, 12};
  EXPECT_THROW(DiffusionTeacher{cfg}, ConfigError);
}

TEST(Teacher, DenoiseStepShapesAndPurity) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  auto x = torch::randn({2, 3, 64, 64});
  auto a = teacher.denoise_step_features(x, 150);
  auto b = teacher.denoise_step_features(x, 150);
  EXPECT_EQ(spatial(a.features), k64Sizes);
  EXPECT_EQ(a.epsilon.sizes(), x.sizes());
  EXPECT_EQ(max_abs_diff(a.features, b.features), 0.0);
  EXPECT_THROW(teacher.denoise_step_features(torch::randn({1, 3, 48, 64}), 1), ShapeError);
}

TEST(Teacher, EncodeModes) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  auto x = torch::rand({2, 3, 32, 32}) * 2 - 1;
  EncodeMode det{EncodeVariant::kDeterministic, 150, 5};
  EXPECT_LE(max_abs_diff(encode_features(teacher, x, det), encode_features(teacher, x, det)), 1e-6);
  EncodeMode s1{EncodeVariant::kStochastic, 150, 1}, s2{EncodeVariant::kStochastic, 150, 2};
  EXPECT_GT(max_abs_diff(encode_features(teacher, x, s1), encode_features(teacher, x, s2)), 0.0);
  EncodeMode bad{EncodeVariant::kStochastic, 0, 1};
  EXPECT_THROW(encode_features(teacher, x, bad), ConfigError);
  bad.t_encode = 1001;
  EXPECT_THROW(encode_features(teacher, x, bad), ConfigError);
}

TEST(Teacher, EncodeStepDefaults) {
  EXPECT_EQ(kGenericEncodeSteps, 150);
  EXPECT_EQ(kLabelEfficientEncodeSteps, 50);
  EXPECT_EQ(EncodeMode{}.t_encode, 150);
  EXPECT_EQ(InterpreterTrainOptions{}.encode.t_encode, 50);
}

TEST(Teacher, DeterministicNoiseKeyedBySampleOnly) {
  EncodeMode det{EncodeVariant::kDeterministic, 150, 9};
  EXPECT_TRUE(torch::equal(encode_noise(det, {3, 32, 32}, 4, 0), encode_noise(det, {3, 32, 32}, 4, 7)));
  EXPECT_FALSE(torch::equal(encode_noise(det, {3, 32, 32}, 4, 0), encode_noise(det, {3, 32, 32}, 5, 0)));
  EncodeMode sto{EncodeVariant::kStochastic, 150, 9};
  EXPECT_FALSE(torch::equal(encode_noise(sto, {3, 32, 32}, 4, 0), encode_noise(sto, {3, 32, 32}, 4, 1)));
}

TEST(Teacher, TrainingDeterministicAndDirectional) {
  auto data = generate_shapes_dataset(256, 5, 32, 3).images;
  TeacherTrainOptions opts;
  opts.epochs = 2;
  opts.batch_size = 8;
  opts.lr = 1e-3;
  opts.seed = 4;
  auto a = train_teacher(data, dt_test::small_teacher_config(1), opts);
  auto b = train_teacher(data, dt_test::small_teacher_config(1), opts);
  EXPECT_EQ(a.teacher.digest(), b.teacher.digest());
  ASSERT_EQ(a.heldout_mse.size(), 3u);
  EXPECT_LT(a.heldout_mse[2], a.heldout_mse[0]);
}

TEST(Teacher, ZeroEpochsReturnsInitialized) {
  auto data = generate_shapes_dataset(8, 5, 32, 3).images;
  TeacherTrainOptions opts;
  opts.epochs = 0;
  auto r = train_teacher(data, dt_test::small_teacher_config(2), opts);
  EXPECT_EQ(r.teacher.digest(), DiffusionTeacher(dt_test::small_teacher_config(2)).digest());
  EXPECT_THROW(train_teacher(torch::empty({0, 3, 32, 32}), dt_test::small_teacher_config(), opts), ConfigError);
}

TEST(Teacher, CheckpointRoundTrip) {
  DiffusionTeacher teacher(dt_test::small_teacher_config(6));
  const auto path = testing::TempDir() + "teacher_roundtrip.pt";
  teacher.save(path);
  auto loaded = DiffusionTeacher::load(path);
  EXPECT_EQ(loaded.digest(), teacher.digest());
  EXPECT_EQ(loaded.schedule().alpha_bar, teacher.schedule().alpha_bar);
  EXPECT_EQ(loaded.tap_levels(), teacher.tap_levels());
}

TEST(Sampler, DeterministicAndStructured) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  DiffusionSampler sampler(teacher, {32, 32}, 4);
  auto z = torch::randn({4, 3, 32, 32});
  auto [img_a, feat_a] = sampler.sample_with_features(z);
  auto [img_b, feat_b] = sampler.sample_with_features(z);
  EXPECT_TRUE(torch::equal(img_a, img_b));
  EXPECT_EQ(max_abs_diff(feat_a, feat_b), 0.0);
  EXPECT_TRUE(same_structure(feat_a, encode_features(teacher, z, EncodeMode{})));
  for (const auto& l : feat_a) EXPECT_EQ(l.tensor.size(0), 4);
  EXPECT_LE(img_a.abs().max().item<double>(), 1.0);
  EXPECT_THROW(sampler.sample_with_features(torch::randn({1, 3, 64, 64})), ShapeError);
}

TEST(Regressor, OutputShapesMatchTeacherChannels) {
  RegressorConfig cfg;
  cfg.teacher_channels = {{2, 64}, {3, 128}, {4, 256}, {5, 256}};
  cfg.pool_scales = {1, 2};
  BackboneConfig student;
  auto bb = build_backbone(student);
  auto reg = build_regressor(cfg, student);
  auto out = reg->forward(bb->forward_features(torch::randn({2, 3, 64, 64})));
  const int64_t want[] = {64, 128, 256, 256};
  for (int l = 2; l <= 5; ++l) {
    EXPECT_EQ(out.at(l).sizes(), (std::vector<int64_t>{2, want[l - 2], 32 >> (l - 1), 32 >> (l - 1)}));
  }
}

TEST(Regressor, Defaults) {
  RegressorConfig cfg;
  EXPECT_EQ(cfg.fpn_channels, 256);
  EXPECT_EQ(cfg.pool_scales, (std::vector<int64_t>{1, 2, 3, 6}));
}

TEST(Regressor, PoolScalesMustFitLevelFive) {
  RegressorConfig cfg;
  cfg.teacher_channels = {{2, 8}, {3, 8}, {4, 8}, {5, 8}};
  EXPECT_THROW(cfg.validate_for_input({64, 64}), ConfigError);
  EXPECT_NO_THROW(cfg.validate_for_input({192, 192}));
  cfg.pool_scales = {2, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.pool_scales = {1, 2};
  cfg.teacher_channels.erase(3);
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Regressor, ParameterCount) {
  RegressorConfig cfg;
  cfg.teacher_channels = {{2, 64}, {3, 128}, {4, 256}, {5, 256}};
  const BackboneConfig student;
  // conv (no bias) + batch norm affine, per ConvNormAct
  auto cna = [](int64_t in, int64_t out, int64_t k) { return in * out * k * k + 2 * out; };
  const int64_t c = cfg.fpn_channels, branch = c / 4, top = student.stage_channels[3];
  int64_t formula = 4 * cna(top, branch, 1) + cna(top + 4 * branch, c, 3);
  for (int i = 0; i < 3; ++i) formula += cna(student.stage_channels[i], c, 1);
  formula += 4 * cna(c, c, 3);
  for (const auto& [level, t] : cfg.teacher_channels) formula += c * t + t;
  EXPECT_EQ(count_parameters(cfg, student), formula);
  EXPECT_EQ(count_parameters(cfg, student), 3847360);
  EXPECT_EQ(count_parameters(cfg, student), count_parameters(cfg, student));
  auto wider = cfg;
  wider.fpn_channels *= 2;
  EXPECT_GT(count_parameters(wider, student), count_parameters(cfg, student));
}

TEST(Regressor, TopDownInfluence) {
  RegressorConfig cfg;
  cfg.fpn_channels = 32;
  cfg.pool_scales = {1, 2};
  cfg.teacher_channels = {{2, 8}, {3, 8}, {4, 8}, {5, 8}};
  auto student_cfg = dt_test::small_backbone_config();
  auto reg = build_regressor(cfg, student_cfg);
  reg->eval();
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> levels;
  for (int i = 0; i < 4; ++i) levels.push_back(torch::randn({1, student_cfg.stage_channels[i], 16 >> i, 16 >> i}));
  auto base = reg->forward(dt_test::make_pyramid(levels, 64));
  auto poke = [&](int index) {
    auto copy = levels;
    copy[index] = copy[index] + torch::randn_like(copy[index]);
    return reg->forward(dt_test::make_pyramid(copy, 64));
  };
  auto top = poke(3);
  for (int l = 2; l <= 5; ++l) EXPECT_GT((top.at(l) - base.at(l)).abs().max().item<double>(), 0.0) << l;
  auto bottom = poke(0);
  EXPECT_GT((bottom.at(2) - base.at(2)).abs().max().item<double>(), 0.0);
  for (int l = 3; l <= 5; ++l) EXPECT_EQ((bottom.at(l) - base.at(l)).abs().max().item<double>(), 0.0) << l;
}

TEST(Interpreter, Defaults) {
  InterpreterConfig cfg;
  EXPECT_EQ(cfg.fuse_channels, 256);
  EXPECT_EQ(cfg.groups, 32);
  EXPECT_EQ(cfg.dropout_rate, 0.1);
}

TEST(Interpreter, StrideFourLogitsAndModes) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  auto features = encode_features(teacher, torch::rand({2, 3, 64, 64}) * 2 - 1, EncodeMode{});
  auto interp = build_interpreter(dt_test::small_interpreter_config(teacher, 5));
  interp->eval();
  auto a = interp->forward(features);
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{2, 5, 16, 16}));
  EXPECT_TRUE(torch::equal(a, interp->forward(features)));
  interp->train();
  EXPECT_FALSE(torch::equal(interp->forward(features), interp->forward(features)));
  auto soft = emit_soft_labels(interp, features);
  EXPECT_TRUE(interp->is_training());
  EXPECT_TRUE(torch::equal(soft, a));
}

TEST(Interpreter, RejectsMissingLevelAndBadConfig) {
  DiffusionTeacher teacher(dt_test::small_teacher_config());
  auto features = encode_features(teacher, torch::rand({1, 3, 64, 64}), EncodeMode{});
  auto interp = build_interpreter(dt_test::small_interpreter_config(teacher, 3));
  std::vector<PyramidLevel> partial(features.levels().begin(), features.levels().end() - 1);
  EXPECT_THROW(interp->forward(FeaturePyramid(partial, features.input_resolution())), ShapeError);
  auto cfg = dt_test::small_interpreter_config(teacher, 3);
  cfg.dropout_rate = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = dt_test::small_interpreter_config(teacher, 1);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = dt_test::small_interpreter_config(teacher, 3);
  cfg.fuse_channels = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SegmentationHead, StrideFourOutput) {
  SegmentationHead head(std::array<int64_t, 4>{16, 16, 32, 32}, 24, 5);
  auto bb = build_backbone(dt_test::small_backbone_config());
  auto out = head->forward(bb->forward_features(torch::randn({2, 3, 64, 64})));
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{2, 5, 16, 16}));
}

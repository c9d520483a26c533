#include "gendistill/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "gendistill/checkpoint.hpp"
#include "gendistill/errors.hpp"
#include "gendistill/init.hpp"
#include "gendistill/rng.hpp"

namespace gendistill {

void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = nlohmann::json{{"base_channels", c.unet.base_channels},
                     {"channel_mult", c.unet.channel_mult},
                     {"num_res_blocks", c.unet.num_res_blocks},
                     {"attention_levels", c.unet.attention_levels},
                     {"head_channels", c.unet.head_channels},
                     {"dropout", c.unet.dropout},
                     {"patch", c.unet.patch},
                     {"diffusion_steps", c.diffusion_steps},
                     {"beta_min", c.beta_min},
                     {"beta_max", c.beta_max},
                     {"tap_blocks", c.tap_blocks},
                     {"sampling_steps", c.sampling_steps},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TeacherConfig& c) {
  j.at("base_channels").get_to(c.unet.base_channels);
  j.at("channel_mult").get_to(c.unet.channel_mult);
  j.at("num_res_blocks").get_to(c.unet.num_res_blocks);
  j.at("attention_levels").get_to(c.unet.attention_levels);
  j.at("head_channels").get_to(c.unet.head_channels);
  j.at("dropout").get_to(c.unet.dropout);
  j.at("patch").get_to(c.unet.patch);
  j.at("diffusion_steps").get_to(c.diffusion_steps);
  j.at("beta_min").get_to(c.beta_min);
  j.at("beta_max").get_to(c.beta_max);
  j.at("tap_blocks").get_to(c.tap_blocks);
  j.at("sampling_steps").get_to(c.sampling_steps);
  j.at("seed").get_to(c.seed);
}

DiffusionTeacher::DiffusionTeacher(const TeacherConfig& config)
    : config_(config), schedule_(make_linear_schedule(config.diffusion_steps, config.beta_min, config.beta_max)) {
  unet_ = UNet(config_.unet);
  std::set<int> covered;
  for (int64_t block : config_.tap_blocks) {
    const int64_t resolution = unet_->decoder_block_resolution(block);
    const int level = static_cast<int>(std::lround(std::log2(static_cast<double>(unet_->resolution_stride(resolution)))));
    if (level < FeaturePyramid::kMinLevel || level > FeaturePyramid::kMaxLevel) {
      throw ConfigError("tap block " + std::to_string(block) + " sits at stride 2^" + std::to_string(level) +
                        ", outside levels 2..5");
    }
    if (!covered.insert(level).second) {
      throw ConfigError("two tap blocks map to pyramid level " + std::to_string(level));
    }
    tap_levels_[block] = level;
  }
  if (covered != std::set<int>{2, 3, 4, 5}) throw ConfigError("teacher taps must cover levels 2,3,4,5 once each");
  initialize_parameters(*unet_, config_.seed, ConvInit::kFanInUniform);
  unet_->zero_init_outputs();
  unet_->eval();
}

std::map<int, int64_t> DiffusionTeacher::feature_channels() const {
  std::map<int, int64_t> out;
  for (const auto& [block, level] : tap_levels_) out[level] = unet_->decoder_block_channels(block);
  return out;
}

FeaturePyramid DiffusionTeacher::collect_taps(const UNetOutput& out, Resolution input) const {
  std::vector<PyramidLevel> levels;
  for (const auto& [block, level] : tap_levels_) levels.push_back({level, out.decoder_blocks[block - 1]});
  std::sort(levels.begin(), levels.end(), [](const auto& a, const auto& b) { return a.level < b.level; });
  return FeaturePyramid(std::move(levels), input);
}

DenoiseResult DiffusionTeacher::denoise_step_features(const torch::Tensor& x_t, int64_t t) const {
  if (x_t.dim() != 4 || x_t.size(1) != 3) throw ShapeError("teacher input must be [B,3,H,W]");
  if (x_t.size(2) % 32 != 0 || x_t.size(3) % 32 != 0) {
    throw ShapeError("teacher input " + std::to_string(x_t.size(2)) + "x" + std::to_string(x_t.size(3)) +
                     " not divisible by 32");
  }
  schedule_.check_index(t);
  torch::NoGradGuard no_grad;
  auto timesteps = torch::full({x_t.size(0)}, t, torch::kLong);
  auto out = unet_.ptr()->forward(x_t, timesteps);
  return {out.epsilon, collect_taps(out, {x_t.size(2), x_t.size(3)})};
}

void DiffusionTeacher::save(torch::serialize::OutputArchive& archive) const {
  nlohmann::json cfg = config_;
  write_string(archive, "teacher/config", cfg.dump());
  write_doubles(archive, "teacher/schedule/beta", schedule_.beta);
  write_doubles(archive, "teacher/schedule/alpha_bar", schedule_.alpha_bar);
  std::vector<double> taps;
  for (const auto& [block, level] : tap_levels_) {
    taps.push_back(static_cast<double>(block));
    taps.push_back(static_cast<double>(level));
  }
  write_doubles(archive, "teacher/taps", taps);
  write_module(archive, "teacher/unet", *unet_);
}

DiffusionTeacher DiffusionTeacher::load(torch::serialize::InputArchive& archive) {
  TeacherConfig cfg = nlohmann::json::parse(read_string(archive, "teacher/config")).get<TeacherConfig>();
  DiffusionTeacher teacher(cfg);
  const auto beta = read_doubles(archive, "teacher/schedule/beta");
  const auto alpha_bar = read_doubles(archive, "teacher/schedule/alpha_bar");
  if (beta != teacher.schedule_.beta || alpha_bar != teacher.schedule_.alpha_bar) {
    throw FormatError("teacher checkpoint schedule does not match its config");
  }
  read_module(archive, "teacher/unet", *teacher.unet_);
  teacher.unet_->eval();
  return teacher;
}

void DiffusionTeacher::save(const std::string& path) const {
  torch::serialize::OutputArchive archive;
  write_int(archive, "format_version", kCheckpointFormatVersion);
  save(archive);
  archive.save_to(path);
}

DiffusionTeacher DiffusionTeacher::load(const std::string& path) {
  auto archive = open_archive(path);
  return load(archive);
}

std::string DiffusionTeacher::digest() const { return parameter_digest(*unet_); }

double evaluate_denoising_mse(const DiffusionTeacher& teacher, const torch::Tensor& images, uint64_t seed) {
  torch::NoGradGuard no_grad;
  const int64_t n = images.size(0);
  if (n == 0) return 0.0;
  auto gen = make_generator({seed, 0xe7a1});
  const int64_t steps = teacher.schedule().steps();
  auto t = torch::randint(0, steps, {n}, gen, torch::kLong);
  auto noise = torch::randn(images.sizes(), gen, images.options());
  double total = 0.0;
  const int64_t chunk = 64;
  auto unet = teacher.unet().ptr();
  for (int64_t start = 0; start < n; start += chunk) {
    const int64_t len = std::min(chunk, n - start);
    auto x0 = images.narrow(0, start, len);
    auto eps = noise.narrow(0, start, len);
    auto tt = t.narrow(0, start, len);
    auto x_t = q_sample(teacher.schedule(), x0, tt, eps);
    auto pred = unet->forward(x_t, tt).epsilon;
    total += (pred - eps).pow(2).sum().item<double>();
  }
  return total / static_cast<double>(images.numel());
}

TeacherTrainResult train_teacher(const torch::Tensor& images, const TeacherConfig& config,
                                 const TeacherTrainOptions& options) {
  if (!images.defined() || images.dim() != 4 || images.size(0) == 0) {
    throw ConfigError("train_teacher: empty dataset");
  }
  if (options.epochs < 0 || options.batch_size < 1) throw ConfigError("train_teacher: invalid epochs/batch size");
  const int64_t n = images.size(0);
  const int64_t n_hold = n >= 10 ? std::max<int64_t>(1, std::llround(options.holdout_fraction * n)) : 0;
  const auto train = images.narrow(0, 0, n - n_hold);
  const auto heldout = n_hold > 0 ? images.narrow(0, n - n_hold, n_hold) : images;

  TeacherTrainResult result{DiffusionTeacher(config), {}, {}};
  auto& teacher = result.teacher;
  auto unet = teacher.unet().ptr();
  torch::manual_seed(options.seed);
  result.heldout_mse.push_back(evaluate_denoising_mse(teacher, heldout, options.seed));
  if (options.epochs == 0) return result;

  torch::optim::AdamW optimizer(unet->parameters(),
                                torch::optim::AdamWOptions(options.lr).weight_decay(options.weight_decay));
  const int64_t n_train = train.size(0);
  const int64_t steps = teacher.schedule().steps();
  for (int64_t epoch = 1; epoch <= options.epochs; ++epoch) {
    unet->train();
    std::vector<int64_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed({options.seed, static_cast<uint64_t>(epoch), 0x5f1e}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    auto gen = make_generator({options.seed, static_cast<uint64_t>(epoch), 0x7ea0});
    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < n_train; start += options.batch_size) {
      const int64_t len = std::min(options.batch_size, n_train - start);
      auto idx = torch::from_blob(order.data() + start, {len}, torch::kLong).clone();
      auto x0 = train.index_select(0, idx);
      auto t = torch::randint(0, steps, {len}, gen, torch::kLong);
      auto noise = torch::randn(x0.sizes(), gen, x0.options());
      auto x_t = q_sample(teacher.schedule(), x0, t, noise);
      auto loss = torch::mse_loss(unet->forward(x_t, t).epsilon, noise);
      if (!std::isfinite(loss.item<double>())) throw DivergenceError("teacher training loss is not finite");
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      epoch_loss += loss.item<double>();
      ++batches;
    }
    unet->eval();
    result.train_loss.push_back(epoch_loss / static_cast<double>(std::max<int64_t>(1, batches)));
    result.heldout_mse.push_back(evaluate_denoising_mse(teacher, heldout, options.seed));
  }
  unet->eval();
  return result;
}

std::string to_string(EncodeVariant v) { return v == EncodeVariant::kStochastic ? "stochastic" : "deterministic"; }

EncodeVariant parse_encode_variant(const std::string& s) {
  if (s == "stochastic") return EncodeVariant::kStochastic;
  if (s == "deterministic") return EncodeVariant::kDeterministic;
  throw ConfigError("unknown encode mode '" + s + "' (expected stochastic|deterministic)");
}

void EncodeMode::validate(int64_t diffusion_steps) const {
  if (t_encode < 1 || t_encode > diffusion_steps) {
    throw ConfigError("t_encode " + std::to_string(t_encode) + " outside [1, " + std::to_string(diffusion_steps) + "]");
  }
}

torch::Tensor encode_noise(const EncodeMode& mode, at::IntArrayRef sample_shape, int64_t sample_id, int64_t epoch) {
  auto gen = mode.variant == EncodeVariant::kStochastic
                 ? make_generator({mode.seed, static_cast<uint64_t>(sample_id), static_cast<uint64_t>(epoch), 0x5707})
                 : make_generator({static_cast<uint64_t>(sample_id), 0xde7e});
  return torch::randn(sample_shape, gen, torch::kFloat);
}

FeaturePyramid encode_features(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode,
                               std::span<const int64_t> sample_ids, int64_t epoch) {
  mode.validate(teacher.schedule().steps());
  if (images.dim() != 4 || static_cast<int64_t>(sample_ids.size()) != images.size(0)) {
    throw ShapeError("encode_features: need one sample id per image");
  }
  std::vector<torch::Tensor> noise;
  noise.reserve(sample_ids.size());
  for (int64_t id : sample_ids) noise.push_back(encode_noise(mode, images.sizes().slice(1), id, epoch));
  const int64_t t = mode.t_encode - 1;
  auto x_t = q_sample(teacher.schedule(), images, t, torch::stack(noise).to(images.dtype()));
  return teacher.denoise_step_features(x_t, t).features;
}

FeaturePyramid encode_features(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode) {
  std::vector<int64_t> ids(images.size(0));
  std::iota(ids.begin(), ids.end(), 0);
  return encode_features(teacher, images, mode, ids, 0);
}

DiffusionSampler::DiffusionSampler(DiffusionTeacher teacher, Resolution resolution, int64_t steps)
    : teacher_(std::move(teacher)), resolution_(resolution) {
  const int64_t total = teacher_.schedule().steps();
  if (steps < 2 || steps > total) throw ConfigError("sampler steps must lie in [2, T]");
  if (resolution.height % 32 != 0 || resolution.width % 32 != 0) {
    throw ConfigError("sampler resolution must be divisible by 32");
  }
  for (int64_t i = 0; i < steps; ++i) {
    timesteps_.push_back(std::llround(static_cast<double>(i) * (total - 1) / static_cast<double>(steps - 1)));
  }
}

std::vector<int64_t> DiffusionSampler::latent_shape() const { return {3, resolution_.height, resolution_.width}; }

std::pair<torch::Tensor, FeaturePyramid> DiffusionSampler::sample_with_features(const torch::Tensor& z) {
  const auto shape = latent_shape();
  if (z.dim() != 4 || z.sizes().slice(1) != at::IntArrayRef(shape)) {
    throw ShapeError("sampler latent must be [B,3," + std::to_string(shape[1]) + "," + std::to_string(shape[2]) + "]");
  }
  torch::NoGradGuard no_grad;
  const auto& ab = teacher_.schedule().alpha_bar;
  auto x = z.clone();
  for (size_t i = timesteps_.size() - 1; i >= 1; --i) {
    const int64_t t = timesteps_[i];
    const int64_t prev = timesteps_[i - 1];
    auto eps = teacher_.denoise_step_features(x, t).epsilon;
    auto x0 = ((x - std::sqrt(1.0 - ab[t]) * eps) / std::sqrt(ab[t])).clamp(-1.0, 1.0);
    x = std::sqrt(ab[prev]) * x0 + std::sqrt(1.0 - ab[prev]) * eps;
  }
  const int64_t t0 = timesteps_.front();
  auto final_pass = teacher_.denoise_step_features(x, t0);
  auto image = ((x - std::sqrt(1.0 - ab[t0]) * final_pass.epsilon) / std::sqrt(ab[t0])).clamp(-1.0, 1.0);
  return {image, std::move(final_pass.features)};
}

}  // namespace gendistill

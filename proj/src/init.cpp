#include "gendistill/init.hpp"

#include <cmath>
#include <cstdio>

#include "gendistill/rng.hpp"

namespace gendistill {

namespace {

void fill_normal(torch::Tensor& t, double stddev, at::Generator& gen) {
  torch::NoGradGuard no_grad;
  t.copy_(torch::randn(t.sizes(), gen, t.options()) * stddev);
}

void fill_uniform(torch::Tensor& t, double bound, at::Generator& gen) {
  torch::NoGradGuard no_grad;
  t.copy_((torch::rand(t.sizes(), gen, t.options()) * 2.0 - 1.0) * bound);
}

uint64_t fnv1a(uint64_t hash, const void* data, size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace

void initialize_parameters(torch::nn::Module& module, uint64_t seed, ConvInit conv_init) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator({seed, 0x1417});
  for (auto& item : module.named_modules()) {
    torch::nn::Module* m = item.value().get();
    if (auto* conv = dynamic_cast<torch::nn::Conv2dImpl*>(m)) {
      const auto& w = conv->weight;
      if (conv_init == ConvInit::kFanInUniform) {
        const double fan_in = static_cast<double>(w.size(1)) * w.size(2) * w.size(3);
        fill_uniform(conv->weight, 1.0 / std::sqrt(std::max(1.0, fan_in)), gen);
      } else {
        // fan_out = out_channels / groups * kh * kw, matching ResNet init.
        const double fan_out = static_cast<double>(w.size(0)) * w.size(2) * w.size(3) /
                               static_cast<double>(conv->options.groups());
        fill_normal(conv->weight, std::sqrt(2.0 / std::max(1.0, fan_out)), gen);
      }
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* lin = dynamic_cast<torch::nn::LinearImpl*>(m)) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
      fill_uniform(lin->weight, bound, gen);
      if (lin->bias.defined()) lin->bias.zero_();
    } else if (auto* bn = dynamic_cast<torch::nn::BatchNorm2dImpl*>(m)) {
      if (bn->weight.defined()) bn->weight.fill_(1.0);
      if (bn->bias.defined()) bn->bias.zero_();
      bn->reset_running_stats();
    } else if (auto* gn = dynamic_cast<torch::nn::GroupNormImpl*>(m)) {
      if (gn->weight.defined()) gn->weight.fill_(1.0);
      if (gn->bias.defined()) gn->bias.zero_();
    }
  }
}

std::string parameter_digest(const torch::nn::Module& module) {
  uint64_t hash = 0xcbf29ce484222325ULL;
  auto absorb = [&](const std::string& name, const torch::Tensor& t) {
    hash = fnv1a(hash, name.data(), name.size());
    const auto c = t.detach().cpu().contiguous();
    hash = fnv1a(hash, c.data_ptr(), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters()) absorb(p.key(), p.value());
  for (const auto& b : module.named_buffers()) absorb(b.key(), b.value());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

int64_t count_module_parameters(const torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

}  // namespace gendistill

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace gendistill {

enum class ConvInit {
  /// He-normal over fan-out; for conv stacks with ReLU between layers.
  kHeFanOut,
  /// Uniform in +-1/sqrt(fan_in); keeps variance from growing across the
  /// activation-free skip, resample and concat paths of a UNet.
  kFanInUniform,
};

/// Re-initializes every parameter of `module` from a private generator seeded
/// with `seed`, so equal seeds give bit-identical parameters regardless of the
/// global torch RNG state. Convolutions follow `conv_init`, norm layers get
/// unit scale and zero shift, biases zero.
void initialize_parameters(torch::nn::Module& module, uint64_t seed, ConvInit conv_init = ConvInit::kHeFanOut);

/// Stable content hash over all parameters and buffers (names and bytes).
std::string parameter_digest(const torch::nn::Module& module);

/// Total element count of all parameters.
int64_t count_module_parameters(const torch::nn::Module& module);

}  // namespace gendistill

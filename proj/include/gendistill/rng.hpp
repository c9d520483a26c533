#pragma once

#include <ATen/core/Generator.h>

#include <cstdint>
#include <initializer_list>

namespace gendistill {

/// splitmix64 finalizer; used to derive independent stream seeds.
uint64_t mix64(uint64_t x);

/// Derives one 64-bit seed from an ordered list of keys. Different key tuples
/// give statistically independent streams.
uint64_t derive_seed(std::initializer_list<uint64_t> keys);

/// A CPU generator seeded from the given key tuple.
at::Generator make_generator(std::initializer_list<uint64_t> keys);

/// Horizontal-flip decision for one sample in one epoch.
bool flip_coin(uint64_t seed, int64_t sample_id, int64_t epoch);

}  // namespace gendistill

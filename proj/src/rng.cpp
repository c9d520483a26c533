#include "gendistill/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace gendistill {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(std::initializer_list<uint64_t> keys) {
  uint64_t state = 0x243f6a8885a308d3ULL;
  for (uint64_t k : keys) state = mix64(state ^ mix64(k));
  return state;
}

at::Generator make_generator(std::initializer_list<uint64_t> keys) {
  return at::make_generator<at::CPUGeneratorImpl>(derive_seed(keys));
}

bool flip_coin(uint64_t seed, int64_t sample_id, int64_t epoch) {
  return (derive_seed({seed, 0x666c6970ULL, static_cast<uint64_t>(sample_id), static_cast<uint64_t>(epoch)}) >> 63) != 0;
}

}  // namespace gendistill

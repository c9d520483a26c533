#pragma once

#include <cstdint>
#include <string>

namespace dt_checks {

// Worst relative error between a loss kernel and its scalar oracle over
// `cases` random float64 instances.
double kernel_vs_oracle(const std::string& kernel, int cases, uint64_t seed);

struct GradCheck {
  double worst_rel_error = 0.0;   // ||analytic - fd|| / max(||analytic||, ||fd||)
  bool teacher_grad_zero = true;  // teacher-side .grad undefined or all zero
};

// Analytic gradient vs central differences (h = 1e-5) for one loss:
// "mse", "at", "feat", "interpreter", "ld" or "mix".
GradCheck gradient_vs_fd(const std::string& loss, int cases, uint64_t seed);

struct Invariance {
  double at_scale = 0.0;        // max |AT(c1 r, c2 g) - AT(r, g)|
  double at_permutation = 0.0;  // max |AT(perm r, perm g) - AT(r, g)|
  double whiten_mean = 0.0;     // max per-location |mean| after whitening
  double at_hand = 0.0;         // |AT - sqrt(0.8)| on the hand case
  double kd_hand = 0.0;         // |KD - ln 2| on uniform two-class logits
};

Invariance invariance_suite(int cases, uint64_t seed);

}  // namespace dt_checks

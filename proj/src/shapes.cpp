#include "gendistill/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "gendistill/errors.hpp"
#include "gendistill/rng.hpp"

namespace gendistill {

namespace {

// Local coordinates (u, v) relative to the shape centre, radius r.
bool inside(int64_t form, double u, double v, double r) {
  const double au = std::fabs(u), av = std::fabs(v);
  switch (form) {
    case 0:  // disk
      return u * u + v * v <= r * r;
    case 1:  // square
      return au <= 0.8 * r && av <= 0.8 * r;
    case 2: {  // upward triangle
      const double top = -r, bottom = 0.7 * r;
      if (v < top || v > bottom) return false;
      const double half = (v - top) / (bottom - top) * r;
      return au <= half;
    }
    case 3: {  // ring
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case 4:  // cross
      return (au <= 0.3 * r && av <= r) || (av <= 0.3 * r && au <= r);
    default:  // tall diamond
      return au / (0.6 * r) + av / r <= 1.0;
  }
}

}  // namespace

ShapesDataset generate_shapes_dataset(int64_t n, int64_t num_classes, int64_t resolution, uint64_t seed) {
  if (n < 0) throw ConfigError("shapes dataset: n must be >= 0");
  if (num_classes < 2 || num_classes > kShapeForms + 1) {
    throw ConfigError("shapes dataset: classes must be in [2, " + std::to_string(kShapeForms + 1) + "]");
  }
  if (resolution <= 0 || resolution % 32 != 0) {
    throw ConfigError("shapes dataset: resolution must be a positive multiple of 32");
  }
  const int64_t R = resolution;
  ShapesDataset out{torch::empty({n, 3, R, R}, torch::kFloat), torch::zeros({n, R, R}, torch::kLong)};
  auto img = out.images.accessor<float, 4>();
  auto mask = out.masks.accessor<int64_t, 3>();

  std::mt19937_64 rng(derive_seed({seed, 0x73686170ULL}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int64_t> count(1, 3);
  std::uniform_int_distribution<int64_t> form_dist(0, num_classes - 2);
  std::vector<double> canvas(static_cast<size_t>(3 * R * R));

  for (int64_t i = 0; i < n; ++i) {
    double base[3], fx[2], fy[2], phase[2];
    for (double& c : base) c = 0.2 + 0.6 * unit(rng);
    for (int k = 0; k < 2; ++k) {
      fx[k] = (1.0 + 4.0 * unit(rng)) * 2.0 * std::numbers::pi / static_cast<double>(R);
      fy[k] = (1.0 + 4.0 * unit(rng)) * 2.0 * std::numbers::pi / static_cast<double>(R);
      phase[k] = 2.0 * std::numbers::pi * unit(rng);
    }
    for (int64_t y = 0; y < R; ++y) {
      for (int64_t x = 0; x < R; ++x) {
        const double texture = 0.1 * std::sin(fx[0] * x + fy[0] * y + phase[0]) +
                               0.08 * std::sin(fx[1] * x - fy[1] * y + phase[1]);
        for (int c = 0; c < 3; ++c) {
          canvas[(c * R + y) * R + x] = base[c] + texture + 0.05 * (unit(rng) - 0.5);
        }
      }
    }

    const int64_t shapes = count(rng);
    for (int64_t s = 0; s < shapes; ++s) {
      const int64_t form = form_dist(rng);
      const double r = static_cast<double>(R) * (0.1 + 0.1 * unit(rng));
      const double cx = r + (static_cast<double>(R) - 2.0 * r) * unit(rng);
      const double cy = r + (static_cast<double>(R) - 2.0 * r) * unit(rng);
      double color[3];
      for (double& c : color) c = unit(rng);
      const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(cx - r) - 1);
      const int64_t x1 = std::min<int64_t>(R - 1, static_cast<int64_t>(cx + r) + 1);
      const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(cy - r) - 1);
      const int64_t y1 = std::min<int64_t>(R - 1, static_cast<int64_t>(cy + r) + 1);
      for (int64_t y = y0; y <= y1; ++y) {
        for (int64_t x = x0; x <= x1; ++x) {
          const double u = static_cast<double>(x) + 0.5 - cx;
          const double v = static_cast<double>(y) + 0.5 - cy;
          if (!inside(form, u, v, r)) continue;
          const double shade = 0.85 + 0.15 * v / r;
          for (int c = 0; c < 3; ++c) canvas[(c * R + y) * R + x] = color[c] * shade;
          mask[i][y][x] = form + 1;
        }
      }
    }

    for (int c = 0; c < 3; ++c) {
      for (int64_t y = 0; y < R; ++y) {
        for (int64_t x = 0; x < R; ++x) {
          const double v = std::clamp(canvas[(c * R + y) * R + x], 0.0, 1.0);
          img[i][c][y][x] = static_cast<float>(2.0 * v - 1.0);
        }
      }
    }
  }
  return out;
}

}  // namespace gendistill

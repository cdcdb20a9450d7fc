// Procedural two-class image set emitted as CIFAR-10 binary records, for
// environments without the real dataset. Each image holds one grating patch
// whose orientation is the label (0 = horizontal stripes, 1 = vertical) and a
// diagonal distractor patch, over a smooth tinted background with pixel noise.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "hiap/rng.hpp"

namespace hiap {

struct SyntheticOptions {
  std::size_t count = 1000;
  std::uint64_t seed = 1;
  double pixel_noise = 40.0;  // stddev, 0..255 scale
  double contrast = 45.0;     // grating amplitude
  double label_noise = 0.02;  // fraction of flipped labels
};

inline std::string generate_synthetic_cifar(const SyntheticOptions& opts) {
  constexpr int S = 32;
  Rng rng(opts.seed);
  std::string out;
  out.reserve(opts.count * 3073);
  std::vector<double> img(3 * S * S);
  auto at = [&](int c, int y, int x) -> double& { return img[static_cast<std::size_t>((c * S + y) * S + x)]; };

  for (std::size_t n = 0; n < opts.count; ++n) {
    const int cls = static_cast<int>(n % 2);
    double base[3];
    for (double& b : base) b = 70 + 110 * rng.uniform();
    const double fx = 0.05 + 0.15 * rng.uniform(), fy = 0.05 + 0.15 * rng.uniform();
    const double phase = 2 * std::numbers::pi * rng.uniform(), amp = 10 + 20 * rng.uniform();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) at(c, y, x) = base[c] + amp * std::sin(fx * x + fy * y + phase + 2.0 * c);

    // orientation 0 horizontal, 1 vertical, 2 diagonal
    auto grating = [&](int orientation) {
      const int size = 9 + static_cast<int>(rng.index(6));
      const int oy = static_cast<int>(rng.index(static_cast<std::size_t>(S - size + 1)));
      const int ox = static_cast<int>(rng.index(static_cast<std::size_t>(S - size + 1)));
      const double period = 3.0 + 2.0 * rng.uniform(), ph = 2 * std::numbers::pi * rng.uniform();
      double tint[3];
      for (double& t : tint) t = 0.5 + rng.uniform();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double u = orientation == 0 ? y : orientation == 1 ? x : (x + y) / std::numbers::sqrt2;
          const double v = opts.contrast * std::sin(2 * std::numbers::pi * u / period + ph);
          for (int c = 0; c < 3; ++c) at(c, oy + y, ox + x) += tint[c] * v;
        }
    };
    grating(2);
    grating(cls);

    int label = cls;
    if (rng.uniform() < opts.label_noise) label = 1 - label;
    out.push_back(static_cast<char>(label));
    for (double v : img) {
      const double px = std::clamp(v + rng.normal(0.0, opts.pixel_noise), 0.0, 255.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(px))));
    }
  }
  return out;
}

}  // namespace hiap

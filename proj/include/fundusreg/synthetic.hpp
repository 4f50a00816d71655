// fundusreg/synthetic.hpp
//
// Deterministic synthetic fundus photographs: a bright circular field of
// view with an optic-disc bump, a branching vessel tree and mild texture.
// Used by the montage validation and as self-contained test imagery.

#pragma once

#include "fundusreg/types.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace fundusreg {

namespace detail {

/// Multiplies a soft-edged disc into the image (dark stamp < 1, bright > 1).
inline void stamp(RasterImage& img, double cx, double cy, double radius,
                  const float gain[3]) {
  const int x0 = std::max(0, static_cast<int>(cx - radius - 2));
  const int x1 = std::min(img.width - 1, static_cast<int>(cx + radius + 2));
  const int y0 = std::max(0, static_cast<int>(cy - radius - 2));
  const int y1 = std::min(img.height - 1, static_cast<int>(cy + radius + 2));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d > radius + 1.5) continue;
      const double a = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      for (int c = 0; c < img.channels; ++c) {
        float& v = img.at(x, y, c);
        v = static_cast<float>(v * (1.0 + a * (gain[std::min(c, 2)] - 1.0)));
      }
    }
  }
}

}  // namespace detail

/// Renders a fundus-like test image. Deterministic in (width, height, seed).
inline RasterImage synthetic_fundus(int width, int height, uint32_t seed,
                                    int channels = 3) {
  RasterImage img = RasterImage::make(width, height, channels);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  const double cx = (width - 1) * 0.5, cy = (height - 1) * 0.5;
  const double fov_r = 0.47 * std::min(width, height);

  // Base colouring with a centre-bright radial falloff and a low-frequency
  // illumination wobble.
  const double base[3] = {0.72 + 0.08 * u01(rng), 0.42 + 0.06 * u01(rng),
                          0.20 + 0.05 * u01(rng)};
  double wob_fx[3], wob_fy[3], wob_ph[3], wob_amp[3];
  for (int i = 0; i < 3; ++i) {
    wob_fx[i] = (u01(rng) - 0.5) * 6.0 / fov_r;
    wob_fy[i] = (u01(rng) - 0.5) * 6.0 / fov_r;
    wob_ph[i] = u01(rng) * 2.0 * M_PI;
    wob_amp[i] = 0.025 + 0.035 * u01(rng);
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d >= fov_r) {
        for (int c = 0; c < channels; ++c) img.at(x, y, c) = 0.015f;
        continue;
      }
      const double falloff = 1.0 - 0.35 * (d / fov_r) * (d / fov_r);
      double wobble = 0.0;
      for (int i = 0; i < 3; ++i)
        wobble += wob_amp[i] *
                  std::sin(wob_fx[i] * x + wob_fy[i] * y + wob_ph[i]);
      for (int c = 0; c < channels; ++c) {
        const double tone = channels == 1 ? 0.5 : base[std::min(c, 2)];
        img.at(x, y, c) =
            static_cast<float>(std::clamp(tone * falloff + wobble, 0.0, 1.0));
      }
    }
  }

  // Optic disc: bright ellipse offset towards one side.
  const double disc_angle = (u01(rng) < 0.5 ? 0.0 : M_PI) + 0.35 * (u01(rng) - 0.5);
  const double disc_cx = cx + 0.55 * fov_r * std::cos(disc_angle);
  const double disc_cy = cy + 0.55 * fov_r * std::sin(disc_angle) * 0.4;
  const double disc_r = 0.11 * fov_r;
  const float disc_gain[3] = {1.25f, 1.45f, 1.7f};
  for (int i = 0; i < 6; ++i)
    detail::stamp(img, disc_cx, disc_cy, disc_r * (1.0 - 0.12 * i), disc_gain);

  // Vessel tree: random walks away from the optic disc, thinning with
  // length, occasionally branching.
  struct Walker {
    double x, y, dir, width;
    int depth;
  };
  std::vector<Walker> walkers;
  const int primaries = 9 + static_cast<int>(u01(rng) * 4);
  for (int i = 0; i < primaries; ++i) {
    const double a = u01(rng) * 2.0 * M_PI;
    walkers.push_back({disc_cx + disc_r * std::cos(a),
                       disc_cy + disc_r * std::sin(a), a,
                       std::max(2.2, fov_r / 90.0) * (0.7 + 0.6 * u01(rng)),
                       0});
  }
  const float vessel_gain[3] = {0.62f, 0.42f, 0.55f};
  while (!walkers.empty()) {
    Walker wk = walkers.back();
    walkers.pop_back();
    double remaining = fov_r * (wk.depth == 0 ? 1.5 : 0.7) * (0.6 + 0.6 * u01(rng));
    while (remaining > 0.0 && wk.width > 0.55) {
      const double step = 2.0;
      wk.x += step * std::cos(wk.dir);
      wk.y += step * std::sin(wk.dir);
      remaining -= step;
      const double d_c = std::hypot(wk.x - cx, wk.y - cy);
      if (d_c > fov_r * 0.98) break;
      wk.dir += (u01(rng) - 0.5) * 0.35;
      wk.width *= 0.9985;
      detail::stamp(img, wk.x, wk.y, wk.width, vessel_gain);
      if (wk.depth < 3 && u01(rng) < 0.012) {
        Walker child = wk;
        child.dir += (u01(rng) < 0.5 ? 1.0 : -1.0) * (0.5 + 0.5 * u01(rng));
        child.width = wk.width * 0.7;
        child.depth = wk.depth + 1;
        walkers.push_back(child);
        wk.width *= 0.85;
      }
    }
  }

  // Fine speckle: small dark dots plus pixel noise inside the FOV.
  const int dots = static_cast<int>(fov_r * fov_r / 900.0);
  const float dot_gain[3] = {0.7f, 0.55f, 0.65f};
  for (int i = 0; i < dots; ++i) {
    const double a = u01(rng) * 2.0 * M_PI;
    const double r = std::sqrt(u01(rng)) * fov_r * 0.92;
    detail::stamp(img, cx + r * std::cos(a), cy + r * std::sin(a),
                  0.8 + 1.8 * u01(rng), dot_gain);
  }
  std::normal_distribution<double> noise(0.0, 0.012);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (std::hypot(x - cx, y - cy) >= fov_r) continue;
      for (int c = 0; c < channels; ++c) {
        float& v = img.at(x, y, c);
        v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
      }
    }
  return img;
}

}  // namespace fundusreg

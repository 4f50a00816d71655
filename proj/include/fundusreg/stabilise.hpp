// fundusreg/stabilise.hpp
//
// Colour/contrast stabilisation: per channel the low-frequency illumination
// field is divided out inside the field of view, then samples are rescaled
// to mean 0.5 and standard deviation 0.15. Pixels outside the mask are 0.

#pragma once

#include "fundusreg/image.hpp"
#include "fundusreg/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fundusreg {

constexpr double kStabiliseTargetMean = 0.5;
constexpr double kStabiliseTargetStd = 0.15;

/// kernel_scale is the smoothing width as a fraction of the FOV radius
/// (radius/4 by default), large enough that vessels survive the division.
inline RasterImage stabilise_colour(const RasterImage& img, const FovMask& fov,
                                    double kernel_scale = 0.25) {
  if (img.width != fov.width || img.height != fov.height)
    fail(ErrorCode::dimension_mismatch, "mask does not match image");
  const int kernel = std::max(3, static_cast<int>(std::lround(
                                     fov.radius * kernel_scale)));
  RasterImage out = img;
  std::vector<float> channel(img.pixel_count());
  std::vector<float> flat(img.pixel_count());
  for (int c = 0; c < img.channels; ++c) {
    for (size_t i = 0; i < channel.size(); ++i)
      channel[i] = img.samples[i * img.channels + c];
    const auto illumination = masked_smooth(channel, fov, kernel);
    for (size_t i = 0; i < channel.size(); ++i) {
      const double illum = std::max(0.05, illumination[i]);
      flat[i] = static_cast<float>(channel[i] / illum);
    }
    const auto [mean, stddev] = masked_mean_std(flat, fov);
    const double gain = stddev > 1e-9 ? kStabiliseTargetStd / stddev : 0.0;
    for (size_t i = 0; i < channel.size(); ++i) {
      float v = 0.f;
      if (fov.mask[i]) {
        const double standardised =
            (flat[i] - mean) * gain + kStabiliseTargetMean;
        v = static_cast<float>(std::clamp(standardised, 0.0, 1.0));
      }
      out.samples[i * img.channels + c] = v;
    }
  }
  return out;
}

}  // namespace fundusreg

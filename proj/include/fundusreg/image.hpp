// fundusreg/image.hpp
//
// Small raster helpers shared by the preprocessing and warping stages.

#pragma once

#include "fundusreg/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fundusreg {

/// Single-channel Rec.601 luminance (copies mono images unchanged).
inline std::vector<float> to_gray(const RasterImage& img) {
  std::vector<float> gray(img.pixel_count());
  if (img.channels == 1) {
    gray.assign(img.samples.begin(), img.samples.end());
    return gray;
  }
  for (size_t i = 0; i < gray.size(); ++i) {
    const float* px = &img.samples[i * 3];
    gray[i] = 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2];
  }
  return gray;
}

namespace detail {

/// One separable box pass (running sums, window clamped at the borders).
inline void box_pass(std::vector<double>& v, int width, int height, int half) {
  std::vector<double> row(std::max(width, height));
  // Horizontal.
  for (int y = 0; y < height; ++y) {
    double* line = v.data() + static_cast<size_t>(y) * width;
    double acc = 0.0;
    int lo = 0, hi = -1;
    for (int x = 0; x < width; ++x) {
      const int want_lo = std::max(0, x - half);
      const int want_hi = std::min(width - 1, x + half);
      while (hi < want_hi) acc += line[++hi];
      while (lo < want_lo) acc -= line[lo++];
      row[x] = acc / (want_hi - want_lo + 1);
    }
    std::copy(row.begin(), row.begin() + width, line);
  }
  // Vertical.
  std::vector<double> col(height);
  for (int x = 0; x < width; ++x) {
    double acc = 0.0;
    int lo = 0, hi = -1;
    for (int y = 0; y < height; ++y) {
      const int want_lo = std::max(0, y - half);
      const int want_hi = std::min(height - 1, y + half);
      while (hi < want_hi) acc += v[static_cast<size_t>(++hi) * width + x];
      while (lo < want_lo) acc -= v[static_cast<size_t>(lo++) * width + x];
      col[y] = acc / (want_hi - want_lo + 1);
    }
    for (int y = 0; y < height; ++y)
      v[static_cast<size_t>(y) * width + x] = col[y];
  }
}

}  // namespace detail

/// Large-kernel smoothing restricted to a mask (normalised convolution):
/// three separable box passes of the given width approximate a Gaussian.
/// Returns the smoothed field; pixels far outside the mask converge to the
/// in-mask neighbourhood mean.
inline std::vector<double> masked_smooth(const std::vector<float>& values,
                                         const FovMask& mask, int kernel_width,
                                         int passes = 3) {
  const int w = mask.width, h = mask.height;
  const int half = std::max(1, kernel_width / 2);
  std::vector<double> num(values.size()), den(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const double m = mask.mask[i] ? 1.0 : 0.0;
    num[i] = values[i] * m;
    den[i] = m;
  }
  for (int p = 0; p < passes; ++p) {
    detail::box_pass(num, w, h, half);
    detail::box_pass(den, w, h, half);
  }
  std::vector<double> out(values.size());
  for (size_t i = 0; i < values.size(); ++i)
    out[i] = den[i] > 1e-9 ? num[i] / den[i] : 0.0;
  return out;
}

/// Mean and population standard deviation over mask-true pixels.
inline std::pair<double, double> masked_mean_std(const std::vector<float>& v,
                                                 const FovMask& mask) {
  double sum = 0.0, sum2 = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!mask.mask[i]) continue;
    sum += v[i];
    sum2 += static_cast<double>(v[i]) * v[i];
    ++n;
  }
  if (n == 0) return {0.0, 0.0};
  const double mean = sum / n;
  const double var = std::max(0.0, sum2 / n - mean * mean);
  return {mean, std::sqrt(var)};
}

}  // namespace fundusreg

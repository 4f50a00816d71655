// fundusreg/fov.hpp
//
// Field-of-view detection: Otsu threshold on the grayscale image, largest
// connected bright component, hole filling, centroid + equivalent-area
// radius.

#pragma once

#include "fundusreg/image.hpp"
#include "fundusreg/types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fundusreg {

namespace detail {

inline double otsu_threshold(const std::vector<float>& gray) {
  constexpr int kBins = 256;
  std::vector<size_t> hist(kBins, 0);
  for (float v : gray) {
    int b = static_cast<int>(v * (kBins - 1) + 0.5f);
    hist[std::clamp(b, 0, kBins - 1)]++;
  }
  const double total = static_cast<double>(gray.size());
  double sum_all = 0.0;
  for (int i = 0; i < kBins; ++i) sum_all += i * static_cast<double>(hist[i]);
  double sum_bg = 0.0, w_bg = 0.0, best_var = -1.0;
  int best_t = 0;
  for (int t = 0; t < kBins; ++t) {
    w_bg += static_cast<double>(hist[t]);
    if (w_bg == 0.0) continue;
    const double w_fg = total - w_bg;
    if (w_fg == 0.0) break;
    sum_bg += t * static_cast<double>(hist[t]);
    const double m_bg = sum_bg / w_bg;
    const double m_fg = (sum_all - sum_bg) / w_fg;
    const double var = w_bg * w_fg * (m_bg - m_fg) * (m_bg - m_fg);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return best_t / static_cast<double>(kBins - 1);
}

/// Labels the largest 4-connected true component; returns its pixel count.
inline size_t largest_component(const std::vector<uint8_t>& binary, int w,
                                int h, std::vector<uint8_t>& out) {
  out.assign(binary.size(), 0);
  std::vector<int32_t> label(binary.size(), -1);
  std::vector<size_t> stack;
  int best_label = -1;
  size_t best_size = 0;
  int next = 0;
  for (size_t start = 0; start < binary.size(); ++start) {
    if (!binary[start] || label[start] >= 0) continue;
    size_t size = 0;
    stack.push_back(start);
    label[start] = next;
    while (!stack.empty()) {
      const size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(i % w);
      const int y = static_cast<int>(i / w);
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int d = 0; d < 4; ++d) {
        if (nx[d] < 0 || nx[d] >= w || ny[d] < 0 || ny[d] >= h) continue;
        const size_t j = static_cast<size_t>(ny[d]) * w + nx[d];
        if (binary[j] && label[j] < 0) {
          label[j] = next;
          stack.push_back(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
    ++next;
  }
  if (best_label < 0) return 0;
  for (size_t i = 0; i < binary.size(); ++i)
    out[i] = label[i] == best_label ? 1 : 0;
  return best_size;
}

/// Fills holes: complement pixels unreachable from the image border become
/// part of the mask.
inline void fill_holes(std::vector<uint8_t>& mask, int w, int h) {
  std::vector<uint8_t> outside(mask.size(), 0);
  std::vector<size_t> stack;
  auto push = [&](int x, int y) {
    const size_t i = static_cast<size_t>(y) * w + x;
    if (!mask[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back(i);
    }
  };
  for (int x = 0; x < w; ++x) {
    push(x, 0);
    push(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    push(0, y);
    push(w - 1, y);
  }
  while (!stack.empty()) {
    const size_t i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % w);
    const int y = static_cast<int>(i / w);
    if (x > 0) push(x - 1, y);
    if (x < w - 1) push(x + 1, y);
    if (y > 0) push(x, y - 1);
    if (y < h - 1) push(x, y + 1);
  }
  for (size_t i = 0; i < mask.size(); ++i)
    if (!mask[i] && !outside[i]) mask[i] = 1;
}

}  // namespace detail

/// Detects the bright circular retinal disc. Centre is the filled
/// component's centroid, radius the equivalent-area circle radius.
inline FovMask detect_fov(const RasterImage& img) {
  const auto gray = to_gray(img);
  const auto [lo, hi] = std::minmax_element(gray.begin(), gray.end());
  if (*hi - *lo < 0.02)
    fail(ErrorCode::no_fov, "no field of view: image is nearly uniform");

  const double thresh = detail::otsu_threshold(gray);
  std::vector<uint8_t> binary(gray.size());
  for (size_t i = 0; i < gray.size(); ++i) binary[i] = gray[i] > thresh;

  FovMask fov = FovMask::make(img.width, img.height);
  const size_t area =
      detail::largest_component(binary, img.width, img.height, fov.mask);
  if (area < img.pixel_count() / 500)
    fail(ErrorCode::no_fov, "no field of view: bright region too small");
  detail::fill_holes(fov.mask, img.width, img.height);

  double sx = 0.0, sy = 0.0;
  size_t n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (fov.at(x, y)) {
        sx += x;
        sy += y;
        ++n;
      }
  fov.centre = Vec2(sx / n, sy / n);
  fov.radius = std::sqrt(static_cast<double>(n) / M_PI);
  return fov;
}

}  // namespace fundusreg

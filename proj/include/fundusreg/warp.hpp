// fundusreg/warp.hpp
//
// Inverse warping of image 1 into the reference frame through the
// invertible model, comparison composites and residual statistics.

#pragma once

#include "fundusreg/geometry.hpp"
#include "fundusreg/image.hpp"
#include "fundusreg/types.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace fundusreg {

struct WarpResult {
  RasterImage warped;
  std::vector<uint8_t> validity;  // true where the source was inside image 1
  double overlap_fraction = 0.0;  // valid AND reference FOV over mosaic FOV
};

namespace detail {

/// map_2_to_1 with the inverse homography precomputed; returns nothing when
/// the target pixel leaves the invertible range.
struct InverseMapper {
  Mat2 a_inv;
  Vec2 t_inv;
  RadialDistortion d1, d2;

  explicit InverseMapper(const RegistrationModel& m) : d1(m.d1), d2(m.d2) {
    const AffineHomography inv = m.H.inverse();
    a_inv = inv.A;
    t_inv = inv.T;
  }

  std::optional<Vec2> operator()(const Vec2& p2) const {
    const Vec2 q2 = d2.normalise(p2);
    const double denom = 1.0 + d2.k * q2.squaredNorm();
    if (denom <= 1e-9) return std::nullopt;
    const Vec2 u2 = d2.denormalise(q2 / denom);
    const Vec2 u1 = a_inv * u2 + t_inv;
    const Vec2 q1 = d1.normalise(u1);
    const double r_u2 = q1.squaredNorm();
    if (d1.k == 0.0 || r_u2 == 0.0) return u1;
    const double disc = 1.0 - 4.0 * d1.k * r_u2;
    if (disc <= 0.0) return std::nullopt;
    const double r_u = std::sqrt(r_u2);
    const double r_d = 2.0 * r_u / (1.0 + std::sqrt(disc));
    return d1.denormalise((r_d / r_u) * q1);
  }
};

inline float bilinear(const RasterImage& img, double x, double y, int c) {
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  double fx = x - x0, fy = y - y0;
  // Snap to the integer grid so an identity warp is exact.
  if (fx < 1e-9) fx = 0.0;
  if (fx > 1.0 - 1e-9) {
    ++x0;
    fx = 0.0;
  }
  if (fy < 1e-9) fy = 0.0;
  if (fy > 1.0 - 1e-9) {
    ++y0;
    fy = 0.0;
  }
  x0 = std::clamp(x0, 0, img.width - 1);
  y0 = std::clamp(y0, 0, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double v00 = img.at(x0, y0, c), v10 = img.at(x1, y0, c);
  const double v01 = img.at(x0, y1, c), v11 = img.at(x1, y1, c);
  return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                            fy * ((1 - fx) * v01 + fx * v11));
}

inline double cubic_weight(double t) {
  // Catmull-Rom.
  t = std::abs(t);
  if (t < 1.0) return 1.0 - 2.5 * t * t + 1.5 * t * t * t;
  if (t < 2.0) return 2.0 - 4.0 * t + 2.5 * t * t - 0.5 * t * t * t;
  return 0.0;
}

inline float bicubic(const RasterImage& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  if (x0 < 1 || y0 < 1 || x0 + 2 >= img.width || y0 + 2 >= img.height)
    return bilinear(img, x, y, c);
  double acc = 0.0, wsum = 0.0;
  for (int dy = -1; dy <= 2; ++dy) {
    for (int dx = -1; dx <= 2; ++dx) {
      const double w = cubic_weight(x - (x0 + dx)) * cubic_weight(y - (y0 + dy));
      acc += w * img.at(x0 + dx, y0 + dy, c);
      wsum += w;
    }
  }
  return static_cast<float>(std::clamp(wsum != 0.0 ? acc / wsum : 0.0, 0.0, 1.0));
}

}  // namespace detail

/// Renders image 1 into the reference frame by inverse mapping each target
/// pixel centre. `origin` offsets the canvas (for mosaic rendering);
/// `src_fov` restricts valid sources to image 1's FOV; `ref_fov` defines the
/// reference FOV for the overlap fraction (full frame when absent).
inline WarpResult warp_image(const RasterImage& img1,
                             const RegistrationModel& model, int target_width,
                             int target_height,
                             const FovMask* src_fov = nullptr,
                             const FovMask* ref_fov = nullptr,
                             const Vec2& origin = Vec2::Zero(),
                             bool bicubic = false) {
  WarpResult res;
  res.warped = RasterImage::make(target_width, target_height, img1.channels);
  res.validity.assign(res.warped.pixel_count(), 0);
  const detail::InverseMapper inverse(model);

  for (int y = 0; y < target_height; ++y) {
    for (int x = 0; x < target_width; ++x) {
      const auto src = inverse(Vec2(x, y) + origin);
      if (!src) continue;
      const double sx = src->x(), sy = src->y();
      if (sx < 0.0 || sy < 0.0 || sx > img1.width - 1 || sy > img1.height - 1)
        continue;
      if (src_fov && !src_fov->contains(*src)) continue;
      const size_t idx = static_cast<size_t>(y) * target_width + x;
      res.validity[idx] = 1;
      for (int c = 0; c < img1.channels; ++c)
        res.warped.samples[idx * img1.channels + c] =
            bicubic ? detail::bicubic(img1, sx, sy, c)
                    : detail::bilinear(img1, sx, sy, c);
    }
  }

  size_t inter = 0, uni = 0;
  for (int y = 0; y < target_height; ++y) {
    for (int x = 0; x < target_width; ++x) {
      const size_t idx = static_cast<size_t>(y) * target_width + x;
      bool in_ref = true;
      if (ref_fov) {
        const Vec2 p = Vec2(x, y) + origin;
        const int rx = static_cast<int>(std::lround(p.x()));
        const int ry = static_cast<int>(std::lround(p.y()));
        in_ref = rx >= 0 && rx < ref_fov->width && ry >= 0 &&
                 ry < ref_fov->height && ref_fov->at(rx, ry);
      }
      const bool valid = res.validity[idx] != 0;
      if (valid && in_ref) ++inter;
      if (valid || in_ref) ++uni;
    }
  }
  res.overlap_fraction = uni > 0 ? static_cast<double>(inter) / uni : 0.0;
  return res;
}

/// Mosaic canvas: bounding box of the reference frame and the mapped
/// image-1 FOV rim (64 samples along the circle). Returns width, height and
/// the origin of the canvas in reference-frame coordinates.
struct MosaicShape {
  int width = 0;
  int height = 0;
  Vec2 origin = Vec2::Zero();
};

inline MosaicShape mosaic_shape(const RegistrationModel& model,
                                const FovMask& fov1, int ref_width,
                                int ref_height) {
  double min_x = 0.0, min_y = 0.0;
  double max_x = ref_width - 1.0, max_y = ref_height - 1.0;
  for (int i = 0; i < 64; ++i) {
    const double a = 2.0 * M_PI * i / 64.0;
    const Vec2 rim = fov1.centre + fov1.radius * Vec2(std::cos(a), std::sin(a));
    const Vec2 mapped = map_1_to_2_saturated(rim, model);
    min_x = std::min(min_x, mapped.x());
    min_y = std::min(min_y, mapped.y());
    max_x = std::max(max_x, mapped.x());
    max_y = std::max(max_y, mapped.y());
  }
  MosaicShape shape;
  shape.origin = Vec2(std::floor(min_x), std::floor(min_y));
  shape.width = static_cast<int>(std::ceil(max_x - min_x)) + 1;
  shape.height = static_cast<int>(std::ceil(max_y - min_y)) + 1;
  return shape;
}

enum class CompositeMode { blend, checkerboard, difference };

inline const char* to_string(CompositeMode m) {
  switch (m) {
    case CompositeMode::blend: return "blend";
    case CompositeMode::checkerboard: return "checker";
    case CompositeMode::difference: return "diff";
  }
  return "";
}

/// Combines the warped image with the reference for visual inspection.
inline RasterImage composite(const WarpResult& warp, const RasterImage& ref,
                             CompositeMode mode) {
  if (!warp.warped.same_shape(ref))
    fail(ErrorCode::dimension_mismatch, "composite inputs differ in shape");
  const int w = ref.width, h = ref.height, ch = ref.channels;
  RasterImage out = RasterImage::make(w, h, ch);

  if (mode == CompositeMode::difference) {
    float max_diff = 0.f;
    for (size_t i = 0; i < out.pixel_count(); ++i) {
      if (!warp.validity[i]) continue;
      for (int c = 0; c < ch; ++c)
        max_diff = std::max(max_diff, std::abs(warp.warped.samples[i * ch + c] -
                                               ref.samples[i * ch + c]));
    }
    const float gain = max_diff > 0.f ? 1.f / max_diff : 0.f;
    for (size_t i = 0; i < out.pixel_count(); ++i) {
      if (!warp.validity[i]) continue;
      for (int c = 0; c < ch; ++c)
        out.samples[i * ch + c] =
            gain * std::abs(warp.warped.samples[i * ch + c] -
                            ref.samples[i * ch + c]);
    }
    return out;
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      const bool valid = warp.validity[i] != 0;
      for (int c = 0; c < ch; ++c) {
        const float wv = warp.warped.samples[i * ch + c];
        const float rv = ref.samples[i * ch + c];
        float v;
        if (mode == CompositeMode::blend) {
          v = valid ? 0.5f * (wv + rv) : rv;
        } else {  // checkerboard, 32 px tiles
          const bool take_warped = ((x / 32 + y / 32) % 2) == 0;
          v = take_warped ? (valid ? wv : rv) : rv;
        }
        out.samples[i * ch + c] = v;
      }
    }
  }
  return out;
}

struct ResidualStats {
  int count = 0;
  double mean_px = 0.0;
  double std_px = 0.0;
  double max_px = 0.0;
  double rel_image_pct = 0.0;   // of the reference image diagonal
  double rel_vessel_pct = 0.0;  // of the configured vessel calibre
};

/// Transfer-error statistics of a model over a correspondence set, in pixels
/// and relative to the reference diagonal / vessel calibre.
inline ResidualStats residual_stats(const RegistrationModel& model,
                                    const CorrespondenceSet& corr,
                                    int ref_width, int ref_height,
                                    double vessel_calibre_px = 30.0) {
  if (corr.count() == 0)
    fail(ErrorCode::invalid_argument, "empty correspondence set");
  ResidualStats s;
  s.count = corr.count();
  double sum = 0.0, sum2 = 0.0;
  for (const auto& [p1, p2] : corr.pairs) {
    const double e = (map_1_to_2_saturated(p1, model) - p2).norm();
    sum += e;
    sum2 += e * e;
    s.max_px = std::max(s.max_px, e);
  }
  s.mean_px = sum / s.count;
  s.std_px = std::sqrt(std::max(0.0, sum2 / s.count - s.mean_px * s.mean_px));
  const double diag = std::hypot(ref_width, ref_height);
  s.rel_image_pct = 100.0 * s.mean_px / diag;
  s.rel_vessel_pct = 100.0 * s.mean_px / vessel_calibre_px;
  return s;
}

}  // namespace fundusreg

// fundusreg/montage.hpp
//
// Simulated-montage validation: synthesise a deformed copy of a fundus
// image through a known ground-truth model (affine + division-model radial
// distortion calibrated to the 45-degree camera geometry), plant exact
// landmark correspondences, and score a fitted model against them.

#pragma once

#include "fundusreg/estimation.hpp"
#include "fundusreg/fov.hpp"
#include "fundusreg/geometry.hpp"
#include "fundusreg/types.hpp"
#include "fundusreg/warp.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fundusreg {

/// Division-model coefficient whose rim displacement matches a spherical
/// projection: an eye ball of radius rho = R / theta (theta the camera
/// half-angle) displaces the FOV rim by rho (tan(theta) - theta).
inline double division_k_for_fov(double fov_radius_px, double norm_scale,
                                 double half_angle_rad) {
  const double beta =
      (std::tan(half_angle_rad) - half_angle_rad) / half_angle_rad;
  const double r_hat = fov_radius_px / norm_scale;
  const double k = -beta / (r_hat * r_hat * (1.0 + beta));
  // Stay clear of the estimator bound.
  return std::clamp(k, -0.195, 0.195);
}

struct GroundTruthDeformation {
  AffineHomography affine;  // rotation/scale/shear; T comes from the
                            // overlap search in make_montage
  double overlap_target = 0.8;
  int landmark_grid = 16;
  int target_width = 0;   // 0: same as the source image
  int target_height = 0;
  double half_angle_deg = 22.5;

  /// Table-1-regime deformation: bounded rotation, near-isotropic scaling,
  /// slight shear.
  static GroundTruthDeformation randomised(uint64_t seed,
                                           double max_rotation_deg = 10.0,
                                           double scale_lo = 0.95,
                                           double scale_hi = 1.10,
                                           double max_aniso = 0.008,
                                           double max_shear = 0.004) {
    Rng rng(seed);
    GroundTruthDeformation d;
    const double rot =
        rng.uniform(-max_rotation_deg, max_rotation_deg) * M_PI / 180.0;
    const double scale = rng.uniform(scale_lo, scale_hi);
    const double aniso = rng.uniform(-max_aniso, max_aniso);
    const double shear = rng.uniform(-max_shear, max_shear);
    Mat2 r;
    r << std::cos(rot), -std::sin(rot), std::sin(rot), std::cos(rot);
    Mat2 s;
    s << scale * (1.0 + aniso), shear * scale, 0.0, scale * (1.0 - aniso);
    d.affine.A = r * s;
    return d;
  }
};

struct MontagePair {
  RasterImage image2;
  FovMask fov2;                // camera-2 field stop intersected with content
  CorrespondenceSet landmarks; // exact pairs (image-1 frame, image-2 frame)
  RegistrationModel truth;
  double measured_overlap = 0.0;
};

namespace detail {

/// Fraction of the mosaic FOV shared by both cameras, sampled on a coarse
/// grid in the target frame.
inline double disc_overlap(const RegistrationModel& truth, const FovMask& fov1,
                           const Vec2& disc2_centre, double disc2_radius,
                           int w2, int h2, int step = 4) {
  const InverseMapper inverse(truth);
  size_t inter = 0, uni = 0;
  for (int y = 0; y < h2; y += step) {
    for (int x = 0; x < w2; x += step) {
      const Vec2 p(x, y);
      const bool in_disc2 = (p - disc2_centre).norm() <= disc2_radius;
      bool in_mapped = false;
      if (const auto src = inverse(p)) in_mapped = fov1.contains(*src);
      if (in_disc2 && in_mapped) ++inter;
      if (in_disc2 || in_mapped) ++uni;
    }
  }
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

}  // namespace detail

/// Builds the deformed partner image. The second image is rendered by
/// inverse-warping the source through the ground-truth chain; landmark
/// positions are mapped exactly through the same chain. The translation is
/// searched so the measured FOV overlap hits the requested target.
inline MontagePair make_montage(const RasterImage& img,
                                const GroundTruthDeformation& deform,
                                uint64_t seed) {
  const FovMask fov1 = detect_fov(img);
  const int w2 = deform.target_width > 0 ? deform.target_width : img.width;
  const int h2 = deform.target_height > 0 ? deform.target_height : img.height;
  const double half_angle = deform.half_angle_deg * M_PI / 180.0;

  RegistrationModel truth;
  truth.H = deform.affine;
  truth.mode = (w2 == img.width && h2 == img.height)
                   ? DistortionMode::one_distortion
                   : DistortionMode::two_distortions;
  const Vec2 c1((img.width - 1) * 0.5, (img.height - 1) * 0.5);
  const Vec2 c2((w2 - 1) * 0.5, (h2 - 1) * 0.5);
  const double s1 = 1.0 + c1.norm();
  const double s2 = 1.0 + c2.norm();
  const Vec2 disc2_centre = c2;
  const double mean_scale =
      std::sqrt(std::abs(deform.affine.A.determinant()));
  const double disc2_radius = 0.47 * std::min(w2, h2);
  const double k1 = division_k_for_fov(fov1.radius, s1, half_angle);
  const double k2 = truth.mode == DistortionMode::one_distortion
                        ? k1
                        : division_k_for_fov(disc2_radius, s2, half_angle);
  truth.d1 = RadialDistortion::make(k1, c1);
  truth.d2 = RadialDistortion::make(k2, c2);

  // Translation along a seed-jittered direction; overlap decreases
  // monotonically with the offset, so bisect. Recentring is anchored on the
  // image centre (a fixed point of both distortions), so an identity affine
  // with matching cameras yields the exact identity model at zero offset.
  Rng rng(seed);
  const double dir_angle = rng.uniform(-0.26, 0.26);
  const Vec2 dir(std::cos(dir_angle), std::sin(dir_angle));
  const Vec2 mapped_centre = deform.affine.A * c1;
  auto with_offset = [&](double delta) {
    RegistrationModel m = truth;
    m.H.T = disc2_centre + delta * dir - mapped_centre;
    return m;
  };
  auto overlap_at = [&](double delta) {
    return detail::disc_overlap(with_offset(delta), fov1, disc2_centre,
                                disc2_radius, w2, h2);
  };

  const double max_overlap = overlap_at(0.0);
  if (max_overlap < deform.overlap_target - 0.03)
    fail(ErrorCode::overlap_unreachable,
         "requested overlap unreachable for this deformation");
  double lo = 0.0, hi = fov1.radius * mean_scale + disc2_radius;
  if (max_overlap <= deform.overlap_target) {
    truth = with_offset(0.0);  // cannot exceed the target: keep concentric
  } else if (overlap_at(hi) > deform.overlap_target) {
    truth = with_offset(hi);
  } else {
    for (int i = 0; i < 40; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (overlap_at(mid) >= deform.overlap_target)
        lo = mid;
      else
        hi = mid;
    }
    truth = with_offset(lo);
  }

  MontagePair out;
  out.truth = truth;
  out.measured_overlap = detail::disc_overlap(truth, fov1, disc2_centre,
                                              disc2_radius, w2, h2, 2);

  // Render camera 2: inverse warp restricted to both field stops.
  WarpResult warp = warp_image(img, truth, w2, h2, &fov1);
  out.image2 = std::move(warp.warped);
  out.fov2 = FovMask::make(w2, h2);
  out.fov2.centre = disc2_centre;
  out.fov2.radius = disc2_radius;
  for (int y = 0; y < h2; ++y) {
    for (int x = 0; x < w2; ++x) {
      const size_t i = static_cast<size_t>(y) * w2 + x;
      const bool in_disc =
          (Vec2(x, y) - disc2_centre).norm() <= disc2_radius;
      if (in_disc && warp.validity[i]) {
        out.fov2.set(x, y, true);
      } else {
        out.fov2.set(x, y, false);
        for (int c = 0; c < out.image2.channels; ++c)
          out.image2.samples[i * out.image2.channels + c] = 0.f;
      }
    }
  }

  // Equally spaced landmarks kept when inside both fields of view.
  const int n = std::max(2, deform.landmark_grid);
  for (int gy = 0; gy < n; ++gy) {
    for (int gx = 0; gx < n; ++gx) {
      const Vec2 l1 =
          fov1.centre + Vec2((2.0 * gx / (n - 1) - 1.0) * fov1.radius,
                             (2.0 * gy / (n - 1) - 1.0) * fov1.radius);
      if ((l1 - fov1.centre).norm() > 0.95 * fov1.radius) continue;
      if (!fov1.contains(l1)) continue;
      const Vec2 l2 = map_1_to_2(l1, truth);
      if ((l2 - disc2_centre).norm() > 0.95 * disc2_radius) continue;
      if (l2.x() < 0 || l2.y() < 0 || l2.x() > w2 - 1 || l2.y() > h2 - 1)
        continue;
      out.landmarks.add(l1, l2);
    }
  }
  return out;
}

struct MontageScore {
  int count = 0;
  double mean_px = 0.0;
  double std_px = 0.0;
  double max_px = 0.0;
  double rel_image_pct = 0.0;
  double rel_vessel_pct = 0.0;
  double inner_third_mean = 0.0;  // landmarks within R/3 of the FOV centre
  double outer_third_mean = 0.0;  // landmarks beyond 2R/3
};

/// Landmark transfer errors of a fitted model against the planted ground
/// truth. Purely analytic: no image resampling is involved.
inline MontageScore score_montage(const CorrespondenceSet& landmarks,
                                  const RegistrationModel& model,
                                  int ref_width, int ref_height,
                                  const Vec2& fov1_centre, double fov1_radius,
                                  double vessel_calibre_px = 30.0) {
  if (landmarks.count() == 0)
    fail(ErrorCode::invalid_argument, "no landmarks to score");
  MontageScore s;
  s.count = landmarks.count();
  double sum = 0.0, sum2 = 0.0;
  double inner_sum = 0.0, outer_sum = 0.0;
  int inner_n = 0, outer_n = 0;
  for (const auto& [l1, l2] : landmarks.pairs) {
    const double e = (map_1_to_2_saturated(l1, model) - l2).norm();
    sum += e;
    sum2 += e * e;
    s.max_px = std::max(s.max_px, e);
    const double rel_r = (l1 - fov1_centre).norm() / fov1_radius;
    if (rel_r < 1.0 / 3.0) {
      inner_sum += e;
      ++inner_n;
    } else if (rel_r >= 2.0 / 3.0) {
      outer_sum += e;
      ++outer_n;
    }
  }
  s.mean_px = sum / s.count;
  s.std_px = std::sqrt(std::max(0.0, sum2 / s.count - s.mean_px * s.mean_px));
  const double diag = std::hypot(ref_width, ref_height);
  s.rel_image_pct = 100.0 * s.mean_px / diag;
  s.rel_vessel_pct = 100.0 * s.mean_px / vessel_calibre_px;
  s.inner_third_mean = inner_n > 0 ? inner_sum / inner_n : 0.0;
  s.outer_third_mean = outer_n > 0 ? outer_sum / outer_n : 0.0;
  return s;
}

}  // namespace fundusreg

// fundusreg/matching.hpp
//
// Point matching across an image pair: Lowe ratio matching, the
// statistical correspondence-vector filter (two passes over vector lengths
// and orientations in stitched side-by-side coordinates), and the
// three-step procedure that re-filters after removing the estimated
// homography.

#pragma once

#include "fundusreg/estimation.hpp"
#include "fundusreg/sift.hpp"
#include "fundusreg/types.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fundusreg {

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

/// Mean direction of a set of angles (safe across the +/-pi seam).
inline double circular_mean(const std::vector<double>& angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  return std::atan2(s, c);
}

/// Nearest/second-nearest descriptor matching with Lowe's ratio test.
/// Returned vectors carry raw (unstitched) coordinates plus the keypoint
/// indices; conflicts on a reference keypoint are resolved globally by
/// ascending descriptor distance.
inline std::vector<MatchVector> match_ratio(const std::vector<Keypoint>& kp1,
                                            const std::vector<Keypoint>& kp2,
                                            double ratio = 0.8) {
  if (kp1.empty() || kp2.empty() || ratio <= 0.0) return {};
  const int n1 = static_cast<int>(kp1.size());
  const int n2 = static_cast<int>(kp2.size());

  using DescMatrix =
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  DescMatrix m1(n1, kDescriptorSize), m2(n2, kDescriptorSize);
  for (int i = 0; i < n1; ++i) m1.row(i) = kp1[i].descriptor.transpose();
  for (int j = 0; j < n2; ++j) m2.row(j) = kp2[j].descriptor.transpose();
  Eigen::VectorXf sq1 = m1.rowwise().squaredNorm();
  Eigen::VectorXf sq2 = m2.rowwise().squaredNorm();
  DescMatrix gram = m1 * m2.transpose();

  struct Candidate {
    int i, j;
    float dist2;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(n1);
  const float r2 = static_cast<float>(ratio * ratio);
  for (int i = 0; i < n1; ++i) {
    float best = std::numeric_limits<float>::infinity();
    float second = std::numeric_limits<float>::infinity();
    int best_j = -1;
    for (int j = 0; j < n2; ++j) {
      const float d2 = std::max(0.f, sq1(i) + sq2(j) - 2.f * gram(i, j));
      if (d2 < best) {
        second = best;
        best = d2;
        best_j = j;
      } else if (d2 < second) {
        second = d2;
      }
    }
    if (best_j < 0) continue;
    if (best < r2 * second) candidates.push_back({i, best_j, best});
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) {
              if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
              return a.i < b.i;
            });
  std::vector<uint8_t> used1(n1, 0), used2(n2, 0);
  std::vector<MatchVector> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (used1[c.i] || used2[c.j]) continue;
    used1[c.i] = used2[c.j] = 1;
    out.push_back(MatchVector::between(kp1[c.i].position, kp2[c.j].position,
                                       c.i, c.j));
  }
  return out;
}

/// Shifts the reference-side endpoints into stitched coordinates (image 1
/// left, image 2 right of the common padded canvas).
inline std::vector<MatchVector> with_stitch_offset(
    const std::vector<MatchVector>& matches, double offset_x) {
  std::vector<MatchVector> out;
  out.reserve(matches.size());
  for (const auto& m : matches)
    out.push_back(MatchVector::between(m.p1, m.p2 + Vec2(offset_x, 0.0),
                                       m.index1, m.index2));
  return out;
}

namespace detail {

struct VectorStats {
  double mean_len = 0.0;
  double std_len = 0.0;
  double mean_angle = 0.0;
  double std_angle = 0.0;  // of wrapped deviations about the circular mean

  static VectorStats of(const std::vector<MatchVector>& v) {
    VectorStats s;
    std::vector<double> angles;
    angles.reserve(v.size());
    double sum = 0.0, sum2 = 0.0;
    for (const auto& m : v) {
      sum += m.length;
      sum2 += m.length * m.length;
      angles.push_back(m.orientation);
    }
    const double n = static_cast<double>(v.size());
    s.mean_len = sum / n;
    s.std_len = std::sqrt(std::max(0.0, sum2 / n - s.mean_len * s.mean_len));
    s.mean_angle = circular_mean(angles);
    double dev2 = 0.0;
    for (double a : angles) {
      const double d = wrap_angle(a - s.mean_angle);
      dev2 += d * d;
    }
    s.std_angle = std::sqrt(dev2 / n);
    return s;
  }
};

}  // namespace detail

/// Two-pass statistical selection of correspondence vectors in stitched
/// coordinates. Pass 1 keeps vectors within one length standard deviation
/// and 5 degrees of the mean; pass 2 relaxes to max(3 sigma, 5% of the line
/// count) and max(5 degrees, angular sigma), with statistics recomputed on
/// the survivors.
inline std::vector<MatchVector> filter_vectors(
    const std::vector<MatchVector>& matches, int ysize) {
  constexpr double kFiveDegrees = 5.0 * M_PI / 180.0;
  if (matches.size() < 4)
    fail(ErrorCode::insufficient_matches,
         "insufficient matches before vector filtering");

  const auto s1 = detail::VectorStats::of(matches);
  std::vector<MatchVector> pass1;
  pass1.reserve(matches.size());
  for (const auto& m : matches) {
    if (std::abs(m.length - s1.mean_len) > s1.std_len) continue;
    if (std::abs(wrap_angle(m.orientation - s1.mean_angle)) > kFiveDegrees)
      continue;
    pass1.push_back(m);
  }
  if (pass1.size() < 4)
    fail(ErrorCode::insufficient_matches,
         "insufficient matches after the first vector-filter pass");

  const auto s2 = detail::VectorStats::of(pass1);
  const double len_tol = std::max(3.0 * s2.std_len, 0.05 * ysize);
  const double ang_tol = std::max(kFiveDegrees, s2.std_angle);
  std::vector<MatchVector> pass2;
  pass2.reserve(pass1.size());
  for (const auto& m : pass1) {
    if (std::abs(m.length - s2.mean_len) > len_tol) continue;
    if (std::abs(wrap_angle(m.orientation - s2.mean_angle)) > ang_tol)
      continue;
    pass2.push_back(m);
  }
  if (pass2.size() < 4)
    fail(ErrorCode::insufficient_matches,
         "insufficient matches after the second vector-filter pass");
  return pass2;
}

struct ThreeStepResult {
  CorrespondenceSet corr;            // original (unstitched) coordinates
  AffineHomography step_homography;  // from step (b); identity on fallback
  bool homography_fallback = false;
  int keypoints1 = 0;
  int keypoints2 = 0;
  int ratio_matches = 0;
  int after_first_filter = 0;
};

/// The three-step matcher on already-detected keypoints: (a) ratio matching
/// plus vector filtering, (b) homography estimation and transformation of
/// the image-1 points, (c) the vector filter again on the transformed
/// geometry. Correspondences are reported in original coordinates.
inline ThreeStepResult match_three_step_points(
    const std::vector<Keypoint>& kp1, const std::vector<Keypoint>& kp2,
    int width1, int height1, int width2, int height2, double ratio,
    const FitConfig& cfg) {
  ThreeStepResult result;
  result.keypoints1 = static_cast<int>(kp1.size());
  result.keypoints2 = static_cast<int>(kp2.size());

  const double offset_x = static_cast<double>(std::max(width1, width2));
  const int ysize = std::max(height1, height2);

  const auto raw = match_ratio(kp1, kp2, ratio);
  result.ratio_matches = static_cast<int>(raw.size());
  const auto pass_a = filter_vectors(with_stitch_offset(raw, offset_x), ysize);
  result.after_first_filter = static_cast<int>(pass_a.size());

  CorrespondenceSet corr_a;
  for (const auto& m : pass_a) corr_a.add(m.p1, m.p2 - Vec2(offset_x, 0.0));

  AffineHomography h;
  try {
    Rng rng(cfg.seed);
    const auto est = estimate_homography(corr_a, cfg, rng);
    h = est.H;
  } catch (const Error&) {
    result.corr = corr_a;
    result.homography_fallback = true;
    return result;
  }
  result.step_homography = h;

  // Step (c): the ratio matches are position-independent; the filter reruns
  // on the homography-transformed geometry and survivors are reported with
  // the transform undone.
  std::vector<MatchVector> transformed;
  transformed.reserve(raw.size());
  for (const auto& m : raw)
    transformed.push_back(MatchVector::between(
        h.apply(m.p1), m.p2 + Vec2(offset_x, 0.0), m.index1, m.index2));
  const auto pass_c = filter_vectors(transformed, ysize);

  for (const auto& m : pass_c)
    result.corr.add(kp1[m.index1].position,
                    m.p2 - Vec2(offset_x, 0.0));
  return result;
}

/// Full three-step matching from stabilised images.
inline ThreeStepResult match_three_step(const RasterImage& img1,
                                        const RasterImage& img2,
                                        const FovMask& fov1,
                                        const FovMask& fov2,
                                        const SiftParams& sift_params,
                                        double ratio, const FitConfig& cfg) {
  const auto kp1 = detect_keypoints(img1, fov1, sift_params);
  const auto kp2 = detect_keypoints(img2, fov2, sift_params);
  return match_three_step_points(kp1, kp2, img1.width, img1.height,
                                 img2.width, img2.height, ratio, cfg);
}

}  // namespace fundusreg

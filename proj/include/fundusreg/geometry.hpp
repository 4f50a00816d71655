// fundusreg/geometry.hpp
//
// Deformation model: affine homography, division-model radial distortion and
// their composition, with exact forward and inverse point mappings and the
// SVD-based rotation/scale decomposition of the affine block.
//
// Coordinate conventions. Pixel coordinates place pixel centres on the
// integer grid. Each image carries an optic centre c (the geometric image
// centre) and a normalisation length s = 1 + |c|; distortion acts on the
// normalised centred coordinates (P - c)/s, so the distortion coefficient k
// is the normalised one bounded by [-0.2, 0.2].

#pragma once

#include "fundusreg/types.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace fundusreg {

/// Affine homography: 3x3 projective map with last row (0,0,1), stored as
/// the 2x2 block A and translation T. Maps P to A*P + T.
struct AffineHomography {
  Mat2 A = Mat2::Identity();
  Vec2 T = Vec2::Zero();

  static constexpr double kMinDet = 1e-12;

  static AffineHomography identity() { return {}; }

  Vec2 apply(const Vec2& p) const { return A * p + T; }

  double det() const { return A.determinant(); }

  bool invertible() const { return std::abs(det()) > kMinDet; }

  AffineHomography inverse() const {
    if (!invertible())
      fail(ErrorCode::degenerate, "affine homography is singular");
    AffineHomography inv;
    inv.A = A.inverse();
    inv.T = -inv.A * T;
    return inv;
  }
};

/// A = R(theta) * R(-phi) * diag(lambda1, lambda2) * R(phi).
struct AffineDecomposition {
  double theta = 0.0;
  double phi = 0.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;

  Mat2 reconstruct() const {
    auto rot = [](double a) {
      Mat2 r;
      r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
      return r;
    };
    Mat2 d = Mat2::Zero();
    d(0, 0) = lambda1;
    d(1, 1) = lambda2;
    return rot(theta) * rot(-phi) * d * rot(phi);
  }
};

/// Division-model radial distortion about an optic centre. The normalised
/// coefficient k lives in [-0.2, 0.2].
struct RadialDistortion {
  double k = 0.0;
  Vec2 centre = Vec2::Zero();
  double norm_scale = 1.0;  // 1 + |centre|

  static constexpr double kBound = 0.2;

  /// Distortion with the optic centre at the geometric centre of a
  /// width x height image.
  static RadialDistortion for_image(int width, int height, double k = 0.0) {
    Vec2 c((width - 1) * 0.5, (height - 1) * 0.5);
    return make(k, c);
  }

  static RadialDistortion make(double k, const Vec2& centre) {
    if (!(std::abs(k) <= kBound + 1e-12))
      fail(ErrorCode::invalid_argument,
           "normalised distortion coefficient outside [-0.2, 0.2]");
    RadialDistortion d;
    d.k = k;
    d.centre = centre;
    d.norm_scale = 1.0 + centre.norm();
    return d;
  }

  Vec2 normalise(const Vec2& p) const { return (p - centre) / norm_scale; }
  Vec2 denormalise(const Vec2& q) const { return centre + norm_scale * q; }
};

enum class DistortionMode { one_distortion, two_distortions };

inline const char* to_string(DistortionMode m) {
  return m == DistortionMode::one_distortion ? "one-distortion"
                                             : "two-distortions";
}

/// Removes the radial distortion from a point of the original (distorted)
/// image: centred coordinates are divided by (1 + k r^2).
inline Vec2 undistort_point(const Vec2& p_d, const RadialDistortion& dist) {
  const Vec2 q = dist.normalise(p_d);
  const double denom = 1.0 + dist.k * q.squaredNorm();
  if (denom <= 1e-9)
    fail(ErrorCode::distortion_singularity,
         "division-model denominator vanished");
  return dist.denormalise(q / denom);
}

/// Applies the radial distortion to an undistorted point. Inverse of
/// undistort_point: radially, r_d solves k r_u r_d^2 - r_d + r_u = 0 and the
/// root continuous at k = 0 is taken.
inline Vec2 distort_point(const Vec2& p_u, const RadialDistortion& dist) {
  const Vec2 q = dist.normalise(p_u);
  const double r_u2 = q.squaredNorm();
  if (dist.k == 0.0 || r_u2 == 0.0) return p_u;
  const double disc = 1.0 - 4.0 * dist.k * r_u2;
  if (disc <= 0.0)
    fail(ErrorCode::outside_invertible_range,
         "point outside the invertible range of the division model");
  // (1 - sqrt(disc)) / (2 k r_u) rearranged to avoid cancellation as k -> 0.
  const double r_u = std::sqrt(r_u2);
  const double r_d = 2.0 * r_u / (1.0 + std::sqrt(disc));
  return dist.denormalise((r_d / r_u) * q);
}

/// Full invertible mapping from image 1 into image 2: one affine homography
/// plus one radial distortion per image, with fit diagnostics.
struct RegistrationModel {
  AffineHomography H;
  RadialDistortion d1;
  RadialDistortion d2;
  DistortionMode mode = DistortionMode::one_distortion;
  double fit_error = 0.0;  // mean transfer residual, pixels
  int iterations = 0;

  static RegistrationModel identity(int width, int height) {
    RegistrationModel m;
    m.d1 = RadialDistortion::for_image(width, height);
    m.d2 = m.d1;
    return m;
  }
};

inline Vec2 map_1_to_2(const Vec2& p1_d, const RegistrationModel& m) {
  return distort_point(m.H.apply(undistort_point(p1_d, m.d1)), m.d2);
}

inline Vec2 map_2_to_1(const Vec2& p2_d, const RegistrationModel& m) {
  return distort_point(m.H.inverse().apply(undistort_point(p2_d, m.d2)),
                       m.d1);
}

/// map_1_to_2 that saturates instead of throwing when the point leaves the
/// invertible range; used by optimisers and diagnostics that must be total.
inline Vec2 map_1_to_2_saturated(const Vec2& p1, const RegistrationModel& m) {
  const Vec2 q1 = m.d1.normalise(p1);
  double denom = 1.0 + m.d1.k * q1.squaredNorm();
  if (denom < 0.05) denom = 0.05;
  const Vec2 u1 = m.d1.denormalise(q1 / denom);
  const Vec2 u2 = m.H.apply(u1);
  const Vec2 q2 = m.d2.normalise(u2);
  const double r_u2 = q2.squaredNorm();
  if (m.d2.k == 0.0 || r_u2 == 0.0) return u2;
  double disc = 1.0 - 4.0 * m.d2.k * r_u2;
  if (disc < 1e-6) disc = 1e-6;
  const double r_u = std::sqrt(r_u2);
  const double r_d = 2.0 * r_u / (1.0 + std::sqrt(disc));
  return m.d2.denormalise((r_d / r_u) * q2);
}

/// SVD decomposition of the affine block per A = R(theta) R(-phi) D R(phi).
/// Reflections are rejected: longitudinal pairs of the same eye cannot
/// mirror.
inline AffineDecomposition decompose_affine(const AffineHomography& h) {
  if (h.det() <= 0.0)
    fail(ErrorCode::reflection_not_allowed,
         "affine block has non-positive determinant");
  Eigen::JacobiSVD<Mat2> svd(h.A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat2 u = svd.matrixU();
  Mat2 v = svd.matrixV();
  // det(A) > 0 implies det(U)*det(V) > 0; flip the last columns of both to
  // land on proper rotations without changing U S V^T.
  if (u.determinant() < 0.0) {
    u.col(1) *= -1.0;
    v.col(1) *= -1.0;
  }
  const Mat2 r_theta = u * v.transpose();
  AffineDecomposition dec;
  dec.theta = std::atan2(r_theta(1, 0), r_theta(0, 0));
  // R(phi) = V^T.
  dec.phi = std::atan2(v(0, 1), v(0, 0));
  dec.lambda1 = svd.singularValues()(0);
  dec.lambda2 = svd.singularValues()(1);
  return dec;
}

/// Relative difference between the two scaling factors of the affine block,
/// |l1 - l2| / max(l1, l2).
inline double scale_ratio(const AffineHomography& h) {
  Eigen::JacobiSVD<Mat2> svd(h.A);
  const double l1 = svd.singularValues()(0);
  const double l2 = svd.singularValues()(1);
  const double m = std::max(l1, l2);
  if (m <= 0.0) fail(ErrorCode::degenerate, "affine block has zero scale");
  return std::abs(l1 - l2) / m;
}

// --- model serialisation ----------------------------------------------------
//
// Doubles are emitted via nlohmann's shortest round-trip formatting, which is
// bit-exact on re-parse (never more than 17 significant digits).

inline nlohmann::json model_to_json(const RegistrationModel& m) {
  nlohmann::json j;
  j["a11"] = m.H.A(0, 0);
  j["a12"] = m.H.A(0, 1);
  j["a21"] = m.H.A(1, 0);
  j["a22"] = m.H.A(1, 1);
  j["tx"] = m.H.T.x();
  j["ty"] = m.H.T.y();
  j["k1"] = m.d1.k;
  j["k2"] = m.d2.k;
  j["c1"] = {m.d1.centre.x(), m.d1.centre.y()};
  j["c2"] = {m.d2.centre.x(), m.d2.centre.y()};
  j["norm_scale1"] = m.d1.norm_scale;
  j["norm_scale2"] = m.d2.norm_scale;
  j["mode"] = to_string(m.mode);
  j["fit_error"] = m.fit_error;
  j["iterations"] = m.iterations;
  return j;
}

inline RegistrationModel model_from_json(const nlohmann::json& j) {
  RegistrationModel m;
  m.H.A << j.at("a11").get<double>(), j.at("a12").get<double>(),
      j.at("a21").get<double>(), j.at("a22").get<double>();
  m.H.T = Vec2(j.at("tx").get<double>(), j.at("ty").get<double>());
  m.d1.k = j.at("k1").get<double>();
  m.d2.k = j.at("k2").get<double>();
  m.d1.centre = Vec2(j.at("c1")[0].get<double>(), j.at("c1")[1].get<double>());
  m.d2.centre = Vec2(j.at("c2")[0].get<double>(), j.at("c2")[1].get<double>());
  m.d1.norm_scale = j.at("norm_scale1").get<double>();
  m.d2.norm_scale = j.at("norm_scale2").get<double>();
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "one-distortion")
    m.mode = DistortionMode::one_distortion;
  else if (mode == "two-distortions")
    m.mode = DistortionMode::two_distortions;
  else
    fail(ErrorCode::invalid_argument, "unknown distortion mode: " + mode);
  m.fit_error = j.at("fit_error").get<double>();
  m.iterations = j.at("iterations").get<int>();
  if (!m.H.invertible())
    fail(ErrorCode::degenerate, "deserialised affine block is singular");
  return m;
}

}  // namespace fundusreg

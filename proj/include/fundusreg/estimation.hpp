// fundusreg/estimation.hpp
//
// Model fitting on a correspondence set: gold-standard affine homography
// with a scale-ratio gate, closed-form linear estimators for the distortion
// coefficients (with and without the homography), the alternating
// linear-estimation loop, and the final bounded nonlinear refinement.
//
// All linear systems are the centred-coordinate expansions of the division
// model: stacked product unknowns (k^2 d, k d, k A, ...) are solved as
// independent least-squares variables, and the primary parameters are read
// from their dedicated blocks; the nonlinear refiner restores consistency.

#pragma once

#include "fundusreg/geometry.hpp"
#include "fundusreg/types.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fundusreg {

enum class FitMode { one_distortion, two_distortions, auto_mode };

inline const char* to_string(FitMode m) {
  switch (m) {
    case FitMode::one_distortion: return "one";
    case FitMode::two_distortions: return "two";
    case FitMode::auto_mode: return "auto";
  }
  return "auto";
}

struct FitConfig {
  double epsilon = 0.01;      // error tolerance, normalised units
  double tol = 0.01;          // relative error change
  int max_iter = 100;
  double k_bound = 0.2;
  int ransac_samples = 100;
  double scale_gate = 0.01;
  int scale_retries = 50;
  FitMode mode = FitMode::auto_mode;
  uint64_t seed = 20150604;

  void validate() const {
    if (epsilon <= 0 || tol <= 0 || max_iter < 1 || k_bound <= 0 ||
        ransac_samples < 1 || scale_gate <= 0 || scale_gate >= 1 ||
        scale_retries < 1)
      fail(ErrorCode::invalid_argument, "invalid fit configuration");
  }
};

/// Per-image centring/normalisation frame of the deformation model.
struct ImagePairMeta {
  int width1 = 0, height1 = 0;
  int width2 = 0, height2 = 0;
  std::string camera1;  // optional camera-model tags for auto mode
  std::string camera2;

  Vec2 c1() const { return Vec2((width1 - 1) * 0.5, (height1 - 1) * 0.5); }
  Vec2 c2() const { return Vec2((width2 - 1) * 0.5, (height2 - 1) * 0.5); }
  double s1() const { return 1.0 + c1().norm(); }
  double s2() const { return 1.0 + c2().norm(); }

  DistortionMode resolve(FitMode mode) const {
    switch (mode) {
      case FitMode::one_distortion: return DistortionMode::one_distortion;
      case FitMode::two_distortions: return DistortionMode::two_distortions;
      case FitMode::auto_mode: break;
    }
    const bool dims_differ = width1 != width2 || height1 != height2;
    const bool cameras_differ =
        !camera1.empty() && !camera2.empty() && camera1 != camera2;
    return (dims_differ || cameras_differ) ? DistortionMode::two_distortions
                                           : DistortionMode::one_distortion;
  }
};

enum class Termination { converged, stalled, max_iter, k_out_of_bounds };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::converged: return "converged";
    case Termination::stalled: return "stalled";
    case Termination::max_iter: return "max-iter";
    case Termination::k_out_of_bounds: return "k-out-of-bounds";
  }
  return "";
}

struct FitRecord {
  int iteration = 0;
  std::string estimator;
  double mean_error_px = 0.0;
  double k1 = 0.0;
  double k2 = 0.0;
};

struct FitTrace {
  std::vector<FitRecord> records;
  Termination termination = Termination::converged;
  bool gate_failed = false;
  int inliers_round1 = 0;
  int inliers_round2 = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["termination"] = to_string(termination);
    j["gate_failed"] = gate_failed;
    j["inliers_round1"] = inliers_round1;
    j["inliers_round2"] = inliers_round2;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records)
      j["records"].push_back({{"iteration", r.iteration},
                              {"estimator", r.estimator},
                              {"mean_error_px", r.mean_error_px},
                              {"k1", r.k1},
                              {"k2", r.k2}});
    return j;
  }
};

// --- deterministic randomness ------------------------------------------------

/// Random source owned per fit call. Bounded draws avoid the
/// implementation-defined std distributions so runs are reproducible across
/// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint32_t bounded(uint32_t n) {
    return static_cast<uint32_t>((static_cast<uint64_t>(eng_() >> 32) * n) >>
                                 32);
  }
  double uniform() {  // [0, 1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    // Box-Muller, deterministic.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 eng_;
};

// --- transfer error ----------------------------------------------------------

inline void transfer_residuals(const RegistrationModel& m,
                               const CorrespondenceSet& corr,
                               Eigen::VectorXd& out) {
  out.resize(2 * corr.count());
  for (int i = 0; i < corr.count(); ++i) {
    const Vec2 r = map_1_to_2_saturated(corr.pairs[i].first, m) -
                   corr.pairs[i].second;
    out(2 * i) = r.x();
    out(2 * i + 1) = r.y();
  }
}

/// Mean Euclidean transfer error of map_1_to_2 in pixels.
inline double mean_transfer_error(const RegistrationModel& m,
                                  const CorrespondenceSet& corr) {
  if (corr.count() == 0) return 0.0;
  double sum = 0.0;
  for (const auto& [p1, p2] : corr.pairs)
    sum += (map_1_to_2_saturated(p1, m) - p2).norm();
  return sum / corr.count();
}

// --- least-squares plumbing --------------------------------------------------

namespace detail {

/// Column-equilibrated minimum-norm least squares with zero-column dropping.
/// Singular values below 1e-10 of the largest are truncated, so directions
/// the data cannot constrain (e.g. the k1 = k2 gauge freedom of a
/// self-registration) resolve to zero instead of exploding. `rank_deficient`
/// reports that such truncation (or a structural shortage of rows) occurred;
/// `cond` receives the post-equilibration condition number.
inline Eigen::VectorXd solve_least_squares(const Eigen::MatrixXd& m,
                                           const Eigen::VectorXd& rhs,
                                           bool& rank_deficient,
                                           double* cond = nullptr) {
  const int cols = static_cast<int>(m.cols());
  Eigen::VectorXd norms(cols);
  for (int j = 0; j < cols; ++j) norms(j) = m.col(j).norm();
  const double max_norm = norms.maxCoeff();
  if (max_norm <= 0.0) {
    rank_deficient = true;
    if (cond) *cond = std::numeric_limits<double>::infinity();
    return Eigen::VectorXd::Zero(cols);
  }
  std::vector<int> kept;
  for (int j = 0; j < cols; ++j)
    if (norms(j) > 1e-13 * max_norm) kept.push_back(j);
  Eigen::MatrixXd scaled(m.rows(), kept.size());
  for (size_t j = 0; j < kept.size(); ++j)
    scaled.col(j) = m.col(kept[j]) / norms(kept[j]);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      scaled, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-10);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  rank_deficient = static_cast<int>(kept.size()) < cols ||
                   m.rows() < cols || smin <= 1e-10 * smax;
  if (cond)
    *cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();

  const Eigen::VectorXd sol_kept = svd.solve(rhs);
  Eigen::VectorXd sol = Eigen::VectorXd::Zero(cols);
  for (size_t j = 0; j < kept.size(); ++j)
    sol(kept[j]) = sol_kept(j) / norms(kept[j]);
  return sol;
}

/// Normalised centred coordinates of a correspondence set.
struct NormalisedPairs {
  std::vector<Vec2> q1, q2;
  std::vector<double> r1sq, r2sq;
  Vec2 c1, c2;
  double s1 = 1.0, s2 = 1.0;

  static NormalisedPairs build(const CorrespondenceSet& corr,
                               const ImagePairMeta& meta) {
    NormalisedPairs n;
    n.c1 = meta.c1();
    n.c2 = meta.c2();
    n.s1 = meta.s1();
    n.s2 = meta.s2();
    n.q1.reserve(corr.count());
    n.q2.reserve(corr.count());
    for (const auto& [p1, p2] : corr.pairs) {
      const Vec2 a = (p1 - n.c1) / n.s1;
      const Vec2 b = (p2 - n.c2) / n.s2;
      n.q1.push_back(a);
      n.q2.push_back(b);
      n.r1sq.push_back(a.squaredNorm());
      n.r2sq.push_back(b.squaredNorm());
    }
    return n;
  }
};

}  // namespace detail

// --- gold-standard homography -------------------------------------------------

struct HomographyEstimate {
  AffineHomography H;
  bool gate_passed = true;
  double mean_error = 0.0;  // pixels, over all correspondences
  double scale = 0.0;       // scale_ratio of the winner
  int attempts = 1;
};

/// Least-squares affine transform from point pairs (subset given by indices;
/// all pairs when indices is empty).
inline AffineHomography fit_affine(const CorrespondenceSet& corr,
                                   const std::vector<int>& indices = {}) {
  const int n = indices.empty() ? corr.count()
                                : static_cast<int>(indices.size());
  if (n < 3)
    fail(ErrorCode::insufficient_correspondences,
         "need at least 3 pairs for an affine fit");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 6);
  Eigen::VectorXd rhs(2 * n);
  for (int i = 0; i < n; ++i) {
    const auto& [p1, p2] = corr.pairs[indices.empty() ? i : indices[i]];
    m(2 * i, 0) = p1.x();
    m(2 * i, 1) = p1.y();
    m(2 * i, 2) = 1.0;
    m(2 * i + 1, 3) = p1.x();
    m(2 * i + 1, 4) = p1.y();
    m(2 * i + 1, 5) = 1.0;
    rhs(2 * i) = p2.x();
    rhs(2 * i + 1) = p2.y();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  if (qr.rank() < 6)
    fail(ErrorCode::degenerate, "degenerate configuration");
  const Eigen::VectorXd x = qr.solve(rhs);
  AffineHomography h;
  h.A << x(0), x(1), x(3), x(4);
  h.T = Vec2(x(2), x(5));
  if (!h.invertible()) fail(ErrorCode::degenerate, "degenerate configuration");
  return h;
}

namespace detail {

inline double mean_affine_error(const AffineHomography& h,
                                const CorrespondenceSet& corr) {
  double sum = 0.0;
  for (const auto& [p1, p2] : corr.pairs) sum += (h.apply(p1) - p2).norm();
  return sum / corr.count();
}

inline bool sample_degenerate(const CorrespondenceSet& corr,
                              const std::array<int, 4>& idx) {
  // Any three of the four source points collinear (twice the triangle area
  // below 1e-6) makes the affine fit unstable.
  for (int skip = 0; skip < 4; ++skip) {
    Vec2 p[3];
    int j = 0;
    for (int i = 0; i < 4; ++i)
      if (i != skip) p[j++] = corr.pairs[idx[i]].first;
    const Vec2 u = p[1] - p[0];
    const Vec2 v = p[2] - p[0];
    if (std::abs(u.x() * v.y() - u.y() * v.x()) < 2e-6) return true;
  }
  return false;
}

}  // namespace detail

/// Gold-standard estimation: repeated minimal-sample affine fits, winner by
/// minimum mean transfer error over all correspondences, re-run while the
/// x/y scale factors differ by more than the gate.
inline HomographyEstimate estimate_homography(const CorrespondenceSet& corr,
                                              const FitConfig& cfg, Rng& rng) {
  cfg.validate();
  if (corr.count() < 4)
    fail(ErrorCode::insufficient_correspondences,
         "fewer than 4 correspondences");
  const int n = corr.count();

  std::optional<HomographyEstimate> best_by_scale;
  for (int attempt = 0; attempt < cfg.scale_retries; ++attempt) {
    std::optional<AffineHomography> best;
    double best_err = std::numeric_limits<double>::infinity();
    int produced = 0;
    for (int s = 0; s < cfg.ransac_samples; ++s) {
      std::array<int, 4> idx{};
      bool ok = false;
      for (int tries = 0; tries < 200 && !ok; ++tries) {
        for (auto& v : idx) v = static_cast<int>(rng.bounded(n));
        std::sort(idx.begin(), idx.end());
        if (std::unique(idx.begin(), idx.end()) != idx.end()) continue;
        if (detail::sample_degenerate(corr, idx)) continue;
        ok = true;
      }
      if (!ok) continue;
      AffineHomography h;
      try {
        h = fit_affine(corr, {idx.begin(), idx.end()});
      } catch (const Error&) {
        continue;
      }
      ++produced;
      const double err = detail::mean_affine_error(h, corr);
      if (err < best_err) {
        best_err = err;
        best = h;
      }
    }
    if (!best) {
      if (produced == 0 && !best_by_scale)
        fail(ErrorCode::degenerate, "degenerate configuration");
      continue;
    }
    HomographyEstimate est;
    est.H = *best;
    est.mean_error = best_err;
    est.scale = scale_ratio(*best);
    est.attempts = attempt + 1;
    est.gate_passed = est.scale <= cfg.scale_gate;
    if (est.gate_passed) return est;
    if (!best_by_scale || est.scale < best_by_scale->scale)
      best_by_scale = est;
  }
  if (!best_by_scale)
    fail(ErrorCode::degenerate, "degenerate configuration");
  best_by_scale->gate_passed = false;
  best_by_scale->attempts = cfg.scale_retries;
  return *best_by_scale;
}

// --- linear distortion estimators ---------------------------------------------

struct LinearKResult {
  double k = 0.0;
  bool clamped = false;
};

struct LinearK1K2Result {
  double k1 = 0.0;
  double k2 = 0.0;
  bool ill_conditioned = false;
  double condition = 0.0;
};

/// Single-distortion coefficient with the homography held fixed. The
/// centred-coordinate expansion is linear in the stacked unknowns (k^2, k);
/// the returned k is the candidate among {linear coefficient, roots implied
/// by the quadratic coefficient} with the smallest true residual, clamped to
/// the bound.
inline LinearKResult linear_k_single(const CorrespondenceSet& corr,
                                     const AffineHomography& h,
                                     const ImagePairMeta& meta,
                                     double k_bound = RadialDistortion::kBound) {
  if (corr.count() < 1)
    fail(ErrorCode::insufficient_correspondences, "empty correspondence set");
  const auto np = detail::NormalisedPairs::build(corr, meta);
  const Vec2 d = np.c2 - h.A * np.c1 - h.T;
  const int n = corr.count();

  Eigen::MatrixXd m(2 * n, 2);
  Eigen::VectorXd rhs(2 * n);
  std::vector<Vec2> col_a(n), col_b(n), col_g(n);
  for (int i = 0; i < n; ++i) {
    const Vec2 aq1 = h.A * np.q1[i];
    const Vec2 a = np.r1sq[i] * np.r2sq[i] * d;
    const Vec2 b = (np.r1sq[i] + np.r2sq[i]) * d + np.s2 * np.r1sq[i] * np.q2[i] -
                   np.s1 * np.r2sq[i] * aq1;
    const Vec2 g = -(np.s2 * np.q2[i] + d - np.s1 * aq1);
    col_a[i] = a;
    col_b[i] = b;
    col_g[i] = g;
    m(2 * i, 0) = a.x();
    m(2 * i + 1, 0) = a.y();
    m(2 * i, 1) = b.x();
    m(2 * i + 1, 1) = b.y();
    rhs(2 * i) = g.x();
    rhs(2 * i + 1) = g.y();
  }
  // The k column must carry signal; the k^2 column legitimately vanishes
  // when the translation defect d is zero.
  if (m.col(1).norm() <= 1e-13 * std::max(1.0, m.col(0).norm()))
    fail(ErrorCode::degenerate, "degenerate radii");
  bool rank_deficient = false;
  const Eigen::VectorXd sol = detail::solve_least_squares(m, rhs, rank_deficient);

  auto residual = [&](double k) {
    double r = 0.0;
    for (int i = 0; i < n; ++i)
      r += (k * k * col_a[i] + k * col_b[i] - col_g[i]).squaredNorm();
    return r;
  };
  std::vector<double> candidates{sol(1)};
  if (sol(0) > 0.0) {
    candidates.push_back(std::sqrt(sol(0)));
    candidates.push_back(-std::sqrt(sol(0)));
  }
  double best_k = candidates[0];
  double best_r = residual(best_k);
  for (double c : candidates) {
    const double r = residual(c);
    if (r < best_r) {
      best_r = r;
      best_k = c;
    }
  }
  LinearKResult out;
  out.clamped = std::abs(best_k) > k_bound;
  out.k = std::clamp(best_k, -k_bound, k_bound);
  return out;
}

/// Two distortion coefficients with the homography held fixed: least squares
/// over the stacked unknowns (k1 k2, k1, k2); the product block is only a
/// residual diagnostic.
inline LinearK1K2Result linear_k1_k2(const CorrespondenceSet& corr,
                                     const AffineHomography& h,
                                     const ImagePairMeta& meta) {
  if (corr.count() < 2)
    fail(ErrorCode::insufficient_correspondences, "need at least 2 pairs");
  const auto np = detail::NormalisedPairs::build(corr, meta);
  const Vec2 d = np.c2 - h.A * np.c1 - h.T;
  const int n = corr.count();

  Eigen::MatrixXd m(2 * n, 3);
  Eigen::VectorXd rhs(2 * n);
  for (int i = 0; i < n; ++i) {
    const Vec2 aq1 = h.A * np.q1[i];
    const Vec2 prod = np.r1sq[i] * np.r2sq[i] * d;
    const Vec2 c1col = np.r1sq[i] * d + np.s2 * np.r1sq[i] * np.q2[i];
    const Vec2 c2col = np.r2sq[i] * d - np.s1 * np.r2sq[i] * aq1;
    const Vec2 g = -(np.s2 * np.q2[i] + d - np.s1 * aq1);
    m(2 * i, 0) = prod.x();
    m(2 * i + 1, 0) = prod.y();
    m(2 * i, 1) = c1col.x();
    m(2 * i + 1, 1) = c1col.y();
    m(2 * i, 2) = c2col.x();
    m(2 * i + 1, 2) = c2col.y();
    rhs(2 * i) = g.x();
    rhs(2 * i + 1) = g.y();
  }
  const double kcol_norm = std::max(m.col(1).norm(), m.col(2).norm());
  if (kcol_norm <= 1e-12) fail(ErrorCode::degenerate, "degenerate radii");
  bool rank_deficient = false;
  double cond = 0.0;
  const Eigen::VectorXd sol =
      detail::solve_least_squares(m, rhs, rank_deficient, &cond);
  LinearK1K2Result out;
  out.k1 = sol(1);
  out.k2 = sol(2);
  out.condition = cond;
  out.ill_conditioned = cond > 1e8;
  return out;
}

struct LinearJointResult {
  AffineHomography H;
  double k1 = 0.0;  // == k2 for the single-distortion system
  double k2 = 0.0;
};

/// Joint linear estimate of H and a shared k: stacked unknown blocks
/// (k^2 d, k d, k, kA, A, d), 15 scalars. A and d are read from their own
/// blocks; k is the Frobenius ratio of the (kA) block against A.
inline LinearJointResult linear_k_and_H(const CorrespondenceSet& corr,
                                        const ImagePairMeta& meta) {
  if (corr.count() < 7)
    fail(ErrorCode::degenerate, "degenerate system: need at least 7 pairs");
  const auto np = detail::NormalisedPairs::build(corr, meta);
  const int n = corr.count();

  // Unknowns: [k2d_x k2d_y kd_x kd_y k kA11 kA12 kA21 kA22 A11 A12 A21 A22 d_x d_y]
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 15);
  Eigen::VectorXd rhs(2 * n);
  for (int i = 0; i < n; ++i) {
    const double rr = np.r1sq[i] * np.r2sq[i];
    const double rsum = np.r1sq[i] + np.r2sq[i];
    const Vec2& q1 = np.q1[i];
    const Vec2& q2 = np.q2[i];
    const int x = 2 * i, y = 2 * i + 1;
    m(x, 0) = rr;
    m(y, 1) = rr;
    m(x, 2) = rsum;
    m(y, 3) = rsum;
    m(x, 4) = np.s2 * np.r1sq[i] * q2.x();
    m(y, 4) = np.s2 * np.r1sq[i] * q2.y();
    m(x, 5) = -np.s1 * np.r2sq[i] * q1.x();
    m(x, 6) = -np.s1 * np.r2sq[i] * q1.y();
    m(y, 7) = -np.s1 * np.r2sq[i] * q1.x();
    m(y, 8) = -np.s1 * np.r2sq[i] * q1.y();
    m(x, 9) = -np.s1 * q1.x();
    m(x, 10) = -np.s1 * q1.y();
    m(y, 11) = -np.s1 * q1.x();
    m(y, 12) = -np.s1 * q1.y();
    m(x, 13) = 1.0;
    m(y, 14) = 1.0;
    rhs(x) = -np.s2 * q2.x();
    rhs(y) = -np.s2 * q2.y();
  }
  if (m.rows() < m.cols())
    fail(ErrorCode::degenerate, "degenerate system: under-determined");
  bool rank_deficient = false;
  const Eigen::VectorXd sol = detail::solve_least_squares(m, rhs, rank_deficient);

  LinearJointResult out;
  Mat2 a;
  a << sol(9), sol(10), sol(11), sol(12);
  const Vec2 d(sol(13), sol(14));
  const double a_norm2 = a.squaredNorm();
  if (a_norm2 <= 1e-20) fail(ErrorCode::degenerate, "degenerate system");
  Mat2 ka;
  ka << sol(5), sol(6), sol(7), sol(8);
  const double k = (ka.array() * a.array()).sum() / a_norm2;
  out.H.A = a;
  out.H.T = np.c2 - a * np.c1 - d;
  if (!out.H.invertible()) fail(ErrorCode::degenerate, "degenerate system");
  out.k1 = out.k2 = k;
  return out;
}

/// Joint linear estimate of H, k1 and k2: stacked unknown blocks
/// (k1k2 d, k1 d, k1, k2 d, k2 A, A, d), 17 scalars. k1 comes from its
/// scalar block, k2 from the (k2 A) block against A.
inline LinearJointResult linear_k1_k2_H(const CorrespondenceSet& corr,
                                        const ImagePairMeta& meta) {
  if (corr.count() < 8)
    fail(ErrorCode::degenerate, "degenerate system: need at least 8 pairs");
  const auto np = detail::NormalisedPairs::build(corr, meta);
  const int n = corr.count();

  // Unknowns:
  // [kkd_x kkd_y k1d_x k1d_y k1 k2d_x k2d_y k2A11 k2A12 k2A21 k2A22 A11 A12 A21 A22 d_x d_y]
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 17);
  Eigen::VectorXd rhs(2 * n);
  for (int i = 0; i < n; ++i) {
    const double rr = np.r1sq[i] * np.r2sq[i];
    const Vec2& q1 = np.q1[i];
    const Vec2& q2 = np.q2[i];
    const int x = 2 * i, y = 2 * i + 1;
    m(x, 0) = rr;
    m(y, 1) = rr;
    m(x, 2) = np.r1sq[i];
    m(y, 3) = np.r1sq[i];
    m(x, 4) = np.s2 * np.r1sq[i] * q2.x();
    m(y, 4) = np.s2 * np.r1sq[i] * q2.y();
    m(x, 5) = np.r2sq[i];
    m(y, 6) = np.r2sq[i];
    m(x, 7) = -np.s1 * np.r2sq[i] * q1.x();
    m(x, 8) = -np.s1 * np.r2sq[i] * q1.y();
    m(y, 9) = -np.s1 * np.r2sq[i] * q1.x();
    m(y, 10) = -np.s1 * np.r2sq[i] * q1.y();
    m(x, 11) = -np.s1 * q1.x();
    m(x, 12) = -np.s1 * q1.y();
    m(y, 13) = -np.s1 * q1.x();
    m(y, 14) = -np.s1 * q1.y();
    m(x, 15) = 1.0;
    m(y, 16) = 1.0;
    rhs(x) = -np.s2 * q2.x();
    rhs(y) = -np.s2 * q2.y();
  }
  if (m.rows() < m.cols())
    fail(ErrorCode::degenerate, "degenerate system: under-determined");
  bool rank_deficient = false;
  const Eigen::VectorXd sol = detail::solve_least_squares(m, rhs, rank_deficient);

  LinearJointResult out;
  Mat2 a;
  a << sol(11), sol(12), sol(13), sol(14);
  const Vec2 d(sol(15), sol(16));
  const double a_norm2 = a.squaredNorm();
  if (a_norm2 <= 1e-20) fail(ErrorCode::degenerate, "degenerate system");
  Mat2 k2a;
  k2a << sol(7), sol(8), sol(9), sol(10);
  out.k1 = sol(4);
  out.k2 = (k2a.array() * a.array()).sum() / a_norm2;
  out.H.A = a;
  out.H.T = np.c2 - a * np.c1 - d;
  if (!out.H.invertible()) fail(ErrorCode::degenerate, "degenerate system");
  return out;
}

// --- nonlinear refinement ------------------------------------------------------

namespace detail {

inline RegistrationModel model_from(const AffineHomography& h, double k1,
                                    double k2, const ImagePairMeta& meta,
                                    DistortionMode mode, double k_bound) {
  RegistrationModel m;
  m.H = h;
  if (mode == DistortionMode::one_distortion) k2 = k1;
  m.d1 = RadialDistortion::make(std::clamp(k1, -k_bound, k_bound), meta.c1());
  m.d2 = RadialDistortion::make(std::clamp(k2, -k_bound, k_bound), meta.c2());
  m.mode = mode;
  return m;
}

}  // namespace detail

/// Levenberg-Marquardt refinement of the full parameter vector
/// (A, T, k) or (A, T, k1, k2); the distortion coefficients are kept inside
/// [-k_bound, k_bound] by projecting each trial step onto the box. Forward
/// finite differences, relative step 1e-6. Never returns a model with a
/// higher mean error than its input.
inline RegistrationModel refine_nonlinear(const RegistrationModel& init,
                                          const CorrespondenceSet& corr,
                                          const FitConfig& cfg,
                                          FitTrace* trace = nullptr) {
  cfg.validate();
  if (corr.count() == 0) return init;
  const bool two = init.mode == DistortionMode::two_distortions;
  const int np = two ? 8 : 7;
  const Vec2 c1 = init.d1.centre, c2 = init.d2.centre;

  auto model_of = [&](const Eigen::VectorXd& p) {
    RegistrationModel m;
    m.H.A << p(0), p(1), p(2), p(3);
    m.H.T = Vec2(p(4), p(5));
    const double k1 = std::clamp(p(6), -cfg.k_bound, cfg.k_bound);
    const double k2 =
        two ? std::clamp(p(7), -cfg.k_bound, cfg.k_bound) : k1;
    m.d1 = RadialDistortion::make(k1, c1);
    m.d2 = RadialDistortion::make(k2, c2);
    m.mode = init.mode;
    return m;
  };
  auto clamp_k = [&](Eigen::VectorXd& p) {
    p(6) = std::clamp(p(6), -cfg.k_bound, cfg.k_bound);
    if (two) p(7) = std::clamp(p(7), -cfg.k_bound, cfg.k_bound);
  };

  Eigen::VectorXd p(np);
  p << init.H.A(0, 0), init.H.A(0, 1), init.H.A(1, 0), init.H.A(1, 1),
      init.H.T.x(), init.H.T.y(), init.d1.k;
  if (two) p(7) = init.d2.k;
  clamp_k(p);

  Eigen::VectorXd r;
  transfer_residuals(model_of(p), corr, r);
  double cost = r.squaredNorm();
  const double cost_floor = 1e-28 * corr.count();
  double lambda = 1e-3;
  const double stop_rel = cfg.tol * 1e-2;

  Eigen::VectorXd r_probe;
  for (int iter = 0; iter < cfg.max_iter && cost > cost_floor; ++iter) {
    // Forward-difference Jacobian; k columns step inward at the box edge so
    // the probe is not clamped back onto the base point.
    Eigen::MatrixXd jac(r.size(), np);
    for (int j = 0; j < np; ++j) {
      Eigen::VectorXd probe = p;
      double h = 1e-6 * std::max(std::abs(p(j)), 1.0);
      if (j >= 6 && p(j) + h > cfg.k_bound) h = -h;
      probe(j) += h;
      transfer_residuals(model_of(probe), corr, r_probe);
      jac.col(j) = (r_probe - r) / h;
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() < 1e-14 * std::max(1.0, cost)) break;

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd damped = jtj;
      for (int j = 0; j < np; ++j)
        damped(j, j) += lambda * std::max(jtj(j, j), 1e-12);
      const Eigen::VectorXd step = damped.ldlt().solve(-g);
      Eigen::VectorXd trial = p + step;
      clamp_k(trial);
      transfer_residuals(model_of(trial), corr, r_probe);
      const double trial_cost = r_probe.squaredNorm();
      if (trial_cost < cost) {
        const double improvement = (cost - trial_cost) / std::max(cost, 1e-300);
        p = trial;
        r = r_probe;
        cost = trial_cost;
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
        if (improvement < stop_rel) iter = cfg.max_iter;  // stalled
      } else {
        lambda *= 10.0;
        if (lambda > 1e14) {
          iter = cfg.max_iter;
          break;
        }
      }
    }
  }

  RegistrationModel refined = model_of(p);
  refined.fit_error = mean_transfer_error(refined, corr);
  refined.iterations = init.iterations;
  const double init_err = mean_transfer_error(init, corr);
  if (refined.fit_error > init_err) {
    refined = init;
    refined.fit_error = init_err;
  }
  if (trace)
    trace->records.push_back({static_cast<int>(trace->records.size()),
                              "refine", refined.fit_error, refined.d1.k,
                              refined.d2.k});
  return refined;
}

// --- full fit -------------------------------------------------------------------

namespace detail {

inline CorrespondenceSet select_pairs(const CorrespondenceSet& corr,
                                      const std::vector<int>& keep) {
  CorrespondenceSet out;
  out.pairs.reserve(keep.size());
  for (int i : keep) out.pairs.push_back(corr.pairs[i]);
  return out;
}

/// Residual-based inlier selection. The threshold floor keeps exact data
/// intact; the median multiple keeps the structured radial-distortion
/// residuals of an affine-only model.
inline std::vector<int> classify_inliers(const std::vector<double>& residuals,
                                         double median_multiple,
                                         double floor_px) {
  std::vector<double> sorted = residuals;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  const double thresh = std::max(median_multiple * median, floor_px);
  std::vector<int> keep;
  for (size_t i = 0; i < residuals.size(); ++i)
    if (residuals[i] <= thresh) keep.push_back(static_cast<int>(i));
  return keep;
}

}  // namespace detail

/// Full model fit per the alternating-estimation flowchart: gold-standard
/// homography, per-iteration linear distortion estimates (coefficient-only,
/// then joint with the homography), convergence on the error criteria, and a
/// final bounded nonlinear refinement. Returns the model and its trace.
inline std::pair<RegistrationModel, FitTrace> fit(const CorrespondenceSet& corr,
                                                  const FitConfig& cfg,
                                                  const ImagePairMeta& meta) {
  cfg.validate();
  const DistortionMode mode = meta.resolve(cfg.mode);
  const bool two = mode == DistortionMode::two_distortions;
  Rng rng(cfg.seed);
  FitTrace trace;

  const HomographyEstimate hom = estimate_homography(corr, cfg, rng);
  trace.gate_failed = !hom.gate_passed;

  // Round-1 inliers from the affine residuals (loose threshold: genuine
  // radial distortion inflates peripheral residuals of an affine-only fit).
  std::vector<double> affine_res(corr.count());
  for (int i = 0; i < corr.count(); ++i)
    affine_res[i] =
        (hom.H.apply(corr.pairs[i].first) - corr.pairs[i].second).norm();
  std::vector<int> keep = detail::classify_inliers(affine_res, 10.0, 1.0);
  CorrespondenceSet work = (static_cast<int>(keep.size()) >=
                            std::max(8, corr.count() / 4))
                               ? detail::select_pairs(corr, keep)
                               : corr;
  trace.inliers_round1 = work.count();

  auto run_loop = [&](const CorrespondenceSet& set,
                      const AffineHomography& h0) -> RegistrationModel {
    AffineHomography h = h0;
    RegistrationModel current =
        detail::model_from(h, 0.0, 0.0, meta, mode, cfg.k_bound);
    RegistrationModel best = current;
    double best_err = mean_transfer_error(best, set);
    double prev_err = best_err;
    trace.termination = Termination::max_iter;
    int n_iter = 0;

    for (int n = 1; n <= cfg.max_iter; ++n) {
      n_iter = n;
      double raw_k1 = 0.0, raw_k2 = 0.0;
      // Distortion given the homography.
      try {
        if (two) {
          const auto kk = linear_k1_k2(set, h, meta);
          raw_k1 = kk.k1;
          raw_k2 = kk.k2;
        } else {
          const auto ks = linear_k_single(set, h, meta, cfg.k_bound);
          raw_k1 = raw_k2 = ks.k;
        }
      } catch (const Error&) {
        raw_k1 = current.d1.k;  // keep the previous estimate
        raw_k2 = current.d2.k;
      }
      RegistrationModel step_a =
          detail::model_from(h, raw_k1, raw_k2, meta, mode, cfg.k_bound);
      const double err_a = mean_transfer_error(step_a, set);
      trace.records.push_back({n, "k-given-H", err_a, raw_k1, raw_k2});
      if (err_a < best_err) {
        best = step_a;
        best_err = err_a;
      }
      if (two && (std::abs(raw_k1) > cfg.k_bound ||
                  std::abs(raw_k2) > cfg.k_bound)) {
        trace.termination = Termination::k_out_of_bounds;
        current = best;
        break;
      }
      current = step_a;

      // Joint homography + distortion.
      double err_n = err_a;
      try {
        const LinearJointResult joint =
            two ? linear_k1_k2_H(set, meta) : linear_k_and_H(set, meta);
        RegistrationModel step_b = detail::model_from(
            joint.H, joint.k1, joint.k2, meta, mode, cfg.k_bound);
        const double err_b = mean_transfer_error(step_b, set);
        trace.records.push_back({n, "joint-k-H", err_b, joint.k1, joint.k2});
        if (err_b < best_err) {
          best = step_b;
          best_err = err_b;
        }
        if (two && (std::abs(joint.k1) > cfg.k_bound ||
                    std::abs(joint.k2) > cfg.k_bound)) {
          trace.termination = Termination::k_out_of_bounds;
          current = best;
          break;
        }
        if (err_b <= err_a) {
          current = step_b;
          h = step_b.H;
          err_n = err_b;
        }
      } catch (const Error&) {
        // Under-determined joint system on tiny sets: keep the k-step model.
      }

      if (err_n < cfg.epsilon * meta.s2()) {
        trace.termination = Termination::converged;
        break;
      }
      if (std::abs(err_n - prev_err) <= cfg.tol * std::max(prev_err, 1e-300)) {
        trace.termination = Termination::stalled;
        break;
      }
      prev_err = err_n;
    }
    if (trace.termination == Termination::k_out_of_bounds) current = best;
    if (mean_transfer_error(current, set) > best_err) current = best;
    current.iterations = n_iter;
    return current;
  };

  RegistrationModel selected = run_loop(work, hom.H);
  RegistrationModel refined = refine_nonlinear(selected, work, cfg, &trace);

  // Round 2: reclassify against the distortion-aware model and refit.
  std::vector<double> model_res(corr.count());
  for (int i = 0; i < corr.count(); ++i)
    model_res[i] = (map_1_to_2_saturated(corr.pairs[i].first, refined) -
                    corr.pairs[i].second)
                       .norm();
  keep = detail::classify_inliers(model_res, 6.0, 1.0);
  if (static_cast<int>(keep.size()) >= std::max(8, corr.count() / 4) &&
      static_cast<int>(keep.size()) != work.count()) {
    CorrespondenceSet work2 = detail::select_pairs(corr, keep);
    trace.inliers_round2 = work2.count();
    RegistrationModel selected2 = run_loop(work2, refined.H);
    if (mean_transfer_error(refined, work2) <
        mean_transfer_error(selected2, work2))
      selected2 = refined;
    refined = refine_nonlinear(selected2, work2, cfg, &trace);
    refined.fit_error = mean_transfer_error(refined, work2);
  } else {
    trace.inliers_round2 = work.count();
  }

  refined.mode = mode;
  refined.iterations = selected.iterations;
  return {refined, trace};
}

}  // namespace fundusreg

#include "fundusreg/matching.hpp"
#include "fundusreg/montage.hpp"
#include "fundusreg/stabilise.hpp"
#include "fundusreg/synthetic.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace fundusreg;

namespace {

/// Independent application of the ground-truth chain (undistort, affine,
/// distort) for the dual-path landmark oracle.
Vec2 oracle_chain(const Vec2& p, const RegistrationModel& m) {
  auto undist = [](const Vec2& q, double k, const Vec2& c, double s) -> Vec2 {
    const Vec2 n = (q - c) / s;
    return c + s * n / (1.0 + k * n.squaredNorm());
  };
  auto dist = [](const Vec2& q, double k, const Vec2& c, double s) -> Vec2 {
    const Vec2 n = (q - c) / s;
    const double ru = n.norm();
    if (k == 0.0 || ru == 0.0) return q;
    const double rd =
        (1.0 - std::sqrt(1.0 - 4.0 * k * ru * ru)) / (2.0 * k * ru);
    return c + s * (rd / ru) * n;
  };
  const Vec2 u = undist(p, m.d1.k, m.d1.centre, m.d1.norm_scale);
  return dist(m.H.apply(u), m.d2.k, m.d2.centre, m.d2.norm_scale);
}

GroundTruthDeformation fixed_deformation(double rot_deg, double scale) {
  GroundTruthDeformation d;
  Mat2 r;
  const double a = rot_deg * M_PI / 180.0;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  d.affine.A = r * scale;
  return d;
}

}  // namespace

TEST_CASE("division_k_for_fov", "[montage]") {
  // 45 degree field: beta = (tan(22.5deg) - 22.5deg) / 22.5deg.
  const double theta = 22.5 * M_PI / 180.0;
  const double beta = (std::tan(theta) - theta) / theta;
  REQUIRE(beta == Catch::Approx(0.0548).margin(1e-3));
  const double k = division_k_for_fov(737.0, 1414.0, theta);
  REQUIRE(k < 0.0);
  REQUIRE(std::abs(k) <= 0.195);
  REQUIRE(k == Catch::Approx(-beta / ((737.0 / 1414.0) * (737.0 / 1414.0) *
                                      (1.0 + beta)))
                   .epsilon(1e-9));
}

TEST_CASE("make_montage", "[montage]") {
  SECTION("identity deformation with full overlap reproduces the image") {
    const auto img = synthetic_fundus(400, 400, 51);
    GroundTruthDeformation d;  // identity affine
    d.overlap_target = 1.0;
    const auto mp = make_montage(img, d, 1);
    REQUIRE(mp.truth.H.T.norm() < 1e-6);
    for (const auto& [l1, l2] : mp.landmarks.pairs)
      REQUIRE((l1 - l2).norm() < 1e-9);
    // Same camera: the radial chains cancel and the images agree inside
    // the shared field stop.
    for (int y = 0; y < 400; ++y)
      for (int x = 0; x < 400; ++x)
        if (mp.fov2.at(x, y))
          REQUIRE(mp.image2.at(x, y, 1) == img.at(x, y, 1));
  }

  SECTION("dual-path mapping oracle at 1e-9") {
    const auto img = synthetic_fundus(420, 420, 52);
    const auto mp = make_montage(img, fixed_deformation(5.0, 1.1), 2);
    REQUIRE(mp.landmarks.count() > 50);
    for (const auto& [l1, l2] : mp.landmarks.pairs) {
      REQUIRE((map_1_to_2(l1, mp.truth) - l2).norm() == 0.0);
      REQUIRE((oracle_chain(l1, mp.truth) - l2).norm() < 1e-9);
    }
  }

  SECTION("overlap target is realised within 0.03") {
    const auto img = synthetic_fundus(480, 480, 53);
    for (double target : {0.8, 0.6}) {
      auto d = fixed_deformation(3.0, 1.0);
      d.overlap_target = target;
      const auto mp = make_montage(img, d, 3);
      REQUIRE(mp.measured_overlap == Catch::Approx(target).margin(0.03));
    }
  }

  SECTION("deterministic given the seed") {
    const auto img = synthetic_fundus(400, 400, 54);
    const auto d = GroundTruthDeformation::randomised(99);
    const auto a = make_montage(img, d, 7);
    const auto b = make_montage(img, d, 7);
    REQUIRE(a.image2.samples == b.image2.samples);
    REQUIRE(a.landmarks.count() == b.landmarks.count());
    REQUIRE(a.truth.H.T == b.truth.H.T);
  }

  SECTION("unreachable overlap is an error") {
    const auto img = synthetic_fundus(400, 400, 55);
    auto d = fixed_deformation(0.0, 0.45);  // tiny mapped disc
    d.overlap_target = 0.9;
    REQUIRE_THROWS_MATCHES(make_montage(img, d, 4), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::overlap_unreachable;
                           }));
  }
}

TEST_CASE("score_montage", "[montage]") {
  const auto img = synthetic_fundus(420, 420, 56);
  const auto mp = make_montage(img, fixed_deformation(4.0, 1.05), 5);
  const Vec2 c = detect_fov(img).centre;
  const double r = detect_fov(img).radius;

  SECTION("the generating model scores exactly zero") {
    const auto s = score_montage(mp.landmarks, mp.truth, mp.image2.width,
                                 mp.image2.height, c, r);
    REQUIRE(s.mean_px == 0.0);
    REQUIRE(s.std_px == 0.0);
    REQUIRE(s.max_px == 0.0);
  }

  SECTION("uniform 1 px shift gives mean 1, std 0") {
    CorrespondenceSet shifted;
    for (const auto& [l1, l2] : mp.landmarks.pairs)
      shifted.add(l1, l2 + Vec2(1.0, 0.0));
    const auto s = score_montage(shifted, mp.truth, mp.image2.width,
                                 mp.image2.height, c, r);
    REQUIRE(s.mean_px == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(s.std_px == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("montage pipeline recovery", "[montage][pipelineish]") {
  // End-to-end on a mid-size synthetic pair: synthesise, re-detect, match,
  // fit, and score landmarks against the planted truth.
  const auto img1 = synthetic_fundus(640, 640, 57);
  auto d = GroundTruthDeformation::randomised(57);
  const auto mp = make_montage(img1, d, 57);

  const auto fov1 = detect_fov(img1);
  const auto fov2 = detect_fov(mp.image2);
  const auto stab1 = stabilise_colour(img1, fov1);
  const auto stab2 = stabilise_colour(mp.image2, fov2);
  FitConfig cfg;
  const auto res = match_three_step(stab1, stab2, fov1, fov2, {}, 0.8, cfg);
  REQUIRE(res.corr.count() >= 30);

  ImagePairMeta meta;
  meta.width1 = img1.width;
  meta.height1 = img1.height;
  meta.width2 = mp.image2.width;
  meta.height2 = mp.image2.height;
  const auto [model, trace] = fit(res.corr, cfg, meta);
  const auto score = score_montage(mp.landmarks, model, mp.image2.width,
                                   mp.image2.height, fov1.centre, fov1.radius);
  CAPTURE(score.mean_px, score.std_px, score.outer_third_mean,
          score.inner_third_mean, res.corr.count(), model.d1.k, mp.truth.d1.k);
  REQUIRE(score.mean_px <= 2.0);
  REQUIRE(score.std_px <= 4.0);
}

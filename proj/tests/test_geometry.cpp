#include "fundusreg/geometry.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace fundusreg;

namespace {

// Scalar oracle for the forward radial map: solves k*r_u*r_d^2 - r_d + r_u = 0
// for r_d by bisection, independently of the closed-form root in the library.
double distorted_radius_oracle(double k, double r_u) {
  if (k == 0.0 || r_u == 0.0) return r_u;
  auto f = [&](double r_d) { return k * r_u * r_d * r_d - r_d + r_u; };
  double lo = 0.0, hi = r_u;
  // Bracket the root continuous at k = 0: r_d is near r_u.
  if (f(hi) > 0.0) {
    while (f(hi) > 0.0) hi *= 1.5;  // k > 0: r_d > r_u
  } else {
    lo = 0.0;  // k < 0: r_d < r_u, f(0) = r_u > 0
  }
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (f(lo) * f(mid) <= 0.0)
      hi = mid;
    else
      lo = mid;
  }
  return 0.5 * (lo + hi);
}

Mat2 rotation(double a) {
  Mat2 r;
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return r;
}

}  // namespace

TEST_CASE("undistort_point", "[geometry]") {
  SECTION("identity at k = 0") {
    auto d = RadialDistortion::make(0.0, Vec2(100, 120));
    const Vec2 p(37.5, 81.25);
    REQUIRE((undistort_point(p, d) - p).norm() == 0.0);
  }
  SECTION("direct evaluation of the division model") {
    auto d = RadialDistortion::make(0.1, Vec2(0, 0));
    REQUIRE(d.norm_scale == 1.0);
    const Vec2 out = undistort_point(Vec2(0.5, 0.0), d);
    REQUIRE(out.x() == Catch::Approx(0.5 / 1.025).epsilon(1e-12));
    REQUIRE(out.x() == Catch::Approx(0.4878049).margin(1e-6));
    REQUIRE(out.y() == 0.0);
  }
  SECTION("centre is a fixed point for all k") {
    for (double k : {-0.2, -0.05, 0.0, 0.13, 0.2}) {
      auto d = RadialDistortion::make(k, Vec2(320, 240));
      REQUIRE((undistort_point(d.centre, d) - d.centre).norm() == 0.0);
    }
  }
}

TEST_CASE("distort_point", "[geometry]") {
  SECTION("identity at k = 0") {
    auto d = RadialDistortion::make(0.0, Vec2(10, 20));
    const Vec2 p(55.0, 44.0);
    REQUIRE((distort_point(p, d) - p).norm() == 0.0);
  }
  SECTION("round trip of the division model example") {
    auto d = RadialDistortion::make(0.1, Vec2(0, 0));
    const Vec2 p_u = undistort_point(Vec2(0.5, 0.0), d);
    const Vec2 back = distort_point(p_u, d);
    REQUIRE((back - Vec2(0.5, 0.0)).norm() < 1e-6);
  }
  SECTION("centre is a fixed point") {
    auto d = RadialDistortion::make(0.15, Vec2(77, 33));
    REQUIRE((distort_point(d.centre, d) - d.centre).norm() == 0.0);
  }
  SECTION("matches the scalar quadratic-root oracle") {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> ks(-0.2, 0.2);
    std::uniform_real_distribution<double> rs(0.0, 1.0);
    for (int i = 0; i < 2000; ++i) {
      const double k = ks(rng);
      const double r_u = rs(rng);
      if (1.0 - 4.0 * k * r_u * r_u < 0.01) continue;
      auto d = RadialDistortion::make(k, Vec2(0, 0));
      const Vec2 out = distort_point(Vec2(r_u, 0.0), d);
      REQUIRE(out.x() == Catch::Approx(distorted_radius_oracle(k, r_u))
                             .margin(1e-9));
    }
  }
  SECTION("outside the invertible range") {
    auto d = RadialDistortion::make(0.2, Vec2(0, 0));
    // disc = 1 - 4*0.2*r^2 <= 0 at r >= 1.118...
    REQUIRE_THROWS_AS(distort_point(Vec2(1.2, 0.0), d), Error);
  }
}

TEST_CASE("radial map invariants", "[geometry]") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> ks(-0.2, 0.2);
  std::uniform_real_distribution<double> rs(0.0, 1.1);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);

  SECTION("round trip W(W^-1(r_u)) over the admissible range") {
    auto d0 = RadialDistortion::make(0.0, Vec2(0, 0));
    int tested = 0;
    while (tested < 5000) {
      const double k = ks(rng);
      const double r_u = rs(rng);
      if (1.0 - 4.0 * k * r_u * r_u < 0.01) continue;
      ++tested;
      auto d = RadialDistortion::make(k, Vec2(0, 0));
      const Vec2 p_u(r_u, 0.0);
      const Vec2 p_d = distort_point(p_u, d);
      REQUIRE((undistort_point(p_d, d) - p_u).norm() < 1e-9);
    }
    (void)d0;
  }
  SECTION("continuity of the root choice at k = 0") {
    auto d = RadialDistortion::make(1e-8, Vec2(0, 0));
    for (double r : {0.1, 0.5, 0.9, 1.05}) {
      const Vec2 p(r, 0.0);
      REQUIRE((distort_point(p, d) - p).norm() < 1e-6);
    }
  }
  SECTION("mutual inverse on an off-centre distortion") {
    auto d = RadialDistortion::make(-0.17, Vec2(256, 192));
    std::uniform_real_distribution<double> px(0.0, 512.0);
    for (int i = 0; i < 500; ++i) {
      const Vec2 p(px(rng), px(rng));
      const Vec2 u = undistort_point(p, d);
      REQUIRE((distort_point(u, d) - p).norm() < 1e-9);
    }
  }
  SECTION("radial symmetry: direction from the centre is preserved") {
    auto d = RadialDistortion::make(0.12, Vec2(100, 80));
    for (int i = 0; i < 200; ++i) {
      const double a = angle(rng);
      const Vec2 p = d.centre + 150.0 * Vec2(std::cos(a), std::sin(a));
      const Vec2 u = undistort_point(p, d);
      const Vec2 dir_in = (p - d.centre).normalized();
      const Vec2 dir_out = (u - d.centre).normalized();
      REQUIRE((dir_in - dir_out).norm() < 1e-12);
    }
  }
}

TEST_CASE("model composition", "[geometry]") {
  SECTION("identity model") {
    auto m = RegistrationModel::identity(640, 480);
    const Vec2 p(123.0, 246.0);
    REQUIRE((map_1_to_2(p, m) - p).norm() == 0.0);
    REQUIRE((map_2_to_1(p, m) - p).norm() == 0.0);
  }
  SECTION("pure translation") {
    auto m = RegistrationModel::identity(640, 480);
    m.H.T = Vec2(10.0, 0.0);
    const Vec2 p(100.0, 200.0);
    REQUIRE((map_1_to_2(p, m) - (p + Vec2(10, 0))).norm() < 1e-12);
    REQUIRE((map_2_to_1(p, m) - (p - Vec2(10, 0))).norm() < 1e-12);
  }
  SECTION("mixed-sign distortions against the scalar oracle") {
    RegistrationModel m;
    m.d1 = RadialDistortion::make(0.05, Vec2(0, 0));
    m.d2 = RadialDistortion::make(-0.05, Vec2(0, 0));
    const Vec2 p(0.4, 0.0);
    // undistort with k = 0.05: 0.4 / (1 + 0.05*0.16)
    const double r_mid = 0.4 / 1.008;
    REQUIRE(undistort_point(p, m.d1).x() == Catch::Approx(r_mid).epsilon(1e-12));
    const double r_out = distorted_radius_oracle(-0.05, r_mid);
    REQUIRE(map_1_to_2(p, m).x() == Catch::Approx(r_out).margin(1e-9));
  }
  SECTION("round trip map_2_to_1 after map_1_to_2") {
    RegistrationModel m;
    m.H.A = rotation(0.12) * 1.05;
    m.H.T = Vec2(14.0, -8.0);
    m.d1 = RadialDistortion::for_image(640, 480, 0.09);
    m.d2 = RadialDistortion::for_image(512, 512, -0.11);
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> px(100.0, 540.0);
    std::uniform_real_distribution<double> py(80.0, 400.0);
    for (int i = 0; i < 1000; ++i) {
      const Vec2 p(px(rng), py(rng));
      const Vec2 fwd = map_1_to_2(p, m);
      REQUIRE((map_2_to_1(fwd, m) - p).norm() < 1e-6);
    }
  }
}

TEST_CASE("decompose_affine", "[geometry]") {
  SECTION("identity") {
    auto dec = decompose_affine(AffineHomography::identity());
    REQUIRE(dec.theta == Catch::Approx(0.0).margin(1e-14));
    REQUIRE(dec.lambda1 == Catch::Approx(1.0));
    REQUIRE(dec.lambda2 == Catch::Approx(1.0));
  }
  SECTION("pure rotation by 30 degrees") {
    AffineHomography h;
    h.A = rotation(M_PI / 6.0);
    auto dec = decompose_affine(h);
    REQUIRE(dec.theta == Catch::Approx(M_PI / 6.0).margin(1e-12));
    REQUIRE(dec.lambda1 == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(dec.lambda2 == Catch::Approx(1.0).margin(1e-12));
    REQUIRE((dec.reconstruct() - h.A).cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("diagonal scaling") {
    AffineHomography h;
    h.A << 2.0, 0.0, 0.0, 1.0;
    auto dec = decompose_affine(h);
    REQUIRE(dec.lambda1 == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(dec.lambda2 == Catch::Approx(1.0).margin(1e-12));
    REQUIRE((dec.reconstruct() - h.A).cwiseAbs().maxCoeff() < 1e-10);
  }
  SECTION("reflection rejected") {
    AffineHomography h;
    h.A << 1.0, 0.0, 0.0, -1.0;
    REQUIRE_THROWS_AS(decompose_affine(h), Error);
  }
  SECTION("reconstruction property on random well-conditioned matrices") {
    std::mt19937 rng(19);
    std::uniform_real_distribution<double> ang(-M_PI, M_PI);
    std::uniform_real_distribution<double> sc(0.5, 2.0);
    for (int i = 0; i < 1000; ++i) {
      AffineHomography h;
      h.A = rotation(ang(rng)) * rotation(-ang(rng)) *
            Eigen::DiagonalMatrix<double, 2>(sc(rng), sc(rng)) *
            rotation(ang(rng));
      if (h.det() <= 0.0) continue;
      auto dec = decompose_affine(h);
      REQUIRE(dec.lambda1 > 0.0);
      REQUIRE(dec.lambda2 > 0.0);
      REQUIRE((dec.reconstruct() - h.A).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("scale_ratio", "[geometry]") {
  REQUIRE(scale_ratio(AffineHomography::identity()) == 0.0);

  AffineHomography aniso;
  aniso.A << 1.02, 0.0, 0.0, 1.00;
  REQUIRE(scale_ratio(aniso) == Catch::Approx(0.02 / 1.02).epsilon(1e-12));

  AffineHomography rot;
  rot.A = rotation(1.1);
  REQUIRE(scale_ratio(rot) < 1e-14);
}

TEST_CASE("model JSON round trip is bit-exact", "[geometry]") {
  RegistrationModel m;
  m.H.A = rotation(0.1234567891234567) * 1.0567891234567891;
  m.H.T = Vec2(12.345678912345678, -7.891234567891234);
  m.d1 = RadialDistortion::for_image(1568, 2352, 0.123456789123456789 * 0.5);
  m.d2 = RadialDistortion::for_image(1296, 1944, -0.054321987654321);
  m.mode = DistortionMode::two_distortions;
  m.fit_error = 0.8612345678912345;
  m.iterations = 7;

  const std::string text = model_to_json(m).dump();
  const RegistrationModel back = model_from_json(nlohmann::json::parse(text));

  REQUIRE(back.H.A == m.H.A);
  REQUIRE(back.H.T == m.H.T);
  REQUIRE(back.d1.k == m.d1.k);
  REQUIRE(back.d2.k == m.d2.k);
  REQUIRE(back.d1.centre == m.d1.centre);
  REQUIRE(back.d2.centre == m.d2.centre);
  REQUIRE(back.d1.norm_scale == m.d1.norm_scale);
  REQUIRE(back.d2.norm_scale == m.d2.norm_scale);
  REQUIRE(back.mode == m.mode);
  REQUIRE(back.fit_error == m.fit_error);
  REQUIRE(back.iterations == m.iterations);
}

#include "fundusreg/fov.hpp"
#include "fundusreg/io.hpp"
#include "fundusreg/stabilise.hpp"
#include "fundusreg/synthetic.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <opencv2/imgcodecs.hpp>

#include <cmath>
#include <filesystem>
#include <string>

using namespace fundusreg;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fundusreg_tests";
  fs::create_directories(dir);
  return dir / name;
}

/// White disc on black, the canonical FOV phantom.
RasterImage disc_image(int w, int h, double cx, double cy, double r,
                       float level = 1.f) {
  RasterImage img = RasterImage::make(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (std::hypot(x - cx, y - cy) <= r) img.at(x, y) = level;
  return img;
}

/// Bounded sinusoidal texture inside a disc mask; amplitude keeps samples
/// well away from the clip range.
RasterImage textured_disc(int w, int h, double mean, double stddev) {
  RasterImage img = RasterImage::make(w, h, 1);
  const double cx = (w - 1) * 0.5, cy = (h - 1) * 0.5;
  const double r = 0.45 * std::min(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (std::hypot(x - cx, y - cy) > r) continue;
      const double t = std::sin(0.55 * x) * std::sin(0.47 * y);
      img.at(x, y) = static_cast<float>(mean + 2.0 * stddev * t);
    }
  return img;
}

double in_mask_mean_abs_diff(const RasterImage& a, const RasterImage& b,
                             const FovMask& fov) {
  double sum = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < fov.mask.size(); ++i) {
    if (!fov.mask[i]) continue;
    for (int c = 0; c < a.channels; ++c)
      sum += std::abs(a.samples[i * a.channels + c] -
                      b.samples[i * b.channels + c]);
    n += a.channels;
  }
  return sum / n;
}

}  // namespace

TEST_CASE("load_image scales sample depths to [0,1]", "[preprocess]") {
  SECTION("8-bit endpoints") {
    cv::Mat m(64, 64, CV_8UC1, cv::Scalar(0));
    m.at<uint8_t>(10, 10) = 255;
    const auto path = temp_file("depth8.png");
    cv::imwrite(path.string(), m);
    const auto img = load_image(path.string());
    REQUIRE(img.at(10, 10) == 1.0f);
    REQUIRE(img.at(0, 0) == 0.0f);
  }
  SECTION("16-bit midpoint") {
    cv::Mat m(64, 64, CV_16UC1, cv::Scalar(0));
    m.at<uint16_t>(5, 7) = 32768;
    const auto path = temp_file("depth16.png");
    cv::imwrite(path.string(), m);
    const auto img = load_image(path.string());
    REQUIRE(img.at(7, 5) == Catch::Approx(32768.0 / 65535.0).epsilon(1e-6));
  }
  SECTION("colour order is RGB") {
    cv::Mat m(64, 64, CV_8UC3, cv::Scalar(10, 20, 30));  // BGR
    const auto path = temp_file("rgb.png");
    cv::imwrite(path.string(), m);
    const auto img = load_image(path.string());
    REQUIRE(img.at(0, 0, 0) == Catch::Approx(30.0 / 255.0));
    REQUIRE(img.at(0, 0, 1) == Catch::Approx(20.0 / 255.0));
    REQUIRE(img.at(0, 0, 2) == Catch::Approx(10.0 / 255.0));
  }
  SECTION("missing file") {
    REQUIRE_THROWS_MATCHES(load_image("/nonexistent/nowhere.png"), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::io_error;
                           }));
  }
  SECTION("save/load round trip within 8-bit quantisation") {
    const auto img = synthetic_fundus(96, 80, 3);
    const auto path = temp_file("roundtrip.png");
    save_image(img, path.string());
    const auto back = load_image(path.string());
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    double worst = 0.0;
    for (size_t i = 0; i < img.samples.size(); ++i)
      worst = std::max(
          worst, static_cast<double>(std::abs(img.samples[i] - back.samples[i])));
    REQUIRE(worst <= 0.5 / 255.0 + 1e-6);
  }
}

TEST_CASE("detect_fov", "[preprocess]") {
  SECTION("synthetic disc recovered to 2 px") {
    const auto img = disc_image(512, 512, 256, 256, 200);
    const auto fov = detect_fov(img);
    REQUIRE((fov.centre - Vec2(256, 256)).norm() < 2.0);
    REQUIRE(fov.radius == Catch::Approx(200.0).margin(2.0));
    REQUIRE(fov.at(256, 256));
    REQUIRE_FALSE(fov.at(5, 5));
  }
  SECTION("all-black image has no FOV") {
    const auto img = RasterImage::make(128, 128, 1);
    REQUIRE_THROWS_MATCHES(detect_fov(img), Error,
                           Catch::Matchers::Predicate<Error>([](const Error& e) {
                             return e.code() == ErrorCode::no_fov;
                           }));
  }
  SECTION("disc touching the image edge is clipped, not an error") {
    const auto img = disc_image(512, 512, 50, 256, 200);
    const auto fov = detect_fov(img);
    REQUIRE(fov.at(0, 256));
    REQUIRE(fov.at(150, 256));
    REQUIRE_FALSE(fov.at(400, 256));
  }
  SECTION("gain invariance: centre and radius move < 2 px") {
    const auto ref = detect_fov(disc_image(512, 512, 250, 262, 190, 1.0f));
    for (float gain : {0.5f, 0.7f, 0.9f}) {
      const auto fov = detect_fov(disc_image(512, 512, 250, 262, 190, gain));
      REQUIRE((fov.centre - ref.centre).norm() < 2.0);
      REQUIRE(std::abs(fov.radius - ref.radius) < 2.0);
    }
  }
  SECTION("synthetic fundus FOV matches its construction") {
    const auto img = synthetic_fundus(480, 360, 17);
    const auto fov = detect_fov(img);
    REQUIRE((fov.centre - img.centre()).norm() < 4.0);
    REQUIRE(fov.radius == Catch::Approx(0.47 * 360).margin(5.0));
  }
}

TEST_CASE("stabilise_colour", "[preprocess]") {
  SECTION("already-standardised input is a fixed point") {
    const auto img = textured_disc(400, 400, 0.5, 0.15);
    const auto fov = detect_fov(img);
    const auto out = stabilise_colour(img, fov);
    std::vector<float> vals(out.samples.begin(), out.samples.end());
    const auto [mean, stddev] = masked_mean_std(vals, fov);
    REQUIRE(mean == Catch::Approx(0.5).margin(0.01));
    REQUIRE(stddev == Catch::Approx(0.15).margin(0.01));
  }

  SECTION("linear brightness gradient is removed") {
    const auto base = textured_disc(400, 400, 0.5, 0.1);
    RasterImage ramped = base;
    const auto fov = detect_fov(base);
    for (int y = 0; y < ramped.height; ++y)
      for (int x = 0; x < ramped.width; ++x)
        if (fov.at(x, y))
          ramped.at(x, y) = std::clamp(
              ramped.at(x, y) + 0.25f * x / ramped.width - 0.12f, 0.f, 1.f);
    const auto a = stabilise_colour(base, fov);
    const auto b = stabilise_colour(ramped, fov);
    REQUIRE(in_mask_mean_abs_diff(a, b, fov) < 0.05);
  }

  SECTION("pixels outside the mask are zero") {
    const auto img = synthetic_fundus(320, 240, 4);
    const auto fov = detect_fov(img);
    const auto out = stabilise_colour(img, fov);
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (!fov.at(x, y))
          for (int c = 0; c < out.channels; ++c)
            REQUIRE(out.at(x, y, c) == 0.0f);
  }

  SECTION("idempotent up to tolerance") {
    const auto img = textured_disc(400, 400, 0.55, 0.12);
    const auto fov = detect_fov(img);
    const auto once = stabilise_colour(img, fov);
    const auto twice = stabilise_colour(once, fov);
    double worst = 0.0;
    for (size_t i = 0; i < once.samples.size(); ++i)
      if (fov.mask[i])
        worst = std::max(worst, static_cast<double>(std::abs(
                                    once.samples[i] - twice.samples[i])));
    REQUIRE(worst < 0.02);
  }

  SECTION("invariant under affine intensity changes") {
    const auto img = textured_disc(400, 400, 0.5, 0.075);
    const auto fov = detect_fov(img);
    const auto ref = stabilise_colour(img, fov);
    struct GainOffset {
      float gain, offset;
    };
    for (auto [gain, offset] :
         {GainOffset{0.5f, -0.1f}, GainOffset{1.5f, 0.0f},
          GainOffset{1.0f, 0.2f}, GainOffset{1.2f, 0.05f}}) {
      RasterImage mod = img;
      for (size_t i = 0; i < mod.samples.size(); ++i)
        if (fov.mask[i])
          mod.samples[i] = std::clamp(mod.samples[i] * gain + offset, 0.f, 1.f);
      const auto out = stabilise_colour(mod, fov);
      double worst = 0.0;
      for (size_t i = 0; i < out.samples.size(); ++i)
        if (fov.mask[i])
          worst = std::max(worst, static_cast<double>(std::abs(
                                      out.samples[i] - ref.samples[i])));
      REQUIRE(worst < 0.05);
    }
  }
}

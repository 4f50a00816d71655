// fundusreg/types.hpp
//
// Core domain types shared across the library: raster images, field-of-view
// masks, keypoints, match vectors and correspondence sets, plus the error
// type used for every contract violation.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fundusreg {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

enum class ErrorCode {
  io_error,
  no_fov,
  insufficient_features,
  insufficient_matches,
  insufficient_correspondences,
  degenerate,
  distortion_singularity,
  outside_invertible_range,
  reflection_not_allowed,
  dimension_mismatch,
  invalid_argument,
  overlap_unreachable,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::io_error: return "io-error";
    case ErrorCode::no_fov: return "no-fov";
    case ErrorCode::insufficient_features: return "insufficient-features";
    case ErrorCode::insufficient_matches: return "insufficient-matches";
    case ErrorCode::insufficient_correspondences: return "insufficient-correspondences";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::distortion_singularity: return "distortion-singularity";
    case ErrorCode::outside_invertible_range: return "outside-invertible-range";
    case ErrorCode::reflection_not_allowed: return "reflection-not-allowed";
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::overlap_unreachable: return "overlap-unreachable";
  }
  return "unknown";
}

/// Library error. Every named failure mode in the public contracts throws
/// this with the matching code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

/// Row-major interleaved raster with samples in [0,1].
struct RasterImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 or 3
  std::vector<float> samples;

  static constexpr int kMinDim = 64;

  /// Allocates a zeroed image; rejects degenerate geometry.
  static RasterImage make(int width, int height, int channels) {
    if (width < kMinDim || height < kMinDim)
      fail(ErrorCode::invalid_argument,
           "image dimensions below minimum of 64 px");
    if (channels != 1 && channels != 3)
      fail(ErrorCode::invalid_argument, "channels must be 1 or 3");
    RasterImage img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.samples.assign(static_cast<size_t>(width) * height * channels, 0.f);
    return img;
  }

  float& at(int x, int y, int c = 0) {
    return samples[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c = 0) const {
    return samples[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool inside(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }

  size_t pixel_count() const { return static_cast<size_t>(width) * height; }

  bool same_shape(const RasterImage& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  /// Geometric image centre in pixel coordinates.
  Vec2 centre() const {
    return Vec2((width - 1) * 0.5, (height - 1) * 0.5);
  }
};

/// Boolean raster marking the circular retinal disc of a fundus photograph.
struct FovMask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> mask;  // 1 on the disc
  Vec2 centre = Vec2::Zero();
  double radius = 0.0;

  static FovMask make(int width, int height) {
    FovMask m;
    m.width = width;
    m.height = height;
    m.mask.assign(static_cast<size_t>(width) * height, 0);
    return m;
  }

  /// Full-frame mask, used where no disc detection has run.
  static FovMask full(int width, int height) {
    FovMask m;
    m.width = width;
    m.height = height;
    m.mask.assign(static_cast<size_t>(width) * height, 1);
    m.centre = Vec2((width - 1) * 0.5, (height - 1) * 0.5);
    m.radius = 0.5 * std::min(width, height);
    return m;
  }

  bool at(int x, int y) const {
    return mask[static_cast<size_t>(y) * width + x] != 0;
  }
  void set(int x, int y, bool v) {
    mask[static_cast<size_t>(y) * width + x] = v ? 1 : 0;
  }
  bool contains(const Vec2& p) const {
    int x = static_cast<int>(std::lround(p.x()));
    int y = static_cast<int>(std::lround(p.y()));
    return x >= 0 && x < width && y >= 0 && y < height && at(x, y);
  }
  size_t area() const {
    size_t n = 0;
    for (uint8_t v : mask) n += v;
    return n;
  }
};

constexpr int kDescriptorSize = 128;

/// Scale-space keypoint with a unit-norm gradient-orientation descriptor.
struct Keypoint {
  Vec2 position = Vec2::Zero();   // pixels, image frame
  double scale = 1.0;             // pixels, > 0
  double orientation = 0.0;       // radians in [-pi, pi)
  Eigen::Matrix<float, kDescriptorSize, 1> descriptor =
      Eigen::Matrix<float, kDescriptorSize, 1>::Zero();
};

/// Correspondence vector between a moving-image point and a reference-image
/// point expressed in stitched (side-by-side) coordinates.
struct MatchVector {
  Vec2 p1 = Vec2::Zero();  // moving image
  Vec2 p2 = Vec2::Zero();  // reference image plus stitching offset
  double length = 0.0;
  double orientation = 0.0;  // radians
  int index1 = -1;           // keypoint bookkeeping for the three-step matcher
  int index2 = -1;

  static MatchVector between(const Vec2& p1, const Vec2& p2, int i1 = -1,
                             int i2 = -1) {
    MatchVector v;
    v.p1 = p1;
    v.p2 = p2;
    const Vec2 d = p2 - p1;
    v.length = d.norm();
    v.orientation = std::atan2(d.y(), d.x());
    v.index1 = i1;
    v.index2 = i2;
    return v;
  }
};

/// Matched point pairs in original (unstitched) image coordinates.
struct CorrespondenceSet {
  std::vector<std::pair<Vec2, Vec2>> pairs;

  int count() const { return static_cast<int>(pairs.size()); }

  void add(const Vec2& p1, const Vec2& p2) { pairs.emplace_back(p1, p2); }
};

}  // namespace fundusreg

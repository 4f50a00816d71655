// fundusreg/sift.hpp
//
// Keypoint detection: difference-of-Gaussians scale-space extrema with
// low-contrast and edge-response rejection, gradient-histogram orientation
// and the 4x4x8 gradient-orientation descriptor (OpenCV's SIFT behind the
// library's Keypoint type). Descriptors are renormalised to unit L2.

#pragma once

#include "fundusreg/types.hpp"

#include <opencv2/core.hpp>
#include <opencv2/features2d.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace fundusreg {

struct SiftParams {
  int max_keypoints = 4000;      // strongest responses kept
  int octave_layers = 3;         // scales per octave
  double contrast_threshold = 0.03;
  double edge_threshold = 10.0;
  double sigma = 1.6;
};

/// Detects keypoints on a stabilised image, restricted to the FOV mask.
/// Throws insufficient_features when fewer than 4 survive.
inline std::vector<Keypoint> detect_keypoints(const RasterImage& img,
                                              const FovMask& fov,
                                              const SiftParams& params = {}) {
  if (img.width != fov.width || img.height != fov.height)
    fail(ErrorCode::dimension_mismatch, "mask does not match image");

  cv::Mat gray(img.height, img.width, CV_8UC1);
  for (int y = 0; y < img.height; ++y) {
    uint8_t* row = gray.ptr<uint8_t>(y);
    for (int x = 0; x < img.width; ++x) {
      float v = 0.f;
      if (img.channels == 1) {
        v = img.at(x, y, 0);
      } else {
        v = 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) +
            0.114f * img.at(x, y, 2);
      }
      row[x] = static_cast<uint8_t>(std::clamp(v, 0.f, 1.f) * 255.f + 0.5f);
    }
  }
  cv::Mat mask(img.height, img.width, CV_8UC1);
  for (int y = 0; y < img.height; ++y) {
    uint8_t* row = mask.ptr<uint8_t>(y);
    for (int x = 0; x < img.width; ++x) row[x] = fov.at(x, y) ? 255 : 0;
  }

  auto sift = cv::SIFT::create(0, params.octave_layers,
                               params.contrast_threshold,
                               params.edge_threshold, params.sigma);
  std::vector<cv::KeyPoint> cv_kps;
  cv::Mat desc;
  sift->detectAndCompute(gray, mask, cv_kps, desc);

  std::vector<int> order(cv_kps.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cv_kps[a].response != cv_kps[b].response)
      return cv_kps[a].response > cv_kps[b].response;
    if (cv_kps[a].pt.y != cv_kps[b].pt.y) return cv_kps[a].pt.y < cv_kps[b].pt.y;
    return cv_kps[a].pt.x < cv_kps[b].pt.x;
  });

  std::vector<Keypoint> out;
  out.reserve(std::min<size_t>(order.size(), params.max_keypoints));
  for (int idx : order) {
    if (static_cast<int>(out.size()) >= params.max_keypoints) break;
    const cv::KeyPoint& kp = cv_kps[idx];
    const Vec2 pos(kp.pt.x, kp.pt.y);
    if (!fov.contains(pos)) continue;
    Keypoint k;
    k.position = pos;
    k.scale = std::max(0.1, static_cast<double>(kp.size) * 0.5);
    double angle = kp.angle >= 0.f ? kp.angle * M_PI / 180.0 : 0.0;
    angle = std::remainder(angle, 2.0 * M_PI);
    if (angle >= M_PI) angle -= 2.0 * M_PI;
    k.orientation = angle;
    Eigen::Matrix<float, kDescriptorSize, 1> d;
    for (int j = 0; j < kDescriptorSize; ++j) d(j) = desc.at<float>(idx, j);
    const float n = d.norm();
    if (n <= 1e-12f) continue;
    k.descriptor = d / n;
    out.push_back(k);
  }
  if (out.size() < 4)
    fail(ErrorCode::insufficient_features,
         "insufficient features: found " + std::to_string(out.size()));
  return out;
}

// --- keypoint cache ----------------------------------------------------------
//
// One text line per keypoint: `x y scale orientation d0 ... d127`.

inline void write_keypoints(const std::string& path,
                            const std::vector<Keypoint>& kps) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io_error, "cannot write keypoint cache: " + path);
  out.precision(9);
  for (const auto& kp : kps) {
    out << kp.position.x() << ' ' << kp.position.y() << ' ' << kp.scale << ' '
        << kp.orientation;
    for (int j = 0; j < kDescriptorSize; ++j) out << ' ' << kp.descriptor(j);
    out << '\n';
  }
}

inline std::vector<Keypoint> read_keypoints(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_error, "cannot read keypoint cache: " + path);
  std::vector<Keypoint> kps;
  Keypoint kp;
  while (in >> kp.position.x() >> kp.position.y() >> kp.scale >>
         kp.orientation) {
    for (int j = 0; j < kDescriptorSize; ++j)
      if (!(in >> kp.descriptor(j)))
        fail(ErrorCode::io_error, "truncated keypoint cache: " + path);
    kps.push_back(kp);
  }
  return kps;
}

}  // namespace fundusreg

// fundusreg/io.hpp
//
// Raster I/O behind the library's image type. PNG/JPEG/TIFF/BMP are decoded
// by OpenCV's imgcodecs; 8-bit and 16-bit depths are scaled to [0,1].

#pragma once

#include "fundusreg/types.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <string>

namespace fundusreg {

inline RasterImage load_image(const std::string& path) {
  cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (raw.empty())
    fail(ErrorCode::io_error, "cannot read image: " + path);
  if (raw.rows == 0 || raw.cols == 0)
    fail(ErrorCode::io_error, "zero-area image: " + path);
  if (raw.rows < RasterImage::kMinDim || raw.cols < RasterImage::kMinDim)
    fail(ErrorCode::io_error,
         "degenerate image (below 64 px): " + path);

  // Collapse alpha, order channels RGB.
  if (raw.channels() == 4)
    cv::cvtColor(raw, raw, cv::COLOR_BGRA2BGR);
  const int channels = raw.channels() == 1 ? 1 : 3;
  if (raw.channels() != 1 && raw.channels() != 3)
    fail(ErrorCode::io_error, "unsupported channel count: " + path);

  double scale = 1.0;
  switch (raw.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default:
      fail(ErrorCode::io_error, "unsupported sample depth: " + path);
  }
  cv::Mat floated;
  raw.convertTo(floated, CV_32F, scale);

  RasterImage img = RasterImage::make(raw.cols, raw.rows, channels);
  for (int y = 0; y < img.height; ++y) {
    const float* row = floated.ptr<float>(y);
    for (int x = 0; x < img.width; ++x) {
      if (channels == 1) {
        img.at(x, y, 0) = std::clamp(row[x], 0.f, 1.f);
      } else {
        // OpenCV stores BGR.
        img.at(x, y, 0) = std::clamp(row[3 * x + 2], 0.f, 1.f);
        img.at(x, y, 1) = std::clamp(row[3 * x + 1], 0.f, 1.f);
        img.at(x, y, 2) = std::clamp(row[3 * x + 0], 0.f, 1.f);
      }
    }
  }
  return img;
}

inline void save_image(const RasterImage& img, const std::string& path) {
  cv::Mat out(img.height, img.width,
              img.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    uint8_t* row = out.ptr<uint8_t>(y);
    for (int x = 0; x < img.width; ++x) {
      auto to8 = [](float v) {
        return static_cast<uint8_t>(std::clamp(v, 0.f, 1.f) * 255.f + 0.5f);
      };
      if (img.channels == 1) {
        row[x] = to8(img.at(x, y, 0));
      } else {
        row[3 * x + 0] = to8(img.at(x, y, 2));
        row[3 * x + 1] = to8(img.at(x, y, 1));
        row[3 * x + 2] = to8(img.at(x, y, 0));
      }
    }
  }
  if (!cv::imwrite(path, out))
    fail(ErrorCode::io_error, "cannot write image: " + path);
}

}  // namespace fundusreg

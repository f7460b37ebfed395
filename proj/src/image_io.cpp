// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace attrprompt {

namespace {

cv::Mat to_mat(const Image& img) {
  cv::Mat m(img.height, img.width, CV_64FC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<cv::Vec3d>(y);
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) row[x][c] = img.at(y, x, c);
    }
  }
  return m;
}

Image from_mat(const cv::Mat& m) {
  Image img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3d>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[x][c];
    }
  }
  return img;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image '" + path.string() + "'");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_64FC3, 1.0 / 255.0);
  return from_mat(f);
}

void save_image(const std::filesystem::path& path, const Image& raw) {
  cv::Mat rgb(raw.height, raw.width, CV_8UC3);
  for (int y = 0; y < raw.height; ++y) {
    auto* row = rgb.ptr<cv::Vec3b>(y);
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(raw.at(y, x, c), 0.0, 1.0);
        row[x][c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image '" + path.string() + "'");
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (img.height == height && img.width == width) return img;
  cv::Mat out;
  cv::resize(to_mat(img), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(out);
}

}  // namespace attrprompt

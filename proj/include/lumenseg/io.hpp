#pragma once

// PNG/JPEG codecs backed by OpenCV. Masks are stored as 8-bit {0, 255}; probability
// maps as 16-bit single-channel PNG scaled from [0, 1].

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include "image.hpp"

namespace lumenseg::io {

namespace fs = std::filesystem;

inline cv::Mat read_mat(const fs::path& path, int flags) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw IoError("cannot decode image: " + path.string());
  return m;
}

inline Image8 from_mat(const cv::Mat& m) {
  if (m.depth() != CV_8U) throw IoError("expected an 8-bit image");
  cv::Mat src = m;
  if (m.channels() == 3) cv::cvtColor(m, src, cv::COLOR_BGR2RGB);
  Image8 out(src.rows, src.cols, src.channels());
  for (int r = 0; r < src.rows; ++r) {
    std::memcpy(&out.at(r, 0), src.ptr<std::uint8_t>(r), static_cast<std::size_t>(src.cols) * src.channels());
  }
  return out;
}

inline cv::Mat to_mat(const Image8& img) {
  if (img.channels() != 1 && img.channels() != 3) throw IoError("only 1- or 3-channel images are written");
  cv::Mat m(img.rows(), img.cols(), img.channels() == 1 ? CV_8UC1 : CV_8UC3);
  for (int r = 0; r < img.rows(); ++r) {
    std::memcpy(m.ptr<std::uint8_t>(r), &img.at(r, 0), static_cast<std::size_t>(img.cols()) * img.channels());
  }
  if (img.channels() == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
  return m;
}

// RGB, 3 channels regardless of the stored format.
inline Image8 read_rgb(const fs::path& path) { return from_mat(read_mat(path, cv::IMREAD_COLOR)); }

inline Image8 read_gray(const fs::path& path) { return from_mat(read_mat(path, cv::IMREAD_GRAYSCALE)); }

// Any non-zero value is foreground.
inline Mask read_mask(const fs::path& path) {
  Mask m = from_mat(read_mat(path, cv::IMREAD_GRAYSCALE));
  for (auto& v : m.storage()) v = v > 0 ? 1 : 0;
  return m;
}

inline void write_mat(const fs::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image: " + path.string());
}

inline void write_image(const fs::path& path, const Image8& img) { write_mat(path, to_mat(img)); }

inline void write_mask(const fs::path& path, const Mask& mask) {
  Image8 scaled = mask;
  for (auto& v : scaled.storage()) v = v ? 255 : 0;
  write_mat(path, to_mat(scaled));
}

inline void write_prob16(const fs::path& path, const ProbMap& prob) {
  cv::Mat m(prob.rows(), prob.cols(), CV_16UC1);
  for (int r = 0; r < prob.rows(); ++r) {
    auto* row = m.ptr<std::uint16_t>(r);
    for (int c = 0; c < prob.cols(); ++c) {
      const double p = std::clamp(static_cast<double>(prob.at(r, c)), 0.0, 1.0);
      row[c] = static_cast<std::uint16_t>(std::lround(p * 65535.0));
    }
  }
  write_mat(path, m);
}

inline ProbMap read_prob16(const fs::path& path) {
  cv::Mat m = read_mat(path, cv::IMREAD_UNCHANGED);
  if (m.type() != CV_16UC1) throw IoError("expected a 16-bit single-channel PNG: " + path.string());
  ProbMap out(m.rows, m.cols, 1);
  for (int r = 0; r < m.rows; ++r) {
    const auto* row = m.ptr<std::uint16_t>(r);
    for (int c = 0; c < m.cols; ++c) out.at(r, c) = static_cast<float>(row[c] / 65535.0);
  }
  return out;
}

}  // namespace lumenseg::io

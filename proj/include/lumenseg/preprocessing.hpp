#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "image.hpp"

namespace lumenseg {

enum class ColorMode { grayscale, rgb };

inline std::string to_string(ColorMode m) { return m == ColorMode::grayscale ? "grayscale" : "rgb"; }

inline ColorMode color_mode_from_string(const std::string& s) {
  if (s == "grayscale" || s == "gray") return ColorMode::grayscale;
  if (s == "rgb") return ColorMode::rgb;
  throw ConfigError("unknown color mode '" + s + "'");
}

inline int channels_of(ColorMode m) { return m == ColorMode::grayscale ? 1 : 3; }

struct RawFrame {
  Image8 pixels;  // H x W x 3
  std::string source_id;
  int frame_index = 0;

  void validate() const {
    if (pixels.channels() != 3) throw ValueError(source_id + ": raw frames must have 3 channels");
    if (pixels.rows() < 64 || pixels.cols() < 64) {
      throw ValueError(source_id + ": raw frames must be at least 64x64");
    }
    if (frame_index < 0) throw ValueError(source_id + ": negative frame index");
  }
};

struct FovEllipse {
  double center_row = 0.0;
  double center_col = 0.0;
  double semi_major = 0.0;  // a
  double semi_minor = 0.0;  // b
  double rotation = 0.0;    // radians in [0, pi), major axis angle from the column axis
  double score = 0.0;       // accumulator support
};

struct PreprocConfig {
  double canny_low = 50.0;
  double canny_high = 150.0;
  double min_axis_fraction = 0.25;
  int target_size = 256;
  ColorMode color_mode = ColorMode::grayscale;
  // Upper bound on edge points entering the pair search; larger edge sets are subsampled.
  int max_hough_points = 320;
  std::uint64_t hough_seed = 0;

  void validate() const {
    if (!(canny_low < canny_high)) throw ConfigError("canny_low must be below canny_high");
    if (!(min_axis_fraction > 0.0 && min_axis_fraction <= 1.0)) {
      throw ConfigError("min_axis_fraction must lie in (0, 1]");
    }
    if (target_size <= 0) throw ConfigError("target_size must be positive");
    if (max_hough_points < 3) throw ConfigError("max_hough_points must be at least 3");
  }
};

// Row/col rectangle, half-open: rows [top, top + height), cols [left, left + width).
struct CropRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int bottom() const { return top + height; }
  int right() const { return left + width; }
  bool operator==(const CropRect&) const = default;
};

// BT.601 luma, rounded to nearest.
inline Image8 to_grayscale(const Image8& frame) {
  if (frame.channels() != 3) throw ValueError("to_grayscale: expected 3 channels");
  Image8 out(frame.rows(), frame.cols(), 1);
  const auto src = frame.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double y = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
    dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
  }
  return out;
}

namespace detail {

inline std::vector<float> luminance(const Image8& frame) {
  std::vector<float> lum(frame.pixel_count());
  const auto src = frame.data();
  if (frame.channels() == 1) {
    for (std::size_t i = 0; i < lum.size(); ++i) lum[i] = src[i];
  } else {
    const int ch = frame.channels();
    for (std::size_t i = 0; i < lum.size(); ++i) {
      lum[i] = static_cast<float>(0.299 * src[ch * i] + 0.587 * src[ch * i + 1] +
                                  0.114 * src[ch * i + 2]);
    }
  }
  return lum;
}

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

// Separable 5-tap Gaussian, sigma 1.
inline std::vector<float> gaussian5(const std::vector<float>& src, int rows, int cols) {
  static constexpr std::array<float, 5> k = {0.05448868f, 0.24420134f, 0.40261995f, 0.24420134f,
                                             0.05448868f};
  std::vector<float> tmp(src.size()), out(src.size());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      float s = 0.0f;
      for (int t = -2; t <= 2; ++t) s += k[t + 2] * src[r * cols + reflect(c + t, cols)];
      tmp[r * cols + c] = s;
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      float s = 0.0f;
      for (int t = -2; t <= 2; ++t) s += k[t + 2] * tmp[reflect(r + t, rows) * cols + c];
      out[r * cols + c] = s;
    }
  }
  return out;
}

}  // namespace detail

// Canny: Gaussian smoothing, 3x3 Sobel gradients (unnormalised, L2 magnitude),
// non-maximum suppression along the quantised gradient direction, hysteresis.
// Output is a 0/1 map with the one-pixel image border cleared.
inline Mask detect_edges(const Image8& frame, const PreprocConfig& config) {
  config.validate();
  const int rows = frame.rows(), cols = frame.cols();
  Mask edges(rows, cols, 1);
  if (rows < 3 || cols < 3) return edges;
  const auto smooth = detail::gaussian5(detail::luminance(frame), rows, cols);

  std::vector<float> gx(smooth.size()), gy(smooth.size()), mag(smooth.size(), 0.0f);
  auto at = [&](int r, int c) { return smooth[r * cols + c]; };
  for (int r = 1; r < rows - 1; ++r) {
    for (int c = 1; c < cols - 1; ++c) {
      const float x = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                      (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
      const float y = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                      (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      gx[i] = x;
      gy[i] = y;
      mag[i] = std::sqrt(x * x + y * y);
    }
  }

  // 0: keep out, 1: weak, 2: strong
  std::vector<std::uint8_t> cls(smooth.size(), 0);
  const float tan22 = 0.41421356f;  // tan(22.5 deg)
  for (int r = 1; r < rows - 1; ++r) {
    for (int c = 1; c < cols - 1; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      const float m = mag[i];
      if (m < config.canny_low) continue;
      const float ax = std::abs(gx[i]), ay = std::abs(gy[i]);
      std::ptrdiff_t step;
      if (ay <= tan22 * ax) {
        step = 1;  // horizontal gradient, compare left/right
      } else if (ax <= tan22 * ay) {
        step = cols;
      } else {
        step = (gx[i] * gy[i] > 0) ? cols + 1 : cols - 1;
      }
      // Ties resolved toward the lower index so a symmetric ridge keeps one pixel.
      if (m > mag[i - step] && m >= mag[i + step]) cls[i] = m >= config.canny_high ? 2 : 1;
    }
  }

  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    if (cls[i] == 2) {
      edges.storage()[i] = 1;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int r = static_cast<int>(i / cols), c = static_cast<int>(i % cols);
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr <= 0 || cc <= 0 || rr >= rows - 1 || cc >= cols - 1) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * cols + cc;
        if (cls[j] == 1 && !edges.storage()[j]) {
          edges.storage()[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return edges;
}

inline Mask detect_edges(const RawFrame& frame, const PreprocConfig& config) {
  frame.validate();
  return detect_edges(frame.pixels, config);
}

// Pair-based ellipse Hough transform (Xie & Ji). Every pair of edge points is
// hypothesised as the endpoints of a major axis, fixing centre, a and orientation;
// the remaining points vote for the semi-minor axis b in a one-pixel accumulator.
// Returns the best-supported candidate whose b passes the size gate, or nothing
// when no candidate reaches a quarter of its ideal perimeter support.
inline std::optional<FovEllipse> fit_fov_ellipse(const Mask& edges, const PreprocConfig& config) {
  config.validate();
  struct Pt {
    float r, c;
  };
  std::vector<Pt> all;
  for (int r = 0; r < edges.rows(); ++r) {
    for (int c = 0; c < edges.cols(); ++c) {
      if (edges.at(r, c)) all.push_back({static_cast<float>(r), static_cast<float>(c)});
    }
  }
  if (all.size() < 3) return std::nullopt;

  std::vector<Pt> pts = all;
  if (pts.size() > static_cast<std::size_t>(config.max_hough_points)) {
    std::mt19937_64 rng(config.hough_seed);
    for (std::size_t i = 0; i < static_cast<std::size_t>(config.max_hough_points); ++i) {
      const std::size_t j = i + rng() % (pts.size() - i);
      std::swap(pts[i], pts[j]);
    }
    pts.resize(config.max_hough_points);
  }
  const double density = static_cast<double>(pts.size()) / static_cast<double>(all.size());

  const double min_b = config.min_axis_fraction * std::min(edges.rows(), edges.cols());
  const double max_a = 0.5 * std::hypot(edges.rows(), edges.cols());
  const std::size_t n = pts.size();
  std::vector<int> hist(static_cast<std::size_t>(max_a) + 3);

  std::optional<FovEllipse> best;
  double best_ratio = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dr = pts[j].r - pts[i].r, dc = pts[j].c - pts[i].c;
      const double a = 0.5 * std::sqrt(dr * dr + dc * dc);
      if (a < min_b || a > max_a) continue;
      const double cr = 0.5 * (pts[i].r + pts[j].r), cc = 0.5 * (pts[i].c + pts[j].c);
      const double a2 = a * a;
      const int amax = static_cast<int>(a) + 1;
      std::fill(hist.begin(), hist.begin() + amax + 2, 0);
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i || k == j) continue;
        const double pr = pts[k].r - cr, pc = pts[k].c - cc;
        const double d2 = pr * pr + pc * pc;
        if (d2 >= a2 || d2 < 1.0) continue;
        const double fr = pts[k].r - pts[j].r, fc = pts[k].c - pts[j].c;
        const double f2 = fr * fr + fc * fc;
        const double d = std::sqrt(d2);
        double cos_t = (a2 + d2 - f2) / (2.0 * a * d);
        cos_t = std::clamp(cos_t, -1.0, 1.0);
        const double cos2 = cos_t * cos_t;
        const double denom = a2 - d2 * cos2;
        if (denom <= 0.0) continue;
        const double b2 = a2 * d2 * (1.0 - cos2) / denom;
        if (b2 <= 0.0) continue;
        const int bin = static_cast<int>(std::lround(std::sqrt(b2)));
        if (bin <= amax) ++hist[bin];
      }
      // Votes over a 3-bin window absorb pixel quantisation of b.
      for (int b = std::max(1, static_cast<int>(std::ceil(min_b))); b <= amax; ++b) {
        const int votes = hist[b - 1] + hist[b] + hist[b + 1];
        if (votes == 0) continue;
        // Exact window centre: vote-weighted mean of the three bins.
        const double bw = ((b - 1.0) * hist[b - 1] + b * hist[b] + (b + 1.0) * hist[b + 1]) / votes;
        const double semi_b = std::min(bw, a);
        if (semi_b < min_b) continue;
        const double h = std::pow((a - semi_b) / (a + semi_b), 2.0);
        const double perimeter =
            std::numbers::pi * (a + semi_b) * (1.0 + 3.0 * h / (10.0 + std::sqrt(4.0 - 3.0 * h)));
        const double ideal = perimeter * density;
        const double ratio = votes / ideal;
        if (ratio < 0.25) continue;
        if (!best || votes > best->score || (votes == best->score && ratio > best_ratio)) {
          double theta = std::atan2(dr, dc);
          if (theta < 0) theta += std::numbers::pi;
          if (theta >= std::numbers::pi) theta -= std::numbers::pi;
          best = FovEllipse{cr, cc, a, semi_b, theta, static_cast<double>(votes)};
          best_ratio = ratio;
        }
      }
    }
  }
  return best;
}

// Axis-aligned bounding box of an ellipse, clipped to the frame.
inline CropRect ellipse_bounds(const FovEllipse& e, int rows, int cols) {
  const double ct = std::cos(e.rotation), st = std::sin(e.rotation);
  const double half_w = std::sqrt(std::pow(e.semi_major * ct, 2) + std::pow(e.semi_minor * st, 2));
  const double half_h = std::sqrt(std::pow(e.semi_major * st, 2) + std::pow(e.semi_minor * ct, 2));
  const int top = std::clamp(static_cast<int>(std::lround(e.center_row - half_h)), 0, rows);
  const int bottom = std::clamp(static_cast<int>(std::lround(e.center_row + half_h)), 0, rows);
  const int left = std::clamp(static_cast<int>(std::lround(e.center_col - half_w)), 0, cols);
  const int right = std::clamp(static_cast<int>(std::lround(e.center_col + half_w)), 0, cols);
  return {top, left, bottom - top, right - left};
}

inline CropRect centered_square(int rows, int cols) {
  const int side = std::min(rows, cols);
  return {(rows - side) / 2, (cols - side) / 2, side, side};
}

template <typename T>
Image<T> crop(const Image<T>& img, const CropRect& rect) {
  if (rect.top < 0 || rect.left < 0 || rect.bottom() > img.rows() || rect.right() > img.cols() ||
      rect.height <= 0 || rect.width <= 0) {
    throw ValueError("crop rectangle outside image");
  }
  Image<T> out(rect.height, rect.width, img.channels());
  for (int r = 0; r < rect.height; ++r) {
    for (int c = 0; c < rect.width; ++c) {
      for (int ch = 0; ch < img.channels(); ++ch) out.at(r, c, ch) = img.at(rect.top + r, rect.left + c, ch);
    }
  }
  return out;
}

struct CroppedFrame {
  Image8 pixels;
  CropRect rect;
  bool fallback = false;
};

// Crops to the ellipse bounding box, or to the largest centred square when no
// ellipse was found.
inline CroppedFrame crop_to_fov(const Image8& frame, const std::optional<FovEllipse>& ellipse) {
  CropRect rect = ellipse ? ellipse_bounds(*ellipse, frame.rows(), frame.cols())
                          : centered_square(frame.rows(), frame.cols());
  const bool fallback = !ellipse || rect.height <= 0 || rect.width <= 0;
  if (fallback) rect = centered_square(frame.rows(), frame.cols());
  return {crop(frame, rect), rect, fallback};
}

// Bilinear with pixel-centre alignment; edges clamp.
inline Image8 resize_bilinear(const Image8& src, int out_rows, int out_cols) {
  if (src.empty()) throw ValueError("resize: empty input");
  if (src.rows() == out_rows && src.cols() == out_cols) return src;
  Image8 out(out_rows, out_cols, src.channels());
  const double sy = static_cast<double>(src.rows()) / out_rows;
  const double sx = static_cast<double>(src.cols()) / out_cols;
  for (int r = 0; r < out_rows; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, src.rows() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.rows() - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_cols; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, src.cols() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.cols() - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < src.channels(); ++ch) {
        const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, ch) + wx * src.at(y0, x1, ch)) +
                         wy * ((1 - wx) * src.at(y1, x0, ch) + wx * src.at(y1, x1, ch));
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

template <typename T>
Image<T> resize_nearest(const Image<T>& src, int out_rows, int out_cols) {
  if (src.empty()) throw ValueError("resize: empty input");
  Image<T> out(out_rows, out_cols, src.channels());
  for (int r = 0; r < out_rows; ++r) {
    const int y = std::min(static_cast<int>((r + 0.5) * src.rows() / out_rows), src.rows() - 1);
    for (int c = 0; c < out_cols; ++c) {
      const int x = std::min(static_cast<int>((c + 0.5) * src.cols() / out_cols), src.cols() - 1);
      for (int ch = 0; ch < src.channels(); ++ch) out.at(r, c, ch) = src.at(y, x, ch);
    }
  }
  return out;
}

inline Image8 resize(const Image8& frame, int target_size) {
  return resize_bilinear(frame, target_size, target_size);
}

inline Mask resize_mask(const Mask& mask, int target_size) {
  return resize_nearest(mask, target_size, target_size);
}

struct PreprocResult {
  Image8 image;  // target_size^2, 1 or 3 channels
  std::optional<Mask> mask;
  CropRect crop;
  std::optional<FovEllipse> ellipse;
  ColorMode color_mode = ColorMode::grayscale;
};

// Full frame pipeline: edges -> ellipse -> crop -> colour conversion -> resize.
// A mask, when given, receives the identical crop and a nearest-neighbour resize.
inline PreprocResult preprocess(const RawFrame& frame, const PreprocConfig& config,
                                const Mask* mask = nullptr) {
  frame.validate();
  config.validate();
  if (mask) require_same_extent(frame.pixels, *mask, frame.source_id + ": mask");
  const auto edges = detect_edges(frame.pixels, config);
  PreprocResult out;
  out.ellipse = fit_fov_ellipse(edges, config);
  auto cropped = crop_to_fov(frame.pixels, out.ellipse);
  out.crop = cropped.rect;
  out.color_mode = config.color_mode;
  Image8 colored = config.color_mode == ColorMode::grayscale ? to_grayscale(cropped.pixels)
                                                             : std::move(cropped.pixels);
  out.image = resize(colored, config.target_size);
  if (mask) out.mask = resize_mask(crop(*mask, out.crop), config.target_size);
  return out;
}

}  // namespace lumenseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "error.hpp"
#include "image.hpp"
#include "sample.hpp"

namespace lumenseg {

struct AugmentationSpec {
  std::vector<int> rotations = {90, 180, 270};  // degrees, subset of {90, 180, 270}
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double zoom_range = 0.02;  // scale factors drawn from [1 - z, 1 + z]
  std::uint64_t seed = 0;

  void validate() const {
    for (int r : rotations) {
      if (r != 90 && r != 180 && r != 270) throw ConfigError("rotations must be 90, 180 or 270");
    }
    if (!(zoom_range >= 0.0 && zoom_range < 1.0)) throw ConfigError("zoom_range must lie in [0, 1)");
  }

  bool any_enabled() const {
    return !rotations.empty() || horizontal_flip || vertical_flip || zoom_range > 0.0;
  }

  static AugmentationSpec none() { return {{}, false, false, 0.0, 0}; }
};

enum class AugmentationMode { online, offline };

// Applied in order: centre-anchored zoom, counter-clockwise quarter turns, flips.
struct GeometricTransform {
  int quarter_turns = 0;
  bool hflip = false;
  bool vflip = false;
  double zoom = 1.0;

  bool is_identity() const { return quarter_turns % 4 == 0 && !hflip && !vflip && zoom == 1.0; }

  std::string describe() const {
    std::string s = "rot" + std::to_string(90 * (quarter_turns % 4));
    if (hflip) s += "+hflip";
    if (vflip) s += "+vflip";
    if (zoom != 1.0) s += "+zoom" + std::to_string(zoom);
    return s;
  }
};

namespace detail {

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i - 1;
}

// Scale about the image centre by `s` (> 1 zooms in); samples falling outside are reflected.
template <typename T>
Image<T> zoom(const Image<T>& src, double s, bool nearest) {
  if (s == 1.0) return src;
  Image<T> out(src.rows(), src.cols(), src.channels());
  const double cy = (src.rows() - 1) / 2.0, cx = (src.cols() - 1) / 2.0;
  for (int r = 0; r < src.rows(); ++r) {
    const double fy = cy + (r - cy) / s;
    for (int c = 0; c < src.cols(); ++c) {
      const double fx = cx + (c - cx) / s;
      if (nearest) {
        const int y = reflect_index(static_cast<int>(std::lround(fy)), src.rows());
        const int x = reflect_index(static_cast<int>(std::lround(fx)), src.cols());
        for (int ch = 0; ch < src.channels(); ++ch) out.at(r, c, ch) = src.at(y, x, ch);
        continue;
      }
      const int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
      const double wy = fy - y0, wx = fx - x0;
      const int ya = reflect_index(y0, src.rows()), yb = reflect_index(y0 + 1, src.rows());
      const int xa = reflect_index(x0, src.cols()), xb = reflect_index(x0 + 1, src.cols());
      for (int ch = 0; ch < src.channels(); ++ch) {
        const double v = (1 - wy) * ((1 - wx) * src.at(ya, xa, ch) + wx * src.at(ya, xb, ch)) +
                         wy * ((1 - wx) * src.at(yb, xa, ch) + wx * src.at(yb, xb, ch));
        if constexpr (std::is_integral_v<T>) {
          out.at(r, c, ch) = static_cast<T>(std::clamp(std::lround(v), 0L, 255L));
        } else {
          out.at(r, c, ch) = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

template <typename T>
Image<T> rotate_ccw(const Image<T>& src, int quarter_turns) {
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  if (quarter_turns == 0) return src;
  if (quarter_turns % 2 == 1 && src.rows() != src.cols()) {
    throw ShapeError("90/270 degree rotations require square images");
  }
  const int n = src.rows(), m = src.cols();
  Image<T> out(src.rows(), src.cols(), src.channels());
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < m; ++c) {
      int sr, sc;
      switch (quarter_turns) {
        case 1: sr = c, sc = m - 1 - r; break;
        case 2: sr = n - 1 - r, sc = m - 1 - c; break;
        default: sr = n - 1 - c, sc = r; break;
      }
      for (int ch = 0; ch < src.channels(); ++ch) out.at(r, c, ch) = src.at(sr, sc, ch);
    }
  }
  return out;
}

template <typename T>
Image<T> flip(const Image<T>& src, bool horizontal) {
  Image<T> out(src.rows(), src.cols(), src.channels());
  for (int r = 0; r < src.rows(); ++r) {
    for (int c = 0; c < src.cols(); ++c) {
      const int sr = horizontal ? r : src.rows() - 1 - r;
      const int sc = horizontal ? src.cols() - 1 - c : c;
      for (int ch = 0; ch < src.channels(); ++ch) out.at(r, c, ch) = src.at(sr, sc, ch);
    }
  }
  return out;
}

}  // namespace detail

// Geometric transform of a single array; masks use nearest sampling so they stay binary.
template <typename T>
Image<T> apply_transform(const Image<T>& src, const GeometricTransform& t, bool nearest) {
  Image<T> out = detail::zoom(src, t.zoom, nearest);
  out = detail::rotate_ccw(out, t.quarter_turns);
  if (t.hflip) out = detail::flip(out, true);
  if (t.vflip) out = detail::flip(out, false);
  return out;
}

inline GeometricTransform draw_transform(const AugmentationSpec& spec, std::mt19937_64& rng) {
  GeometricTransform t;
  const std::size_t choice = rng() % (spec.rotations.size() + 1);
  t.quarter_turns = choice == 0 ? 0 : spec.rotations[choice - 1] / 90;
  if (spec.horizontal_flip) t.hflip = (rng() & 1u) != 0;
  if (spec.vertical_flip) t.vflip = (rng() & 1u) != 0;
  if (spec.zoom_range > 0.0) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    t.zoom = 1.0 - spec.zoom_range + 2.0 * spec.zoom_range * u;
  }
  return t;
}

// Independent stream per (seed, epoch, sample) so workers can draw in any order.
inline std::mt19937_64 augmentation_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

struct AugmentedPair {
  Image8 image;
  Mask mask;
};

inline AugmentedPair augment_pair(const Image8& image, const Mask& mask,
                                  const GeometricTransform& t) {
  require_same_extent(image, mask, "augment_pair");
  if (!is_binary(mask)) throw ValueError("augment_pair: mask is not binary");
  return {apply_transform(image, t, false), apply_transform(mask, t, true)};
}

inline AugmentedPair augment_pair(const Image8& image, const Mask& mask,
                                  const AugmentationSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  return augment_pair(image, mask, draw_transform(spec, rng));
}

inline Sample transformed(const Sample& s, const GeometricTransform& t) {
  auto pair = augment_pair(s.image, s.mask, t);
  Sample out = s;
  out.image = std::move(pair.image);
  out.mask = std::move(pair.mask);
  out.augmentation = t.describe();
  return out;
}

// Online: the originals plus one randomly transformed copy of each, redrawn per epoch.
// Offline: the originals plus one copy per enabled rotation, per enabled flip and, when
// zooming is enabled, one copy at each end of the zoom range.
inline std::vector<Sample> expand_dataset(const std::vector<Sample>& samples,
                                          const AugmentationSpec& spec,
                                          AugmentationMode mode = AugmentationMode::online,
                                          std::uint64_t epoch = 0) {
  spec.validate();
  std::vector<Sample> out(samples);
  if (!spec.any_enabled()) return out;
  if (mode == AugmentationMode::online) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto rng = augmentation_rng(spec.seed, epoch, i);
      out.push_back(transformed(samples[i], draw_transform(spec, rng)));
    }
    return out;
  }
  std::vector<GeometricTransform> fixed;
  for (int r : spec.rotations) fixed.push_back({r / 90, false, false, 1.0});
  if (spec.horizontal_flip) fixed.push_back({0, true, false, 1.0});
  if (spec.vertical_flip) fixed.push_back({0, false, true, 1.0});
  if (spec.zoom_range > 0.0) {
    fixed.push_back({0, false, false, 1.0 - spec.zoom_range});
    fixed.push_back({0, false, false, 1.0 + spec.zoom_range});
  }
  for (const auto& t : fixed) {
    for (const auto& s : samples) out.push_back(transformed(s, t));
  }
  return out;
}

}  // namespace lumenseg

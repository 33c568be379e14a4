#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace lumenseg {

// Dense row-major image with interleaved channels.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int rows, int cols, int channels, T fill = T{})
      : rows_(rows), cols_(cols), channels_(channels),
        data_(static_cast<std::size_t>(rows) * cols * channels, fill) {
    if (rows < 0 || cols < 0 || channels <= 0) {
      throw ValueError("image dimensions must be non-negative with at least one channel");
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& at(int r, int c, int ch = 0) noexcept { return data_[index(r, c, ch)]; }
  const T& at(int r, int c, int ch = 0) const noexcept { return data_[index(r, c, ch)]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_ && channels_ == other.channels_;
  }
  template <typename U>
  bool same_extent(const Image<U>& other) const noexcept {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int r, int c, int ch) const noexcept {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using Image8 = Image<std::uint8_t>;
// Binary masks hold 0/1 in memory; PNG files store 0/255.
using Mask = Image<std::uint8_t>;
using ProbMap = Image<float>;

template <typename A, typename B>
void require_same_extent(const Image<A>& a, const Image<B>& b, const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(what + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline bool is_binary(const Mask& m) {
  for (auto v : m.data()) {
    if (v > 1) return false;
  }
  return true;
}

}  // namespace lumenseg

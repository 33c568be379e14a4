#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace lumenseg::nn {

// Every buffer starts on Eigen's maximal alignment, so vectorised reductions peel the same
// prefix on every run and results do not depend on where the allocator placed them.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

// NCHW extent of a 4-D activation or parameter array.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::size_t sample() const noexcept { return static_cast<std::size_t>(c) * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape), values_(shape.size(), fill) {}

  const Shape& shape() const noexcept { return shape_; }
  bool empty() const noexcept { return values_.empty(); }
  std::size_t size() const noexcept { return values_.size(); }

  float* data() noexcept { return values_.data(); }
  const float* data() const noexcept { return values_.data(); }
  std::span<float> span() noexcept { return values_; }
  std::span<const float> span() const noexcept { return values_; }

  float* sample(int n) noexcept { return values_.data() + n * shape_.sample(); }
  const float* sample(int n) const noexcept { return values_.data() + n * shape_.sample(); }
  float* plane(int n, int c) noexcept { return sample(n) + c * shape_.plane(); }
  const float* plane(int n, int c) const noexcept { return sample(n) + c * shape_.plane(); }

  float& at(int n, int c, int y, int x) noexcept {
    return values_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  float at(int n, int c, int y, int x) const noexcept {
    return values_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  void fill(float v) { std::fill(values_.begin(), values_.end(), v); }
  FloatBuffer& values() noexcept { return values_; }
  const FloatBuffer& values() const noexcept { return values_; }

 private:
  Shape shape_{};
  FloatBuffer values_;
};

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (!(t.shape() == expected)) {
    throw ShapeError(std::string(what) + ": expected " + expected.str() + ", got " +
                     t.shape().str());
  }
}

// Trainable array together with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { grad.fill(0.0f); }
};

}  // namespace lumenseg::nn

#pragma once

// Reverse-mode differentiation over NCHW tensors. Each op computes its output
// eagerly and, when the tape is recording, pushes a closure that propagates the
// output gradient back into its inputs and parameters.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "tensor.hpp"

namespace lumenseg::nn {

struct Node {
  Tensor value;
  Tensor grad;
  bool needs_grad = false;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

enum class Mode { train, eval };

class Tape {
 public:
  explicit Tape(Mode mode = Mode::eval, bool record = false) : mode_(mode), record_(record) {}

  static Tape training() { return Tape(Mode::train, true); }
  static Tape inference() { return Tape(Mode::eval, false); }

  Mode mode() const noexcept { return mode_; }
  bool recording() const noexcept { return record_; }

  Var constant(Tensor t) const {
    auto v = std::make_shared<Node>();
    v->value = std::move(t);
    return v;
  }

  // Output node for an op; requires gradient when the tape records.
  Var make(Shape shape) const {
    auto v = std::make_shared<Node>();
    v->value = Tensor(shape);
    v->needs_grad = record_;
    return v;
  }

  void record(std::function<void()> backward) {
    if (record_) ops_.push_back(std::move(backward));
  }

  // Seeds `out` with `grad` and replays the recorded closures in reverse.
  void backward(const Var& out, const Tensor& grad) {
    require_shape(grad, out->value.shape(), "backward seed");
    out->grad_buffer() = grad;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  Mode mode_;
  bool record_;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

inline FloatBuffer& scratch(int slot, std::size_t n) {
  thread_local FloatBuffer buffers[3];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// col[(ci*k + ky)*k + kx][y*w + x] = src[ci][y + ky - pad][x + kx - pad], zero outside.
inline void im2col(const float* src, int c, int h, int w, int k, int pad, float* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < c; ++ci) {
    const float* plane = src + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          float* out = row + static_cast<std::size_t>(y) * w;
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h || x1 <= x0) {
            std::memset(out, 0, sizeof(float) * w);
            continue;
          }
          const float* in = plane + static_cast<std::size_t>(sy) * w;
          for (int x = 0; x < x0; ++x) out[x] = 0.0f;
          std::memcpy(out + x0, in + x0 + dx, sizeof(float) * (x1 - x0));
          for (int x = x1; x < w; ++x) out[x] = 0.0f;
        }
      }
    }
  }
}

inline void col2im(const float* col, int c, int h, int w, int k, int pad, float* dst) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < c; ++ci) {
    float* plane = dst + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const float* in = row + static_cast<std::size_t>(y) * w;
          float* out = plane + static_cast<std::size_t>(sy) * w + dx;
          for (int x = x0; x < x1; ++x) out[x] += in[x];
        }
      }
    }
  }
}

inline Eigen::Map<const Eigen::ArrayXf> plane_map(const float* p, std::size_t n) {
  return Eigen::Map<const Eigen::ArrayXf>(p, static_cast<Eigen::Index>(n));
}

}  // namespace detail

// Stride-1 convolution with "same" zero padding. Weight layout (Cout, Cin, k, k), odd k.
inline Var conv2d(Tape& tape, const Var& x, Parameter& weight, Parameter& bias) {
  const Shape in = x->value.shape();
  const Shape ws = weight.value.shape();
  if (ws.c != in.c || ws.h != ws.w || ws.h % 2 == 0) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + in.str());
  }
  const int cout = ws.n;
  const int k = ws.h;
  const int pad = k / 2;
  const int rows = in.c * k * k;
  const int hw = in.h * in.w;
  Var y = tape.make({in.n, cout, in.h, in.w});

  detail::CMapR wmat(weight.value.data(), cout, rows);
  for (int n = 0; n < in.n; ++n) {
    const float* colp = x->value.sample(n);
    if (k > 1) {
      auto& col = detail::scratch(0, static_cast<std::size_t>(rows) * hw);
      detail::im2col(x->value.sample(n), in.c, in.h, in.w, k, pad, col.data());
      colp = col.data();
    }
    detail::MapR out(y->value.sample(n), cout, hw);
    out.noalias() = wmat * detail::CMapR(colp, rows, hw);
    for (int co = 0; co < cout; ++co) out.row(co).array() += bias.value.data()[co];
  }

  tape.record([x, y, &weight, &bias, in, cout, k, pad, rows, hw] {
    if (y->grad.empty()) return;
    detail::CMapR wmat(weight.value.data(), cout, rows);
    detail::MapR dw(weight.grad.data(), cout, rows);
    for (int n = 0; n < in.n; ++n) {
      detail::CMapR dy(y->grad.sample(n), cout, hw);
      for (int co = 0; co < cout; ++co) bias.grad.data()[co] += dy.row(co).sum();
      const float* colp = x->value.sample(n);
      if (k > 1) {
        auto& col = detail::scratch(0, static_cast<std::size_t>(rows) * hw);
        detail::im2col(x->value.sample(n), in.c, in.h, in.w, k, pad, col.data());
        colp = col.data();
      }
      dw.noalias() += dy * detail::CMapR(colp, rows, hw).transpose();
      if (!x->needs_grad) continue;
      float* dx = x->grad_buffer().sample(n);
      if (k > 1) {
        auto& dcol = detail::scratch(1, static_cast<std::size_t>(rows) * hw);
        detail::MapR(dcol.data(), rows, hw).noalias() = wmat.transpose() * dy;
        detail::col2im(dcol.data(), in.c, in.h, in.w, k, pad, dx);
      } else {
        detail::MapR(dx, rows, hw).noalias() += wmat.transpose() * dy;
      }
    }
  });
  return y;
}

// 2x2 stride-2 transposed convolution (exact 2x upsampling). Weight layout (Cin, Cout, 2, 2).
inline Var conv_transpose2x2(Tape& tape, const Var& x, Parameter& weight, Parameter& bias) {
  const Shape in = x->value.shape();
  const Shape ws = weight.value.shape();
  if (ws.n != in.c || ws.h != 2 || ws.w != 2) {
    throw ShapeError("conv_transpose2x2: weight " + ws.str() + " incompatible with input " +
                     in.str());
  }
  const int cout = ws.c;
  const int hw = in.h * in.w;
  const int ow = in.w * 2;
  Var y = tape.make({in.n, cout, in.h * 2, in.w * 2});

  // Weight viewed as (Cin, Cout*4); transposed it maps input pixels to the four output taps.
  detail::CMapR wmat(weight.value.data(), in.c, cout * 4);
  for (int n = 0; n < in.n; ++n) {
    auto& taps = detail::scratch(0, static_cast<std::size_t>(cout) * 4 * hw);
    detail::MapR t(taps.data(), cout * 4, hw);
    t.noalias() = wmat.transpose() * detail::CMapR(x->value.sample(n), in.c, hw);
    for (int co = 0; co < cout; ++co) {
      float* out = y->value.plane(n, co);
      const float b = bias.value.data()[co];
      for (int tap = 0; tap < 4; ++tap) {
        const float* src = taps.data() + (static_cast<std::size_t>(co) * 4 + tap) * hw;
        const int dy = tap / 2, dx = tap % 2;
        for (int i = 0; i < in.h; ++i) {
          float* orow = out + static_cast<std::size_t>(2 * i + dy) * ow + dx;
          const float* srow = src + static_cast<std::size_t>(i) * in.w;
          for (int j = 0; j < in.w; ++j) orow[2 * j] = srow[j] + b;
        }
      }
    }
  }

  tape.record([x, y, &weight, &bias, in, cout, hw, ow] {
    if (y->grad.empty()) return;
    detail::CMapR wmat(weight.value.data(), in.c, cout * 4);
    detail::MapR dw(weight.grad.data(), in.c, cout * 4);
    for (int n = 0; n < in.n; ++n) {
      auto& taps = detail::scratch(1, static_cast<std::size_t>(cout) * 4 * hw);
      for (int co = 0; co < cout; ++co) {
        const float* g = y->grad.plane(n, co);
        float bsum = 0.0f;
        for (int tap = 0; tap < 4; ++tap) {
          float* dst = taps.data() + (static_cast<std::size_t>(co) * 4 + tap) * hw;
          const int dy = tap / 2, dx = tap % 2;
          for (int i = 0; i < in.h; ++i) {
            const float* grow = g + static_cast<std::size_t>(2 * i + dy) * ow + dx;
            float* drow = dst + static_cast<std::size_t>(i) * in.w;
            for (int j = 0; j < in.w; ++j) {
              drow[j] = grow[2 * j];
              bsum += grow[2 * j];
            }
          }
        }
        bias.grad.data()[co] += bsum;
      }
      detail::CMapR t(taps.data(), cout * 4, hw);
      detail::CMapR xs(x->value.sample(n), in.c, hw);
      dw.noalias() += xs * t.transpose();
      if (x->needs_grad) {
        detail::MapR(x->grad_buffer().sample(n), in.c, hw).noalias() += wmat * t;
      }
    }
  });
  return y;
}

inline Var max_pool2x2(Tape& tape, const Var& x) {
  const Shape in = x->value.shape();
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("max_pool2x2: odd spatial extent " + in.str());
  }
  const Shape out{in.n, in.c, in.h / 2, in.w / 2};
  Var y = tape.make(out);
  std::vector<int> argmax(tape.recording() ? out.size() : 0);
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      const float* src = x->value.plane(n, c);
      float* dst = y->value.plane(n, c);
      for (int i = 0; i < out.h; ++i) {
        for (int j = 0; j < out.w; ++j, ++o) {
          const int base = (2 * i) * in.w + 2 * j;
          int best = base;
          for (int cand : {base + 1, base + in.w, base + in.w + 1}) {
            if (src[cand] > src[best]) best = cand;
          }
          dst[i * out.w + j] = src[best];
          if (!argmax.empty()) argmax[o] = best;
        }
      }
    }
  }
  tape.record([x, y, in, out, argmax = std::move(argmax)] {
    if (y->grad.empty() || !x->needs_grad) return;
    Tensor& dx = x->grad_buffer();
    std::size_t o = 0;
    for (int n = 0; n < in.n; ++n) {
      for (int c = 0; c < in.c; ++c) {
        float* d = dx.plane(n, c);
        const float* g = y->grad.plane(n, c);
        for (std::size_t p = 0; p < out.plane(); ++p, ++o) d[argmax[o]] += g[p];
      }
    }
  });
  return y;
}

// Batch statistics in train mode (running estimates updated), running estimates in eval mode.
struct BatchNormState {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-3f;
};

inline Var batch_norm(Tape& tape, const Var& x, BatchNormState& bn) {
  const Shape in = x->value.shape();
  if (bn.gamma.value.size() != static_cast<std::size_t>(in.c)) {
    throw ShapeError("batch_norm: channel mismatch for input " + in.str());
  }
  const bool train = tape.mode() == Mode::train;
  const std::size_t plane = in.plane();
  const double count = static_cast<double>(in.n) * plane;
  Var y = tape.make(in);
  std::vector<float> mean(in.c), invstd(in.c);
  for (int c = 0; c < in.c; ++c) {
    double m, v;
    if (train) {
      double s = 0.0, ss = 0.0;
      for (int n = 0; n < in.n; ++n) s += detail::plane_map(x->value.plane(n, c), plane).sum();
      m = s / count;
      for (int n = 0; n < in.n; ++n) {
        ss += (detail::plane_map(x->value.plane(n, c), plane) - static_cast<float>(m))
                  .square()
                  .sum();
      }
      v = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : v;
      bn.running_mean.data()[c] =
          static_cast<float>((1.0 - bn.momentum) * bn.running_mean.data()[c] + bn.momentum * m);
      bn.running_var.data()[c] = static_cast<float>((1.0 - bn.momentum) * bn.running_var.data()[c] +
                                                    bn.momentum * unbiased);
    } else {
      m = bn.running_mean.data()[c];
      v = bn.running_var.data()[c];
    }
    mean[c] = static_cast<float>(m);
    invstd[c] = static_cast<float>(1.0 / std::sqrt(v + bn.eps));
    const float scale = bn.gamma.value.data()[c] * invstd[c];
    const float shift = bn.beta.value.data()[c] - mean[c] * scale;
    for (int n = 0; n < in.n; ++n) {
      const float* p = x->value.plane(n, c);
      float* q = y->value.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * scale + shift;
    }
  }
  tape.record([x, y, &bn, in, train, plane, count, mean = std::move(mean),
               invstd = std::move(invstd)] {
    if (y->grad.empty()) return;
    for (int c = 0; c < in.c; ++c) {
      double dbeta = 0.0, dgamma = 0.0;
      for (int n = 0; n < in.n; ++n) {
        auto p = detail::plane_map(x->value.plane(n, c), plane);
        auto g = detail::plane_map(y->grad.plane(n, c), plane);
        dbeta += g.sum();
        dgamma += (g * (p - mean[c])).sum() * invstd[c];
      }
      bn.gamma.grad.data()[c] += static_cast<float>(dgamma);
      bn.beta.grad.data()[c] += static_cast<float>(dbeta);
      if (!x->needs_grad) continue;
      const float gamma = bn.gamma.value.data()[c];
      Tensor& dx = x->grad_buffer();
      for (int n = 0; n < in.n; ++n) {
        const float* p = x->value.plane(n, c);
        const float* g = y->grad.plane(n, c);
        float* d = dx.plane(n, c);
        if (train) {
          const float k = static_cast<float>(gamma * invstd[c] / count);
          const float a = static_cast<float>(count);
          const float b = static_cast<float>(dbeta);
          const float e = static_cast<float>(dgamma) * invstd[c];
          for (std::size_t i = 0; i < plane; ++i) {
            d[i] += k * (a * g[i] - b - (p[i] - mean[c]) * e);
          }
        } else {
          const float k = gamma * invstd[c];
          for (std::size_t i = 0; i < plane; ++i) d[i] += k * g[i];
        }
      }
    }
  });
  return y;
}

inline Var relu(Tape& tape, const Var& x) {
  Var y = tape.make(x->value.shape());
  const float* p = x->value.data();
  float* q = y->value.data();
  for (std::size_t i = 0; i < x->value.size(); ++i) q[i] = p[i] > 0.0f ? p[i] : 0.0f;
  tape.record([x, y] {
    if (y->grad.empty() || !x->needs_grad) return;
    float* d = x->grad_buffer().data();
    const float* g = y->grad.data();
    const float* p = y->value.data();
    for (std::size_t i = 0; i < y->value.size(); ++i) {
      if (p[i] > 0.0f) d[i] += g[i];
    }
  });
  return y;
}

// Clamped one ulp inside [0, 1] so saturated logits still give an open-interval probability.
inline Var sigmoid(Tape& tape, const Var& x) {
  constexpr float lo = std::numeric_limits<float>::min();
  const float hi = std::nextafter(1.0f, 0.0f);
  Var y = tape.make(x->value.shape());
  const float* p = x->value.data();
  float* q = y->value.data();
  for (std::size_t i = 0; i < x->value.size(); ++i) {
    q[i] = std::clamp(1.0f / (1.0f + std::exp(-p[i])), lo, hi);
  }
  tape.record([x, y] {
    if (y->grad.empty() || !x->needs_grad) return;
    float* d = x->grad_buffer().data();
    const float* g = y->grad.data();
    const float* s = y->value.data();
    for (std::size_t i = 0; i < y->value.size(); ++i) d[i] += g[i] * s[i] * (1.0f - s[i]);
  });
  return y;
}

inline Var add(Tape& tape, const Var& a, const Var& b) {
  require_shape(b->value, a->value.shape(), "add");
  Var y = tape.make(a->value.shape());
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    y->value.data()[i] = a->value.data()[i] + b->value.data()[i];
  }
  tape.record([a, b, y] {
    if (y->grad.empty()) return;
    for (const Var& in : {a, b}) {
      if (!in->needs_grad) continue;
      float* d = in->grad_buffer().data();
      for (std::size_t i = 0; i < y->grad.size(); ++i) d[i] += y->grad.data()[i];
    }
  });
  return y;
}

// Channel concatenation [a | b].
inline Var concat(Tape& tape, const Var& a, const Var& b) {
  const Shape sa = a->value.shape();
  const Shape sb = b->value.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat: " + sa.str() + " vs " + sb.str());
  }
  Var y = tape.make({sa.n, sa.c + sb.c, sa.h, sa.w});
  for (int n = 0; n < sa.n; ++n) {
    std::memcpy(y->value.sample(n), a->value.sample(n), sizeof(float) * sa.sample());
    std::memcpy(y->value.sample(n) + sa.sample(), b->value.sample(n), sizeof(float) * sb.sample());
  }
  tape.record([a, b, y, sa, sb] {
    if (y->grad.empty()) return;
    for (int n = 0; n < sa.n; ++n) {
      const float* g = y->grad.sample(n);
      if (a->needs_grad) {
        float* d = a->grad_buffer().sample(n);
        for (std::size_t i = 0; i < sa.sample(); ++i) d[i] += g[i];
      }
      if (b->needs_grad) {
        float* d = b->grad_buffer().sample(n);
        for (std::size_t i = 0; i < sb.sample(); ++i) d[i] += g[sa.sample() + i];
      }
    }
  });
  return y;
}

}  // namespace lumenseg::nn

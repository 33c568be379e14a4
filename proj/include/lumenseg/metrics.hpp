#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "image.hpp"

namespace lumenseg {

// Pixel tallies between a binary prediction and its ground truth.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts confusion(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion: " + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + " pixels");
  }
  // Index by (pred, gt) pair.
  std::uint64_t bins[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw ValueError("confusion: masks must be binary");
    ++bins[pred[i] * 2 + gt[i]];
  }
  return {bins[3], bins[2], bins[1], bins[0]};
}

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  require_same_extent(pred, gt, "confusion");
  if (pred.channels() != 1 || gt.channels() != 1) throw ShapeError("confusion: masks must be 1-channel");
  return confusion(pred.data(), gt.data());
}

// Degenerate denominators are resolved by convention and reported through this hook.
struct DegenerateLog {
  std::uint64_t empty_dsc = 0;
  std::uint64_t zero_precision_denominator = 0;
  std::uint64_t zero_recall_denominator = 0;
};

inline DegenerateLog& degenerate_log() {
  thread_local DegenerateLog log;
  return log;
}

// 2TP / (2TP + FP + FN); both masks empty counts as perfect agreement.
inline double dsc(const ConfusionCounts& c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  if (denom == 0.0) {
    ++degenerate_log().empty_dsc;
    return 1.0;
  }
  return 2.0 * c.tp / denom;
}

inline double precision(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fp;
  if (denom == 0) {
    ++degenerate_log().zero_precision_denominator;
    return 1.0;
  }
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double recall(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fn;
  if (denom == 0) {
    ++degenerate_log().zero_recall_denominator;
    return 1.0;
  }
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double accuracy(const ConfusionCounts& c) {
  const auto total = c.total();
  if (total == 0) return 1.0;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
}

namespace detail {

template <typename P, typename G>
void check_dice_inputs(std::span<const P> pred, std::span<const G> gt) {
  if (pred.size() != gt.size()) throw ShapeError("dice_loss: prediction/ground-truth size mismatch");
  for (P p : pred) {
    if (!(p >= P(0) && p <= P(1))) throw ValueError("dice_loss: prediction outside [0, 1]");
  }
}

}  // namespace detail

// Soft Dice loss 1 - (2 sum(p*g) + s) / (sum(p) + sum(g) + s). For binary p and s = 0
// this is exactly 1 - 2TP / (2TP + FP + FN).
template <typename P, typename G>
double dice_loss(std::span<const P> pred, std::span<const G> gt, double smooth = 1.0) {
  detail::check_dice_inputs(pred, gt);
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = static_cast<double>(gt[i]);
    inter += p * g;
    sp += p;
    sg += g;
  }
  const double denom = sp + sg + smooth;
  if (denom == 0.0) return 0.0;
  return 1.0 - (2.0 * inter + smooth) / denom;
}

// Writes d(dice_loss)/d(pred) into `grad` and returns the loss.
template <typename P, typename G, typename D>
double dice_loss_grad(std::span<const P> pred, std::span<const G> gt, double smooth,
                      std::span<D> grad) {
  detail::check_dice_inputs(pred, gt);
  if (grad.size() != pred.size()) throw ShapeError("dice_loss_grad: gradient buffer size mismatch");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = static_cast<double>(gt[i]);
    inter += p * g;
    sp += p;
    sg += g;
  }
  const double denom = sp + sg + smooth;
  if (denom == 0.0) {
    for (auto& d : grad) d = D(0);
    return 0.0;
  }
  const double num = 2.0 * inter + smooth;
  // dL/dp_i = -(2 g_i * denom - num) / denom^2
  const double inv2 = 1.0 / (denom * denom);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    grad[i] = static_cast<D>(-(2.0 * static_cast<double>(gt[i]) * denom - num) * inv2);
  }
  return 1.0 - num / denom;
}

struct FrameMetrics {
  std::string frame_id;
  ConfusionCounts counts;
  double dsc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;

  static FrameMetrics from_counts(std::string id, const ConfusionCounts& c) {
    return {std::move(id), c, lumenseg::dsc(c), lumenseg::precision(c), lumenseg::recall(c),
            lumenseg::accuracy(c)};
  }
};

enum class Aggregation { mean_of_frames, pooled };

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) return {};
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size()))};
}

// Aggregate scalars always derive from `per_frame`.
struct MetricsReport {
  std::vector<FrameMetrics> per_frame;
  Aggregation aggregation = Aggregation::mean_of_frames;

  void add(std::string id, const ConfusionCounts& c) {
    per_frame.push_back(FrameMetrics::from_counts(std::move(id), c));
  }

  std::vector<double> column(double FrameMetrics::*field) const {
    std::vector<double> v;
    v.reserve(per_frame.size());
    for (const auto& f : per_frame) v.push_back(f.*field);
    return v;
  }

  ConfusionCounts pooled_counts() const {
    ConfusionCounts total;
    for (const auto& f : per_frame) total += f.counts;
    return total;
  }

  MeanStd summary(double FrameMetrics::*field) const {
    if (aggregation == Aggregation::pooled) {
      const auto f = FrameMetrics::from_counts("", pooled_counts());
      return {f.*field, 0.0};
    }
    const auto v = column(field);
    return mean_std(v);
  }

  MeanStd dsc() const { return summary(&FrameMetrics::dsc); }
  MeanStd precision() const { return summary(&FrameMetrics::precision); }
  MeanStd recall() const { return summary(&FrameMetrics::recall); }
  MeanStd accuracy() const { return summary(&FrameMetrics::accuracy); }
};

inline Mask binarize(const ProbMap& prob, double threshold = 0.5) {
  Mask m(prob.rows(), prob.cols(), 1);
  for (std::size_t i = 0; i < prob.size(); ++i) m.storage()[i] = prob.storage()[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace lumenseg

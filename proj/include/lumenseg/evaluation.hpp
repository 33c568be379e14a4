#pragma once

#include <boost/math/special_functions/gamma.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metrics.hpp"
#include "models.hpp"
#include "sample.hpp"
#include "training.hpp"

namespace lumenseg {

using Predictor = std::function<ProbMap(const Sample&)>;

struct EvalReport {
  std::string model_id;
  double threshold = 0.5;
  MetricsReport metrics;

  MeanStd dsc() const { return metrics.dsc(); }
  MeanStd precision() const { return metrics.precision(); }
  MeanStd recall() const { return metrics.recall(); }
  MeanStd accuracy() const { return metrics.accuracy(); }
};

inline EvalReport evaluate(const Predictor& predictor, const std::vector<Sample>& test_set,
                           double threshold = 0.5, std::string model_id = "model") {
  if (test_set.empty()) throw DataError("evaluate: test set is empty");
  EvalReport report;
  report.model_id = std::move(model_id);
  report.threshold = threshold;
  for (const auto& s : test_set) {
    const ProbMap prob = predictor(s);
    require_same_extent(prob, s.mask, "evaluate " + s.id);
    report.metrics.add(s.id, confusion(binarize(prob, threshold), s.mask));
  }
  return report;
}

inline EvalReport evaluate(Network& net, const std::vector<Sample>& test_set, double threshold = 0.5,
                           std::string model_id = "model") {
  if (test_set.empty()) throw DataError("evaluate: test set is empty");
  for (const auto& s : test_set) {
    if (s.image.channels() != net.spec().in_channels) {
      throw ShapeError("checkpoint expects " + std::to_string(net.spec().in_channels) +
                       " input channels but " + s.id + " has " + std::to_string(s.image.channels()));
    }
  }
  const auto probs = predict(net, test_set);
  std::size_t i = 0;
  return evaluate([&](const Sample&) { return probs[i++]; }, test_set, threshold, std::move(model_id));
}

// Report file: one JSON object per line. A header line
//   {"type":"eval_report","model":s,"threshold":t,"frames":n}
// is followed by one {"type":"frame","id":s,"tp":..,"fp":..,"fn":..,"tn":..,"dsc":..,
// "precision":..,"recall":..,"accuracy":..} per frame and a closing
//   {"type":"aggregate","dsc":{"mean":m,"std":s},"precision":{..},"recall":{..},"accuracy":{..}}
inline void save_eval_report(const std::filesystem::path& path, const EvalReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json{{"type", "eval_report"},
                        {"model", r.model_id},
                        {"threshold", r.threshold},
                        {"frames", r.metrics.per_frame.size()}}
             .dump()
      << '\n';
  for (const auto& f : r.metrics.per_frame) {
    out << nlohmann::json{{"type", "frame"},         {"id", f.frame_id},       {"tp", f.counts.tp},
                          {"fp", f.counts.fp},       {"fn", f.counts.fn},      {"tn", f.counts.tn},
                          {"dsc", f.dsc},            {"precision", f.precision}, {"recall", f.recall},
                          {"accuracy", f.accuracy}}
               .dump()
        << '\n';
  }
  auto ms = [](MeanStd m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  out << nlohmann::json{{"type", "aggregate"},
                        {"dsc", ms(r.dsc())},
                        {"precision", ms(r.precision())},
                        {"recall", ms(r.recall())},
                        {"accuracy", ms(r.accuracy())}}
             .dump()
      << '\n';
}

inline EvalReport load_eval_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  EvalReport r;
  bool header = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto type = j.value("type", "");
    if (type == "eval_report") {
      header = true;
      r.model_id = j.value("model", "");
      r.threshold = j.value("threshold", 0.5);
    } else if (type == "frame") {
      ConfusionCounts c{j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(),
                        j.at("fn").get<std::uint64_t>(), j.at("tn").get<std::uint64_t>()};
      r.metrics.add(j.at("id").get<std::string>(), c);
    }
  }
  if (!header) throw DataError(path.string() + " is not an evaluation report");
  return r;
}

// Stars: * p < 0.05, ** p < 0.01, *** p < 0.001.
inline std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "ns";
}

struct StatTestResult {
  std::vector<std::string> labels;
  double h = 0.0;
  int df = 0;
  double p_value = 1.0;
  std::string stars = "ns";
  bool degenerate = false;  // every observation tied; the test is undefined
};

// Average ranks (1-based) with ties sharing the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Tie-corrected Kruskal-Wallis H with a chi-square(groups - 1) p-value.
inline StatTestResult kruskal_wallis(const std::vector<std::vector<double>>& groups,
                                     std::vector<std::string> labels = {}) {
  if (groups.size() < 2) throw ValueError("kruskal_wallis needs at least two groups");
  std::vector<double> pooled;
  for (const auto& g : groups) {
    if (g.empty()) throw ValueError("kruskal_wallis: empty group");
    pooled.insert(pooled.end(), g.begin(), g.end());
  }
  const double n = static_cast<double>(pooled.size());
  const auto ranks = average_ranks(pooled);

  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_sum = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_sum += t * t * t - t;
    i = j;
  }
  const double correction = 1.0 - tie_sum / (n * n * n - n);
  if (correction <= 0.0) throw DegenerateTiesError("kruskal_wallis: all observations are identical");

  double h = 0.0;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) rank_sum += ranks[offset + i];
    offset += g.size();
    h += rank_sum * rank_sum / static_cast<double>(g.size());
  }
  h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
  h = std::max(0.0, h / correction);

  StatTestResult r;
  if (labels.empty()) {
    for (std::size_t i = 0; i < groups.size(); ++i) labels.push_back("group" + std::to_string(i));
  }
  r.labels = std::move(labels);
  r.h = h;
  r.df = static_cast<int>(groups.size()) - 1;
  r.p_value = h == 0.0 ? 1.0 : boost::math::gamma_q(0.5 * r.df, 0.5 * h);
  r.stars = significance_stars(r.p_value);
  return r;
}

// Colours per confusion class; true negatives show the base image at half intensity.
inline constexpr std::array<std::uint8_t, 3> kColorTP = {0, 255, 0};
inline constexpr std::array<std::uint8_t, 3> kColorFP = {255, 105, 180};
inline constexpr std::array<std::uint8_t, 3> kColorFN = {0, 0, 255};

inline Image8 render_overlay(const Mask& pred, const Mask& gt, const Image8& base) {
  require_same_extent(pred, gt, "render_overlay");
  require_same_extent(pred, base, "render_overlay base");
  Image8 out(pred.rows(), pred.cols(), 3);
  for (int r = 0; r < pred.rows(); ++r) {
    for (int c = 0; c < pred.cols(); ++c) {
      const bool p = pred.at(r, c) != 0, g = gt.at(r, c) != 0;
      if (p || g) {
        const auto& color = p && g ? kColorTP : (p ? kColorFP : kColorFN);
        for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = color[ch];
      } else {
        for (int ch = 0; ch < 3; ++ch) {
          out.at(r, c, ch) = static_cast<std::uint8_t>(base.at(r, c, base.channels() == 3 ? ch : 0) / 2);
        }
      }
    }
  }
  return out;
}

// Quartiles by linear interpolation between order statistics.
struct BoxSummary {
  std::string label;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  std::vector<double> outliers;  // beyond 1.5 IQR from the quartiles
  std::size_t count = 0;
};

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline BoxSummary box_summary(std::string label, std::vector<double> values) {
  BoxSummary b;
  b.label = std::move(label);
  b.count = values.size();
  if (values.empty()) return b;
  std::sort(values.begin(), values.end());
  b.q1 = quantile_sorted(values, 0.25);
  b.median = quantile_sorted(values, 0.5);
  b.q3 = quantile_sorted(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.min = values.back();
  b.max = values.front();
  for (double v : values) {
    if (v < lo || v > hi) {
      b.outliers.push_back(v);
    } else {
      b.min = std::min(b.min, v);
      b.max = std::max(b.max, v);
    }
  }
  return b;
}

struct PairwiseTest {
  std::string first;
  std::string second;
  StatTestResult result;
};

struct BoxplotData {
  std::vector<BoxSummary> boxes;
  std::vector<PairwiseTest> pairwise;
};

inline BoxplotData boxplot_data(const std::vector<std::pair<std::string, std::vector<double>>>& models) {
  BoxplotData out;
  for (const auto& [label, values] : models) out.boxes.push_back(box_summary(label, values));
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t j = i + 1; j < models.size(); ++j) {
      PairwiseTest t{models[i].first, models[j].first, {}};
      try {
        t.result = kruskal_wallis({models[i].second, models[j].second}, {models[i].first, models[j].first});
      } catch (const DegenerateTiesError&) {
        t.result.labels = {models[i].first, models[j].first};
        t.result.df = 1;
        t.result.degenerate = true;
        t.result.stars = "n/a";
      } catch (const ValueError&) {
        t.result.labels = {models[i].first, models[j].first};
        t.result.degenerate = true;
        t.result.stars = "n/a";
      }
      out.pairwise.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace lumenseg

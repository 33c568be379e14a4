// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance <work-dir>

#include <lumenseg/checkpoint.hpp>
#include <lumenseg/datasets.hpp>
#include <lumenseg/evaluation.hpp>
#include <lumenseg/io.hpp>
#include <lumenseg/metrics.hpp>
#include <lumenseg/models.hpp>
#include <lumenseg/preprocessing.hpp>
#include <lumenseg/training.hpp>

#include <json.hpp>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"

using namespace lumenseg;
namespace fs = std::filesystem;
using lumenseg::testing::brute_force_counts;
using lumenseg::testing::random_mask;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failure reasons; the first few are kept for the summary line.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) reasons_ << (failures_ > 1 ? "; " : "") << what;
  }
  bool ok() const { return failures_ == 0; }
  Outcome done(const std::string& detail) const {
    if (ok()) return {true, detail};
    return {false, detail + " | " + std::to_string(failures_) + " failure(s): " + reasons_.str()};
  }

 private:
  int failures_ = 0;
  std::ostringstream reasons_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

fs::path g_work;

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
  Check check;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    // Vary density so empty and full masks turn up too.
    const double p = i < 10 ? (i % 2 == 0 ? 0.0 : 1.0) : density(rng);
    const auto pred = random_mask(16, 16, rng, p), gt = random_mask(16, 16, rng, density(rng));
    const auto c = confusion(pred, gt), o = brute_force_counts(pred, gt);
    check.expect(c == o, "counts differ on pair " + std::to_string(i));
    const double tp = o.tp, fp = o.fp, fn = o.fn, tn = o.tn;
    const double want[4] = {tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn),
                            tp + fp == 0 ? 1.0 : tp / (tp + fp), tp + fn == 0 ? 1.0 : tp / (tp + fn),
                            (tp + tn) / (tp + fp + fn + tn)};
    const double got[4] = {dsc(c), precision(c), recall(c), accuracy(c)};
    for (int k = 0; k < 4; ++k) {
      worst = std::max(worst, std::abs(got[k] - want[k]));
      check.expect(std::abs(got[k] - want[k]) <= 1e-12, "ratio " + std::to_string(k) + " off on pair " + std::to_string(i));
    }
  }
  return check.done("500 pairs, max ratio error " + fmt(worst, 16));
}

Outcome dice_gradient() {
  Check check;
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(64);
    for (auto& v : p) v = u(rng);
    const auto g = random_mask(8, 8, rng);
    std::vector<double> grad(64);
    dice_loss_grad<double, std::uint8_t, double>(p, g.data(), 1.0, grad);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto hi = p, lo = p;
      hi[i] += 1e-4;
      lo[i] -= 1e-4;
      const double fd = (dice_loss<double, std::uint8_t>(hi, g.data(), 1.0) -
                         dice_loss<double, std::uint8_t>(lo, g.data(), 1.0)) / 2e-4;
      const double rel = std::abs(grad[i] - fd) / std::max(std::abs(fd), 1e-12);
      worst = std::max(worst, rel);
    }
  }
  check.expect(worst < 1e-4, "max relative error " + fmt(worst, 8));
  return check.done("50 maps, max relative error " + fmt(worst, 10));
}

Outcome loss_dsc_coherence() {
  Check check;
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto p = random_mask(16, 16, rng, 0.4), g = random_mask(16, 16, rng, 0.4);
    p.at(0, 0) = 1;  // keeps the smooth-free ratio defined
    const std::vector<double> pd(p.data().begin(), p.data().end());
    const double gap = std::abs(1.0 - dice_loss<double, std::uint8_t>(pd, g.data(), 0.0) - dsc(confusion(p, g)));
    worst = std::max(worst, gap);
  }
  check.expect(worst <= 1e-9, "gap " + fmt(worst, 12));
  return check.done("200 pairs, max |1 - loss - DSC| " + fmt(worst, 16));
}

Outcome residual_identity() {
  Check check;
  NetworkSpec spec;
  spec.kind = Architecture::res_unet;
  spec.base_filters = 8;
  spec.depth = 4;
  spec.in_channels = 3;
  spec.input_size = 64;
  auto net = build_res_unet(spec, 404);
  auto blocks = net.residual_blocks();
  check.expect(blocks.size() == 2 * 4 + 1u, "expected 9 residual blocks, got " + std::to_string(blocks.size()));
  std::mt19937_64 rng(405);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  double worst = 0.0;
  for (auto* block : blocks) {
    block->zero_residual_branch();
    for (auto mode : {nn::Mode::train, nn::Mode::eval}) {
      nn::Tape tape(mode);
      nn::Tensor x({2, block->spec().inner.in_channels, 12, 12});
      for (auto& v : x.values()) v = u(rng);
      const auto xv = tape.constant(x);
      const nn::Tensor y = (*block)(tape, xv)->value;
      const nn::Tensor f = nn::relu(tape, block->identity(tape, xv))->value;
      for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, double(std::abs(y.values()[i] - f.values()[i])));
    }
  }
  check.expect(worst <= 1e-6, "max deviation " + fmt(worst, 9));
  return check.done(std::to_string(blocks.size()) + " blocks x train/eval, max |y - f(h(x))| " + fmt(worst, 9));
}

Outcome architecture_suite() {
  Check check;
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto kind : {Architecture::unet_bn, Architecture::res_unet, Architecture::fcn8}) {
    for (int c : {1, 3}) {
      NetworkSpec spec;
      spec.kind = kind;
      spec.base_filters = 8;
      spec.in_channels = c;
      spec.input_size = 256;
      auto net = build_network(spec, 7);
      nn::Tensor x({2, c, 256, 256});
      for (auto& v : x.values()) v = u(rng);
      nn::Tape tape = nn::Tape::inference();
      ForwardTrace trace;
      const nn::Tensor y = net.forward(tape, x, &trace)->value;
      const std::string tag = to_string(kind) + "/c" + std::to_string(c);
      check.expect(y.shape() == nn::Shape{2, 1, 256, 256}, tag + " output " + y.shape().str());
      bool in_range = true;
      for (float v : y.values()) in_range &= v > 0.0f && v < 1.0f;
      check.expect(in_range, tag + " output leaves (0, 1)");
      if (kind == Architecture::fcn8) {
        std::vector<int> fuse;
        for (const auto& [name, s] : trace.entries) {
          if (name == "fuse") fuse.push_back(s.h);
        }
        check.expect(fuse == std::vector<int>{32, 64, 128}, tag + " fusion resolutions");
      }
    }
    // Widths at the default base of 64 (construction only).
    NetworkSpec wide;
    wide.kind = kind;
    wide.base_filters = 64;
    const auto widths = build_network(wide, 0).encoder_widths();
    for (std::size_t d = 0; d < widths.size(); ++d) {
      check.expect(widths[d] == (64 << d), to_string(kind) + " width at level " + std::to_string(d));
    }
  }
  return check.done("3 architectures x {1, 3} channels at 256 px; widths 64/128/256/512; FCN fuse 32/64/128");
}

std::vector<Sample> phantoms(int n, int size, std::uint64_t seed, const std::string& prefix = "") {
  PhantomConfig cfg;
  cfg.n_frames = n;
  cfg.image_size = size;
  cfg.seed = seed;
  auto out = generate_phantoms(cfg);
  for (auto& s : out) s.id = prefix + s.id;
  return out;
}

std::vector<Sample> grayscale(std::vector<Sample> samples) {
  for (auto& s : samples) s.image = to_grayscale(s.image);
  return samples;
}

double mean_dsc(Network& net, const std::vector<Sample>& samples) {
  return evaluate(net, samples).dsc().mean;
}

Outcome overfit() {
  Check check;
  const auto data = phantoms(20, 256, 606);
  std::ostringstream detail;
  for (auto kind : {Architecture::res_unet, Architecture::unet_bn}) {
    NetworkSpec spec;
    spec.kind = kind;
    spec.base_filters = 8;
    spec.in_channels = 3;
    spec.input_size = 256;
    Network net(spec, 1);
    TrainOptions opt;
    opt.target_train_dsc = 0.95;
    const auto rep = train(net, data, {}, HyperParams{1e-3, 4, 200, 200, 1}, opt);
    const double final_dsc = mean_dsc(net, data);
    check.expect(final_dsc >= 0.95, to_string(kind) + " train DSC " + fmt(final_dsc));
    detail << (detail.tellp() > 0 ? "; " : "") << to_string(kind) << " train DSC " << fmt(final_dsc) << " after "
           << rep.curves.size() << " epochs (" << fmt(rep.seconds, 0) << " s)";
  }
  return check.done(detail.str());
}

Outcome generalization() {
  Check check;
  constexpr int kSize = 128;
  const auto train_rgb = phantoms(60, kSize, 7001, "train_");
  const auto val_rgb = phantoms(20, kSize, 7002, "val_");
  std::ostringstream detail;
  std::map<std::string, double> scores;
  for (auto mode : {ColorMode::grayscale, ColorMode::rgb}) {
    const bool gray = mode == ColorMode::grayscale;
    const auto tr = gray ? grayscale(train_rgb) : train_rgb;
    const auto va = gray ? grayscale(val_rgb) : val_rgb;
    NetworkSpec spec;
    spec.kind = Architecture::res_unet;
    spec.base_filters = 8;
    spec.in_channels = gray ? 1 : 3;
    spec.input_size = kSize;
    Network net(spec, 2);
    const auto rep = train(net, tr, va, HyperParams{1e-3, 4, 60, 15, 2});
    const double val = mean_dsc(net, va);
    scores[to_string(mode)] = val;
    check.expect(val >= 0.85, to_string(mode) + " val DSC " + fmt(val));
    detail << (detail.tellp() > 0 ? "; " : "") << to_string(mode) << " val DSC " << fmt(val) << " (best epoch "
           << rep.best_epoch << "/" << rep.curves.size() << ", " << fmt(rep.seconds, 0) << " s)";
  }
  const double diff = scores["rgb"] - scores["grayscale"];
  detail << "; rgb - grayscale = " << (diff >= 0 ? "+" : "") << fmt(diff);
  return check.done(detail.str());
}

Outcome protocol_integrity() {
  Check check;
  // k-fold partition on the clinical layout, both fold modes.
  const auto layout = lumenseg::testing::clinical_manifest();
  for (auto mode : {FoldMode::frame, FoldMode::video}) {
    const auto folds = make_kfold(layout, mode == FoldMode::frame ? 5 : 4, mode, 11, {1});
    std::vector<int> seen(layout.size(), 0);
    for (const auto& f : folds) {
      f.validate();
      for (auto i : f.val) ++seen[i];
      check.expect(f.train.size() + f.val.size() + f.test.size() == layout.size(), "fold does not cover the manifest");
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const int want = layout.entries[i].patient_id == 1 ? 0 : 1;
      check.expect(seen[i] == want, "frame " + std::to_string(i) + " validated " + std::to_string(seen[i]) + " times");
    }
  }

  // Patient holdout through real files: no patient-1 frame may appear in any training batch.
  const auto dir = g_work / "clinical";
  fs::remove_all(dir);
  auto m = lumenseg::testing::write_clinical_dataset(dir, 16);
  m = load_manifest(dir / "manifest.jsonl");
  NetworkSpec tiny;
  tiny.kind = Architecture::unet_bn;
  tiny.base_filters = 1;
  tiny.depth = 2;
  tiny.in_channels = 1;
  tiny.input_size = 16;
  const auto samples = load_samples(m, ColorMode::grayscale);
  const auto fin = train_final(tiny, samples, m, HyperParams{1e-3, 16, 1, 5, 3}, {1}, 0.33);
  const auto trained = fin.report.trained_ids();
  std::size_t leaked = 0, patient1 = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].patient_id != 1) continue;
    ++patient1;
    leaked += trained.contains(samples[i].id);
  }
  check.expect(patient1 == 87, "patient-1 frames " + std::to_string(patient1));
  check.expect(leaked == 0, std::to_string(leaked) + " patient-1 frames trained on");
  check.expect(trained.size() == fin.split.train.size(), "trained frames differ from the training split");

  // Seed determinism: two identical runs give identical reports.
  const auto tr = phantoms(8, 64, 808, "t_"), va = phantoms(4, 64, 809, "v_");
  NetworkSpec spec;
  spec.kind = Architecture::res_unet;
  spec.base_filters = 4;
  spec.depth = 3;
  spec.in_channels = 3;
  spec.input_size = 64;
  TrainOptions opt;
  opt.augmentation = AugmentationSpec{};
  opt.augmentation.seed = 5;
  std::vector<EvalReport> reports;
  std::vector<TrainReport> runs;
  for (int r = 0; r < 2; ++r) {
    Network net(spec, 9);
    runs.push_back(train(net, tr, va, HyperParams{1e-3, 4, 4, 10, 9}, opt));
    reports.push_back(evaluate(net, va));
  }
  for (std::size_t i = 0; i < reports[0].metrics.per_frame.size(); ++i) {
    check.expect(reports[0].metrics.per_frame[i].counts == reports[1].metrics.per_frame[i].counts,
                 "frame " + std::to_string(i) + " counts differ between seeded runs");
  }
  check.expect(reports[0].dsc().mean == reports[1].dsc().mean, "aggregate DSC differs between seeded runs");
  for (std::size_t e = 0; e < runs[0].curves.size(); ++e) {
    check.expect(runs[0].curves[e].train_loss == runs[1].curves[e].train_loss, "loss curve differs at epoch " + std::to_string(e));
  }
  return check.done("5-fold frame and 4-fold video partitions exact; 0/" + std::to_string(patient1) +
                    " patient-1 frames in " + std::to_string(trained.size()) +
                    " trained; seeded reruns identical (DSC " + fmt(reports[0].dsc().mean, 6) + ")");
}

Outcome kruskal() {
  Check check;
  const auto a = kruskal_wallis({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  check.expect(std::abs(a.h - 7.2) < 1e-12 && a.df == 2, "H " + fmt(a.h, 6) + " df " + std::to_string(a.df));
  const auto b = kruskal_wallis({{1, 4}, {2, 3}});
  check.expect(b.h == 0.0 && b.p_value == 1.0, "symmetric H " + fmt(b.h, 6));
  std::mt19937_64 rng(909);
  int agree = 0;
  for (int i = 0; i < 200; ++i) {
    const auto g = lumenseg::testing::random_kw_case(rng);
    const bool asymptotic = kruskal_wallis(g).p_value < 0.05;
    const bool exact = lumenseg::testing::permutation_p_value(g) < 0.05;
    agree += asymptotic == exact;
  }
  check.expect(agree >= 190, "agreement " + std::to_string(agree) + "/200");
  return check.done("H = " + fmt(a.h, 4) + " (df 2, p " + fmt(a.p_value, 4) + "); symmetric H = 0; oracle agreement " +
                    std::to_string(agree) + "/200");
}

Outcome fov_crop() {
  Check check;
  std::mt19937_64 rng(1010);
  std::uniform_int_distribution<int> extent(200, 320);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> texture(0.0, 6.0);
  PreprocConfig cfg;
  double worst_center = 0, worst_radius = 0;
  int worst_bounds = 0;
  for (int i = 0; i < 100; ++i) {
    const int rows = extent(rng), cols = extent(rng);
    const int side = std::min(rows, cols);
    const double radius = (0.3 + 0.18 * unit(rng)) * side;
    const double slack_r = std::max(0.0, rows / 2.0 - radius - 2), slack_c = std::max(0.0, cols / 2.0 - radius - 2);
    const double cr = (rows - 1) / 2.0 + (2 * unit(rng) - 1) * slack_r;
    const double cc = (cols - 1) / 2.0 + (2 * unit(rng) - 1) * slack_c;
    auto img = lumenseg::testing::disk_frame(rows, cols, cr, cc, radius, 170);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (img.at(r, c, 0) == 0) continue;
        const auto v = static_cast<std::uint8_t>(std::clamp(170.0 + texture(rng), 0.0, 255.0));
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = v;
      }
    }
    const RawFrame raw{img, "disk" + std::to_string(i), i};
    const auto e = fit_fov_ellipse(detect_edges(raw, cfg), cfg);
    if (!e) {
      check.expect(false, "no ellipse on frame " + std::to_string(i));
      continue;
    }
    const double center_err = std::hypot(e->center_row - cr, e->center_col - cc);
    const double radius_err = std::max(std::abs(e->semi_major - radius), std::abs(e->semi_minor - radius));
    const auto rect = crop_to_fov(img, e).rect;
    const auto clampi = [](double v, int hi) { return std::clamp(static_cast<int>(std::lround(v)), 0, hi); };
    const int truth[4] = {clampi(cr - radius, rows), clampi(cc - radius, cols), clampi(cr + radius, rows),
                          clampi(cc + radius, cols)};
    const int got[4] = {rect.top, rect.left, rect.bottom(), rect.right()};
    int bounds_err = 0;
    for (int k = 0; k < 4; ++k) bounds_err = std::max(bounds_err, std::abs(got[k] - truth[k]));
    worst_center = std::max(worst_center, center_err);
    worst_radius = std::max(worst_radius, radius_err);
    worst_bounds = std::max(worst_bounds, bounds_err);
    check.expect(center_err <= 2.0, "frame " + std::to_string(i) + " center error " + fmt(center_err, 2));
    check.expect(radius_err <= 3.0, "frame " + std::to_string(i) + " radius error " + fmt(radius_err, 2));
    check.expect(bounds_err <= 3, "frame " + std::to_string(i) + " bounds error " + std::to_string(bounds_err));
  }
  // An all-bright frame has no FOV border.
  const Image8 bright(240, 320, 3, 230);
  const RawFrame raw{bright, "bright", 0};
  const auto none = fit_fov_ellipse(detect_edges(raw, cfg), cfg);
  const auto fb = crop_to_fov(bright, none);
  check.expect(!none.has_value() && fb.fallback, "all-bright frame did not take the fallback path");
  check.expect(fb.rect == CropRect{0, 40, 240, 240}, "fallback is not the centred square");
  const auto full = preprocess(raw, cfg);
  check.expect(full.image.rows() == cfg.target_size && !full.ellipse, "preprocess fallback output");
  return check.done("100 frames: max center error " + fmt(worst_center, 2) + " px, radius " + fmt(worst_radius, 2) +
                    " px, bounds " + std::to_string(worst_bounds) + " px; bright frame falls back to centred square");
}

Outcome overlay_fidelity() {
  Check check;
  std::mt19937_64 rng(1111);
  const auto same = [](const Image8& img, int r, int c, const std::array<std::uint8_t, 3>& col) {
    return img.at(r, c, 0) == col[0] && img.at(r, c, 1) == col[1] && img.at(r, c, 2) == col[2];
  };
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 20 + static_cast<int>(rng() % 60), cols = 20 + static_cast<int>(rng() % 60);
    const auto pred = random_mask(rows, cols, rng, 0.4), gt = random_mask(rows, cols, rng, 0.4);
    Image8 base(rows, cols, trial % 2 == 0 ? 3 : 1);
    for (auto& v : base.data()) v = static_cast<std::uint8_t>(rng());
    auto overlay = render_overlay(pred, gt, base);
    if (trial % 10 == 0) {
      // Through the PNG writer and reader as well.
      const auto path = g_work / "overlay.png";
      io::write_image(path, overlay);
      overlay = io::read_rgb(path);
    }
    ConfusionCounts seen;
    bool base_ok = true;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (same(overlay, r, c, kColorTP)) ++seen.tp;
        else if (same(overlay, r, c, kColorFP)) ++seen.fp;
        else if (same(overlay, r, c, kColorFN)) ++seen.fn;
        else {
          ++seen.tn;
          for (int ch = 0; ch < 3; ++ch) base_ok &= overlay.at(r, c, ch) == base.at(r, c, base.channels() == 3 ? ch : 0) / 2;
        }
      }
    }
    check.expect(seen == confusion(pred, gt), "class counts differ on trial " + std::to_string(trial));
    check.expect(base_ok, "true-negative pixels are not the dimmed base on trial " + std::to_string(trial));
  }
  const bool colours = kColorTP == std::array<std::uint8_t, 3>{0, 255, 0} &&
                       kColorFP == std::array<std::uint8_t, 3>{255, 105, 180} &&
                       kColorFN == std::array<std::uint8_t, 3>{0, 0, 255};
  check.expect(colours, "colour convention");
  return check.done("100 overlays: TP green, FP pink, FN blue, TN dimmed base; counts equal confusion()");
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LUMENSEG_CLI_PATH) + " " + args + " >> '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

Outcome end_to_end() {
  Check check;
  const auto dir = g_work / "e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto log = dir / "cli.log";
  const std::string model = " --base-filters 4 --depth 3 --target-size 64 --color-mode grayscale --augment none --seed 3";
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"gen-synth", "gen-synth --out " + q(dir / "raw") + " --n-frames 24 --image-size 128 --n-videos 4 --seed 3"},
      {"prep", "prep --input " + q(dir / "raw") + " --out " + q(dir / "prep") + " --target-size 64 --color-mode grayscale"},
      {"cv", "cv --data " + q(dir / "prep") + " --out " + q(dir / "cv") + model +
                 " --lr 0.001 --batch-size 4 --epochs 3 --folds 3"},
      {"train", "train --data " + q(dir / "prep") + " --out " + q(dir / "train") + model + " --cv-results " +
                    q(dir / "cv" / "cv_results.json") + " --epochs 6"},
      {"eval", "eval --data " + q(dir / "prep") + " --out " + q(dir / "eval") + " --checkpoint " +
                   q(dir / "train" / "checkpoints" / "best.ckpt") + " --model-id res_unet"},
      {"eval-baseline", "eval --data " + q(dir / "prep") + " --out " + q(dir / "eval_fcn") + " --checkpoint " +
                            q(dir / "fcn8.ckpt") + " --model-id fcn8_init"},
      {"stats", "stats --reports " + q(dir / "eval" / "eval_report.jsonl") + " " +
                    q(dir / "eval_fcn" / "eval_report.jsonl") + " --out " + q(dir / "stats")},
  };
  // An untrained fcn8 checkpoint gives stats a second group.
  NetworkSpec fcn;
  fcn.kind = Architecture::fcn8;
  fcn.base_filters = 4;
  fcn.in_channels = 1;
  fcn.input_size = 64;
  save_checkpoint(dir / "fcn8.ckpt", Network(fcn, 3));

  std::string ran;
  for (const auto& [name, args] : steps) {
    const int code = run_cli(args, log);
    check.expect(code == 0, name + " exited " + std::to_string(code));
    if (code != 0) return check.done("stopped at " + name + " (see " + log.string() + ")");
    ran += (ran.empty() ? "" : " -> ") + name;
  }

  // EvalReport: header, one line per test frame, aggregate; parses back.
  const auto report_path = dir / "eval" / "eval_report.jsonl";
  std::ifstream in(report_path);
  std::string line;
  std::size_t frames = 0, header_frames = 0;
  bool header = false, aggregate = false;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "eval_report") header = true, header_frames = j.at("frames").get<std::size_t>();
    if (type == "frame") {
      ++frames;
      const double d = j.at("dsc").get<double>();
      check.expect(d >= 0.0 && d <= 1.0, "frame DSC out of range");
    }
    if (type == "aggregate") aggregate = j.at("dsc").contains("mean") && j.at("dsc").contains("std");
  }
  const auto report = load_eval_report(report_path);
  check.expect(header && aggregate, "eval report lacks header or aggregate");
  check.expect(frames == 6 && header_frames == 6, "expected the 6 test-patient frames, got " + std::to_string(frames));
  check.expect(report.metrics.per_frame.size() == frames, "report does not parse back");

  // StatTestResult table and JSON.
  std::ifstream tsv(dir / "stats" / "stats.tsv");
  std::vector<std::string> rows;
  while (std::getline(tsv, line)) rows.push_back(line);
  check.expect(!rows.empty() && rows.front() == "first\tsecond\tH\tdf\tp\tstars", "stats.tsv header");
  check.expect(rows.size() == 3 && rows.back().rfind("all\t-\t", 0) == 0, "stats.tsv rows");
  std::ifstream sj(dir / "stats" / "stats.json");
  const auto stats = nlohmann::json::parse(sj);
  const auto& overall = stats.at("overall");
  check.expect(overall.at("df").get<int>() == 1, "overall df");
  check.expect(overall.at("labels").size() == 2 && stats.at("boxes").size() == 2, "stats groups");
  const double p = overall.at("p_value").get<double>();
  check.expect(p >= 0.0 && p <= 1.0, "p-value out of range");
  return check.done(ran + "; test DSC " + fmt(report.dsc().mean) + " vs untrained fcn8 " +
                    fmt(load_eval_report(dir / "eval_fcn" / "eval_report.jsonl").dsc().mean) + ", H " +
                    fmt(overall.at("h").get<double>()) + " p " + fmt(p));
}

}  // namespace

int main(int argc, char** argv) {
  g_work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "lumenseg_acceptance";
  fs::create_directories(g_work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"metric oracle equivalence", metric_oracle},
      {"dice gradient check", dice_gradient},
      {"soft dice vs DSC coherence", loss_dsc_coherence},
      {"residual identity", residual_identity},
      {"architecture shapes and widths", architecture_suite},
      {"synthetic overfit", overfit},
      {"synthetic generalization", generalization},
      {"protocol integrity", protocol_integrity},
      {"kruskal-wallis", kruskal},
      {"fov crop accuracy", fov_crop},
      {"overlay fidelity", overlay_fidelity},
      {"end-to-end cli", end_to_end},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << ". " << criteria[i].first << " ["
              << fmt(s, 1) << " s] " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}

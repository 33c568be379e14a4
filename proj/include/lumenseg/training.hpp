#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "checkpoint.hpp"
#include "datasets.hpp"
#include "metrics.hpp"
#include "models.hpp"

namespace lumenseg {

struct HyperParams {
  double learning_rate = 1e-3;
  int batch_size = 4;
  int max_epochs = 100;
  int early_stop_patience = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw SpecError("learning_rate must be positive");
    if (batch_size <= 0) throw SpecError("batch_size must be positive");
    if (max_epochs < 0) throw SpecError("max_epochs must be non-negative");
    if (early_stop_patience <= 0) throw SpecError("early_stop_patience must be positive");
  }

  bool operator==(const HyperParams&) const = default;
};

// learning_rate x batch_size, learning rates outermost.
inline std::vector<HyperParams> default_grid(int max_epochs = 100, std::uint64_t seed = 0) {
  std::vector<HyperParams> grid;
  for (double lr : {1e-3, 1e-4, 1e-5}) {
    for (int bs : {4, 8, 16}) grid.push_back({lr, bs, max_epochs, 20, seed});
  }
  return grid;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

class Adam {
 public:
  Adam(std::vector<nn::Parameter*> params, double learning_rate, AdamConfig config = {})
      : params_(std::move(params)), lr_(learning_rate), cfg_(config) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0f);
      v_.emplace_back(p->size(), 0.0f);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    const float lr_t = static_cast<float>(lr_ * std::sqrt(c2) / c1);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float eps_hat = static_cast<float>(cfg_.eps * std::sqrt(c2));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      float* w = params_[k]->value.data();
      const float* g = params_[k]->grad.data();
      float* m = m_[k].data();
      float* v = v_[k].data();
      for (std::size_t i = 0; i < m_[k].size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps_hat);
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<nn::Parameter*> params_;
  double lr_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

// Packs samples into an (N, C, S, S) tensor scaled to [0, 1].
inline nn::Tensor to_batch(std::span<const Sample* const> samples, const NetworkSpec& spec) {
  if (samples.empty()) throw ValueError("empty batch");
  const int rows = samples.front()->image.rows(), cols = samples.front()->image.cols();
  nn::Tensor t({static_cast<int>(samples.size()), spec.in_channels, rows, cols});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& img = samples[n]->image;
    if (img.channels() != spec.in_channels) {
      throw ShapeError(samples[n]->id + ": " + std::to_string(img.channels()) +
                       "-channel data for a network expecting " + std::to_string(spec.in_channels));
    }
    if (img.rows() != rows || img.cols() != cols) throw ShapeError("batch frames differ in size");
    for (int c = 0; c < img.channels(); ++c) {
      float* plane = t.plane(static_cast<int>(n), c);
      for (int r = 0; r < rows; ++r) {
        for (int x = 0; x < cols; ++x) plane[r * cols + x] = img.at(r, x, c) / 255.0f;
      }
    }
  }
  return t;
}

inline ProbMap prob_map(const nn::Tensor& out, int n) {
  const auto& s = out.shape();
  ProbMap p(s.h, s.w, 1);
  std::copy_n(out.plane(n, 0), s.plane(), p.storage().begin());
  return p;
}

// Eval-mode probability maps, processed in chunks of `batch`.
inline std::vector<ProbMap> predict(Network& net, const std::vector<Sample>& samples, int batch = 4) {
  std::vector<ProbMap> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); i += batch) {
    std::vector<const Sample*> chunk;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch); ++j) chunk.push_back(&samples[j]);
    const auto y = net.predict(to_batch(chunk, net.spec()));
    for (std::size_t j = 0; j < chunk.size(); ++j) out.push_back(prob_map(y, static_cast<int>(j)));
  }
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_dsc = 0.0;  // from the training-mode forward passes of the epoch
  double val_loss = 0.0;
  double val_dsc = 0.0;
};

struct BatchRecord {
  int epoch = 0;
  std::vector<std::string> frame_ids;
};

struct TrainReport {
  std::vector<EpochRecord> curves;
  int best_epoch = -1;
  double best_val_dsc = 0.0;
  std::vector<double> checkpoint_events;  // monitored DSC at each checkpoint write
  double seconds = 0.0;
  std::string checkpoint_path;
  std::vector<BatchRecord> batches;
  bool early_stopped = false;
  bool target_reached = false;
  std::optional<double> final_train_dsc;  // eval-mode, set when a train-DSC target is used

  std::set<std::string> trained_ids() const {
    std::set<std::string> ids;
    for (const auto& b : batches) ids.insert(b.frame_ids.begin(), b.frame_ids.end());
    return ids;
  }
};

struct TrainOptions {
  AugmentationSpec augmentation = AugmentationSpec::none();
  AugmentationMode augmentation_mode = AugmentationMode::online;
  double smooth = 1.0;
  double threshold = 0.5;
  bool log_batches = true;
  // Stop once the eval-mode DSC over the (unaugmented) training set reaches this value.
  std::optional<double> target_train_dsc;
  std::filesystem::path checkpoint_path;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct LossAndScores {
  double loss = 0.0;
  double dsc = 0.0;
};

// Mean per-frame soft-Dice loss and hard DSC of eval-mode predictions.
inline LossAndScores score_samples(Network& net, const std::vector<Sample>& samples, double smooth,
                                   double threshold) {
  if (samples.empty()) return {};
  const auto probs = predict(net, samples);
  LossAndScores out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.loss += dice_loss<float, std::uint8_t>(probs[i].data(), samples[i].mask.data(), smooth);
    out.dsc += dsc(confusion(binarize(probs[i], threshold), samples[i].mask));
  }
  out.loss /= samples.size();
  out.dsc /= samples.size();
  return out;
}

// Mini-batch Adam on the soft-Dice loss (per-image loss averaged over the batch). After
// return the network holds the parameters of the best-validation-DSC epoch, or its initial
// parameters when no epoch ran. With an empty validation set the training DSC is monitored.
inline TrainReport train(Network& net, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const HyperParams& hp,
                         const TrainOptions& options = {}) {
  hp.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  {
    std::set<std::string> train_ids;
    for (const auto& s : train_set) train_ids.insert(s.id);
    for (const auto& s : val_set) {
      if (train_ids.contains(s.id)) throw DataError("frame " + s.id + " is in both train and validation sets");
    }
  }
  for (const auto& s : train_set) {
    if (s.image.rows() != net.spec().input_size || s.image.cols() != net.spec().input_size) {
      throw ShapeError(s.id + ": frame size does not match network input_size " +
                       std::to_string(net.spec().input_size));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.checkpoint_path = options.checkpoint_path.string();
  auto best = net.snapshot();
  double best_score = -1.0;
  int since_best = 0;
  auto params = net.parameters();
  Adam adam(params, hp.learning_rate);

  auto write_checkpoint = [&](double score) {
    report.checkpoint_events.push_back(score);
    if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, net);
  };
  if (hp.max_epochs == 0) write_checkpoint(0.0);

  for (int epoch = 0; epoch < hp.max_epochs; ++epoch) {
    auto stream = expand_dataset(train_set, options.augmentation, options.augmentation_mode,
                                 static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(stream.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto rng = augmentation_rng(hp.seed ^ 0x5eedULL, static_cast<std::uint64_t>(epoch), ~0ULL);
    detail::seeded_shuffle(order, rng);

    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < order.size(); b += hp.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + hp.batch_size); ++i) batch.push_back(&stream[order[i]]);
      if (options.log_batches) {
        BatchRecord br{epoch, {}};
        for (const auto* s : batch) br.frame_ids.push_back(s->id);
        report.batches.push_back(std::move(br));
      }
      net.zero_grad();
      nn::Tape tape = nn::Tape::training();
      auto out = net.forward(tape, to_batch(batch, net.spec()));
      nn::Tensor seed(out->value.shape());
      const std::size_t plane = out->value.shape().plane();
      const double n = static_cast<double>(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::span<const float> p(out->value.plane(static_cast<int>(i), 0), plane);
        std::span<float> g(seed.plane(static_cast<int>(i), 0), plane);
        const double loss = dice_loss_grad<float, std::uint8_t, float>(p, batch[i]->mask.data(), options.smooth, g);
        if (!std::isfinite(loss)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", frame " + batch[i]->id);
        }
        for (auto& v : g) v = static_cast<float>(v / n);
        rec.train_loss += loss;
        ProbMap pm(out->value.shape().h, out->value.shape().w, 1);
        std::copy(p.begin(), p.end(), pm.storage().begin());
        rec.train_dsc += dsc(confusion(binarize(pm, options.threshold), batch[i]->mask));
      }
      tape.backward(out, seed);
      for (const auto* p : params) {
        for (float v : p->grad.values()) {
          if (!std::isfinite(v)) {
            throw NumericError("non-finite gradient in " + p->name + " at epoch " + std::to_string(epoch));
          }
        }
      }
      adam.step();
    }
    rec.train_loss /= static_cast<double>(stream.size());
    rec.train_dsc /= static_cast<double>(stream.size());

    double monitored = rec.train_dsc;
    if (!val_set.empty()) {
      const auto v = score_samples(net, val_set, options.smooth, options.threshold);
      rec.val_loss = v.loss;
      rec.val_dsc = v.dsc;
      monitored = v.dsc;
    }
    report.curves.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    if (monitored > best_score) {
      best_score = monitored;
      report.best_epoch = epoch;
      report.best_val_dsc = monitored;
      best = net.snapshot();
      since_best = 0;
      write_checkpoint(monitored);
    } else if (++since_best >= hp.early_stop_patience) {
      report.early_stopped = true;
      break;
    }

    if (options.target_train_dsc) {
      const double train_dsc = score_samples(net, train_set, options.smooth, options.threshold).dsc;
      report.final_train_dsc = train_dsc;
      if (train_dsc >= *options.target_train_dsc) {
        report.target_reached = true;
        best = net.snapshot();
        break;
      }
    }
  }
  net.restore(best);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct GridCell {
  HyperParams params;
  std::vector<double> fold_dsc;  // best validation DSC per fold
  std::vector<std::string> errors;  // one per failed fold
  double mean = 0.0;
  double std = 0.0;
};

struct GridSearchResult {
  std::vector<GridCell> cells;
  std::vector<std::vector<TrainReport>> reports;  // [cell][fold]
  HyperParams winner;
  std::size_t winner_index = 0;
};

// Highest mean fold DSC; ties go to lower std, then smaller batch, then higher learning rate.
inline std::size_t select_winner(const std::vector<GridCell>& cells) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].fold_dsc.empty()) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& a = cells[i];
    const auto& b = cells[*best];
    const auto key = [](const GridCell& c) {
      return std::make_tuple(c.mean, -c.std, -c.params.batch_size, c.params.learning_rate);
    };
    if (key(a) > key(b)) best = i;
  }
  if (!best) throw DataError("every grid cell failed to train");
  return *best;
}

// Trains every (combination x fold) from a fresh initialisation. `folds` index into `samples`.
inline GridSearchResult cross_validate(const NetworkSpec& spec, const std::vector<Sample>& samples,
                                       const std::vector<SplitAssignment>& folds,
                                       const std::vector<HyperParams>& grid,
                                       const TrainOptions& options = {}) {
  if (grid.empty()) throw ConfigError("hyperparameter grid is empty");
  if (folds.empty()) throw DataError("no folds given");
  GridSearchResult result;
  for (const auto& hp : grid) {
    GridCell cell;
    cell.params = hp;
    std::vector<TrainReport> reports;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      try {
        folds[f].validate();
        std::vector<Sample> tr, va;
        for (auto i : folds[f].train) tr.push_back(samples.at(i));
        for (auto i : folds[f].val) va.push_back(samples.at(i));
        Network net(spec, hp.seed);
        TrainOptions fold_options = options;
        fold_options.checkpoint_path.clear();
        auto rep = train(net, tr, va, hp, fold_options);
        cell.fold_dsc.push_back(rep.best_val_dsc);
        reports.push_back(std::move(rep));
      } catch (const Error& e) {
        cell.errors.push_back("fold " + std::to_string(f) + ": " + e.what());
        reports.emplace_back();
      }
    }
    const auto ms = mean_std(cell.fold_dsc);
    cell.mean = ms.mean;
    cell.std = ms.std;
    result.cells.push_back(std::move(cell));
    result.reports.push_back(std::move(reports));
  }
  result.winner_index = select_winner(result.cells);
  result.winner = result.cells[result.winner_index].params;
  return result;
}

inline GridSearchResult cross_validate(const NetworkSpec& spec, const DatasetManifest& manifest,
                                       const std::vector<SplitAssignment>& folds,
                                       const std::vector<HyperParams>& grid,
                                       const TrainOptions& options = {}) {
  const auto mode = spec.in_channels == 1 ? ColorMode::grayscale : ColorMode::rgb;
  return cross_validate(spec, load_samples(manifest, mode), folds, grid, options);
}

struct FinalTraining {
  Network network;
  TrainReport report;
  SplitAssignment split;
};

// Trains on the holdout split: `test_patients` never reach a gradient step.
inline FinalTraining train_final(const NetworkSpec& spec, const std::vector<Sample>& samples,
                                 const DatasetManifest& manifest, const HyperParams& winner,
                                 const std::set<int>& test_patients, double val_fraction,
                                 const TrainOptions& options = {}) {
  auto split = make_holdout_split(manifest, test_patients, val_fraction, winner.seed);
  std::vector<Sample> tr, va;
  for (auto i : split.train) tr.push_back(samples.at(i));
  for (auto i : split.val) va.push_back(samples.at(i));
  Network net(spec, winner.seed);
  auto report = train(net, tr, va, winner, options);
  return {std::move(net), std::move(report), std::move(split)};
}

inline FinalTraining train_final(const NetworkSpec& spec, const DatasetManifest& manifest,
                                 const HyperParams& winner, const std::set<int>& test_patients,
                                 double val_fraction, const TrainOptions& options = {}) {
  const auto mode = spec.in_channels == 1 ? ColorMode::grayscale : ColorMode::rgb;
  return train_final(spec, load_samples(manifest, mode), manifest, winner, test_patients, val_fraction, options);
}

}  // namespace lumenseg

#pragma once

// Command-line front end. Every subcommand writes into its output directory:
//   run_manifest.json  command, config hash, effective config, inputs, outputs
//   log.jsonl          one JSON record per event, closed by a {"type":"summary"} record

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "datasets.hpp"
#include "evaluation.hpp"
#include "io.hpp"
#include "preprocessing.hpp"
#include "training.hpp"

namespace lumenseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kData = 4, kNumeric = 5 };

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case Error::Kind::config:
    case Error::Kind::spec:
      return kConfig;
    case Error::Kind::data:
    case Error::Kind::io:
    case Error::Kind::shape:
    case Error::Kind::value:
      return kData;
    case Error::Kind::numeric:
      return kNumeric;
    case Error::Kind::stats:
      return kFailure;
  }
  return kFailure;
}

// Raw flag values; only flags actually given override the config.
struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string data, out, input, checkpoint, cv_results, pred_dir;
  std::string subset = "test";
  std::string model_id;
  std::string metric = "dsc";
  std::vector<std::string> reports, labels;
  int target_size = 0, base_filters = 0, depth = 0, epochs = 0, patience = 0, batch_size = 0, folds = 0;
  int n_frames = 0, image_size = 0, n_videos = 0;
  double lr = 0, threshold = 0, val_fraction = 0;
  std::string color_mode, arch, fold_mode, augment;
  std::vector<int> test_patients;
};

class Run {
 public:
  Run(std::string command, fs::path out_dir, const ExperimentConfig& config)
      : command_(std::move(command)), out_(std::move(out_dir)), config_(config) {
    fs::create_directories(out_);
    log_.open(out_ / "log.jsonl");
    if (!log_) throw IoError("cannot write " + (out_ / "log.jsonl").string());
    log({{"type", "start"}, {"command", command_}, {"config_hash", config_hash(config_)}});
  }

  const fs::path& out() const { return out_; }

  void log(const json& record) { log_ << record.dump() << '\n'; }
  void input(const fs::path& p) { inputs_.insert(p.generic_string()); }

  // Writes the manifest and prints the summary followed by the output directory. Nothing
  // written depends on where the output lives, so identical runs into different
  // directories produce identical trees.
  void finish(const std::string& summary) {
    log({{"type", "summary"}, {"text", summary}});
    log_.close();
    std::vector<std::string> outputs;
    for (const auto& e : fs::recursive_directory_iterator(out_)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), out_).generic_string();
      if (rel != "run_manifest.json") outputs.push_back(rel);
    }
    std::sort(outputs.begin(), outputs.end());
    json m = {{"command", command_},
              {"config_hash", config_hash(config_)},
              {"seed", config_.seed},
              {"config", experiment_json(config_)},
              {"inputs", inputs_},
              {"outputs", outputs}};
    std::ofstream(out_ / "run_manifest.json") << m.dump(2) << '\n';
    std::cout << summary << "\noutput: " << out_.string() << '\n';
  }

 private:
  std::string command_;
  fs::path out_;
  ExperimentConfig config_;
  std::ofstream log_;
  std::set<std::string> inputs_;
};

namespace detail {

inline bool given(const CLI::App* app, const std::string& name) {
  const auto* opt = app->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

inline ExperimentConfig effective_config(const CLI::App* app, const Flags& f) {
  ExperimentConfig c;
  if (!f.config.empty()) c = load_config(f.config);
  if (given(app, "--seed")) {
    c.seed = f.seed;
    c.synthetic.seed = f.seed;
    c.augmentation.seed = f.seed;
    for (auto& hp : c.grid) hp.seed = f.seed;
  }
  if (given(app, "--data")) c.data_dir = f.data;
  if (given(app, "--out")) c.output_dir = f.out;
  if (given(app, "--target-size")) {
    c.preprocessing.target_size = f.target_size;
    c.network.input_size = f.target_size;
  }
  if (given(app, "--color-mode")) {
    c.preprocessing.color_mode = color_mode_from_string(f.color_mode);
    c.network.in_channels = channels_of(c.preprocessing.color_mode);
  }
  if (given(app, "--arch")) c.network.kind = architecture_from_string(f.arch);
  if (given(app, "--base-filters")) c.network.base_filters = f.base_filters;
  if (given(app, "--depth")) c.network.depth = f.depth;
  if (given(app, "--lr") || given(app, "--batch-size")) {
    HyperParams hp = c.grid.front();
    if (given(app, "--lr")) hp.learning_rate = f.lr;
    if (given(app, "--batch-size")) hp.batch_size = f.batch_size;
    c.grid = {hp};
  }
  for (auto& hp : c.grid) {
    if (given(app, "--epochs")) hp.max_epochs = f.epochs;
    if (given(app, "--patience")) hp.early_stop_patience = f.patience;
  }
  if (given(app, "--threshold")) c.threshold = f.threshold;
  if (given(app, "--folds")) c.folds = f.folds;
  if (given(app, "--fold-mode")) c.fold_mode = fold_mode_from_string(f.fold_mode);
  if (given(app, "--val-fraction")) c.val_fraction = f.val_fraction;
  if (given(app, "--test-patients")) c.test_patients = {f.test_patients.begin(), f.test_patients.end()};
  if (given(app, "--n-frames")) c.synthetic.n_frames = f.n_frames;
  if (given(app, "--image-size")) c.synthetic.image_size = f.image_size;
  if (given(app, "--n-videos")) c.synthetic.n_videos = f.n_videos;
  if (given(app, "--augment")) {
    if (f.augment == "none") {
      const auto seed = c.augmentation.seed;
      c.augmentation = AugmentationSpec::none();
      c.augmentation.seed = seed;
    } else if (f.augment == "online") {
      c.augmentation_mode = AugmentationMode::online;
    } else if (f.augment == "offline") {
      c.augmentation_mode = AugmentationMode::offline;
    } else {
      throw ConfigError("--augment must be none, online or offline");
    }
  }
  // Round-trip through the parser so overrides get the same validation as the file.
  return config_from_json(to_json(c));
}

inline fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.jsonl" : data;
}

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("input directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(fs::relative(e.path(), dir));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline fs::path as_png(fs::path rel) { return rel.replace_extension(".png"); }

// Outputs must never land inside an input tree.
inline void require_outside(const fs::path& out, const fs::path& in) {
  if (in.empty() || !fs::exists(in)) return;
  const auto a = fs::weakly_canonical(out), b = fs::weakly_canonical(fs::is_directory(in) ? in : in.parent_path());
  const auto rel = a.lexically_relative(b);
  if (!rel.empty() && *rel.begin() != "..") {
    throw ConfigError("output " + out.string() + " lies inside input " + in.string());
  }
}

inline ColorMode mode_of(const NetworkSpec& s) { return s.in_channels == 1 ? ColorMode::grayscale : ColorMode::rgb; }

inline std::vector<std::size_t> select_subset(const DatasetManifest& m, const std::string& subset,
                                              const std::set<int>& test_patients) {
  if (subset == "all") {
    std::vector<std::size_t> all(m.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  if (subset != "test") throw ConfigError("--subset must be test or all");
  auto idx = lumenseg::detail::indices_where(m, [&](const ManifestEntry& e) { return test_patients.contains(e.patient_id); });
  if (idx.empty()) throw DataError("no frames of the test patients in " + m.base_dir.string());
  return idx;
}

inline json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"train_dsc", r.train_dsc},
          {"val_loss", r.val_loss}, {"val_dsc", r.val_dsc}};
}

inline json to_json(const StatTestResult& r) {
  return {{"labels", r.labels}, {"h", r.h},         {"df", r.df},
          {"p_value", r.p_value}, {"stars", r.stars}, {"degenerate", r.degenerate}};
}

inline std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

inline DatasetManifest open_manifest(Run& run, const fs::path& data) {
  const auto path = manifest_path(data);
  auto m = load_manifest(path);
  run.input(path);
  for (const auto& w : m.warnings) run.log({{"type", "warning"}, {"message", w}});
  if (m.empty()) throw DataError("manifest " + path.string() + " lists no frames");
  return m;
}

}  // namespace detail

inline void cmd_gen_synth(const ExperimentConfig& c) {
  Run run("gen-synth", c.output_dir, c);
  const auto samples = generate_phantoms(c.synthetic);
  write_dataset(run.out(), samples, ColorMode::rgb);
  for (const auto& s : samples) {
    run.log({{"type", "frame"}, {"id", s.id}, {"video", s.video_id}, {"patient", s.patient_id}});
  }
  run.finish("gen-synth: wrote " + std::to_string(samples.size()) + " phantom frames (" +
             std::to_string(c.synthetic.image_size) + " px)");
}

// Mirrors the input tree. With a manifest, masks get the same crop and the manifest is
// rewritten; otherwise every PNG/JPEG under the input is processed as a bare frame.
inline void cmd_prep(const ExperimentConfig& c, const fs::path& input) {
  detail::require_outside(c.output_dir, input);
  if (!fs::is_directory(input)) throw DataError("input directory " + input.string() + " does not exist");
  Run run("prep", c.output_dir, c);
  std::ofstream sidecar(run.out() / "prep_log.jsonl");
  int fallbacks = 0, frames = 0;

  auto process = [&](const fs::path& rel_image, const fs::path* rel_mask, int frame_index) {
    const auto src = input / rel_image;
    run.input(src);
    RawFrame raw{io::read_rgb(src), rel_image.generic_string(), frame_index};
    std::optional<Mask> mask;
    if (rel_mask) {
      run.input(input / *rel_mask);
      mask = io::read_mask(input / *rel_mask);
    }
    const auto r = preprocess(raw, c.preprocessing, mask ? &*mask : nullptr);
    io::write_image(run.out() / detail::as_png(rel_image), r.image);
    if (r.mask) io::write_mask(run.out() / detail::as_png(*rel_mask), *r.mask);
    json ell = nullptr;
    if (r.ellipse) {
      ell = {{"center_row", r.ellipse->center_row}, {"center_col", r.ellipse->center_col},
             {"semi_major", r.ellipse->semi_major}, {"semi_minor", r.ellipse->semi_minor},
             {"rotation", r.ellipse->rotation}};
    } else {
      ++fallbacks;
    }
    ++frames;
    sidecar << json{{"source", rel_image.generic_string()},
                    {"output", detail::as_png(rel_image).generic_string()},
                    {"crop", {{"top", r.crop.top}, {"left", r.crop.left}, {"height", r.crop.height},
                              {"width", r.crop.width}}},
                    {"ellipse", ell},
                    {"fallback", !r.ellipse.has_value()},
                    {"color_mode", to_string(r.color_mode)}}
                   .dump()
            << '\n';
  };

  const auto manifest_file = input / "manifest.jsonl";
  if (fs::exists(manifest_file)) {
    const auto m = detail::open_manifest(run, input);
    DatasetManifest out_m;
    out_m.color_mode = c.preprocessing.color_mode;
    for (const auto& e : m.entries) {
      if (fs::path(e.image).is_absolute()) throw DataError("prep needs manifest paths relative to " + input.string());
      const fs::path img(e.image), msk(e.mask);
      process(img, &msk, e.frame_index);
      out_m.entries.push_back({detail::as_png(img).generic_string(), detail::as_png(msk).generic_string(),
                               e.video_id, e.patient_id, e.frame_index});
    }
    save_manifest(run.out() / "manifest.jsonl", out_m);
  } else {
    int index = 0;
    for (const auto& rel : detail::list_images(input)) process(rel, nullptr, index++);
  }
  sidecar.close();
  run.finish("prep: " + std::to_string(frames) + " frames -> " + std::to_string(c.preprocessing.target_size) +
             " px " + to_string(c.preprocessing.color_mode) + ", " + std::to_string(fallbacks) +
             " used the centered-square fallback");
}

inline TrainOptions train_options(const ExperimentConfig& c) {
  TrainOptions o;
  o.augmentation = c.augmentation;
  o.augmentation_mode = c.augmentation_mode;
  o.smooth = c.dice_smooth;
  o.threshold = c.threshold;
  o.log_batches = false;
  return o;
}

inline void cmd_cv(const ExperimentConfig& c) {
  detail::require_outside(c.output_dir, c.data_dir);
  Run run("cv", c.output_dir, c);
  const auto m = detail::open_manifest(run, c.data_dir);
  const auto samples = load_samples(m, detail::mode_of(c.network));
  const auto folds = make_kfold(m, c.folds, c.fold_mode, c.seed, c.test_patients);
  const auto result = cross_validate(c.network, samples, folds, c.grid, train_options(c));

  json cells = json::array();
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const auto& cell = result.cells[i];
    cells.push_back({{"params", to_json(cell.params)}, {"fold_dsc", cell.fold_dsc}, {"mean", cell.mean},
                     {"std", cell.std}, {"errors", cell.errors}});
    for (std::size_t f = 0; f < result.reports[i].size(); ++f) {
      for (const auto& rec : result.reports[i][f].curves) {
        auto j = detail::to_json(rec);
        j["type"] = "epoch";
        j["cell"] = i;
        j["fold"] = f;
        run.log(j);
      }
    }
    run.log({{"type", "cell"}, {"cell", i}, {"mean", cell.mean}, {"std", cell.std}, {"errors", cell.errors}});
  }
  std::ofstream(run.out() / "cv_results.json")
      << json{{"cells", cells}, {"winner", to_json(result.winner)}, {"winner_index", result.winner_index},
              {"folds", c.folds}}
             .dump(2)
      << '\n';
  std::ofstream table(run.out() / "cv_results.tsv");
  table << "learning_rate\tbatch_size\tmean_dsc\tstd_dsc\tfolds_ok\n";
  for (const auto& cell : result.cells) {
    table << cell.params.learning_rate << '\t' << cell.params.batch_size << '\t' << detail::fmt(cell.mean, 6) << '\t'
          << detail::fmt(cell.std, 6) << '\t' << cell.fold_dsc.size() << '\n';
  }
  table.close();
  const auto& w = result.cells[result.winner_index];
  run.finish("cv: " + std::to_string(result.cells.size()) + " combinations x " + std::to_string(folds.size()) +
             " folds; winner lr=" + detail::fmt(w.params.learning_rate, 6) + " batch=" +
             std::to_string(w.params.batch_size) + " mean DSC " + detail::fmt(w.mean) + " +/- " +
             detail::fmt(w.std));
}

// A cv winner replaces the grid; --epochs/--patience still apply on top of it.
inline void cmd_train(const ExperimentConfig& c, const std::string& cv_results, std::optional<int> epochs = {},
                      std::optional<int> patience = {}) {
  detail::require_outside(c.output_dir, c.data_dir);
  Run run("train", c.output_dir, c);
  HyperParams hp = c.grid.front();
  if (!cv_results.empty()) {
    std::ifstream in(cv_results);
    if (!in) throw IoError("cannot read " + cv_results);
    try {
      hp = hyper_params_from_json(json::parse(in).at("winner"), c.seed);
    } catch (const json::exception& e) {
      throw DataError(cv_results + " is not a cv result: " + e.what());
    }
    run.input(cv_results);
    if (epochs) hp.max_epochs = *epochs;
    if (patience) hp.early_stop_patience = *patience;
    hp.validate();
  }
  const auto m = detail::open_manifest(run, c.data_dir);
  auto options = train_options(c);
  const auto ckpt = run.out() / "checkpoints" / "best.ckpt";
  options.checkpoint_path = ckpt;
  options.on_epoch = [&](const EpochRecord& r) {
    auto j = detail::to_json(r);
    j["type"] = "epoch";
    run.log(j);
  };
  auto fin = train_final(c.network, m, hp, c.test_patients, c.val_fraction, options);
  save_checkpoint(ckpt, fin.network);

  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(m.entries[i].image);
    return out;
  };
  json curves = json::array();
  for (const auto& r : fin.report.curves) curves.push_back(detail::to_json(r));
  std::ofstream(run.out() / "train_report.json")
      << json{{"params", to_json(hp)},
              {"best_epoch", fin.report.best_epoch},
              {"best_val_dsc", fin.report.best_val_dsc},
              {"early_stopped", fin.report.early_stopped},
              {"curves", curves},
              {"split", {{"train", ids(fin.split.train)}, {"val", ids(fin.split.val)}, {"test", ids(fin.split.test)}}}}
             .dump(2)
      << '\n';
  run.finish("train: " + to_string(c.network.kind) + " on " + std::to_string(fin.split.train.size()) +
             " frames, best val DSC " + detail::fmt(fin.report.best_val_dsc) + " at epoch " +
             std::to_string(fin.report.best_epoch) + " of " + std::to_string(fin.report.curves.size()) +
             "; checkpoint checkpoints/best.ckpt");
}

inline Network open_checkpoint(Run& run, const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  run.input(path);
  return load_checkpoint(path);
}

inline void cmd_eval(const ExperimentConfig& c, const Flags& f) {
  detail::require_outside(c.output_dir, c.data_dir);
  Run run("eval", c.output_dir, c);
  auto net = open_checkpoint(run, f.checkpoint);
  const auto m = detail::open_manifest(run, c.data_dir);
  const auto samples = load_samples(m, detail::mode_of(net.spec()), detail::select_subset(m, f.subset, c.test_patients));
  const auto id = f.model_id.empty() ? to_string(net.spec().kind) : f.model_id;
  const auto probs = predict(net, samples);
  std::size_t next = 0;
  const auto report = evaluate([&](const Sample&) { return probs[next++]; }, samples, c.threshold, id);
  save_eval_report(run.out() / "eval_report.jsonl", report);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    io::write_image(run.out() / "overlays" / detail::as_png(s.id),
                    render_overlay(binarize(probs[i], c.threshold), s.mask, s.image));
  }
  auto line = [](const char* name, MeanStd v) {
    return std::string(name) + " " + detail::fmt(v.mean) + " +/- " + detail::fmt(v.std);
  };
  run.finish("eval: " + id + " on " + std::to_string(samples.size()) + " frames: " + line("DSC", report.dsc()) +
             ", " + line("precision", report.precision()) + ", " + line("recall", report.recall()) + ", " +
             line("accuracy", report.accuracy()));
}

// One probability map (16-bit) and one binary mask per input frame, under prob/ and mask/.
inline void cmd_predict(const ExperimentConfig& c, const Flags& f) {
  const fs::path input = f.input.empty() ? fs::path(c.data_dir) : fs::path(f.input);
  detail::require_outside(c.output_dir, input);
  Run run("predict", c.output_dir, c);
  auto net = open_checkpoint(run, f.checkpoint);
  const auto mode = detail::mode_of(net.spec());
  std::vector<fs::path> rels;
  if (fs::exists(input / "manifest.jsonl")) {
    const auto m = detail::open_manifest(run, input);
    for (const auto& e : m.entries) rels.emplace_back(e.image);
  } else {
    rels = detail::list_images(input);
  }
  int resized = 0;
  for (const auto& rel : rels) {
    run.input(input / rel);
    Sample s;
    s.id = rel.generic_string();
    auto rgb = io::read_rgb(input / rel);
    if (rgb.rows() != net.spec().input_size || rgb.cols() != net.spec().input_size) {
      rgb = resize_bilinear(rgb, net.spec().input_size, net.spec().input_size);
      ++resized;
    }
    s.image = mode == ColorMode::grayscale ? to_grayscale(rgb) : std::move(rgb);
    const auto prob = predict(net, std::vector<Sample>{s}).front();
    io::write_prob16(run.out() / "prob" / detail::as_png(rel), prob);
    io::write_mask(run.out() / "mask" / detail::as_png(rel), binarize(prob, c.threshold));
    run.log({{"type", "frame"}, {"id", s.id}});
  }
  run.finish("predict: " + std::to_string(rels.size()) + " frames (" + std::to_string(resized) +
             " resized to " + std::to_string(net.spec().input_size) + " px)");
}

// Overlays from either a checkpoint or a predict output directory (--pred-dir).
inline void cmd_overlay(const ExperimentConfig& c, const Flags& f) {
  detail::require_outside(c.output_dir, c.data_dir);
  Run run("overlay", c.output_dir, c);
  const auto m = detail::open_manifest(run, c.data_dir);
  const auto idx = detail::select_subset(m, f.subset, c.test_patients);
  std::optional<Network> net;
  if (f.pred_dir.empty()) net.emplace(open_checkpoint(run, f.checkpoint));
  const auto samples = load_samples(m, net ? detail::mode_of(net->spec()) : m.color_mode, idx);
  std::vector<ProbMap> probs;
  if (net) probs = predict(*net, samples);
  ConfusionCounts total;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    Mask pred;
    if (net) {
      pred = binarize(probs[i], c.threshold);
    } else {
      const auto p = fs::path(f.pred_dir) / "mask" / detail::as_png(s.id);
      run.input(p);
      pred = io::read_mask(p);
    }
    const auto counts = confusion(pred, s.mask);
    total.tp += counts.tp;
    total.fp += counts.fp;
    total.fn += counts.fn;
    total.tn += counts.tn;
    io::write_image(run.out() / "overlays" / detail::as_png(s.id), render_overlay(pred, s.mask, s.image));
    run.log({{"type", "frame"}, {"id", s.id}, {"tp", counts.tp}, {"fp", counts.fp}, {"fn", counts.fn},
             {"tn", counts.tn}});
  }
  run.finish("overlay: " + std::to_string(samples.size()) + " frames; pixels TP " + std::to_string(total.tp) +
             ", FP " + std::to_string(total.fp) + ", FN " + std::to_string(total.fn) + ", TN " +
             std::to_string(total.tn));
}

inline double metric_of(const FrameMetrics& m, const std::string& metric) {
  if (metric == "dsc") return m.dsc;
  if (metric == "precision") return m.precision;
  if (metric == "recall") return m.recall;
  if (metric == "accuracy") return m.accuracy;
  throw ConfigError("--metric must be dsc, precision, recall or accuracy");
}

// Kruskal-Wallis over all reports plus every pair, and box-plot summaries.
inline void cmd_stats(const ExperimentConfig& c, const Flags& f) {
  if (f.reports.size() < 2) throw ConfigError("stats needs at least two --reports");
  if (!f.labels.empty() && f.labels.size() != f.reports.size()) {
    throw ConfigError("--labels must name every report");
  }
  Run run("stats", c.output_dir, c);
  std::vector<std::pair<std::string, std::vector<double>>> groups;
  std::set<std::string> used;
  for (std::size_t i = 0; i < f.reports.size(); ++i) {
    run.input(f.reports[i]);
    const auto r = load_eval_report(f.reports[i]);
    std::string label = f.labels.empty() ? r.model_id : f.labels[i];
    if (!used.insert(label).second) label += "#" + std::to_string(i + 1);
    std::vector<double> values;
    for (const auto& fm : r.metrics.per_frame) values.push_back(metric_of(fm, f.metric));
    if (values.empty()) throw DataError(f.reports[i] + " has no frames");
    groups.emplace_back(label, std::move(values));
  }
  std::vector<std::vector<double>> all;
  std::vector<std::string> labels;
  for (const auto& [l, v] : groups) {
    labels.push_back(l);
    all.push_back(v);
  }
  StatTestResult overall;
  try {
    overall = kruskal_wallis(all, labels);
  } catch (const DegenerateTiesError&) {
    overall.labels = labels;
    overall.df = static_cast<int>(labels.size()) - 1;
    overall.degenerate = true;
    overall.stars = "n/a";
  }
  const auto box = boxplot_data(groups);

  json boxes = json::array(), pairs = json::array();
  for (const auto& b : box.boxes) {
    boxes.push_back({{"label", b.label}, {"count", b.count}, {"min", b.min}, {"q1", b.q1}, {"median", b.median},
                     {"q3", b.q3}, {"max", b.max}, {"outliers", b.outliers}});
  }
  std::ostringstream table;
  table << "first\tsecond\tH\tdf\tp\tstars\n";
  auto row = [&](const std::string& a, const std::string& b, const StatTestResult& r) {
    table << a << '\t' << b << '\t' << detail::fmt(r.h) << '\t' << r.df << '\t'
          << (r.degenerate ? std::string("nan") : detail::fmt(r.p_value, 6)) << '\t' << r.stars << '\n';
  };
  for (const auto& p : box.pairwise) {
    pairs.push_back(detail::to_json(p.result));
    row(p.first, p.second, p.result);
  }
  row("all", "-", overall);
  std::ofstream(run.out() / "stats.json")
      << json{{"metric", f.metric}, {"overall", detail::to_json(overall)}, {"pairwise", pairs}, {"boxes", boxes}}
             .dump(2)
      << '\n';
  std::ofstream(run.out() / "stats.tsv") << table.str();
  run.finish("stats (" + f.metric + "):\n" + table.str());
}

inline int cli_dispatch(int argc, char** argv) {
  CLI::App app{"Lumen segmentation toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "Experiment config (JSON)");
    s->add_option("--seed", f.seed, "Seed for every random stream");
    s->add_option("--out", f.out, "Output directory");
  };
  auto data_opt = [&](CLI::App* s) { s->add_option("--data", f.data, "Dataset directory or manifest"); };
  auto net_opts = [&](CLI::App* s) {
    s->add_option("--arch", f.arch, "unet_bn | res_unet | fcn8");
    s->add_option("--base-filters", f.base_filters);
    s->add_option("--depth", f.depth);
    s->add_option("--color-mode", f.color_mode, "grayscale | rgb");
    s->add_option("--target-size", f.target_size, "Network input size");
  };
  auto train_opts = [&](CLI::App* s) {
    s->add_option("--lr", f.lr, "Learning rate (collapses the grid to one combination)");
    s->add_option("--batch-size", f.batch_size, "Batch size (collapses the grid to one combination)");
    s->add_option("--epochs", f.epochs);
    s->add_option("--patience", f.patience);
    s->add_option("--augment", f.augment, "none | online | offline");
    s->add_option("--test-patients", f.test_patients)->expected(1, -1);
    s->add_option("--threshold", f.threshold);
  };
  auto subset_opts = [&](CLI::App* s) {
    s->add_option("--checkpoint", f.checkpoint);
    s->add_option("--subset", f.subset, "test | all");
    s->add_option("--test-patients", f.test_patients)->expected(1, -1);
    s->add_option("--threshold", f.threshold);
  };

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic phantom dataset");
  common(gen);
  gen->add_option("--n-frames", f.n_frames);
  gen->add_option("--image-size", f.image_size);
  gen->add_option("--n-videos", f.n_videos);

  auto* prep = app.add_subcommand("prep", "Crop frames to the field of view and resize");
  common(prep);
  prep->add_option("--input", f.input, "Directory of raw frames (optionally with manifest.jsonl)");
  prep->add_option("--target-size", f.target_size);
  prep->add_option("--color-mode", f.color_mode);

  auto* cv = app.add_subcommand("cv", "k-fold grid search");
  common(cv);
  data_opt(cv);
  net_opts(cv);
  train_opts(cv);
  cv->add_option("--folds", f.folds);
  cv->add_option("--fold-mode", f.fold_mode, "frame | video");

  auto* train = app.add_subcommand("train", "Train on the holdout split");
  common(train);
  data_opt(train);
  net_opts(train);
  train_opts(train);
  train->add_option("--cv-results", f.cv_results, "cv_results.json whose winner to train");
  train->add_option("--val-fraction", f.val_fraction);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(eval);
  data_opt(eval);
  subset_opts(eval);
  eval->add_option("--model-id", f.model_id);

  auto* pred = app.add_subcommand("predict", "Probability maps and masks for a directory of frames");
  common(pred);
  pred->add_option("--input", f.input);
  pred->add_option("--checkpoint", f.checkpoint);
  pred->add_option("--threshold", f.threshold);

  auto* over = app.add_subcommand("overlay", "Render TP/FP/FN overlays");
  common(over);
  data_opt(over);
  subset_opts(over);
  over->add_option("--pred-dir", f.pred_dir, "Output of predict, used instead of --checkpoint");

  auto* stats = app.add_subcommand("stats", "Kruskal-Wallis tests and box-plot data over eval reports");
  common(stats);
  stats->add_option("--reports", f.reports)->expected(1, -1);
  stats->add_option("--labels", f.labels)->expected(1, -1);
  stats->add_option("--metric", f.metric, "dsc | precision | recall | accuracy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const auto c = detail::effective_config(sub, f);
    const std::string name = sub->get_name();
    if (name == "gen-synth") cmd_gen_synth(c);
    else if (name == "prep") cmd_prep(c, f.input.empty() ? fs::path(c.data_dir) : fs::path(f.input));
    else if (name == "cv") cmd_cv(c);
    else if (name == "train") {
      cmd_train(c, f.cv_results, detail::given(sub, "--epochs") ? std::optional(f.epochs) : std::nullopt,
                detail::given(sub, "--patience") ? std::optional(f.patience) : std::nullopt);
    }
    else if (name == "eval") cmd_eval(c, f);
    else if (name == "predict") cmd_predict(c, f);
    else if (name == "overlay") cmd_overlay(c, f);
    else if (name == "stats") cmd_stats(c, f);
    return kOk;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace lumenseg::cli

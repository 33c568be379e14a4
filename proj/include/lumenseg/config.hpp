#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "augmentation.hpp"
#include "checkpoint.hpp"
#include "datasets.hpp"
#include "preprocessing.hpp"
#include "training.hpp"

namespace lumenseg {

inline constexpr int kConfigSchemaVersion = 1;

// Everything needed to reproduce a run from data + seed.
struct ExperimentConfig {
  std::string data_dir = "data";
  std::string output_dir = "runs";
  PreprocConfig preprocessing;
  AugmentationSpec augmentation;
  AugmentationMode augmentation_mode = AugmentationMode::online;
  NetworkSpec network;
  std::vector<HyperParams> grid = default_grid();
  std::set<int> test_patients = {1};
  double val_fraction = 0.33;
  int folds = 5;
  FoldMode fold_mode = FoldMode::frame;
  double threshold = 0.5;
  double dice_smooth = 1.0;
  PhantomConfig synthetic;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const HyperParams& hp) {
  return {{"learning_rate", hp.learning_rate}, {"batch_size", hp.batch_size}, {"max_epochs", hp.max_epochs},
          {"early_stop_patience", hp.early_stop_patience}, {"seed", hp.seed}};
}

inline HyperParams hyper_params_from_json(const nlohmann::json& j, std::uint64_t default_seed) {
  HyperParams hp;
  hp.learning_rate = j.value("learning_rate", hp.learning_rate);
  hp.batch_size = j.value("batch_size", hp.batch_size);
  hp.max_epochs = j.value("max_epochs", hp.max_epochs);
  hp.early_stop_patience = j.value("early_stop_patience", hp.early_stop_patience);
  hp.seed = j.value("seed", default_seed);
  hp.validate();
  return hp;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& hp : c.grid) grid.push_back(to_json(hp));
  const auto& p = c.preprocessing;
  const auto& a = c.augmentation;
  const auto& s = c.synthetic;
  return {
      {"schema_version", kConfigSchemaVersion},
      {"paths", {{"data", c.data_dir}, {"output", c.output_dir}}},
      {"preprocessing",
       {{"canny_low", p.canny_low}, {"canny_high", p.canny_high}, {"min_axis_fraction", p.min_axis_fraction},
        {"target_size", p.target_size}, {"color_mode", to_string(p.color_mode)},
        {"max_hough_points", p.max_hough_points}, {"hough_seed", p.hough_seed}}},
      {"augmentation",
       {{"rotations", a.rotations}, {"horizontal_flip", a.horizontal_flip}, {"vertical_flip", a.vertical_flip},
        {"zoom_range", a.zoom_range}, {"seed", a.seed},
        {"mode", c.augmentation_mode == AugmentationMode::online ? "online" : "offline"}}},
      {"network", to_json(c.network)},
      {"grid", grid},
      {"split",
       {{"test_patients", c.test_patients}, {"val_fraction", c.val_fraction}, {"folds", c.folds},
        {"fold_mode", c.fold_mode == FoldMode::frame ? "frame" : "video"}}},
      {"evaluation", {{"threshold", c.threshold}}},
      {"loss", {{"dice_smooth", c.dice_smooth}}},
      {"synthetic",
       {{"n_frames", s.n_frames}, {"image_size", s.image_size}, {"lumen_axis_min", s.lumen_axis_min},
        {"lumen_axis_max", s.lumen_axis_max}, {"vignette_radius_min", s.vignette_radius_min},
        {"vignette_radius_max", s.vignette_radius_max}, {"noise_amplitude", s.noise_amplitude},
        {"n_videos", s.n_videos}, {"seed", s.seed}}},
      {"seed", c.seed},
  };
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (j.value("schema_version", 0) != kConfigSchemaVersion) {
    throw ConfigError("config schema_version must be " + std::to_string(kConfigSchemaVersion));
  }
  static const std::set<std::string> sections = {"schema_version", "paths", "preprocessing", "augmentation",
                                                 "network", "grid", "split", "evaluation", "loss",
                                                 "synthetic", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!sections.contains(key)) throw ConfigError("unknown config section '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("paths")) {
      c.data_dir = j["paths"].value("data", c.data_dir);
      c.output_dir = j["paths"].value("output", c.output_dir);
    }
    if (j.contains("preprocessing")) {
      const auto& p = j["preprocessing"];
      auto& d = c.preprocessing;
      d.canny_low = p.value("canny_low", d.canny_low);
      d.canny_high = p.value("canny_high", d.canny_high);
      d.min_axis_fraction = p.value("min_axis_fraction", d.min_axis_fraction);
      d.target_size = p.value("target_size", d.target_size);
      d.color_mode = color_mode_from_string(p.value("color_mode", to_string(d.color_mode)));
      d.max_hough_points = p.value("max_hough_points", d.max_hough_points);
      d.hough_seed = p.value("hough_seed", d.hough_seed);
    }
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      auto& d = c.augmentation;
      d.rotations = a.value("rotations", d.rotations);
      d.horizontal_flip = a.value("horizontal_flip", d.horizontal_flip);
      d.vertical_flip = a.value("vertical_flip", d.vertical_flip);
      d.zoom_range = a.value("zoom_range", d.zoom_range);
      d.seed = a.value("seed", c.seed);
      const auto mode = a.value("mode", std::string("online"));
      if (mode != "online" && mode != "offline") throw ConfigError("augmentation.mode must be online or offline");
      c.augmentation_mode = mode == "online" ? AugmentationMode::online : AugmentationMode::offline;
    } else {
      c.augmentation.seed = c.seed;
    }
    c.network.in_channels = channels_of(c.preprocessing.color_mode);
    c.network.input_size = c.preprocessing.target_size;
    if (j.contains("network")) {
      auto net = j["network"];
      if (!net.contains("in_channels")) net["in_channels"] = c.network.in_channels;
      if (!net.contains("input_size")) net["input_size"] = c.network.input_size;
      c.network = network_spec_from_json(net);
    }
    if (c.network.in_channels != channels_of(c.preprocessing.color_mode)) {
      throw ConfigError("network.in_channels does not match preprocessing.color_mode");
    }
    if (j.contains("grid")) {
      c.grid.clear();
      for (const auto& hp : j["grid"]) c.grid.push_back(hyper_params_from_json(hp, c.seed));
    } else {
      for (auto& hp : c.grid) hp.seed = c.seed;
    }
    if (c.grid.empty()) throw ConfigError("grid must list at least one combination");
    if (j.contains("split")) {
      const auto& s = j["split"];
      c.test_patients = s.value("test_patients", c.test_patients);
      c.val_fraction = s.value("val_fraction", c.val_fraction);
      c.folds = s.value("folds", c.folds);
      c.fold_mode = fold_mode_from_string(s.value("fold_mode", std::string("frame")));
    }
    if (j.contains("evaluation")) c.threshold = j["evaluation"].value("threshold", c.threshold);
    if (j.contains("loss")) c.dice_smooth = j["loss"].value("dice_smooth", c.dice_smooth);
    if (j.contains("synthetic")) {
      const auto& s = j["synthetic"];
      auto& d = c.synthetic;
      d.n_frames = s.value("n_frames", d.n_frames);
      d.image_size = s.value("image_size", d.image_size);
      d.lumen_axis_min = s.value("lumen_axis_min", d.lumen_axis_min);
      d.lumen_axis_max = s.value("lumen_axis_max", d.lumen_axis_max);
      d.vignette_radius_min = s.value("vignette_radius_min", d.vignette_radius_min);
      d.vignette_radius_max = s.value("vignette_radius_max", d.vignette_radius_max);
      d.noise_amplitude = s.value("noise_amplitude", d.noise_amplitude);
      d.n_videos = s.value("n_videos", d.n_videos);
      d.seed = s.value("seed", c.seed);
    } else {
      c.synthetic.seed = c.seed;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const SpecError& e) {
    throw ConfigError(e.what());
  }
  c.preprocessing.validate();
  c.augmentation.validate();
  c.synthetic.validate();
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("evaluation.threshold must lie in (0, 1)");
  if (c.folds < 2) throw ConfigError("split.folds must be at least 2");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// The config minus its "paths" section: what determines results.
inline nlohmann::json experiment_json(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("paths");
  return j;
}

// FNV-1a over the canonical (key-sorted) JSON form of experiment_json().
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string text = experiment_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lumenseg

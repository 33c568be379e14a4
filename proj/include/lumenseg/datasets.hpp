#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "io.hpp"
#include "preprocessing.hpp"
#include "sample.hpp"

namespace lumenseg {

namespace fs = std::filesystem;

// Manifest file: line-delimited JSON, UTF-8, one object per line, blank lines ignored.
//   header (optional, first line):
//     {"format":"lumenseg-manifest","version":1,"color_mode":"rgb"|"grayscale",
//      "patients":[1,2,...]}            <- "patients" optional; restricts valid ids
//   entry:
//     {"image":"<path>","mask":"<path>","video":"<id>","patient":<int>,"frame":<int>}
// Relative paths resolve against the manifest's directory. "frame" is optional.
inline constexpr const char* kManifestFormat = "lumenseg-manifest";
inline constexpr int kManifestVersion = 1;

struct ManifestEntry {
  std::string image;
  std::string mask;
  std::string video_id;
  int patient_id = 0;
  int frame_index = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  ColorMode color_mode = ColorMode::rgb;
  fs::path base_dir;
  std::vector<std::string> warnings;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  // Frame count per video, in order of first appearance.
  std::vector<std::pair<std::string, std::size_t>> video_counts() const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& e : entries) {
      auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == e.video_id; });
      if (it == out.end()) {
        out.emplace_back(e.video_id, 1);
      } else {
        ++it->second;
      }
    }
    return out;
  }

  std::set<int> patients() const {
    std::set<int> out;
    for (const auto& e : entries) out.insert(e.patient_id);
    return out;
  }
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  return {{"image", e.image}, {"mask", e.mask}, {"video", e.video_id}, {"patient", e.patient_id},
          {"frame", e.frame_index}};
}

inline void save_manifest(const fs::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  nlohmann::json header = {{"format", kManifestFormat}, {"version", kManifestVersion},
                           {"color_mode", to_string(m.color_mode)}};
  out << header.dump() << '\n';
  for (const auto& e : m.entries) out << to_json(e).dump() << '\n';
}

struct ManifestLoadOptions {
  // Open every image/mask pair and compare extents.
  bool check_files = true;
};

// Parses and validates a manifest. All problems are collected and reported in one DataError.
inline DatasetManifest load_manifest(const fs::path& path, const ManifestLoadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::optional<std::set<int>> known_patients;
  std::vector<std::string> problems;
  std::string line;
  int lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      problems.push_back("line " + std::to_string(lineno) + ": unparsable JSON");
      first = false;
      continue;
    }
    if (first && j.contains("format")) {
      first = false;
      if (j.value("format", "") != kManifestFormat) throw DataError("not a lumenseg manifest: " + path.string());
      if (j.value("version", 0) != kManifestVersion) {
        throw DataError("unsupported manifest version in " + path.string());
      }
      if (j.contains("color_mode")) m.color_mode = color_mode_from_string(j["color_mode"].get<std::string>());
      if (j.contains("patients")) known_patients = j["patients"].get<std::set<int>>();
      continue;
    }
    first = false;
    ManifestEntry e;
    const std::string where = "line " + std::to_string(lineno);
    e.image = j.value("image", "");
    e.mask = j.value("mask", "");
    const std::string label = where + " (" + (e.image.empty() ? "?" : e.image) + ")";
    if (e.image.empty()) problems.push_back(label + ": missing image path");
    if (e.mask.empty()) problems.push_back(label + ": missing mask");
    if (j.contains("video") && j["video"].is_string()) e.video_id = j["video"].get<std::string>();
    if (j.contains("video") && j["video"].is_number_integer()) e.video_id = std::to_string(j["video"].get<int>());
    if (e.video_id.empty()) problems.push_back(label + ": missing video id");
    if (j.contains("patient") && j["patient"].is_number_integer()) e.patient_id = j["patient"].get<int>();
    if (e.patient_id <= 0 || (known_patients && !known_patients->contains(e.patient_id))) {
      problems.push_back(label + ": unknown patient id");
    }
    e.frame_index = j.value("frame", 0);
    if (options.check_files && !e.image.empty() && !e.mask.empty()) {
      const auto ip = m.resolve(e.image), mp = m.resolve(e.mask);
      if (!fs::exists(ip)) {
        problems.push_back(label + ": image file not found");
      } else if (!fs::exists(mp)) {
        problems.push_back(label + ": missing mask file " + e.mask);
      } else {
        try {
          const auto img = io::read_rgb(ip);
          const auto msk = io::read_mask(mp);
          if (img.rows() != msk.rows() || img.cols() != msk.cols()) {
            problems.push_back(label + ": shape mismatch between image and mask");
          }
        } catch (const IoError& err) {
          problems.push_back(label + ": " + err.what());
        }
      }
    }
    m.entries.push_back(std::move(e));
  }
  if (!problems.empty()) {
    std::ostringstream msg;
    msg << "manifest " << path.string() << " has " << problems.size() << " error(s):";
    for (const auto& p : problems) msg << "\n  " << p;
    throw DataError(msg.str());
  }
  if (m.entries.empty()) m.warnings.push_back("manifest " + path.string() + " is empty");
  return m;
}

inline Sample load_sample(const DatasetManifest& m, std::size_t index, ColorMode mode) {
  const auto& e = m.entries.at(index);
  Sample s;
  s.id = e.image;
  auto rgb = io::read_rgb(m.resolve(e.image));
  s.image = mode == ColorMode::grayscale ? to_grayscale(rgb) : std::move(rgb);
  s.mask = io::read_mask(m.resolve(e.mask));
  require_same_extent(s.image, s.mask, e.image);
  s.video_id = e.video_id;
  s.patient_id = e.patient_id;
  s.frame_index = e.frame_index;
  return s;
}

inline std::vector<Sample> load_samples(const DatasetManifest& m, ColorMode mode,
                                        const std::vector<std::size_t>& indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(load_sample(m, i, mode));
  return out;
}

inline std::vector<Sample> load_samples(const DatasetManifest& m, ColorMode mode) {
  std::vector<std::size_t> all(m.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return load_samples(m, mode, all);
}

// Disjoint index sets into a manifest.
struct SplitAssignment {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  void validate() const {
    std::set<std::size_t> seen;
    for (const auto* part : {&train, &val, &test}) {
      for (auto i : *part) {
        if (!seen.insert(i).second) throw DataError("split sets overlap at entry " + std::to_string(i));
      }
    }
  }

  bool operator==(const SplitAssignment&) const = default;
};

namespace detail {

template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  // Fisher-Yates with raw engine output so the order does not depend on the library's
  // distribution implementation.
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

inline std::vector<std::size_t> indices_where(const DatasetManifest& m, auto pred) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (pred(m.entries[i])) out.push_back(i);
  }
  return out;
}

}  // namespace detail

// Test = every frame of `test_patients`; the rest is split train/val per video.
inline SplitAssignment make_holdout_split(const DatasetManifest& m, const std::set<int>& test_patients,
                                          double val_fraction, std::uint64_t seed) {
  if (test_patients.empty()) throw DataError("holdout split needs at least one test patient");
  const auto present = m.patients();
  for (int p : test_patients) {
    if (!present.contains(p)) throw DataError("test patient " + std::to_string(p) + " not in manifest");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw DataError("val_fraction must lie in [0, 1)");
  SplitAssignment split;
  split.test = detail::indices_where(m, [&](const auto& e) { return test_patients.contains(e.patient_id); });
  if (split.test.size() == m.size()) throw DataError("test patients cover the whole dataset");
  std::mt19937_64 rng(seed);
  for (const auto& [video, count] : m.video_counts()) {
    auto idx = detail::indices_where(m, [&](const auto& e) {
      return e.video_id == video && !test_patients.contains(e.patient_id);
    });
    if (idx.empty()) continue;
    detail::seeded_shuffle(idx, rng);
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(idx.size())));
    split.val.insert(split.val.end(), idx.begin(), idx.begin() + n_val);
    split.train.insert(split.train.end(), idx.begin() + n_val, idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

enum class FoldMode { frame, video };

inline FoldMode fold_mode_from_string(const std::string& s) {
  if (s == "frame") return FoldMode::frame;
  if (s == "video") return FoldMode::video;
  throw ConfigError("unknown fold mode '" + s + "'");
}

// k assignments whose validation sets partition the eligible frames. Frames of
// `exclude_patients` form every fold's test set and never enter train/val.
inline std::vector<SplitAssignment> make_kfold(const DatasetManifest& m, int k, FoldMode mode,
                                               std::uint64_t seed,
                                               const std::set<int>& exclude_patients = {}) {
  if (k < 2) throw DataError("k-fold needs k >= 2");
  const auto eligible = [&](const ManifestEntry& e) { return !exclude_patients.contains(e.patient_id); };
  std::vector<std::vector<std::size_t>> units;
  if (mode == FoldMode::frame) {
    for (auto i : detail::indices_where(m, eligible)) units.push_back({i});
  } else {
    for (const auto& [video, count] : m.video_counts()) {
      auto idx = detail::indices_where(m, [&](const auto& e) { return e.video_id == video && eligible(e); });
      if (!idx.empty()) units.push_back(std::move(idx));
    }
  }
  if (static_cast<std::size_t>(k) > units.size()) {
    throw DataError("k = " + std::to_string(k) + " exceeds the " + std::to_string(units.size()) +
                    " available " + (mode == FoldMode::frame ? "frames" : "videos"));
  }
  std::mt19937_64 rng(seed);
  detail::seeded_shuffle(units, rng);
  const auto test = detail::indices_where(m, [&](const auto& e) { return !eligible(e); });
  std::vector<SplitAssignment> folds(k);
  for (int f = 0; f < k; ++f) {
    folds[f].test = test;
    for (std::size_t u = 0; u < units.size(); ++u) {
      auto& dst = static_cast<int>(u % k) == f ? folds[f].val : folds[f].train;
      dst.insert(dst.end(), units[u].begin(), units[u].end());
    }
    std::sort(folds[f].train.begin(), folds[f].train.end());
    std::sort(folds[f].val.begin(), folds[f].val.end());
  }
  return folds;
}

// Synthetic stand-in for endoscopic frames: a dark, smoothly shaded elliptical lumen
// inside a bright vignetted circular field of view on a textured background.
struct PhantomConfig {
  int n_frames = 20;
  int image_size = 256;
  double lumen_axis_min = 0.08;  // semi-axis range as a fraction of image_size
  double lumen_axis_max = 0.20;
  double vignette_radius_min = 0.40;  // FOV radius range as a fraction of image_size
  double vignette_radius_max = 0.48;
  double noise_amplitude = 12.0;  // 8-bit intensity units
  int n_videos = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_frames < 0) throw ConfigError("n_frames must be non-negative");
    if (image_size < 64) throw ConfigError("image_size must be at least 64");
    if (!(0 < lumen_axis_min && lumen_axis_min <= lumen_axis_max)) throw ConfigError("bad lumen axis range");
    if (!(0 < vignette_radius_min && vignette_radius_min <= vignette_radius_max &&
          vignette_radius_max <= 0.5)) {
      throw ConfigError("vignette radius range must be nonempty and within the frame");
    }
    if (lumen_axis_max + 0.02 >= vignette_radius_min) {
      throw ConfigError("lumen axis range must fit inside the field of view");
    }
    if (noise_amplitude < 0) throw ConfigError("noise_amplitude must be non-negative");
    if (n_videos < 1) throw ConfigError("n_videos must be positive");
  }
};

struct PhantomTruth {
  double fov_row = 0, fov_col = 0, fov_radius = 0;
  double lumen_row = 0, lumen_col = 0, lumen_a = 0, lumen_b = 0, lumen_theta = 0;
};

namespace detail {

inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

}  // namespace detail

inline std::pair<Sample, PhantomTruth> generate_phantom(const PhantomConfig& config, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x9e3779b9u};
  std::mt19937_64 rng(seq);
  using detail::uniform;
  const int n = config.image_size;
  PhantomTruth t;
  t.fov_radius = uniform(rng, config.vignette_radius_min, config.vignette_radius_max) * n;
  const double slack = std::max(0.0, 0.5 * n - t.fov_radius - 1.0);
  t.fov_row = (n - 1) / 2.0 + uniform(rng, -slack, slack);
  t.fov_col = (n - 1) / 2.0 + uniform(rng, -slack, slack);
  t.lumen_a = uniform(rng, config.lumen_axis_min, config.lumen_axis_max) * n;
  t.lumen_b = uniform(rng, config.lumen_axis_min, t.lumen_a / n) * n;
  t.lumen_theta = uniform(rng, 0.0, std::numbers::pi);
  const double reach = std::max(0.0, t.fov_radius - t.lumen_a - 0.02 * n);
  const double rho = reach * std::sqrt(detail::unit(rng));
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  t.lumen_row = t.fov_row + rho * std::sin(phi);
  t.lumen_col = t.fov_col + rho * std::cos(phi);

  // Tissue tint and a few low-frequency folds.
  const double base[3] = {uniform(rng, 170, 230), uniform(rng, 90, 140), uniform(rng, 80, 120)};
  double wave[3][4];
  for (auto& w : wave) {
    w[0] = uniform(rng, 0.02, 0.08);
    w[1] = uniform(rng, 0.0, 2 * std::numbers::pi);
    w[2] = uniform(rng, 0.0, std::numbers::pi);
    w[3] = uniform(rng, 4.0, 12.0);
  }

  Sample s;
  s.id = "phantom_" + std::to_string(index);
  s.image = Image8(n, n, 3);
  s.mask = Mask(n, n, 1);
  const int video = index % config.n_videos;
  s.video_id = "video" + std::to_string(video + 1);
  s.patient_id = video + 1;
  s.frame_index = index;
  const double ct = std::cos(t.lumen_theta), st = std::sin(t.lumen_theta);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double noise = config.noise_amplitude * (2.0 * detail::unit(rng) - 1.0);
      const double fr = std::hypot(r - t.fov_row, c - t.fov_col) / t.fov_radius;
      if (fr > 1.0) {
        const auto v = static_cast<std::uint8_t>(std::clamp(6.0 + 0.3 * noise, 0.0, 255.0));
        for (int ch = 0; ch < 3; ++ch) s.image.at(r, c, ch) = v;
        continue;
      }
      double shade = 1.0 - 0.35 * fr * fr;
      for (const auto& w : wave) {
        shade += w[3] / 100.0 * std::sin(w[0] * (r * std::cos(w[2]) + c * std::sin(w[2])) + w[1]);
      }
      const double dr = r - t.lumen_row, dc = c - t.lumen_col;
      const double u = (dc * ct + dr * st) / t.lumen_a, v = (-dc * st + dr * ct) / t.lumen_b;
      const double e2 = u * u + v * v;
      if (e2 <= 1.0) {
        s.mask.at(r, c) = 1;
        shade *= 0.12 + 0.33 * e2;
      }
      for (int ch = 0; ch < 3; ++ch) {
        s.image.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(base[ch] * shade + noise), 0L, 255L));
      }
    }
  }
  return {std::move(s), t};
}

inline std::vector<Sample> generate_phantoms(const PhantomConfig& config) {
  config.validate();
  std::vector<Sample> out;
  out.reserve(config.n_frames);
  for (int i = 0; i < config.n_frames; ++i) out.push_back(generate_phantom(config, i).first);
  return out;
}

// Writes images/<id>.png, masks/<id>.png and manifest.jsonl under `dir`.
inline DatasetManifest write_dataset(const fs::path& dir, const std::vector<Sample>& samples,
                                     ColorMode color_mode = ColorMode::rgb) {
  DatasetManifest m;
  m.base_dir = dir;
  m.color_mode = color_mode;
  for (const auto& s : samples) {
    ManifestEntry e{"images/" + s.id + ".png", "masks/" + s.id + ".png", s.video_id, s.patient_id,
                    s.frame_index};
    io::write_image(dir / e.image, s.image);
    io::write_mask(dir / e.mask, s.mask);
    m.entries.push_back(std::move(e));
  }
  save_manifest(dir / "manifest.jsonl", m);
  return m;
}

}  // namespace lumenseg

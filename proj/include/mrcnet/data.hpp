#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrcnet/metrics.hpp"
#include "mrcnet/rng.hpp"
#include "mrcnet/tensor.hpp"

namespace mrc {

inline const std::vector<std::string> kDefaultClasses{"short", "open", "circle"};

struct Annotation {
  std::string class_name;
  Box box;  // pixel coordinates, x2/y2 exclusive
};

struct ImageRecord {
  std::string image;  // path relative to the manifest
  i64 width = 0;
  i64 height = 0;
  std::string split;  // "train" or "val"
  std::vector<Annotation> annotations;
};

struct DatasetManifest {
  std::vector<std::string> classes = kDefaultClasses;
  u64 seed = 0;
  i64 image_size = 64;
  std::vector<ImageRecord> records;

  int class_id(const std::string& name) const {
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == name) return static_cast<int>(i);
    return -1;
  }
};

struct GenConfig {
  i64 count = 800;
  i64 image_size = 64;
  u64 seed = 0;
  double train_frac = 0.8;
  // probability an image carries each class, and the mean instances per
  // carrying image; defaults follow the reference per-class ratios
  std::array<double, 3> class_image_freq{541.0 / 800.0, 660.0 / 800.0, 228.0 / 800.0};
  std::array<double, 3> defects_per_image{1867.0 / 541.0, 1926.0 / 660.0,
                                          571.0 / 228.0};
  i64 max_defects_per_class = 6;

  void validate() const {
    if (count < 0) throw ConfigError("GenConfig: negative image count");
    if (image_size < 32) throw ConfigError("GenConfig: image size must be >= 32");
    for (double f : class_image_freq)
      if (f < 0.0 || f > 1.0) throw ConfigError("GenConfig: class frequency outside [0,1]");
    if (!(train_frac > 0.0 && train_frac < 1.0))
      throw ConfigError("GenConfig: train fraction must lie in (0,1)");
  }
};

// --- image container and PPM I/O -----------------------------------------

struct ImageU8 {
  i64 width = 0;
  i64 height = 0;
  std::vector<std::uint8_t> rgb;  // packed, row-major

  std::uint8_t* px(i64 x, i64 y) { return rgb.data() + 3 * (y * width + x); }
  const std::uint8_t* px(i64 x, i64 y) const { return rgb.data() + 3 * (y * width + x); }
};

void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  Tensor<T> t(1, 3, img.height, img.width);
  for (i64 y = 0; y < img.height; ++y)
    for (i64 x = 0; x < img.width; ++x) {
      const std::uint8_t* p = img.px(x, y);
      for (i64 c = 0; c < 3; ++c)
        t.at(0, c, y, x) = static_cast<T>(p[c]) / T(255);
    }
  return t;
}

// --- generation, manifest I/O, splitting -----------------------------------

// Renders the images into out_dir and returns the manifest (also written to
// out_dir/manifest.jsonl). Deterministic per seed; image i draws from an rng
// seeded by derive_seed(seed, i).
DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& out_dir);

void save_manifest(const DatasetManifest& m, const std::string& path);

// Parses and validates; diagnostics carry the 1-based line number. Image
// existence is checked relative to the manifest's directory.
DatasetManifest load_manifest(const std::string& path);

// Seeded shuffle, prefix cut. Round-half-up on the train count.
std::pair<DatasetManifest, DatasetManifest> split_manifest(const DatasetManifest& m,
                                                           double train_frac, u64 seed);

// --- training-side view -------------------------------------------------

template <typename T>
struct LoadedSample {
  Tensor<T> image;  // [1,3,H,W], scaled to [0,1]
  std::vector<GroundTruthBox> boxes;
  bool is_train = false;
};

template <typename T>
std::vector<LoadedSample<T>> load_samples(const DatasetManifest& m,
                                          const std::string& dir) {
  std::vector<LoadedSample<T>> out;
  out.reserve(m.records.size());
  for (const ImageRecord& r : m.records) {
    LoadedSample<T> s;
    s.image = image_to_tensor<T>(read_ppm(dir + "/" + r.image));
    s.is_train = (r.split == "train");
    for (const Annotation& a : r.annotations) {
      const int cid = m.class_id(a.class_name);
      if (cid < 0) throw IoError("unknown class '" + a.class_name + "' in manifest");
      s.boxes.push_back({a.box, cid});
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mrc

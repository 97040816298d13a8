#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tscnet/common.hpp"

namespace tscnet {

/// Exponentially decaying per-class training counts, counts[0] == n_max.
struct ImbalanceProfile {
  int class_count = 0;
  int n_max = 0;
  double ratio = 1.0;
  std::vector<int> counts;

  int total() const;
  bool operator==(const ImbalanceProfile&) const = default;
};

ImbalanceProfile build_imbalance_profile(int class_count, int n_max, double ratio);

enum class Split { head, mid, tail };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
  Image image;
  int label = 0;
  std::optional<Mask> mask;  // absent for ingested data
  int background_id = -1;    // texture family, -1 if unknown
  bool validation = false;   // member of the held-out stratified validation slice
  bool operator==(const Sample&) const = default;
};

struct LongTailDataset {
  std::vector<Sample> train;  // includes the validation slice, flagged per sample
  std::vector<Sample> test;   // balanced
  ImbalanceProfile profile;
  std::vector<Split> splits;          // per class
  std::vector<int> similarity_group;  // per class; generator shape family
  uint64_t seed = 0;
  int image_size = 0;
  int channels = 0;
  int texture_count = 0;
  double confound_strength = 0.0;

  int class_count() const { return profile.class_count; }
  std::vector<int> train_counts() const;  // all train samples per class, validation included
  std::vector<size_t> fit_indices() const;         // train samples not in the validation slice
  std::vector<size_t> validation_indices() const;
  bool operator==(const LongTailDataset&) const = default;
};

struct SyntheticOptions {
  double confound_strength = 0.9;  // probability a training image uses its class texture
  uint64_t seed = 0;
  int image_size = 32;
  int channels = 3;
  int texture_count = 10;
  int test_per_class = 100;
  double validation_fraction = 0.1;
  double head_fraction = 1.0 / 3.0;
  double tail_fraction = 1.0 / 3.0;
};

/// Maximum classes the shape generator can render distinctly.
int max_synthetic_classes();
/// Shape family of a synthetic class (classes sharing a family are "similar").
int synthetic_shape_family(int label);

/// Renders the foreground shape of `label` into a mask and colour, driven by
/// the shape stream only.
struct RenderedShape {
  Mask mask;
  double color[3];
};
RenderedShape render_shape(int label, int image_size, Rng& shape_rng);
/// Fills a background texture of family `texture_id`, driven by its own stream.
Image render_texture(int texture_id, int image_size, int channels, Rng& texture_rng);
/// Composites a rendered shape over a background, quantised to 8 bits.
Image composite(const Image& background, const RenderedShape& shape);

/// Renders a single synthetic sample from explicit shape and background seeds.
Sample render_sample(int label, int texture_id, int image_size, int channels, uint64_t shape_seed,
                     uint64_t texture_seed);

LongTailDataset generate_synthetic_dataset(const ImbalanceProfile& profile, const SyntheticOptions& options);

/// Head = top ceil(head_frac*C) classes by training count, tail = bottom
/// floor(tail_frac*C), rest mid. Ties broken by ascending class id.
void assign_splits(LongTailDataset& dataset, double head_fraction, double tail_fraction);
std::vector<Split> compute_splits(const std::vector<int>& counts, double head_fraction, double tail_fraction);

// On-disk dataset directory: manifest.json + train.bin, test.bin, masks.bin.
void save_dataset(const LongTailDataset& dataset, const std::filesystem::path& dir);
LongTailDataset load_dataset(const std::filesystem::path& dir);

/// Loads an external labelled image folder described by `manifest`
/// (default: <dir>/manifest.json with an "entries" list of PGM/PPM files).
LongTailDataset ingest_image_folder(const std::filesystem::path& dir,
                                    const std::optional<std::filesystem::path>& manifest = std::nullopt);

// Binary PGM (P5) / PPM (P6) images with maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& image);

}  // namespace tscnet

#pragma once

#include <filesystem>
#include <string>

#include "tscnet/datagen.hpp"
#include "tscnet/model.hpp"

namespace testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tscnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline tscnet::Image random_image(int h, int w, int c, uint64_t seed) {
  tscnet::Rng rng(seed);
  tscnet::Image img(h, w, c);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

// Small dataset for fast end-to-end tests.
inline tscnet::LongTailDataset small_dataset(uint64_t seed = 1, int classes = 4, int n_max = 24, double ratio = 0.25,
                                             int image_size = 8) {
  tscnet::SyntheticOptions opt;
  opt.seed = seed;
  opt.image_size = image_size;
  opt.test_per_class = 6;
  return tscnet::generate_synthetic_dataset(tscnet::build_imbalance_profile(classes, n_max, ratio), opt);
}

inline tscnet::BackboneConfig tiny_backbone(int classes = 4, int image_size = 8) {
  tscnet::BackboneConfig b;
  b.image_size = image_size;
  b.patch_size = 4;
  b.channels = 3;
  b.embed_dim = 8;
  b.depth = 1;
  b.heads = 2;
  b.mlp_ratio = 2.0;
  b.class_count = classes;
  return b;
}

}  // namespace testing

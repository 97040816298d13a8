#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tscnet/datagen.hpp"

namespace tscnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kDatasetFormatVersion = 1;

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void append_images(std::vector<uint8_t>& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples)
    for (double v : s.image.pixels) out.push_back(to_byte(v));
}

std::vector<Sample> read_images(const std::vector<uint8_t>& blob, size_t count, int size, int channels,
                                const std::string& name) {
  const size_t per = static_cast<size_t>(size) * size * channels;
  if (blob.size() != per * count)
    throw IngestionError(name + ": expected " + std::to_string(per * count) + " bytes, found " +
                         std::to_string(blob.size()));
  std::vector<Sample> out(count);
  for (size_t i = 0; i < count; ++i) {
    out[i].image = Image(size, size, channels);
    for (size_t k = 0; k < per; ++k) out[i].image.pixels[k] = blob[i * per + k] / 255.0;
  }
  return out;
}

json::array_t split_names(const std::vector<Split>& splits) {
  json::array_t a;
  for (auto s : splits) a.emplace_back(to_string(s));
  return a;
}

}  // namespace

void save_dataset(const LongTailDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const bool has_masks =
      std::all_of(ds.train.begin(), ds.train.end(), [](const Sample& s) { return s.mask.has_value(); }) &&
      std::all_of(ds.test.begin(), ds.test.end(), [](const Sample& s) { return s.mask.has_value(); });

  json m;
  m["version"] = kDatasetFormatVersion;
  m["classes"] = ds.class_count();
  m["counts"] = ds.profile.counts;
  m["n_max"] = ds.profile.n_max;
  m["ratio"] = ds.profile.ratio;
  m["image_size"] = ds.image_size;
  m["channels"] = ds.channels;
  m["textures"] = ds.texture_count;
  m["confound_strength"] = ds.confound_strength;
  m["seed"] = ds.seed;
  m["splits"] = split_names(ds.splits);
  m["similarity_groups"] = ds.similarity_group;
  m["has_masks"] = has_masks;
  for (const auto* part : {&ds.train, &ds.test}) {
    const std::string key = part == &ds.train ? "train" : "test";
    std::vector<int> labels, backgrounds;
    for (const auto& s : *part) {
      labels.push_back(s.label);
      backgrounds.push_back(s.background_id);
    }
    m[key + "_labels"] = labels;
    m[key + "_backgrounds"] = backgrounds;
  }
  std::vector<size_t> val = ds.validation_indices();
  m["validation_indices"] = val;

  std::vector<uint8_t> train_blob, test_blob, mask_blob;
  append_images(train_blob, ds.train);
  append_images(test_blob, ds.test);
  write_binary_file(dir / "train.bin", train_blob);
  write_binary_file(dir / "test.bin", test_blob);
  if (has_masks) {
    for (const auto* part : {&ds.train, &ds.test})
      for (const auto& s : *part) mask_blob.insert(mask_blob.end(), s.mask->bits.begin(), s.mask->bits.end());
    write_binary_file(dir / "masks.bin", mask_blob);
  }
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

LongTailDataset load_dataset(const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IngestionError("manifest.json: " + std::string(e.what()));
  }
  if (m.value("version", 0) != kDatasetFormatVersion)
    throw IngestionError("manifest.json: unsupported dataset format version");

  LongTailDataset ds;
  try {
    const int C = m.at("classes").get<int>();
    ds.profile.class_count = C;
    ds.profile.counts = m.at("counts").get<std::vector<int>>();
    ds.profile.n_max = m.at("n_max").get<int>();
    ds.profile.ratio = m.at("ratio").get<double>();
    ds.image_size = m.at("image_size").get<int>();
    ds.channels = m.at("channels").get<int>();
    ds.texture_count = m.value("textures", 0);
    ds.confound_strength = m.value("confound_strength", 0.0);
    ds.seed = m.at("seed").get<uint64_t>();
    for (const auto& s : m.at("splits")) ds.splits.push_back(split_from_string(s.get<std::string>()));
    ds.similarity_group = m.at("similarity_groups").get<std::vector<int>>();

    const auto train_labels = m.at("train_labels").get<std::vector<int>>();
    const auto test_labels = m.at("test_labels").get<std::vector<int>>();
    const auto train_bg = m.at("train_backgrounds").get<std::vector<int>>();
    const auto test_bg = m.at("test_backgrounds").get<std::vector<int>>();
    ds.train = read_images(read_binary_file(dir / "train.bin"), train_labels.size(), ds.image_size, ds.channels,
                           "train.bin");
    ds.test = read_images(read_binary_file(dir / "test.bin"), test_labels.size(), ds.image_size, ds.channels,
                          "test.bin");
    for (size_t i = 0; i < ds.train.size(); ++i) {
      ds.train[i].label = train_labels[i];
      ds.train[i].background_id = train_bg.at(i);
    }
    for (size_t i = 0; i < ds.test.size(); ++i) {
      ds.test[i].label = test_labels[i];
      ds.test[i].background_id = test_bg.at(i);
    }
    for (auto i : m.at("validation_indices").get<std::vector<size_t>>()) ds.train.at(i).validation = true;
    for (const auto* part : {&ds.train, &ds.test})
      for (const auto& s : *part)
        if (s.label < 0 || s.label >= C) throw IngestionError("label outside [0, C) in manifest.json");

    if (m.value("has_masks", false)) {
      const auto blob = read_binary_file(dir / "masks.bin");
      const size_t per = static_cast<size_t>(ds.image_size) * ds.image_size;
      if (blob.size() != per * (ds.train.size() + ds.test.size()))
        throw IngestionError("masks.bin: size does not match sample count");
      size_t k = 0;
      for (auto* part : {&ds.train, &ds.test})
        for (auto& s : *part) {
          Mask mask(ds.image_size, ds.image_size);
          std::copy(blob.begin() + k * per, blob.begin() + (k + 1) * per, mask.bits.begin());
          s.mask = std::move(mask);
          ++k;
        }
    }
  } catch (const json::exception& e) {
    throw IngestionError("manifest.json: " + std::string(e.what()));
  } catch (const IoError& e) {
    throw IngestionError(e.what());
  }
  return ds;
}

Image read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  int channels = 0;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw IngestionError(path.string() + ": not a binary PGM/PPM file");
  auto next_int = [&] {
    int v = 0;
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
    if (!(in >> v)) throw IngestionError(path.string() + ": malformed header");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw IngestionError(path.string() + ": only 8-bit images are supported");
  in.get();
  Image img(h, w, channels);
  std::vector<unsigned char> raw(img.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IngestionError(path.string() + ": truncated");
  for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
  return img;
}

void write_pnm(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ParameterError("write_pnm: channels must be 1 or 3");
  std::ostringstream out;
  out << (image.channels == 1 ? "P5" : "P6") << "\n" << image.width << " " << image.height << "\n255\n";
  std::string header = out.str();
  std::vector<uint8_t> bytes(header.begin(), header.end());
  for (double v : image.pixels) bytes.push_back(to_byte(v));
  write_binary_file(path, bytes);
}

LongTailDataset ingest_image_folder(const fs::path& dir, const std::optional<fs::path>& manifest_path) {
  const fs::path mp = manifest_path.value_or(dir / "manifest.json");
  json m;
  try {
    m = json::parse(read_text_file(mp));
  } catch (const json::exception& e) {
    throw IngestionError(mp.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw IngestionError(e.what());
  }

  LongTailDataset ds;
  try {
    const int C = m.value("classes", 0);
    ds.image_size = m.at("image_size").get<int>();
    ds.channels = m.at("channels").get<int>();
    ds.seed = m.value("seed", uint64_t{0});
    const json entries = m.value("entries", json::array());
    for (size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const std::string file = e.at("file").get<std::string>();
      const std::string where = "entry " + std::to_string(i) + " (" + file + ")";
      const int label = e.at("label").get<int>();
      if (label < 0 || label >= C) throw IngestionError(where + ": label outside [0, " + std::to_string(C) + ")");
      Image img;
      try {
        img = read_pnm(dir / file);
      } catch (const Error& err) {
        throw IngestionError(where + ": " + err.what());
      }
      if (img.height != ds.image_size || img.width != ds.image_size || img.channels != ds.channels)
        throw IngestionError(where + ": image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             "x" + std::to_string(img.channels) + ", expected " + std::to_string(ds.image_size) +
                             "x" + std::to_string(ds.image_size) + "x" + std::to_string(ds.channels));
      Sample s;
      s.image = std::move(img);
      s.label = label;
      const std::string split = e.value("split", std::string("train"));
      if (split == "train")
        ds.train.push_back(std::move(s));
      else if (split == "test")
        ds.test.push_back(std::move(s));
      else
        throw IngestionError(where + ": split must be 'train' or 'test'");
    }

    ds.profile.class_count = C;
    ds.profile.counts = ds.train_counts();
    ds.profile.n_max = ds.profile.counts.empty() ? 0
                                                 : *std::max_element(ds.profile.counts.begin(), ds.profile.counts.end());
    const int n_min =
        ds.profile.counts.empty() ? 0 : *std::min_element(ds.profile.counts.begin(), ds.profile.counts.end());
    ds.profile.ratio = ds.profile.n_max > 0 ? static_cast<double>(n_min) / ds.profile.n_max : 1.0;
    if (m.contains("similarity_groups")) {
      ds.similarity_group = m["similarity_groups"].get<std::vector<int>>();
      if (static_cast<int>(ds.similarity_group.size()) != C)
        throw IngestionError("similarity_groups must list one group per class");
    } else {
      ds.similarity_group.resize(C);
      std::iota(ds.similarity_group.begin(), ds.similarity_group.end(), 0);
    }

    // Stratified validation slice, same rule as the generator.
    const double val_frac = m.value("validation_fraction", 0.1);
    for (int c = 0; c < C; ++c) {
      std::vector<size_t> members;
      for (size_t i = 0; i < ds.train.size(); ++i)
        if (ds.train[i].label == c) members.push_back(i);
      const int n = static_cast<int>(members.size());
      int n_val = static_cast<int>(std::lround(val_frac * n));
      if (val_frac > 0.0 && n >= 2) n_val = std::max(n_val, 1);
      n_val = std::max(0, std::min(n_val, n - 1));
      Rng rng(derive_seed(ds.seed, 7, c));
      rng.shuffle(members.begin(), members.end());
      for (int k = 0; k < n_val; ++k) ds.train[members[k]].validation = true;
    }
    ds.splits = compute_splits(ds.profile.counts, m.value("head_fraction", 1.0 / 3.0),
                               m.value("tail_fraction", 1.0 / 3.0));
  } catch (const json::exception& e) {
    throw IngestionError(mp.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace tscnet

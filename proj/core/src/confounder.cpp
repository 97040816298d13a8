#include "tscnet/confounder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace tscnet {

namespace fs = std::filesystem;
using nlohmann::json;

ConfounderImage extract_confounder(const Image& image, const Mask& foreground, int source_sample_id) {
  if (foreground.height != image.height || foreground.width != image.width)
    throw ParameterError("extract_confounder: mask is " + std::to_string(foreground.height) + "x" +
                         std::to_string(foreground.width) + ", image is " + std::to_string(image.height) + "x" +
                         std::to_string(image.width));
  ConfounderImage out{image, source_sample_id};
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const uint8_t b = foreground.at(y, x);
      if (b > 1) throw ParameterError("extract_confounder: mask must be binary");
      if (b)
        for (int c = 0; c < image.channels; ++c) out.pixels.at(y, x, c) = 0.0;
    }
  return out;
}

Mask derive_mask_saliency(const ImageClassifier& model, const Image& image, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ParameterError("derive_mask_saliency: q must be in (0, 1)");
  if (!model.supports_input_gradient())
    throw UnsupportedModelError("derive_mask_saliency: model is not differentiable w.r.t. its input");
  const int predicted = model.predict(image);
  const Image grad = model.input_gradient(image, predicted);
  const size_t n = static_cast<size_t>(image.height) * image.width;
  std::vector<double> saliency(n, 0.0);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      double s = 0.0;
      for (int c = 0; c < image.channels; ++c) s += grad.at(y, x, c) * grad.at(y, x, c);
      saliency[static_cast<size_t>(y) * image.width + x] = std::sqrt(s);
    }
  std::vector<double> sorted = saliency;
  std::sort(sorted.begin(), sorted.end());
  const size_t k = std::clamp<size_t>(static_cast<size_t>(std::ceil(q * static_cast<double>(n))), 1, n);
  const double threshold = sorted[k - 1];
  Mask mask(image.height, image.width);
  for (size_t i = 0; i < n; ++i) mask.bits[i] = saliency[i] > threshold ? 1 : 0;
  return mask;
}

std::string to_string(MaskerKind k) { return k == MaskerKind::oracle ? "oracle" : "saliency"; }

MaskerKind masker_from_string(const std::string& s) {
  if (s == "oracle") return MaskerKind::oracle;
  if (s == "saliency") return MaskerKind::saliency;
  throw ParameterError("unknown masker: " + s);
}

bool Masker::mask_for(const Sample& sample, Mask& out) const {
  if (kind == MaskerKind::oracle) {
    if (!sample.mask) return false;
    out = *sample.mask;
    return true;
  }
  if (model == nullptr) throw ConfigurationError("saliency masker requires a model");
  out = derive_mask_saliency(*model, sample.image, threshold);
  return true;
}

ConfounderDictionary build_confounder_dictionary(const LongTailDataset& dataset, const Masker& masker,
                                                 const ConfounderOptions& options) {
  if (dataset.train.empty()) throw DataError("build_confounder_dictionary: dataset has no training samples");
  if (!(options.selection_fraction > 0.0 && options.selection_fraction <= 1.0))
    throw ParameterError("build_confounder_dictionary: selection fraction must be in (0, 1]");
  std::vector<size_t> pool = dataset.fit_indices();
  const size_t keep = std::max<size_t>(1, static_cast<size_t>(std::lround(options.selection_fraction * pool.size())));
  if (keep < pool.size()) {
    Rng rng(derive_seed(options.seed, 11));
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(keep);
    std::sort(pool.begin(), pool.end());
  }
  ConfounderDictionary dict;
  Mask mask;
  for (size_t i : pool) {
    const auto& s = dataset.train[i];
    if (!masker.mask_for(s, mask)) continue;
    dict.entries.push_back(extract_confounder(s.image, mask, static_cast<int>(i)));
  }
  if (dict.empty()) throw DataError("build_confounder_dictionary: no usable masks, dictionary would be empty");
  return dict;
}

namespace {

double squared_distance(const MatrixD& a, Eigen::Index i, const MatrixD& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Assigns every point to its nearest center (lowest index on ties); returns inertia.
double assign_points(const MatrixD& points, const MatrixD& centers, std::vector<int>& assignment,
                     std::vector<double>& dist) {
  const auto n = points.rows(), k = centers.rows();
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index c = 0; c < k; ++c) {
      const double d = squared_distance(points, i, centers, c);
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    assignment[i] = arg;
    dist[i] = best;
    inertia += best;
  }
  return inertia;
}

void reseed_empty(const MatrixD& points, const MatrixD& centers, std::vector<int>& assignment,
                  std::vector<double>& dist) {
  const auto k = centers.rows();
  std::vector<int> members(k, 0);
  for (int a : assignment) ++members[a];
  for (Eigen::Index c = 0; c < k; ++c) {
    if (members[c] > 0) continue;
    Eigen::Index far = -1;
    for (size_t i = 0; i < assignment.size(); ++i)
      if (members[assignment[i]] > 1 && (far < 0 || dist[i] > dist[far])) far = static_cast<Eigen::Index>(i);
    if (far < 0) break;
    --members[assignment[far]];
    assignment[far] = static_cast<int>(c);
    members[c] = 1;
    dist[far] = 0.0;
  }
  (void)points;
}

MatrixD cluster_means(const MatrixD& points, const std::vector<int>& assignment, const MatrixD& previous) {
  MatrixD centers = MatrixD::Zero(previous.rows(), points.cols());
  std::vector<int> members(previous.rows(), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    centers.row(assignment[i]) += points.row(i);
    ++members[assignment[i]];
  }
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    if (members[c] > 0)
      centers.row(c) /= members[c];
    else
      centers.row(c) = previous.row(c);
  }
  return centers;
}

double inertia_of(const MatrixD& points, const MatrixD& centers, const std::vector<int>& assignment) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) total += squared_distance(points, i, centers, assignment[i]);
  return total;
}

}  // namespace

KMeansResult kmeans_plus_plus(const MatrixD& points, int k, int max_iters, double tol, uint64_t seed) {
  const auto n = points.rows();
  if (k < 1) throw ParameterError("kmeans: k must be positive");
  if (k > n) throw ParameterError("kmeans: k=" + std::to_string(k) + " exceeds point count " + std::to_string(n));
  if (max_iters < 1) throw ParameterError("kmeans: max_iters must be positive");

  Rng rng(seed);
  MatrixD centers(k, points.cols());
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = rng.uniform_int(static_cast<int>(n));
  centers.row(0) = points.row(first);
  chosen[first] = true;
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points, i, centers, c - 1));
      total += d2[i];
    }
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        r -= d2[i];
        if (r < 0.0) break;
      }
    } else {
      std::vector<Eigen::Index> rest;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[rng.uniform_int(static_cast<int>(rest.size()))];
    }
    centers.row(c) = points.row(pick);
    chosen[pick] = true;
  }

  KMeansResult res;
  res.assignment.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (int it = 0; it < max_iters; ++it) {
    assign_points(points, centers, res.assignment, dist);
    reseed_empty(points, centers, res.assignment, dist);
    MatrixD updated = cluster_means(points, res.assignment, centers);
    double shift = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) shift = std::max(shift, (updated.row(c) - centers.row(c)).norm());
    centers = std::move(updated);
    res.inertia_history.push_back(inertia_of(points, centers, res.assignment));
    res.iterations = it + 1;
    if (shift < tol) break;
  }
  res.centers = std::move(centers);
  res.inertia = res.inertia_history.back();
  return res;
}

template <typename T>
MatrixD confounder_features(const ConfounderDictionary& dictionary, const VisionTransformer<T>& backbone) {
  MatrixD out(static_cast<Eigen::Index>(dictionary.size()), backbone.config().embed_dim);
  for (size_t i = 0; i < dictionary.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = backbone.feature(dictionary.entries[i].pixels).template cast<double>().transpose();
  return out;
}

template MatrixD confounder_features(const ConfounderDictionary&, const VisionTransformer<float>&);
template MatrixD confounder_features(const ConfounderDictionary&, const VisionTransformer<double>&);

PrototypeDictionary build_prototype_dictionary(const MatrixD& features, int l, int max_iters, double tol,
                                               uint64_t seed, std::string backbone_fingerprint) {
  if (l > features.rows())
    throw ParameterError("build_prototype_dictionary: l=" + std::to_string(l) + " exceeds the number of confounders (" +
                         std::to_string(features.rows()) + ")");
  auto km = kmeans_plus_plus(features, l, max_iters, tol, seed);
  PrototypeDictionary dict;
  dict.prototypes = std::move(km.centers);
  dict.cluster_assignment = std::move(km.assignment);
  dict.backbone_fingerprint = std::move(backbone_fingerprint);
  dict.seed = seed;
  return dict;
}

std::string PrototypeDictionary::fingerprint() const {
  return sha256_hex(std::span(reinterpret_cast<const uint8_t*>(prototypes.data()),
                              static_cast<size_t>(prototypes.size()) * sizeof(double)));
}

std::string to_string(DictionaryVariant v) {
  switch (v) {
    case DictionaryVariant::random: return "random";
    case DictionaryVariant::zero: return "zero";
    case DictionaryVariant::average: return "average";
    case DictionaryVariant::confounder: return "confounder";
  }
  return "?";
}

DictionaryVariant dictionary_variant_from_string(const std::string& s) {
  if (s == "random") return DictionaryVariant::random;
  if (s == "zero") return DictionaryVariant::zero;
  if (s == "average") return DictionaryVariant::average;
  if (s == "confounder") return DictionaryVariant::confounder;
  throw ParameterError("unknown dictionary variant: " + s);
}

PrototypeDictionary make_variant_dictionary(DictionaryVariant kind, const PrototypeDictionary& reference,
                                            const MatrixD& full_image_features, uint64_t seed) {
  PrototypeDictionary out = reference;
  const auto l = reference.prototypes.rows(), d = reference.prototypes.cols();
  switch (kind) {
    case DictionaryVariant::confounder: break;
    case DictionaryVariant::zero: out.prototypes.setZero(); break;
    case DictionaryVariant::random: {
      const double target = l > 0 ? reference.prototypes.rowwise().norm().mean() : 0.0;
      Rng rng(derive_seed(seed, 13));
      for (Eigen::Index r = 0; r < l; ++r) {
        for (Eigen::Index c = 0; c < d; ++c) out.prototypes(r, c) = rng.normal();
        const double norm = out.prototypes.row(r).norm();
        if (norm > 0) out.prototypes.row(r) *= target / norm;
      }
      break;
    }
    case DictionaryVariant::average: {
      if (full_image_features.rows() == 0 || full_image_features.cols() != d)
        throw ParameterError("make_variant_dictionary: average variant needs full-image features of width " +
                             std::to_string(d));
      const Eigen::RowVectorXd mean = full_image_features.colwise().mean();
      for (Eigen::Index r = 0; r < l; ++r) out.prototypes.row(r) = mean;
      break;
    }
  }
  return out;
}

void save_prototype_dictionary(const PrototypeDictionary& dict, const fs::path& stem) {
  write_matrix_blob(fs::path(stem).concat(".bin"), dict.prototypes);
  json j;
  j["l"] = dict.l();
  j["d"] = dict.d();
  j["backbone_fingerprint"] = dict.backbone_fingerprint;
  j["seed"] = dict.seed;
  j["cluster_assignment"] = dict.cluster_assignment;
  j["fingerprint"] = dict.fingerprint();
  write_text_file(fs::path(stem).concat(".json"), j.dump(2) + "\n");
}

PrototypeDictionary load_prototype_dictionary(const fs::path& stem) {
  PrototypeDictionary dict;
  try {
    const json j = json::parse(read_text_file(fs::path(stem).concat(".json")));
    dict.prototypes = read_matrix_blob(fs::path(stem).concat(".bin"), j.at("l").get<int>(), j.at("d").get<int>());
    dict.backbone_fingerprint = j.value("backbone_fingerprint", std::string());
    dict.seed = j.value("seed", uint64_t{0});
    dict.cluster_assignment = j.value("cluster_assignment", std::vector<int>{});
  } catch (const json::exception& e) {
    throw IoError("prototype sidecar " + stem.string() + ".json: " + e.what());
  }
  return dict;
}

void save_confounder_dictionary(const ConfounderDictionary& dict, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<uint8_t> blob;
  std::vector<int> sources;
  json j;
  if (!dict.empty()) {
    const auto& first = dict.entries.front().pixels;
    j["height"] = first.height;
    j["width"] = first.width;
    j["channels"] = first.channels;
  }
  for (const auto& e : dict.entries) {
    sources.push_back(e.source_sample_id);
    for (double v : e.pixels.pixels) blob.push_back(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  j["size"] = dict.size();
  j["source_sample_ids"] = sources;
  write_binary_file(dir / "confounders.bin", blob);
  write_text_file(dir / "confounders.json", j.dump(2) + "\n");
}

ConfounderDictionary load_confounder_dictionary(const fs::path& dir) {
  ConfounderDictionary dict;
  try {
    const json j = json::parse(read_text_file(dir / "confounders.json"));
    const auto sources = j.at("source_sample_ids").get<std::vector<int>>();
    if (sources.empty()) return dict;
    const int h = j.at("height").get<int>(), w = j.at("width").get<int>(), c = j.at("channels").get<int>();
    const auto blob = read_binary_file(dir / "confounders.bin");
    const size_t per = static_cast<size_t>(h) * w * c;
    if (blob.size() != per * sources.size()) throw IoError("confounders.bin: size mismatch");
    for (size_t i = 0; i < sources.size(); ++i) {
      ConfounderImage e{Image(h, w, c), sources[i]};
      for (size_t k = 0; k < per; ++k) e.pixels.pixels[k] = blob[i * per + k] / 255.0;
      dict.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError("confounders.json: " + std::string(e.what()));
  }
  return dict;
}

}  // namespace tscnet

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tscnet/common.hpp"
#include "tscnet/datagen.hpp"
#include "tscnet/model.hpp"

namespace tscnet {

/// Background-only image: the source image with its foreground zeroed.
struct ConfounderImage {
  Image pixels;
  int source_sample_id = -1;
  bool operator==(const ConfounderImage&) const = default;
};

struct ConfounderDictionary {
  std::vector<ConfounderImage> entries;

  size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// l x d matrix of cluster means over confounder features.
struct PrototypeDictionary {
  MatrixD prototypes;
  std::vector<int> cluster_assignment;  // entry id -> cluster id
  std::string backbone_fingerprint;
  uint64_t seed = 0;

  int l() const { return static_cast<int>(prototypes.rows()); }
  int d() const { return static_cast<int>(prototypes.cols()); }
  std::string fingerprint() const;
};

ConfounderImage extract_confounder(const Image& image, const Mask& foreground, int source_sample_id = -1);

/// Foreground = pixels whose input-gradient saliency (channel L2 norm of the
/// predicted-class score gradient) lies strictly above the q-quantile.
Mask derive_mask_saliency(const ImageClassifier& model, const Image& image, double q);

enum class MaskerKind { oracle, saliency };
std::string to_string(MaskerKind k);
MaskerKind masker_from_string(const std::string& s);

/// Source of foreground masks: the dataset's ground truth, or saliency of a
/// trained classifier.
struct Masker {
  MaskerKind kind = MaskerKind::oracle;
  const ImageClassifier* model = nullptr;
  double threshold = 0.7;

  /// Returns false when no mask is available for the sample.
  bool mask_for(const Sample& sample, Mask& out) const;
};

struct ConfounderOptions {
  double selection_fraction = 1.0;
  uint64_t seed = 0;
};

/// One entry per selected fit sample (validation slice excluded); selection is
/// a seeded subset in dataset order. Identical inputs produce identical entries.
ConfounderDictionary build_confounder_dictionary(const LongTailDataset& dataset, const Masker& masker,
                                                 const ConfounderOptions& options = {});

struct KMeansResult {
  MatrixD centers;
  std::vector<int> assignment;
  std::vector<double> inertia_history;  // after every Lloyd iteration
  int iterations = 0;
  double inertia = 0.0;
};

/// k-means++ seeding followed by Lloyd iterations until the largest center
/// shift falls below `tol` or `max_iters` is reached. Empty clusters are
/// reseeded with the point farthest from its center.
KMeansResult kmeans_plus_plus(const MatrixD& points, int k, int max_iters, double tol, uint64_t seed);

/// Pre-classifier features of every confounder image, rows aligned with
/// `dictionary.entries`.
template <typename T>
MatrixD confounder_features(const ConfounderDictionary& dictionary, const VisionTransformer<T>& backbone);

PrototypeDictionary build_prototype_dictionary(const MatrixD& features, int l, int max_iters, double tol,
                                               uint64_t seed, std::string backbone_fingerprint = {});

template <typename T>
PrototypeDictionary build_prototype_dictionary(const ConfounderDictionary& dictionary,
                                               const VisionTransformer<T>& backbone, int l, int max_iters,
                                               double tol, uint64_t seed) {
  if (dictionary.empty()) throw DataError("build_prototype_dictionary: empty confounder dictionary");
  return build_prototype_dictionary(confounder_features(dictionary, backbone), l, max_iters, tol, seed,
                                    backbone.fingerprint());
}

enum class DictionaryVariant { random, zero, average, confounder };
std::string to_string(DictionaryVariant v);
DictionaryVariant dictionary_variant_from_string(const std::string& s);

/// Table-style dictionary controls: `full_image_features` is only used by
/// the average variant.
PrototypeDictionary make_variant_dictionary(DictionaryVariant kind, const PrototypeDictionary& reference,
                                            const MatrixD& full_image_features = {}, uint64_t seed = 0);

// Persistence: <stem>.bin (float64 l x d) + <stem>.json sidecar.
void save_prototype_dictionary(const PrototypeDictionary& dict, const std::filesystem::path& stem);
PrototypeDictionary load_prototype_dictionary(const std::filesystem::path& stem);

// Persistence: confounders.bin (uint8 images) + confounders.json.
void save_confounder_dictionary(const ConfounderDictionary& dict, const std::filesystem::path& dir);
ConfounderDictionary load_confounder_dictionary(const std::filesystem::path& dir);

extern template MatrixD confounder_features(const ConfounderDictionary&, const VisionTransformer<float>&);
extern template MatrixD confounder_features(const ConfounderDictionary&, const VisionTransformer<double>&);

}  // namespace tscnet

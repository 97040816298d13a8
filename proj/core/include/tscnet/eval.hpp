#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tscnet/common.hpp"
#include "tscnet/datagen.hpp"
#include "tscnet/model.hpp"

namespace tscnet {

/// Class id -> similarity group id; must cover every class.
struct SimilarityGroups {
  std::vector<int> group_of;

  int class_count() const { return static_cast<int>(group_of.size()); }
  bool similar(int a, int b) const { return group_of.at(a) == group_of.at(b); }
  /// Throws ParameterError unless the map covers exactly `class_count` classes.
  void validate(int class_count) const;

  /// Groups recorded by the dataset (shape family for synthetic data).
  static SimilarityGroups from_dataset(const LongTailDataset& dataset);
  /// Every class in its own group: all errors count as non-similar.
  static SimilarityGroups singletons(int class_count);
  /// JSON file: either a list of group ids or {"groups": [...]}.
  static SimilarityGroups load(const std::filesystem::path& path);
};

/// Per-split counts, indexed by Split (head, mid, tail) of the true class.
using SplitCounts = std::array<long, 3>;

struct ConfusionCounts {
  SplitCounts similar_fp{};
  SplitCounts nonsimilar_fp{};
  long total_similar() const;
  long total_nonsimilar() const;
};

struct MetricsReport {
  double acc_all = 0.0;
  // Absent when the group has no classes.
  std::optional<double> acc_head, acc_mid, acc_tail;
  std::vector<double> per_class_recall;
  std::vector<long> per_class_count;
  SplitCounts similar_fp{};
  SplitCounts nonsimilar_fp{};
  long total = 0;
  long correct = 0;
  std::string config_fingerprint;
  std::string model_fingerprint;
  uint64_t seed = 0;

  std::optional<double> acc(Split s) const;
  long errors() const { return total - correct; }
  bool operator==(const MetricsReport&) const = default;
};

ConfusionCounts confusion_analysis(std::span<const int> predictions, std::span<const int> labels,
                                   const SimilarityGroups& groups, std::span<const Split> splits);

/// Metrics from precomputed top-1 predictions.
MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   std::span<const Split> splits, const SimilarityGroups& groups);

/// Top-1 predictions of `model` on every test sample.
std::vector<int> predict_all(const ImageClassifier& model, std::span<const Sample> samples);

MetricsReport evaluate(const ImageClassifier& model, std::span<const Sample> test_set, std::span<const Split> splits,
                       const SimilarityGroups& groups);
/// Test split of a dataset with its own splits and groups.
MetricsReport evaluate(const ImageClassifier& model, const LongTailDataset& dataset);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
void save_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport load_report(const std::filesystem::path& path);

struct DiagnosticsExport {
  std::filesystem::path features;   // n x d float64
  std::filesystem::path attention;  // n x (grid * grid) float64
  std::filesystem::path manifest;
  int samples = 0;
  int feature_dim = 0;
  int grid = 0;
};

/// Attention rollout maps and penultimate features for external plotting.
DiagnosticsExport export_diagnostics(const VisionTransformer<float>& model, std::span<const Sample> samples,
                                     const std::filesystem::path& out_dir);

}  // namespace tscnet

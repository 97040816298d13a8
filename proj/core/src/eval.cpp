#include "tscnet/eval.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

namespace tscnet {

namespace fs = std::filesystem;
using nlohmann::json;

void SimilarityGroups::validate(int class_count) const {
  if (static_cast<int>(group_of.size()) != class_count)
    throw ParameterError("similarity groups cover " + std::to_string(group_of.size()) + " classes, expected " +
                         std::to_string(class_count));
}

SimilarityGroups SimilarityGroups::from_dataset(const LongTailDataset& dataset) {
  if (dataset.similarity_group.empty()) return singletons(dataset.class_count());
  SimilarityGroups g{dataset.similarity_group};
  g.validate(dataset.class_count());
  return g;
}

SimilarityGroups SimilarityGroups::singletons(int class_count) {
  SimilarityGroups g;
  g.group_of.resize(class_count);
  for (int c = 0; c < class_count; ++c) g.group_of[c] = c;
  return g;
}

SimilarityGroups SimilarityGroups::load(const fs::path& path) {
  try {
    const json j = json::parse(read_text_file(path));
    const json& list = j.is_object() ? j.at("groups") : j;
    return {list.get<std::vector<int>>()};
  } catch (const json::exception& e) {
    throw IoError("similarity groups " + path.string() + ": " + e.what());
  }
}

long ConfusionCounts::total_similar() const { return similar_fp[0] + similar_fp[1] + similar_fp[2]; }
long ConfusionCounts::total_nonsimilar() const { return nonsimilar_fp[0] + nonsimilar_fp[1] + nonsimilar_fp[2]; }

std::optional<double> MetricsReport::acc(Split s) const {
  switch (s) {
    case Split::head: return acc_head;
    case Split::mid: return acc_mid;
    case Split::tail: return acc_tail;
  }
  return std::nullopt;
}

ConfusionCounts confusion_analysis(std::span<const int> predictions, std::span<const int> labels,
                                   const SimilarityGroups& groups, std::span<const Split> splits) {
  if (predictions.size() != labels.size()) throw ParameterError("confusion_analysis: predictions and labels differ in length");
  const int C = static_cast<int>(splits.size());
  groups.validate(C);
  ConfusionCounts out;
  for (size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    if (p < 0 || p >= C)
      throw DataError("confusion_analysis: prediction " + std::to_string(p) + " at index " + std::to_string(i) +
                      " outside [0, " + std::to_string(C) + ")");
    if (y < 0 || y >= C) throw DataError("confusion_analysis: label out of range at index " + std::to_string(i));
    if (p == y) continue;
    const auto s = static_cast<size_t>(splits[y]);
    if (groups.similar(p, y))
      ++out.similar_fp[s];
    else
      ++out.nonsimilar_fp[s];
  }
  return out;
}

MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   std::span<const Split> splits, const SimilarityGroups& groups) {
  const int C = static_cast<int>(splits.size());
  if (predictions.empty()) throw DataError("evaluate: empty test set");
  const auto confusion = confusion_analysis(predictions, labels, groups, splits);

  MetricsReport r;
  r.per_class_recall.assign(C, 0.0);
  r.per_class_count.assign(C, 0);
  std::vector<long> hits(C, 0);
  for (size_t i = 0; i < predictions.size(); ++i) {
    ++r.per_class_count[labels[i]];
    if (predictions[i] == labels[i]) {
      ++hits[labels[i]];
      ++r.correct;
    }
  }
  r.total = static_cast<long>(predictions.size());
  r.acc_all = static_cast<double>(r.correct) / static_cast<double>(r.total);
  for (int c = 0; c < C; ++c)
    if (r.per_class_count[c] > 0) r.per_class_recall[c] = static_cast<double>(hits[c]) / r.per_class_count[c];

  std::array<double, 3> sum{};
  std::array<int, 3> n{};
  for (int c = 0; c < C; ++c) {
    if (r.per_class_count[c] == 0) continue;
    const auto s = static_cast<size_t>(splits[c]);
    sum[s] += r.per_class_recall[c];
    ++n[s];
  }
  auto group = [&](size_t s) { return n[s] > 0 ? std::optional<double>(sum[s] / n[s]) : std::nullopt; };
  r.acc_head = group(0);
  r.acc_mid = group(1);
  r.acc_tail = group(2);
  r.similar_fp = confusion.similar_fp;
  r.nonsimilar_fp = confusion.nonsimilar_fp;
  return r;
}

std::vector<int> predict_all(const ImageClassifier& model, std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model.predict(s.image));
  return out;
}

MetricsReport evaluate(const ImageClassifier& model, std::span<const Sample> test_set, std::span<const Split> splits,
                       const SimilarityGroups& groups) {
  if (model.class_count() != static_cast<int>(splits.size()))
    throw ParameterError("evaluate: model has " + std::to_string(model.class_count()) + " classes, splits cover " +
                         std::to_string(splits.size()));
  std::vector<int> labels;
  labels.reserve(test_set.size());
  for (const auto& s : test_set) labels.push_back(s.label);
  return evaluate_predictions(predict_all(model, test_set), labels, splits, groups);
}

MetricsReport evaluate(const ImageClassifier& model, const LongTailDataset& dataset) {
  auto r = evaluate(model, dataset.test, dataset.splits, SimilarityGroups::from_dataset(dataset));
  r.seed = dataset.seed;
  return r;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> optional_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
json split_counts_json(const SplitCounts& c) { return {{"head", c[0]}, {"mid", c[1]}, {"tail", c[2]}}; }
SplitCounts split_counts_from(const json& j) {
  return {j.at("head").get<long>(), j.at("mid").get<long>(), j.at("tail").get<long>()};
}

}  // namespace

std::string report_to_json(const MetricsReport& r) {
  json j;
  j["acc_all"] = r.acc_all;
  j["acc_head"] = optional_json(r.acc_head);
  j["acc_mid"] = optional_json(r.acc_mid);
  j["acc_tail"] = optional_json(r.acc_tail);
  j["per_class_recall"] = r.per_class_recall;
  j["per_class_count"] = r.per_class_count;
  j["similar_fp"] = split_counts_json(r.similar_fp);
  j["nonsimilar_fp"] = split_counts_json(r.nonsimilar_fp);
  j["total"] = r.total;
  j["correct"] = r.correct;
  j["config_fingerprint"] = r.config_fingerprint;
  j["model_fingerprint"] = r.model_fingerprint;
  j["seed"] = r.seed;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricsReport r;
    r.acc_all = j.at("acc_all").get<double>();
    r.acc_head = optional_from(j.at("acc_head"));
    r.acc_mid = optional_from(j.at("acc_mid"));
    r.acc_tail = optional_from(j.at("acc_tail"));
    r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
    r.per_class_count = j.at("per_class_count").get<std::vector<long>>();
    r.similar_fp = split_counts_from(j.at("similar_fp"));
    r.nonsimilar_fp = split_counts_from(j.at("nonsimilar_fp"));
    r.total = j.at("total").get<long>();
    r.correct = j.at("correct").get<long>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("metrics report: ") + e.what());
  }
}

void save_report(const MetricsReport& report, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_text_file(path, report_to_json(report));
}

MetricsReport load_report(const fs::path& path) { return report_from_json(read_text_file(path)); }

DiagnosticsExport export_diagnostics(const VisionTransformer<float>& model, std::span<const Sample> samples,
                                     const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const int grid = model.config().grid();
  const int d = model.config().embed_dim;
  const auto n = static_cast<Eigen::Index>(samples.size());
  MatrixD features(n, d);
  MatrixD attention(n, grid * grid);
  for (Eigen::Index i = 0; i < n; ++i) {
    VisionTransformer<float>::Trace trace;
    const auto f = model.forward_backbone(model.embed_patches(samples[i].image), &trace);
    features.row(i) = f.cast<double>().transpose();
    const MatrixD roll = attention_rollout<float>(trace, grid);
    attention.row(i) = Eigen::Map<const Eigen::RowVectorXd>(roll.data(), grid * grid);
  }
  DiagnosticsExport out{out_dir / "features.bin", out_dir / "attention.bin", out_dir / "diagnostics.json",
                        static_cast<int>(n), d, grid};
  write_matrix_blob(out.features, features);
  write_matrix_blob(out.attention, attention);

  json j;
  j["samples"] = out.samples;
  j["feature_dim"] = d;
  j["grid"] = grid;
  j["model_fingerprint"] = model.fingerprint();
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  j["labels"] = labels;
  j["files"] = {
      {{"file", "features.bin"}, {"shape", {n, d}}, {"dtype", "float64-le"}, {"sha256", sha256_file(out.features)}},
      {{"file", "attention.bin"},
       {"shape", {n, grid, grid}},
       {"dtype", "float64-le"},
       {"sha256", sha256_file(out.attention)}}};
  write_text_file(out.manifest, j.dump(2) + "\n");
  return out;
}

}  // namespace tscnet

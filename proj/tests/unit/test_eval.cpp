#include <doctest.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "tscnet/eval.hpp"
#include "tscnet/train.hpp"

using namespace tscnet;

namespace {

// Five classes: head {0, 1}, mid {2}, tail {3, 4}; families {0, 1, 3} and {2, 4}.
const std::vector<Split> kSplits{Split::head, Split::head, Split::mid, Split::tail, Split::tail};
const SimilarityGroups kGroups{{0, 0, 1, 0, 1}};

std::vector<int> balanced_labels(int per_class) {
  std::vector<int> y;
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < per_class; ++i) y.push_back(c);
  return y;
}

class FixedClassifier : public ImageClassifier {
 public:
  FixedClassifier(int classes, int answer) : classes_(classes), answer_(answer) {}
  int class_count() const override { return classes_; }
  VectorD logits(const Image&) const override {
    VectorD z = VectorD::Zero(classes_);
    z(answer_) = 1.0;
    return z;
  }

 private:
  int classes_, answer_;
};

}  // namespace

TEST_CASE("oracle and constant predictors") {
  const auto y = balanced_labels(10);
  const auto oracle = evaluate_predictions(y, y, kSplits, kGroups);
  CHECK(oracle.acc_all == 1.0);
  CHECK(*oracle.acc_head == 1.0);
  CHECK(*oracle.acc_mid == 1.0);
  CHECK(*oracle.acc_tail == 1.0);
  CHECK(oracle.errors() == 0);
  CHECK(oracle.similar_fp == SplitCounts{0, 0, 0});

  const std::vector<int> zero(y.size(), 0);
  const auto constant = evaluate_predictions(zero, y, kSplits, kGroups);
  CHECK(constant.acc_all == doctest::Approx(0.2));
  CHECK(*constant.acc_head == doctest::Approx(0.5));
  CHECK(*constant.acc_mid == 0.0);
  CHECK(*constant.acc_tail == 0.0);
  // Errors by true class: 1 -> similar (head), 2 -> non-similar (mid),
  // 3 -> similar (tail), 4 -> non-similar (tail).
  CHECK(constant.similar_fp == SplitCounts{10, 0, 10});
  CHECK(constant.nonsimilar_fp == SplitCounts{0, 10, 10});
  CHECK(constant.total == 50);
  CHECK(constant.correct == 10);
}

TEST_CASE("balanced accuracy equals mean recall") {
  Rng rng(3);
  const auto y = balanced_labels(40);
  std::vector<int> p(y.size());
  for (auto& v : p) v = rng.uniform_int(5);
  const auto r = evaluate_predictions(p, y, kSplits, kGroups);
  double mean = 0.0;
  for (double v : r.per_class_recall) mean += v / 5.0;
  CHECK(r.acc_all == doctest::Approx(mean).epsilon(1e-9));
  long fp = 0;
  for (size_t k = 0; k < 3; ++k) fp += r.similar_fp[k] + r.nonsimilar_fp[k];
  CHECK(r.errors() == fp);
}

TEST_CASE("confusion counts match a direct tally") {
  Rng rng(8);
  const auto y = balanced_labels(25);
  std::vector<int> p(y.size());
  for (auto& v : p) v = rng.uniform_int(5);
  const auto c = confusion_analysis(p, y, kGroups, kSplits);
  SplitCounts sim{}, non{};
  for (size_t i = 0; i < y.size(); ++i) {
    if (p[i] == y[i]) continue;
    auto& bucket = kGroups.group_of[p[i]] == kGroups.group_of[y[i]] ? sim : non;
    ++bucket[static_cast<size_t>(kSplits[y[i]])];
  }
  CHECK(c.similar_fp == sim);
  CHECK(c.nonsimilar_fp == non);
  long wrong = 0;
  for (size_t i = 0; i < y.size(); ++i) wrong += p[i] != y[i];
  CHECK(c.total_similar() + c.total_nonsimilar() == wrong);

  const auto single = confusion_analysis(p, y, SimilarityGroups::singletons(5), kSplits);
  CHECK(single.total_similar() == 0);
  CHECK(single.total_nonsimilar() == wrong);
}

TEST_CASE("group accuracy lies within member recalls") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    std::vector<int> y, p;
    for (int c = 0; c < 5; ++c) {
      const int n = 1 + rng.uniform_int(20);
      for (int i = 0; i < n; ++i) {
        y.push_back(c);
        p.push_back(rng.uniform() < 0.5 ? c : rng.uniform_int(5));
      }
    }
    const auto r = evaluate_predictions(p, y, kSplits, kGroups);
    for (auto s : {Split::head, Split::mid, Split::tail}) {
      double lo = 1.0, hi = 0.0;
      for (int c = 0; c < 5; ++c)
        if (kSplits[c] == s) {
          lo = std::min(lo, r.per_class_recall[c]);
          hi = std::max(hi, r.per_class_recall[c]);
        }
      CHECK(*r.acc(s) >= lo - 1e-12);
      CHECK(*r.acc(s) <= hi + 1e-12);
    }

    std::vector<size_t> perm(y.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    std::vector<int> ys, ps;
    for (size_t i : perm) {
      ys.push_back(y[i]);
      ps.push_back(p[i]);
    }
    CHECK(evaluate_predictions(ps, ys, kSplits, kGroups) == r);
  }
}

TEST_CASE("invalid predictions and empty groups") {
  const std::vector<int> y{0, 1, 2};
  const std::vector<int> bad{0, 7, 2};
  try {
    evaluate_predictions(bad, y, kSplits, kGroups);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
  CHECK_THROWS_AS(evaluate_predictions(std::vector<int>{-1, 1, 2}, y, kSplits, kGroups), DataError);
  CHECK_THROWS_AS(evaluate_predictions(std::vector<int>{0, 1}, y, kSplits, kGroups), ParameterError);
  CHECK_THROWS_AS(evaluate_predictions(std::vector<int>{}, std::vector<int>{}, kSplits, kGroups), DataError);
  CHECK_THROWS_AS(confusion_analysis(y, y, SimilarityGroups{{0, 1}}, kSplits), ParameterError);

  const std::vector<Split> no_mid{Split::head, Split::head, Split::tail, Split::tail, Split::tail};
  const auto r = evaluate_predictions(y, y, no_mid, kGroups);
  CHECK_FALSE(r.acc_mid.has_value());
  CHECK(r.acc_head.has_value());
}

TEST_CASE("report JSON round trip") {
  Rng rng(5);
  const auto y = balanced_labels(7);
  std::vector<int> p(y.size());
  for (auto& v : p) v = rng.uniform_int(5);
  auto r = evaluate_predictions(p, y, kSplits, kGroups);
  r.config_fingerprint = "cfg";
  r.model_fingerprint = "model";
  r.seed = 99;
  CHECK(report_from_json(report_to_json(r)) == r);

  const std::vector<Split> no_mid{Split::head, Split::head, Split::tail, Split::tail, Split::tail};
  const auto partial = evaluate_predictions(p, y, no_mid, kGroups);
  const auto j = nlohmann::json::parse(report_to_json(partial));
  CHECK(j["acc_mid"].is_null());
  CHECK(report_from_json(report_to_json(partial)) == partial);

  const auto dir = testing::temp_dir("eval");
  save_report(r, dir / "m.json");
  CHECK(load_report(dir / "m.json") == r);
  write_text_file(dir / "bad.json", "{\"acc_all\": 1}");
  CHECK_THROWS_AS(load_report(dir / "bad.json"), IoError);
}

TEST_CASE("similarity groups") {
  const auto ds = testing::small_dataset(2);
  const auto g = SimilarityGroups::from_dataset(ds);
  CHECK(g.class_count() == ds.class_count());
  for (int c = 0; c < ds.class_count(); ++c) CHECK(g.group_of[c] == synthetic_shape_family(c));

  const auto dir = testing::temp_dir("groups");
  write_text_file(dir / "list.json", "[0, 0, 1, 1]");
  write_text_file(dir / "obj.json", "{\"groups\": [2, 1, 2, 0]}");
  write_text_file(dir / "bad.json", "{\"other\": 1}");
  CHECK(SimilarityGroups::load(dir / "list.json").group_of == std::vector<int>{0, 0, 1, 1});
  CHECK(SimilarityGroups::load(dir / "obj.json").group_of == std::vector<int>{2, 1, 2, 0});
  CHECK_THROWS_AS(SimilarityGroups::load(dir / "bad.json"), IoError);
  CHECK_THROWS_AS(SimilarityGroups::load(dir / "none.json"), IoError);
}

TEST_CASE("evaluate a classifier on a dataset") {
  const auto ds = testing::small_dataset(4);
  const FixedClassifier always1(ds.class_count(), 1);
  const auto r = evaluate(always1, ds);
  CHECK(r.seed == ds.seed);
  CHECK(r.per_class_recall[1] == 1.0);
  CHECK(r.acc_all == doctest::Approx(1.0 / ds.class_count()));
  CHECK(r.total == static_cast<long>(ds.test.size()));
  CHECK_THROWS_AS(evaluate(FixedClassifier(3, 0), ds.test, ds.splits, SimilarityGroups::from_dataset(ds)),
                  ParameterError);
}

TEST_CASE("diagnostics export") {
  const auto ds = testing::small_dataset(6);
  const auto model = initial_model(model_spec_for(testing::tiny_backbone(), Toggles{}, 3), 1);
  const auto dir = testing::temp_dir("diag");
  const std::span<const Sample> samples(ds.test.data(), 6);
  const auto out = export_diagnostics(model, samples, dir / "a");
  CHECK(out.samples == 6);
  CHECK(out.grid == 2);
  CHECK(out.feature_dim == 8);
  const MatrixD feats = read_matrix_blob(out.features, 6, 8);
  const MatrixD att = read_matrix_blob(out.attention, 6, 4);
  CHECK(feats.rows() == 6);
  CHECK(feats.cols() == 8);
  CHECK(att.rows() == 6);
  CHECK(att.cols() == 4);
  CHECK((att.array() >= 0.0).all());
  for (Eigen::Index i = 0; i < 6; ++i) {
    CHECK(att.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK((feats.row(i).transpose() - model.forward_backbone(model.embed_patches(samples[i].image)).cast<double>()).norm() < 1e-6);
  }
  const auto j = nlohmann::json::parse(read_text_file(out.manifest));
  CHECK(j["samples"] == 6);
  CHECK(j["model_fingerprint"] == model.fingerprint());
  CHECK(j["files"][0]["sha256"] == sha256_file(out.features));

  const auto again = export_diagnostics(model, samples, dir / "b");
  CHECK(read_text_file(again.features) == read_text_file(out.features));
  CHECK(read_text_file(again.attention) == read_text_file(out.attention));
}

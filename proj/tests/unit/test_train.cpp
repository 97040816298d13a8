#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "tscnet/confounder.hpp"
#include "tscnet/train.hpp"

using namespace tscnet;

namespace {

TrainConfig quick_config(const Toggles& t, int epochs1 = 3, int epochs2 = 2) {
  TrainConfig c;
  c.stage1_epochs = epochs1;
  c.stage2_epochs = epochs2;
  c.batch_size = 8;
  c.learning_rate = 0.05;
  c.warmup_epochs = 1;
  c.confounder_tokens = 2;
  c.seed = 11;
  c.toggles = t;
  return c;
}

struct Fixture {
  LongTailDataset ds = testing::small_dataset(3);
  ConfounderDictionary confounders = build_confounder_dictionary(ds, Masker{});
  Toggles toggles = Toggles::parse("+I+F+C+R");
  ModelSpec spec = model_spec_for(testing::tiny_backbone(), toggles, 3);
  PrototypeDictionary prototypes =
      build_prototype_dictionary(confounders, initial_model(spec, 11), 3, 50, 1e-9, 5);
};

}  // namespace

TEST_CASE("cross-entropy reference values") {
  CHECK(loss_cls(VectorD::Zero(10), 3) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  VectorD margin(2);
  margin << 50.0, 0.0;
  CHECK(loss_cls(margin, 1) == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(loss_cls(margin, 0) == doctest::Approx(0.0).epsilon(1e-12));
  VectorD z(3);
  z << 0.5, 1.5, -0.3;
  CHECK(loss_cls(z, 1) == doctest::Approx(0.42734292019076353).epsilon(1e-12));

  VectorD huge(3);
  huge << 1e4, -1e4, 0.0;
  CHECK(std::isfinite(loss_cls(huge, 1)));
  CHECK_THROWS_AS(loss_cls(z, 3), ParameterError);
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
  Vector<double> z(4);
  z << 0.1, -0.4, 0.9, 0.0;
  Vector<double> d;
  cross_entropy<double>(z, 2, &d);
  const Vector<double> p = z.array().exp() / z.array().exp().sum();
  for (int k = 0; k < 4; ++k) CHECK(d(k) == doctest::Approx(p(k) - (k == 2 ? 1.0 : 0.0)).epsilon(1e-12));
  CHECK(d.sum() == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("fine-tuning loss") {
  std::vector<VectorD> a(2, VectorD(3)), b(2, VectorD(3));
  a[0] << 0.5, 1.5, -0.3;
  a[1] << 2.0, -1.0, 0.0;
  b[0] << 0.0, 1.0, 0.2;
  b[1] << 2.5, -1.0, -0.5;
  const std::vector<int> y{1, 0};
  CHECK(loss_finetune(a, b, y, 0.7) == doctest::Approx(0.7360944698735246).epsilon(1e-12));

  const double ce = (loss_cls(a[0], 1) + loss_cls(a[1], 0)) / 2;
  CHECK(loss_finetune(a, b, y, 0.0) == doctest::Approx(ce).epsilon(1e-14));
  CHECK(loss_finetune(a, a, y, 5.0) == doctest::Approx(ce).epsilon(1e-14));

  CHECK_THROWS_AS(loss_finetune(a, std::span<const VectorD>(b).first(1), y, 1.0), ParameterError);
  CHECK_THROWS_AS(loss_finetune(a, b, std::span<const int>(y).first(1), 1.0), ParameterError);
  CHECK_THROWS_AS(loss_finetune({}, {}, {}, 1.0), ParameterError);
}

TEST_CASE("toggle labels") {
  CHECK(Toggles::parse("base") == Toggles{});
  CHECK(Toggles::parse("none") == Toggles{});
  CHECK(Toggles::parse("") == Toggles{});
  const auto full = Toggles::parse("+I+F+C+R");
  CHECK(full.patch_intervention);
  CHECK(full.feature_intervention);
  CHECK(full.counterfactual);
  CHECK(full.refinement);
  CHECK(Toggles::parse("R, C F I") == full);
  CHECK(full.label() == "+I+F+C+R");
  CHECK(Toggles{}.label() == "base");
  for (const char* s : {"+I", "+F", "+I+F", "+I+F+C", "+C+R", "+F+C"}) CHECK(Toggles::parse(s).label() == s);
  CHECK_THROWS_AS(Toggles::parse("+X"), ParameterError);
  CHECK_THROWS_AS(Toggles::parse("+i"), ParameterError);
}

TEST_CASE("configuration checks") {
  TrainConfig c;
  c.toggles = Toggles::parse("+R");
  CHECK_THROWS_AS(c.validate(), ConfigurationError);
  c.toggles = Toggles::parse("+C+R");
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigurationError);
}

TEST_CASE("schedule and optimizer names") {
  for (auto k : {OptimizerKind::sgd, OptimizerKind::adamw}) CHECK(optimizer_from_string(to_string(k)) == k);
  for (auto s : {LrSchedule::cosine, LrSchedule::step, LrSchedule::constant})
    CHECK(schedule_from_string(to_string(s)) == s);
}

TEST_CASE("stage-1 preconditions") {
  Fixture f;
  const auto cfg = quick_config(f.toggles);
  CHECK_THROWS_AS(train_stage1(f.ds, &f.confounders, nullptr, f.spec, cfg), ConfigurationError);
  CHECK_THROWS_AS(train_stage1(f.ds, nullptr, &f.prototypes, f.spec, cfg), ConfigurationError);
  const auto linear = model_spec_for(testing::tiny_backbone(), Toggles{}, 3);
  CHECK_THROWS_AS(train_stage1(f.ds, &f.confounders, &f.prototypes, linear, cfg), ConfigurationError);

  auto wild = quick_config(Toggles{});
  wild.learning_rate = 1e36;
  wild.grad_clip = 0.0;
  CHECK_THROWS_AS(train_stage1(f.ds, nullptr, nullptr, linear, wild), DivergenceError);
}

TEST_CASE("stage 1 is deterministic and resumes exactly") {
  Fixture f;
  const auto cfg = quick_config(f.toggles, 4);
  const auto a = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, cfg);
  const auto b = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, cfg);
  CHECK(a.checkpoint.parameters == b.checkpoint.parameters);
  CHECK(a.checkpoint.loss_history == b.checkpoint.loss_history);
  CHECK(a.checkpoint.loss_history.size() == 4);
  CHECK(a.history.size() == 4);
  CHECK(a.checkpoint.stage == 1);
  CHECK(a.checkpoint.best_epoch >= 0);
  CHECK(a.checkpoint.prototype_fingerprint == f.prototypes.fingerprint());

  auto other = cfg;
  other.seed = 12;
  CHECK(train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, other).checkpoint.parameters !=
        a.checkpoint.parameters);

  const auto dir = testing::temp_dir("resume");
  TrainRunOptions interrupted;
  interrupted.snapshot = dir / "snap";
  interrupted.stop_after_epochs = 2;
  const auto partial = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, cfg, interrupted);
  CHECK(partial.checkpoint.epoch == 2);
  const auto snap = load_checkpoint(dir / "snap");
  TrainRunOptions resume;
  resume.resume = &snap;
  const auto finished = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, cfg, resume);
  CHECK(finished.checkpoint.parameters == a.checkpoint.parameters);
  CHECK(finished.checkpoint.current_parameters == a.checkpoint.current_parameters);
  CHECK(finished.checkpoint.loss_history == a.checkpoint.loss_history);
  CHECK(finished.checkpoint.best_epoch == a.checkpoint.best_epoch);
}

TEST_CASE("checkpoint round trip") {
  Fixture f;
  const auto res = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, quick_config(f.toggles, 2));
  const auto dir = testing::temp_dir("ckpt");
  save_checkpoint(res.checkpoint, dir / "m");
  const auto back = load_checkpoint(dir / "m");
  CHECK(back.parameters == res.checkpoint.parameters);
  CHECK(back.current_parameters == res.checkpoint.current_parameters);
  CHECK(back.optimizer_state == res.checkpoint.optimizer_state);
  CHECK(back.prototypes == res.checkpoint.prototypes);
  CHECK(back.spec == res.checkpoint.spec);
  CHECK(back.config.toggles == res.checkpoint.config.toggles);
  CHECK(back.loss_history == res.checkpoint.loss_history);
  CHECK(back.fingerprint() == res.checkpoint.fingerprint());

  const auto m1 = res.checkpoint.model();
  const auto m2 = back.model();
  for (size_t i = 0; i < 5; ++i) CHECK(m1.logits(f.ds.test[i].image) == m2.logits(f.ds.test[i].image));

  auto bytes = read_text_file(dir / "m.bin");
  bytes[bytes.size() / 2] ^= 0x5a;
  write_text_file(dir / "m.bin", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "m"), IoError);
  write_text_file(dir / "m.bin", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "m"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
}

TEST_CASE("stage 2 fine-tunes and logs the strength table") {
  Fixture f;
  const auto cfg = quick_config(f.toggles, 2, 3);
  const auto s1 = train_stage1(f.ds, &f.confounders, &f.prototypes, f.spec, cfg);

  CHECK_THROWS_AS(train_stage2(nullptr, f.ds, cfg), StateError);
  auto no_cf = cfg;
  no_cf.toggles = Toggles::parse("+I+F");
  CHECK_THROWS_AS(train_stage2(&s1.checkpoint, f.ds, no_cf), ConfigurationError);

  std::ostringstream log;
  TrainRunOptions run;
  run.log = &log;
  const auto s2 = train_stage2(&s1.checkpoint, f.ds, cfg, run);
  CHECK(s2.checkpoint.stage == 2);
  CHECK(s2.checkpoint.prototypes == s1.checkpoint.prototypes);
  CHECK(s2.checkpoint.prototype_fingerprint == s1.checkpoint.prototype_fingerprint);
  CHECK(s2.checkpoint.parameters != s1.checkpoint.parameters);
  CHECK(s2.history.size() == 3);

  CHECK_THROWS_AS(train_stage2(&s2.checkpoint, f.ds, cfg), StateError);

  std::istringstream in(log.str());
  std::string line;
  int epochs = 0, strengths = 0;
  std::vector<std::vector<double>> table(3, std::vector<double>(f.ds.class_count(), -1.0));
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "epoch") {
      ++epochs;
      CHECK(j["stage"] == 2);
    } else {
      REQUIRE(j["type"] == "strength");
      ++strengths;
      const double L = j["L"].get<double>();
      CHECK(L >= 0.0);
      CHECK(L <= 1.0);
      table.at(j["epoch"].get<int>()).at(j["class"].get<int>()) = L;
    }
  }
  CHECK(epochs == 3);
  CHECK(strengths == 3 * f.ds.class_count());
  for (int c = 0; c < f.ds.class_count(); ++c) {
    CHECK((std::abs(table[0][c]) < 1e-12 || std::abs(table[0][c] - 0.1) < 1e-12));
    for (int e = 1; e < 3; ++e) {
      const double diff = std::abs(table[e][c] - table[e - 1][c]);
      CHECK((diff == doctest::Approx(0.1) || diff < 1e-12));
    }
  }
  for (int c = 0; c < f.ds.class_count(); ++c) CHECK(s2.checkpoint.strength.strength[c] == table[2][c]);
}

TEST_CASE("fixed strength without refinement") {
  Fixture f;
  auto cfg = quick_config(Toggles::parse("+I+F+C"), 1, 2);
  cfg.l_init = 0.4;
  const auto s1 = train_stage1(f.ds, &f.confounders, &f.prototypes,
                               model_spec_for(testing::tiny_backbone(), cfg.toggles, 3), cfg);
  const auto s2 = train_stage2(&s1.checkpoint, f.ds, cfg);
  for (double L : s2.checkpoint.strength.strength) CHECK(L == doctest::Approx(0.4));
}

TEST_CASE("per-class accuracy covers only the listed samples") {
  Fixture f;
  const auto res = train_stage1(f.ds, nullptr, nullptr, model_spec_for(testing::tiny_backbone(), Toggles{}, 3),
                                quick_config(Toggles{}, 1));
  const auto model = res.checkpoint.model();
  const auto val = f.ds.validation_indices();
  const auto acc = per_class_accuracy(model, f.ds, val);
  REQUIRE(acc.size() == static_cast<size_t>(f.ds.class_count()));
  std::vector<int> hit(f.ds.class_count()), tot(f.ds.class_count());
  for (size_t i : val) {
    ++tot[f.ds.train[i].label];
    hit[f.ds.train[i].label] += model.predict(f.ds.train[i].image) == f.ds.train[i].label;
  }
  for (int c = 0; c < f.ds.class_count(); ++c)
    if (tot[c] > 0) CHECK(acc[c] == doctest::Approx(static_cast<double>(hit[c]) / tot[c]));
}

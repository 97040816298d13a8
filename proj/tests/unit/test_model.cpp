#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "tscnet/confounder.hpp"
#include "tscnet/model.hpp"
#include "tscnet/train.hpp"

using namespace tscnet;

namespace {

ModelSpec probe_spec(HeadKind head, int depth = 2) {
  ModelSpec s;
  s.backbone.image_size = 8;
  s.backbone.patch_size = 4;
  s.backbone.channels = 3;
  s.backbone.embed_dim = 16;
  s.backbone.depth = depth;
  s.backbone.heads = 2;
  s.backbone.mlp_ratio = 2.0;
  s.backbone.class_count = 5;
  s.head = head;
  s.prototype_count = 4;
  s.attention_dim = 8;
  return s;
}

MatrixD random_prototypes(int l, int d, uint64_t seed) {
  Rng rng(seed);
  MatrixD p(l, d);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal();
  return p;
}

struct Probe {
  std::vector<Image> images, partners;
  ConfounderDictionary confounders;
  std::vector<GradientItem> items;
};

Probe make_probe(bool with_partner) {
  Probe p;
  for (int i = 0; i < 3; ++i) {
    p.images.push_back(testing::random_image(8, 8, 3, 10 + i));
    p.partners.push_back(testing::random_image(8, 8, 3, 20 + i));
    p.confounders.entries.push_back({testing::random_image(8, 8, 3, 30 + i), i});
  }
  for (int i = 0; i < 3; ++i)
    p.items.push_back({&p.images[i], with_partner ? &p.partners[i] : nullptr, i % 5, static_cast<uint64_t>(40 + i)});
  return p;
}

// Per-tensor relative error (vector norm) between analytic and central
// finite-difference gradients.
void check_gradients(VisionTransformer<double>& model, const Probe& probe, const ConfounderDictionary* conf,
                     int tokens, double alpha, bool on_features) {
  ParameterBuffer<double> grad(model.parameter_count(), 0.0);
  accumulate_gradient<double>(model, probe.items, conf, tokens, alpha, on_features, grad);
  auto loss = [&] {
    ParameterBuffer<double> scratch(model.parameter_count(), 0.0);
    return accumulate_gradient<double>(model, probe.items, conf, tokens, alpha, on_features, scratch);
  };
  auto& w = model.parameters();
  const double h = 1e-6;
  for (const auto& [name, slot] : model.named_tensors()) {
    double num = 0.0, den = 0.0;
    for (size_t i = slot.offset; i < slot.offset + slot.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = loss();
      w[i] = orig - h;
      const double down = loss();
      w[i] = orig;
      const double fd = (up - down) / (2 * h);
      num += (fd - grad[i]) * (fd - grad[i]);
      den += fd * fd + grad[i] * grad[i];
    }
    const double rel = den > 0 ? std::sqrt(num) / std::sqrt(den) : 0.0;
    INFO("tensor " << name << " relative error " << rel);
    CHECK(rel < 1e-3);
  }
}

}  // namespace

TEST_CASE("finite differences: linear head with cross-entropy") {
  VisionTransformer<double> model(probe_spec(HeadKind::linear), 1);
  const auto probe = make_probe(false);
  check_gradients(model, probe, nullptr, 0, 0.0, false);
}

TEST_CASE("finite differences: deconfounded head, patch intervention and consistency on logits") {
  VisionTransformer<double> model(probe_spec(HeadKind::deconfounded), 2);
  model.set_prototypes(random_prototypes(4, 16, 3));
  // Perturb W_a away from the identity so that its gradient is generic.
  auto& w = model.parameters();
  Rng rng(4);
  const auto wa = model.slot("head.wa");
  for (size_t i = wa.offset; i < wa.offset + wa.size(); ++i) w[i] += 0.1 * rng.normal();
  const auto probe = make_probe(true);
  check_gradients(model, probe, &probe.confounders, 2, 0.7, false);
}

TEST_CASE("finite differences: consistency on features, depth 0") {
  VisionTransformer<double> model(probe_spec(HeadKind::deconfounded, 0), 5);
  model.set_prototypes(random_prototypes(4, 16, 6));
  const auto probe = make_probe(true);
  check_gradients(model, probe, nullptr, 0, 0.5, true);
}

TEST_CASE("finite differences: input gradient") {
  VisionTransformer<double> model(probe_spec(HeadKind::deconfounded), 7);
  model.set_prototypes(random_prototypes(4, 16, 8));
  model.mark_ready();
  Image img = testing::random_image(8, 8, 3, 9);
  const Image g = model.input_gradient(img, 2);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    const double orig = img.pixels[i];
    img.pixels[i] = orig + 1e-6;
    const double up = model.logits(img)(2);
    img.pixels[i] = orig - 1e-6;
    const double down = model.logits(img)(2);
    img.pixels[i] = orig;
    const double fd = (up - down) / 2e-6;
    num += (fd - g.pixels[i]) * (fd - g.pixels[i]);
    den += fd * fd + g.pixels[i] * g.pixels[i];
  }
  CHECK(std::sqrt(num / den) < 1e-3);
}

TEST_CASE("forward shapes and readiness") {
  VisionTransformer<float> model(probe_spec(HeadKind::linear), 1);
  const Image img = testing::random_image(8, 8, 3, 1);
  const auto seq = model.embed_patches(img);
  CHECK(seq.length() == 5);
  CHECK(seq.patches.cols() == 48);
  CHECK(model.feature(img).size() == 16);
  CHECK_THROWS_AS(model.forward_inference(img), StateError);
  model.mark_ready();
  CHECK(model.forward_inference(img).size() == 5);
  CHECK(model.predict(img) >= 0);
  CHECK_THROWS_AS(model.forward_deconfounded(model.feature(img)), ConfigurationError);
  CHECK_THROWS_AS(model.logits(testing::random_image(4, 4, 3, 1)), ParameterError);

  VisionTransformer<float> deconf(probe_spec(HeadKind::deconfounded), 1);
  deconf.mark_ready();
  CHECK_THROWS_AS(deconf.forward_inference(img), ConfigurationError);
  CHECK_THROWS_AS(deconf.set_prototypes(random_prototypes(4, 15, 1)), ParameterError);
  deconf.set_prototypes(random_prototypes(4, 16, 1));
  VisionTransformer<float>::HeadTrace trace;
  deconf.forward_head(deconf.feature(img), &trace);
  CHECK(trace.mu.size() == 4);
  CHECK(trace.mu.sum() == doctest::Approx(1.0f));
  CHECK((trace.mu.array() >= 0).all());
}

TEST_CASE("model construction is deterministic and casts consistently") {
  VisionTransformer<float> a(probe_spec(HeadKind::linear), 11), b(probe_spec(HeadKind::linear), 11),
      c(probe_spec(HeadKind::linear), 12);
  CHECK(a.parameters() == b.parameters());
  CHECK(a.parameters() != c.parameters());
  CHECK(a.fingerprint() == b.fingerprint());
  a.mark_ready();
  const auto d = a.cast<double>();
  const Image img = testing::random_image(8, 8, 3, 2);
  CHECK((a.logits(img) - d.logits(img)).norm() < 1e-4);

  // Head kind does not change the backbone initialisation.
  VisionTransformer<float> e(probe_spec(HeadKind::deconfounded), 11);
  const auto slot = a.slot("norm.b");
  for (size_t i = 0; i < slot.offset + slot.size(); ++i) CHECK(a.parameters()[i] == e.parameters()[i]);

  BackboneConfig bad = probe_spec(HeadKind::linear).backbone;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = probe_spec(HeadKind::linear).backbone;
  bad.patch_size = 3;
  CHECK_THROWS_AS(VisionTransformer<float>(ModelSpec{bad}, 1), ParameterError);
}

TEST_CASE("patch intervention appends distinct confounder tokens") {
  VisionTransformer<double> model(probe_spec(HeadKind::linear), 3);
  const auto seq = model.embed_patches(testing::random_image(8, 8, 3, 1));
  const auto conf = model.embed_patches(testing::random_image(8, 8, 3, 2));
  Rng rng(5);
  const auto out = patch_intervene(seq, conf, 3, rng);
  CHECK(out.length() == seq.length() + 3);
  CHECK(out.tokens.topRows(seq.length()) == seq.tokens);
  std::set<int> used;
  for (int i = 0; i < 3; ++i) {
    int found = -1;
    for (int r = 1; r < conf.length(); ++r)
      if (out.tokens.row(seq.length() + i) == conf.tokens.row(r)) found = r;
    REQUIRE(found > 0);
    used.insert(found);
    CHECK(out.position_ids[seq.length() + i] == conf.position_ids[found]);
  }
  CHECK(used.size() == 3);
  Rng r0(1);
  CHECK(patch_intervene(seq, conf, 0, r0).tokens == seq.tokens);
  CHECK_THROWS_AS(patch_intervene(seq, conf, 5, r0), ParameterError);
  CHECK_THROWS_AS(patch_intervene(seq, conf, -1, r0), ParameterError);
}

TEST_CASE("attention rollout covers the patch grid") {
  VisionTransformer<float> model(probe_spec(HeadKind::linear), 3);
  VisionTransformer<float>::Trace trace;
  model.forward_backbone(model.embed_patches(testing::random_image(8, 8, 3, 1)), &trace);
  const MatrixD roll = attention_rollout<float>(trace, 2);
  CHECK(roll.rows() == 2);
  CHECK(roll.cols() == 2);
  CHECK((roll.array() >= 0).all());
}

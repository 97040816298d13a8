#pragma once

#include <nlohmann/json.hpp>

#include "tscnet/counterfactual.hpp"
#include "tscnet/model.hpp"
#include "tscnet/train.hpp"

namespace tscnet::detail {

using nlohmann::json;

inline json to_json(const BackboneConfig& b) {
  return {{"image_size", b.image_size}, {"patch_size", b.patch_size}, {"channels", b.channels},
          {"embed_dim", b.embed_dim},   {"depth", b.depth},           {"heads", b.heads},
          {"mlp_ratio", b.mlp_ratio},   {"class_count", b.class_count}, {"dropout", b.dropout}};
}

inline BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig b;
  b.image_size = j.at("image_size").get<int>();
  b.patch_size = j.at("patch_size").get<int>();
  b.channels = j.at("channels").get<int>();
  b.embed_dim = j.at("embed_dim").get<int>();
  b.depth = j.at("depth").get<int>();
  b.heads = j.at("heads").get<int>();
  b.mlp_ratio = j.at("mlp_ratio").get<double>();
  b.class_count = j.at("class_count").get<int>();
  b.dropout = j.at("dropout").get<double>();
  return b;
}

inline json to_json(const ModelSpec& s) {
  return {{"backbone", to_json(s.backbone)},
          {"head", to_string(s.head)},
          {"prototype_count", s.prototype_count},
          {"prototype_dim", s.prototype_dim},
          {"attention_dim", s.attention_dim}};
}

inline ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.backbone = backbone_from_json(j.at("backbone"));
  s.head = head_kind_from_string(j.at("head").get<std::string>());
  s.prototype_count = j.at("prototype_count").get<int>();
  s.prototype_dim = j.at("prototype_dim").get<int>();
  s.attention_dim = j.at("attention_dim").get<int>();
  return s;
}

inline json to_json(const Toggles& t) {
  return {{"I", t.patch_intervention}, {"F", t.feature_intervention}, {"C", t.counterfactual}, {"R", t.refinement}};
}

inline Toggles toggles_from_json(const json& j) {
  Toggles t;
  t.patch_intervention = j.at("I").get<bool>();
  t.feature_intervention = j.at("F").get<bool>();
  t.counterfactual = j.at("C").get<bool>();
  t.refinement = j.at("R").get<bool>();
  return t;
}

inline json to_json(const TrainConfig& c) {
  return {{"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"stage2_lr_scale", c.stage2_lr_scale},
          {"schedule", to_string(c.schedule)},
          {"warmup_epochs", c.warmup_epochs},
          {"step_every", c.step_every},
          {"step_factor", c.step_factor},
          {"optimizer", to_string(c.optimizer)},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"confounder_tokens", c.confounder_tokens},
          {"alpha_gf", c.alpha_gf},
          {"gamma", c.gamma},
          {"l_init", c.l_init},
          {"strength_step", c.strength_step},
          {"target_per_class", c.target_per_class},
          {"consistency_on_features", c.consistency_on_features},
          {"seed", c.seed},
          {"toggles", to_json(c.toggles)}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.stage1_epochs = j.at("stage1_epochs").get<int>();
  c.stage2_epochs = j.at("stage2_epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.stage2_lr_scale = j.at("stage2_lr_scale").get<double>();
  c.schedule = schedule_from_string(j.at("schedule").get<std::string>());
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.step_every = j.at("step_every").get<int>();
  c.step_factor = j.at("step_factor").get<double>();
  c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.confounder_tokens = j.at("confounder_tokens").get<int>();
  c.alpha_gf = j.at("alpha_gf").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.l_init = j.at("l_init").get<double>();
  c.strength_step = j.at("strength_step").get<double>();
  c.target_per_class = j.at("target_per_class").get<int>();
  c.consistency_on_features = j.at("consistency_on_features").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  c.toggles = toggles_from_json(j.at("toggles"));
  return c;
}

inline json to_json(const StrengthTable& t) {
  return {{"strength", t.strength}, {"epoch", t.epoch}, {"gamma", t.gamma}, {"step", t.step}};
}

inline StrengthTable strength_from_json(const json& j) {
  StrengthTable t;
  t.strength = j.at("strength").get<std::vector<double>>();
  t.epoch = j.at("epoch").get<int>();
  t.gamma = j.at("gamma").get<double>();
  t.step = j.at("step").get<double>();
  return t;
}

}  // namespace tscnet::detail

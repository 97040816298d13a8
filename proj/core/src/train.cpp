#include "tscnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tscnet {

using nlohmann::json;

std::string Toggles::label() const {
  std::string s;
  if (patch_intervention) s += "+I";
  if (feature_intervention) s += "+F";
  if (counterfactual) s += "+C";
  if (refinement) s += "+R";
  return s.empty() ? "base" : s;
}

Toggles Toggles::parse(const std::string& text) {
  Toggles t;
  std::string token;
  auto flush = [&] {
    if (token.empty() || token == "none" || token == "base") {
      token.clear();
      return;
    }
    for (char ch : token) {
      switch (ch) {
        case 'I': t.patch_intervention = true; break;
        case 'F': t.feature_intervention = true; break;
        case 'C': t.counterfactual = true; break;
        case 'R': t.refinement = true; break;
        default: throw ParameterError("unknown toggle '" + std::string(1, ch) + "' in \"" + text + "\"");
      }
    }
    token.clear();
  };
  for (char ch : text) {
    if (ch == '+' || ch == ',' || std::isspace(static_cast<unsigned char>(ch)))
      flush();
    else
      token.push_back(ch);
  }
  flush();
  return t;
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }
std::string to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::step: return "step";
    case LrSchedule::constant: return "constant";
  }
  return "?";
}
OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ParameterError("unknown optimizer: " + s);
}
LrSchedule schedule_from_string(const std::string& s) {
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "step") return LrSchedule::step;
  if (s == "constant") return LrSchedule::constant;
  throw ParameterError("unknown learning-rate schedule: " + s);
}

void TrainConfig::validate() const {
  if (stage1_epochs < 1 || stage2_epochs < 0) throw ConfigurationError("train: epoch counts must be positive");
  if (batch_size < 1) throw ConfigurationError("train: batch size must be positive");
  if (!(learning_rate > 0.0) || !(stage2_lr_scale > 0.0)) throw ConfigurationError("train: learning rate must be positive");
  if (warmup_epochs < 0 || step_every < 1) throw ConfigurationError("train: invalid schedule parameters");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigurationError("train: momentum must be in [0, 1)");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigurationError("train: negative regulariser");
  if (alpha_gf < 0.0) throw ConfigurationError("train: alpha_gf must be non-negative");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigurationError("train: gamma must be in (0, 1)");
  if (!(l_init >= 0.0 && l_init <= 1.0)) throw ConfigurationError("train: l_init must be in [0, 1]");
  if (!(strength_step > 0.0)) throw ConfigurationError("train: strength step must be positive");
  if (target_per_class < 0) throw ConfigurationError("train: target_per_class must be non-negative");
  if (toggles.refinement && !toggles.counterfactual)
    throw ConfigurationError("train: refinement (R) requires counterfactual balancing (C)");
}

template <typename T>
T cross_entropy(const Vector<T>& logits, int label, Vector<T>* dlogits) {
  if (label < 0 || label >= logits.size()) throw ParameterError("cross_entropy: label out of range");
  const T mx = logits.maxCoeff();
  const Vector<T> e = (logits.array() - mx).exp();
  const T sum = e.sum();
  const T loss = std::log(sum) + mx - logits(label);
  if (dlogits) {
    *dlogits = e / sum;
    (*dlogits)(label) -= T(1);
  }
  return loss;
}

template float cross_entropy(const Vector<float>&, int, Vector<float>*);
template double cross_entropy(const Vector<double>&, int, Vector<double>*);

double loss_cls(const VectorD& logits, int label) { return cross_entropy<double>(logits, label, nullptr); }

double loss_finetune(std::span<const VectorD> lx, std::span<const VectorD> lxp, std::span<const int> labels,
                     double alpha_gf) {
  if (lx.size() != lxp.size() || lx.size() != labels.size())
    throw ParameterError("loss_finetune: logits of x, x' and labels must be batch-aligned");
  if (lx.empty()) throw ParameterError("loss_finetune: empty batch");
  double ce = 0.0, consistency = 0.0;
  for (size_t i = 0; i < lx.size(); ++i) {
    if (lx[i].size() != lxp[i].size()) throw ParameterError("loss_finetune: logit widths differ within a pair");
    ce += loss_cls(lx[i], labels[i]);
    consistency += (lx[i] - lxp[i]).squaredNorm();
  }
  const double n = static_cast<double>(lx.size());
  return ce / n + alpha_gf * consistency / n;
}

ModelSpec model_spec_for(const BackboneConfig& backbone, const Toggles& toggles, int prototype_count) {
  ModelSpec spec;
  spec.backbone = backbone;
  spec.head = toggles.feature_intervention ? HeadKind::deconfounded : HeadKind::linear;
  spec.prototype_count = prototype_count;
  return spec;
}

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const VisionTransformer<float>& model)
      : kind_(cfg.optimizer), momentum_(cfg.momentum), weight_decay_(cfg.weight_decay) {
    const size_t n = model.parameter_count();
    decay_.assign(n, 0);
    for (const auto& [name, s] : model.named_tensors()) {
      if (s.rows > 1 && s.cols > 1 && name != "pos" && name != "head.wa")
        std::fill(decay_.begin() + s.offset, decay_.begin() + s.offset + s.size(), 1);
    }
    first_.assign(n, 0.0f);
    if (kind_ == OptimizerKind::adamw) second_.assign(n, 0.0f);
  }

  void step(ParameterBuffer<float>& p, const ParameterBuffer<float>& g, double lr) {
    ++steps_;
    const float flr = static_cast<float>(lr);
    const float wd = static_cast<float>(weight_decay_);
    if (kind_ == OptimizerKind::sgd) {
      const float mu = static_cast<float>(momentum_);
      for (size_t i = 0; i < p.size(); ++i) {
        const float grad = g[i] + (decay_[i] ? wd * p[i] : 0.0f);
        first_[i] = mu * first_[i] + grad;
        p[i] -= flr * first_[i];
      }
      return;
    }
    constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(steps_));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(steps_));
    for (size_t i = 0; i < p.size(); ++i) {
      first_[i] = b1 * first_[i] + (1 - b1) * g[i];
      second_[i] = b2 * second_[i] + (1 - b2) * g[i] * g[i];
      const float update = (first_[i] / c1) / (std::sqrt(second_[i] / c2) + eps);
      p[i] -= flr * (update + (decay_[i] ? wd * p[i] : 0.0f));
    }
  }

  std::vector<double> state() const {
    std::vector<double> s;
    s.push_back(static_cast<double>(steps_));
    s.insert(s.end(), first_.begin(), first_.end());
    s.insert(s.end(), second_.begin(), second_.end());
    return s;
  }

  void load(const std::vector<double>& s) {
    const size_t expected = 1 + first_.size() + second_.size();
    if (s.size() != expected) throw StateError("resume: optimizer state does not match the model");
    steps_ = static_cast<long>(s[0]);
    std::copy(s.begin() + 1, s.begin() + 1 + first_.size(), first_.begin());
    std::copy(s.begin() + 1 + first_.size(), s.end(), second_.begin());
  }

 private:
  OptimizerKind kind_;
  double momentum_, weight_decay_;
  std::vector<uint8_t> decay_;
  ParameterBuffer<float> first_, second_;
  long steps_ = 0;
};

double scheduled_lr(const TrainConfig& cfg, double base, long step, long steps_per_epoch, long total_steps,
                    bool warmup) {
  const long warm = warmup ? std::min<long>(cfg.warmup_epochs * steps_per_epoch, total_steps - 1) : 0;
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  switch (cfg.schedule) {
    case LrSchedule::constant: return base;
    case LrSchedule::step: {
      const long epoch = step / std::max<long>(1, steps_per_epoch);
      return base * std::pow(cfg.step_factor, static_cast<double>(epoch / cfg.step_every));
    }
    case LrSchedule::cosine: {
      const double span = static_cast<double>(std::max<long>(1, total_steps - warm));
      const double t = static_cast<double>(step - warm) / span;
      return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
  }
  return base;
}

void clip_gradients(ParameterBuffer<float>& g, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (float v : g) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& v : g) v *= s;
  }
}

bool all_finite(const ParameterBuffer<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

std::vector<double> to_double(const ParameterBuffer<float>& v) { return {v.begin(), v.end()}; }

void load_into(ParameterBuffer<float>& dst, const std::vector<double>& src) {
  if (dst.size() != src.size()) throw StateError("checkpoint parameters do not match the model layout");
  std::transform(src.begin(), src.end(), dst.begin(), [](double v) { return static_cast<float>(v); });
}

double mean_score(const std::vector<double>& per_class, const std::vector<int>& present) {
  double s = 0.0;
  int n = 0;
  for (size_t c = 0; c < per_class.size(); ++c)
    if (present[c] > 0) {
      s += per_class[c];
      ++n;
    }
  return n > 0 ? s / n : 0.0;
}

std::vector<int> class_presence(const LongTailDataset& ds, const std::vector<size_t>& idx) {
  std::vector<int> present(ds.class_count(), 0);
  for (size_t i : idx) ++present[ds.train[i].label];
  return present;
}

void log_epoch(std::ostream* log, const EpochRecord& r, const std::vector<double>* acc_for_strength) {
  if (!log) return;
  json j;
  j["type"] = "epoch";
  j["stage"] = r.stage;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["lr"] = r.learning_rate;
  j["val_mean_recall"] = r.val_score;
  j["val_per_class"] = r.val_per_class;
  if (!r.strength.empty()) j["strength"] = r.strength;
  *log << j.dump() << "\n";
  if (acc_for_strength) {
    for (size_t c = 0; c < r.strength.size(); ++c) {
      json s;
      s["type"] = "strength";
      s["epoch"] = r.epoch;
      s["class"] = c;
      s["L"] = r.strength[c];
      s["acc"] = (*acc_for_strength)[c];
      *log << s.dump() << "\n";
    }
  }
  log->flush();
}

}  // namespace

template <typename T>
double accumulate_gradient(const VisionTransformer<T>& model, std::span<const GradientItem> items,
                           const ConfounderDictionary* confounders, int tokens, double alpha, bool feature_consistency,
                           ParameterBuffer<T>& grad) {
  using Trace = typename VisionTransformer<T>::Trace;
  using HeadTrace = typename VisionTransformer<T>::HeadTrace;
  if (items.empty()) throw ParameterError("accumulate_gradient: empty batch");
  if (grad.size() != model.parameter_count()) throw ParameterError("accumulate_gradient: gradient size mismatch");
  const T inv_b = T(1) / static_cast<T>(items.size());
  double loss_sum = 0.0;
  for (const auto& item : items) {
    Rng rng(item.seed);
    auto seq = model.embed_patches(*item.image);
    if (confounders != nullptr && tokens > 0) {
      const auto& s = confounders->entries[rng.uniform_int(static_cast<int>(confounders->size()))];
      seq = patch_intervene(seq, model.embed_patches(s.pixels), tokens, rng);
    }
    Trace trace;
    HeadTrace head;
    const Vector<T> f = model.forward_backbone(seq, &trace, &rng);
    const Vector<T> logits = model.forward_head(f, &head);
    Vector<T> dlogits;
    double loss = cross_entropy<T>(logits, item.label, &dlogits);
    dlogits *= inv_b;
    Vector<T> dfeature_extra;

    if (item.partner != nullptr) {
      const auto seq_p = model.embed_patches(*item.partner);
      Trace trace_p;
      HeadTrace head_p;
      const Vector<T> fp = model.forward_backbone(seq_p, &trace_p, &rng);
      const Vector<T> lp = model.forward_head(fp, &head_p);
      const T k = static_cast<T>(2.0 * alpha) * inv_b;
      Vector<T> dfp;
      if (feature_consistency) {
        const Vector<T> diff = f - fp;
        loss += alpha * static_cast<double>(diff.squaredNorm());
        dfeature_extra = k * diff;
        dfp = -k * diff;
      } else {
        const Vector<T> diff = logits - lp;
        loss += alpha * static_cast<double>(diff.squaredNorm());
        dlogits += k * diff;
        dfp = model.backward_head(head_p, Vector<T>(-k * diff), grad);
      }
      const Matrix<T> dtok_p = model.backward_backbone(trace_p, dfp, grad);
      model.backward_embedding(seq_p, dtok_p, grad);
    }
    Vector<T> df = model.backward_head(head, dlogits, grad);
    if (dfeature_extra.size() > 0) df += dfeature_extra;
    const Matrix<T> dtok = model.backward_backbone(trace, df, grad);
    model.backward_embedding(seq, dtok, grad);
    loss_sum += loss;
  }
  return loss_sum / static_cast<double>(items.size());
}

template double accumulate_gradient(const VisionTransformer<float>&, std::span<const GradientItem>,
                                    const ConfounderDictionary*, int, double, bool, ParameterBuffer<float>&);
template double accumulate_gradient(const VisionTransformer<double>&, std::span<const GradientItem>,
                                    const ConfounderDictionary*, int, double, bool, ParameterBuffer<double>&);

namespace {

struct StageContext {
  int stage;
  const LongTailDataset& ds;
  const TrainConfig& cfg;
  const TrainRunOptions& run;
  VisionTransformer<float>& model;
  Checkpoint& ck;
  std::vector<EpochRecord>& history;
};

void finish_epoch(StageContext& ctx, Optimizer& opt, const EpochRecord& rec_in, const std::vector<double>* acc) {
  EpochRecord rec = rec_in;
  ctx.history.push_back(rec);
  ctx.ck.loss_history.push_back(rec.train_loss);
  if (rec.val_score >= ctx.ck.best_score) {
    ctx.ck.best_score = rec.val_score;
    ctx.ck.best_epoch = rec.epoch;
    ctx.ck.parameters = to_double(ctx.model.parameters());
  }
  ctx.ck.epoch = rec.epoch + 1;
  ctx.ck.current_parameters = to_double(ctx.model.parameters());
  ctx.ck.optimizer_state = opt.state();
  log_epoch(ctx.run.log, rec, acc);
  if (ctx.run.snapshot) save_checkpoint(ctx.ck, *ctx.run.snapshot);
}

}  // namespace

std::vector<double> per_class_accuracy(const VisionTransformer<float>& model, const LongTailDataset& ds,
                                       std::span<const size_t> indices) {
  std::vector<int> correct(ds.class_count(), 0), total(ds.class_count(), 0);
  for (size_t i : indices) {
    const auto& s = ds.train.at(i);
    ++total[s.label];
    if (model.predict(s.image) == s.label) ++correct[s.label];
  }
  std::vector<double> acc(ds.class_count(), 0.0);
  for (int c = 0; c < ds.class_count(); ++c)
    if (total[c] > 0) acc[c] = static_cast<double>(correct[c]) / total[c];
  return acc;
}

VisionTransformer<float> initial_model(const ModelSpec& spec, uint64_t train_seed) {
  return VisionTransformer<float>(spec, derive_seed(train_seed, 1));
}

TrainResult train_stage1(const LongTailDataset& ds, const ConfounderDictionary* confounders,
                         const PrototypeDictionary* prototypes, const ModelSpec& spec, const TrainConfig& cfg,
                         const TrainRunOptions& run) {
  cfg.validate();
  const auto& tg = cfg.toggles;
  if (tg.feature_intervention && (prototypes == nullptr || prototypes->l() == 0))
    throw ConfigurationError("train_stage1: feature intervention (F) requires a prototype dictionary");
  if (tg.patch_intervention && (confounders == nullptr || confounders->empty()))
    throw ConfigurationError("train_stage1: patch intervention (I) requires a confounder dictionary");
  if ((spec.head == HeadKind::deconfounded) != tg.feature_intervention)
    throw ConfigurationError("train_stage1: model head does not match the feature-intervention toggle");
  const auto fit = ds.fit_indices();
  if (fit.empty()) throw DataError("train_stage1: dataset has no training samples");

  VisionTransformer<float> model = initial_model(spec, cfg.seed);
  if (tg.feature_intervention) model.set_prototypes(prototypes->prototypes);
  model.mark_ready();
  const int tokens =
      tg.patch_intervention ? (cfg.confounder_tokens >= 0 ? cfg.confounder_tokens : spec.backbone.patch_count() / 4) : 0;

  Checkpoint ck;
  ck.spec = spec;
  ck.stage = 1;
  ck.seed = cfg.seed;
  ck.config = cfg;
  if (tg.feature_intervention) {
    ck.prototypes = prototypes->prototypes;
    ck.prototype_fingerprint = prototypes->fingerprint();
  }
  Optimizer opt(cfg, model);
  if (run.resume) {
    if (run.resume->stage != 1) throw StateError("train_stage1: resume checkpoint is not a stage-1 state");
    load_into(model.parameters(), run.resume->current_parameters);
    opt.load(run.resume->optimizer_state);
    ck = *run.resume;
  }

  std::vector<EpochRecord> history;
  StageContext ctx{1, ds, cfg, run, model, ck, history};
  const auto val = ds.validation_indices();
  const auto present = class_presence(ds, val);
  const long steps_per_epoch = static_cast<long>((fit.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.stage1_epochs;
  ParameterBuffer<float> grad(model.parameter_count());

  for (int epoch = ck.epoch; epoch < cfg.stage1_epochs; ++epoch) {
    if (run.stop_after_epochs >= 0 && epoch >= run.stop_after_epochs) break;
    std::vector<size_t> order = fit;
    Rng shuffle(derive_seed(cfg.seed, 101, static_cast<uint64_t>(epoch)));
    shuffle.shuffle(order.begin(), order.end());
    const uint64_t epoch_seed = derive_seed(cfg.seed, 102, static_cast<uint64_t>(epoch));
    double loss_sum = 0.0;
    double lr = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b) {
      const size_t lo = static_cast<size_t>(b) * cfg.batch_size;
      const size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<GradientItem> items;
      for (size_t p = lo; p < hi; ++p)
        items.push_back({&ds.train[order[p]].image, nullptr, ds.train[order[p]].label, derive_seed(epoch_seed, p)});
      std::fill(grad.begin(), grad.end(), 0.0f);
      const double batch_loss =
          accumulate_gradient<float>(model, items, tg.patch_intervention ? confounders : nullptr, tokens, 0.0, false,
                                     grad) *
          static_cast<double>(items.size());
      if (!std::isfinite(batch_loss) || !all_finite(grad))
        throw DivergenceError("stage 1 diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(b));
      clip_gradients(grad, cfg.grad_clip);
      lr = scheduled_lr(cfg, cfg.learning_rate, epoch * steps_per_epoch + b, steps_per_epoch, total_steps, true);
      opt.step(model.parameters(), grad, lr);
      loss_sum += batch_loss;
    }
    EpochRecord rec;
    rec.stage = 1;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(fit.size());
    rec.learning_rate = lr;
    rec.val_per_class = per_class_accuracy(model, ds, val);
    rec.val_score = mean_score(rec.val_per_class, present);
    finish_epoch(ctx, opt, rec, nullptr);
  }
  return {std::move(ck), std::move(history)};
}

TrainResult train_stage2(const Checkpoint* stage1, const LongTailDataset& ds, const TrainConfig& cfg,
                         const TrainRunOptions& run) {
  cfg.validate();
  if (stage1 == nullptr) throw StateError("train_stage2: a stage-1 checkpoint is required");
  if (stage1->stage != 1 && !(run.resume && run.resume->stage == 2))
    throw StateError("train_stage2: starting checkpoint is not a stage-1 checkpoint");
  if (!cfg.toggles.counterfactual)
    throw ConfigurationError("train_stage2: counterfactual balancing (C) must be enabled");
  const auto fit = ds.fit_indices();
  if (fit.empty()) throw DataError("train_stage2: dataset has no training samples");

  VisionTransformer<float> model = stage1->model();
  Checkpoint ck;
  ck.spec = stage1->spec;
  ck.prototypes = stage1->prototypes;
  ck.prototype_fingerprint = stage1->prototype_fingerprint;
  ck.stage = 2;
  ck.seed = cfg.seed;
  ck.config = cfg;
  ck.strength = StrengthTable::uniform(ds.class_count(), cfg.l_init, cfg.gamma, cfg.strength_step);
  Optimizer opt(cfg, model);
  if (run.resume) {
    if (run.resume->stage != 2) throw StateError("train_stage2: resume checkpoint is not a stage-2 state");
    load_into(model.parameters(), run.resume->current_parameters);
    opt.load(run.resume->optimizer_state);
    ck = *run.resume;
  }

  std::vector<EpochRecord> history;
  StageContext ctx{2, ds, cfg, run, model, ck, history};
  const auto val = ds.validation_indices();
  const auto present = class_presence(ds, val);
  const int target = cfg.target_per_class > 0 ? cfg.target_per_class : ds.profile.n_max;
  const long steps_per_epoch =
      static_cast<long>((static_cast<size_t>(target) * ds.class_count() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * std::max(1, cfg.stage2_epochs);
  const double base_lr = cfg.learning_rate * cfg.stage2_lr_scale;
  ParameterBuffer<float> grad(model.parameter_count());

  for (int epoch = ck.epoch; epoch < cfg.stage2_epochs; ++epoch) {
    if (run.stop_after_epochs >= 0 && epoch >= run.stop_after_epochs) break;
    std::vector<double> acc;
    if (cfg.toggles.refinement) {
      acc = per_class_accuracy(model, ds, val);
      ck.strength = update_strength(ck.strength, acc, cfg.gamma);
    }
    Rng set_rng(derive_seed(cfg.seed, 201, static_cast<uint64_t>(epoch)));
    BalancedSetOptions bopt;
    bopt.target_per_class = target;
    bopt.allow_subsample = true;
    const auto balanced = build_balanced_set(ds, ck.strength, bopt, set_rng);

    std::vector<size_t> order(balanced.samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle(derive_seed(cfg.seed, 202, static_cast<uint64_t>(epoch)));
    shuffle.shuffle(order.begin(), order.end());
    const uint64_t epoch_seed = derive_seed(cfg.seed, 203, static_cast<uint64_t>(epoch));
    double loss_sum = 0.0, lr = 0.0;
    const long steps = static_cast<long>((order.size() + cfg.batch_size - 1) / cfg.batch_size);
    for (long b = 0; b < steps; ++b) {
      const size_t lo = static_cast<size_t>(b) * cfg.batch_size;
      const size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<Image> partners;
      partners.reserve(hi - lo);
      std::vector<GradientItem> items;
      for (size_t p = lo; p < hi; ++p) {
        const auto& s = balanced.samples[order[p]];
        Rng rng(derive_seed(epoch_seed, p));
        const auto& other = ds.train[fit[rng.uniform_int(static_cast<int>(fit.size()))]].image;
        auto aug = counterfactual_augment(s.image, other, ck.strength.strength[s.label], rng);
        const bool identical = aug.lambda == 0.0 || cfg.alpha_gf == 0.0;
        partners.push_back(std::move(aug.image));
        items.push_back({&s.image, identical ? nullptr : &partners.back(), s.label, rng.next()});
      }
      std::fill(grad.begin(), grad.end(), 0.0f);
      const double batch_loss =
          accumulate_gradient<float>(model, items, nullptr, 0, cfg.alpha_gf, cfg.consistency_on_features, grad) *
          static_cast<double>(items.size());
      if (!std::isfinite(batch_loss) || !all_finite(grad))
        throw DivergenceError("stage 2 diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(b));
      clip_gradients(grad, cfg.grad_clip);
      lr = scheduled_lr(cfg, base_lr, epoch * steps_per_epoch + b, steps_per_epoch, total_steps, false);
      opt.step(model.parameters(), grad, lr);
      loss_sum += batch_loss;
    }
    EpochRecord rec;
    rec.stage = 2;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.learning_rate = lr;
    rec.val_per_class = per_class_accuracy(model, ds, val);
    rec.val_score = mean_score(rec.val_per_class, present);
    rec.strength = ck.strength.strength;
    finish_epoch(ctx, opt, rec, cfg.toggles.refinement ? &acc : nullptr);
  }
  if (ck.parameters.empty()) ck.parameters = to_double(model.parameters());
  return {std::move(ck), std::move(history)};
}

}  // namespace tscnet

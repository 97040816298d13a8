#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tscnet/common.hpp"
#include "tscnet/confounder.hpp"
#include "tscnet/counterfactual.hpp"
#include "tscnet/datagen.hpp"
#include "tscnet/model.hpp"

namespace tscnet {

/// Independently switchable components: patch-level intervention (I),
/// feature-level intervention (F), counterfactual balancing (C) and adaptive
/// strength refinement (R).
struct Toggles {
  bool patch_intervention = false;
  bool feature_intervention = false;
  bool counterfactual = false;
  bool refinement = false;

  /// "base" or "+I+F+C+R"-style label.
  std::string label() const;
  /// Accepts "none"/"base"/"" or any combination of I, F, C, R separated by
  /// '+', ',' or whitespace.
  static Toggles parse(const std::string& text);
  bool operator==(const Toggles&) const = default;
};

enum class OptimizerKind { sgd, adamw };
enum class LrSchedule { cosine, step, constant };
std::string to_string(OptimizerKind k);
std::string to_string(LrSchedule s);
OptimizerKind optimizer_from_string(const std::string& s);
LrSchedule schedule_from_string(const std::string& s);

struct TrainConfig {
  int stage1_epochs = 40;
  int stage2_epochs = 15;
  int batch_size = 32;
  double learning_rate = 0.05;
  double stage2_lr_scale = 0.1;
  LrSchedule schedule = LrSchedule::cosine;
  int warmup_epochs = 2;
  int step_every = 4;        // step schedule: epochs between decays
  double step_factor = 0.1;  // step schedule: decay factor
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  int confounder_tokens = -1;  // m; negative means patch_count / 4
  double alpha_gf = 1.0;
  double gamma = 0.6;
  double l_init = 0.0;
  double strength_step = 0.1;
  int target_per_class = 0;  // 0: n_max of the training profile
  bool consistency_on_features = false;

  uint64_t seed = 0;
  Toggles toggles;

  void validate() const;
};

// Losses. Batch losses are means over the batch.
double loss_cls(const VectorD& logits, int label);
/// mean CE(logits_x) + alpha * mean ||logits_x - logits_x'||^2
double loss_finetune(std::span<const VectorD> logits_x, std::span<const VectorD> logits_x_prime,
                     std::span<const int> labels, double alpha_gf);

/// Cross-entropy for one sample; writes d loss / d logits.
template <typename T>
T cross_entropy(const Vector<T>& logits, int label, Vector<T>* dlogits);

/// One training example for accumulate_gradient. `partner` is the
/// counterfactual x' (nullptr: no consistency term); `seed` drives patch
/// intervention and dropout for this example.
struct GradientItem {
  const Image* image = nullptr;
  const Image* partner = nullptr;
  int label = 0;
  uint64_t seed = 0;
};

/// Adds the gradient of the batch loss (mean cross-entropy plus alpha times
/// the mean squared logit or feature difference of each pair) to `grad`, and
/// returns that loss. With `confounders` set, `tokens` confounder patches are
/// appended to every image first.
template <typename T>
double accumulate_gradient(const VisionTransformer<T>& model, std::span<const GradientItem> items,
                           const ConfounderDictionary* confounders, int tokens, double alpha, bool feature_consistency,
                           ParameterBuffer<T>& grad);

/// Model plus everything needed to continue or resume training.
struct Checkpoint {
  ModelSpec spec;
  std::vector<double> parameters;  // best-validation weights (the deliverable)
  MatrixD prototypes;              // empty for linear heads
  std::string prototype_fingerprint;
  int stage = 1;
  int epoch = 0;  // completed epochs within the stage
  uint64_t seed = 0;
  TrainConfig config;
  double best_score = -1.0;
  int best_epoch = -1;
  StrengthTable strength;
  std::vector<double> loss_history;
  // Resume state.
  std::vector<double> current_parameters;
  std::vector<double> optimizer_state;

  VisionTransformer<float> model() const;
  template <typename T>
  VisionTransformer<T> model_as() const;
  std::string fingerprint() const;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& stem);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

struct EpochRecord {
  int stage = 1;
  int epoch = 0;
  double train_loss = 0.0;
  double learning_rate = 0.0;
  double val_score = 0.0;  // mean per-class recall on the validation slice
  std::vector<double> val_per_class;
  std::vector<double> strength;
};

struct TrainRunOptions {
  std::ostream* log = nullptr;  // JSON lines
  std::optional<std::filesystem::path> snapshot;  // rewritten after every epoch
  const Checkpoint* resume = nullptr;
  int stop_after_epochs = -1;  // for interrupted runs; negative runs to completion
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
};

/// Model layout implied by a backbone and the toggles.
ModelSpec model_spec_for(const BackboneConfig& backbone, const Toggles& toggles, int prototype_count);

/// Freshly initialised stage-1 model for a training seed. Confounder features
/// for the prototype dictionary are taken from this backbone.
VisionTransformer<float> initial_model(const ModelSpec& spec, uint64_t train_seed);

TrainResult train_stage1(const LongTailDataset& dataset, const ConfounderDictionary* confounders,
                         const PrototypeDictionary* prototypes, const ModelSpec& spec, const TrainConfig& config,
                         const TrainRunOptions& run = {});

TrainResult train_stage2(const Checkpoint* stage1, const LongTailDataset& dataset, const TrainConfig& config,
                         const TrainRunOptions& run = {});

/// Per-class recall of a model on a subset of the training split.
std::vector<double> per_class_accuracy(const VisionTransformer<float>& model, const LongTailDataset& dataset,
                                       std::span<const size_t> indices);

}  // namespace tscnet

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tscnet/common.hpp"

namespace tscnet {

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 2.0;
  int class_count = 10;
  double dropout = 0.0;

  /// Throws ParameterError on an inconsistent configuration.
  void validate() const;
  int grid() const { return image_size / patch_size; }
  int patch_count() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int mlp_dim() const;
  int head_dim() const { return embed_dim / heads; }
  bool operator==(const BackboneConfig&) const = default;
};

enum class HeadKind { linear, deconfounded };
std::string to_string(HeadKind k);
HeadKind head_kind_from_string(const std::string& s);

struct ModelSpec {
  BackboneConfig backbone;
  HeadKind head = HeadKind::linear;
  int prototype_count = 8;  // l
  int prototype_dim = 0;    // d; 0 means embed_dim
  int attention_dim = 0;    // width of the query/key projections; 0 means embed_dim

  int resolved_prototype_dim() const { return prototype_dim > 0 ? prototype_dim : backbone.embed_dim; }
  int resolved_attention_dim() const { return attention_dim > 0 ? attention_dim : backbone.embed_dim; }
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

/// Class token followed by patch tokens. `patches` keeps the raw pixel patch
/// behind each token (zero row for the class token) so that gradients can be
/// pushed back through the embedding, including for appended confounder
/// tokens.
template <typename T>
struct PatchSequence {
  Matrix<T> tokens;
  std::vector<int> position_ids;
  Matrix<T> patches;

  int length() const { return static_cast<int>(tokens.rows()); }
};

/// Location of one parameter tensor inside the flat parameter vector.
struct TensorSlot {
  size_t offset = 0;
  int rows = 0;
  int cols = 1;
  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

/// Anything that maps an image to class logits. Saliency masking and
/// evaluation work against this interface.
class ImageClassifier {
 public:
  virtual ~ImageClassifier() = default;
  virtual int class_count() const = 0;
  virtual VectorD logits(const Image& image) const = 0;
  virtual bool supports_input_gradient() const { return false; }
  /// Gradient of logit `class_id` w.r.t. every input pixel.
  virtual Image input_gradient(const Image& image, int class_id) const;
  int predict(const Image& image) const;
};

template <typename T>
class VisionTransformer final : public ImageClassifier {
 public:
  struct BlockTrace {
    Matrix<T> input, ln1_hat, ln1_out, qkv, heads_out, mid, ln2_hat, ln2_out, fc1_pre, fc1_act;
    Vector<T> ln1_rstd, ln2_rstd;
    std::vector<Matrix<T>> attention;  // per head, N x N row-stochastic
    Matrix<T> drop_attn, drop_mlp;     // empty when dropout is inactive
  };
  struct Trace {
    std::vector<BlockTrace> blocks;
    Vector<T> final_hat;  // normalised class token (depth > 0)
    T final_rstd = T(0);
  };
  struct HeadTrace {
    Vector<T> feature;
    Vector<T> query, scores, mu, mixture, fused;
    Matrix<T> keys;
  };

  VisionTransformer(const ModelSpec& spec, uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const BackboneConfig& config() const { return spec_.backbone; }

  ParameterBuffer<T>& parameters() { return params_; }
  const ParameterBuffer<T>& parameters() const { return params_; }
  size_t parameter_count() const { return params_.size(); }
  const std::vector<std::pair<std::string, TensorSlot>>& named_tensors() const { return named_; }
  const TensorSlot& slot(const std::string& name) const;

  void set_prototypes(const MatrixD& prototypes);
  bool has_prototypes() const { return prototypes_.rows() > 0; }
  const Matrix<T>& prototypes() const { return prototypes_; }

  /// Inference is refused until weights are trained or loaded.
  void mark_ready(bool ready = true) { ready_ = ready; }
  bool ready() const { return ready_; }

  PatchSequence<T> embed_patches(const Image& image) const;
  Vector<T> forward_backbone(const PatchSequence<T>& seq, Trace* trace = nullptr, Rng* dropout_rng = nullptr) const;
  Vector<T> forward_head(const Vector<T>& feature, HeadTrace* trace = nullptr) const;
  Vector<T> forward_deconfounded(const Vector<T>& feature, HeadTrace* trace = nullptr) const;
  Vector<T> forward_inference(const Image& image) const;
  std::vector<Vector<T>> forward_inference(std::span<const Image> images) const;
  /// Pre-classifier embedding of an image with no intervention.
  Vector<T> feature(const Image& image) const;

  // Backward passes accumulate into `grad` (same layout as parameters()).
  Vector<T> backward_head(const HeadTrace& trace, const Vector<T>& dlogits, ParameterBuffer<T>& grad) const;
  Matrix<T> backward_backbone(const Trace& trace, const Vector<T>& dfeature, ParameterBuffer<T>& grad) const;
  /// Returns d loss / d patches, rows aligned with the sequence tokens.
  Matrix<T> backward_embedding(const PatchSequence<T>& seq, const Matrix<T>& dtokens, ParameterBuffer<T>& grad) const;

  // ImageClassifier
  int class_count() const override { return spec_.backbone.class_count; }
  VectorD logits(const Image& image) const override;
  bool supports_input_gradient() const override { return true; }
  Image input_gradient(const Image& image, int class_id) const override;

  /// Same weights and prototypes in another scalar type.
  template <typename U>
  VisionTransformer<U> cast() const {
    VisionTransformer<U> out(spec_, 0);
    for (size_t i = 0; i < params_.size(); ++i) out.parameters()[i] = static_cast<U>(params_[i]);
    if (has_prototypes()) out.set_prototypes(prototypes_.template cast<double>());
    out.mark_ready(ready_);
    return out;
  }

  /// Hex digest of the parameter values (float64 little-endian).
  std::string fingerprint() const;

 private:
  struct BlockSlots {
    TensorSlot ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  TensorSlot add(const std::string& name, int rows, int cols = 1);
  void initialise(uint64_t seed);
  void check_image(const Image& image) const;

  ModelSpec spec_;
  ParameterBuffer<T> params_;
  std::vector<std::pair<std::string, TensorSlot>> named_;
  TensorSlot patch_w_, patch_b_, cls_, pos_, norm_g_, norm_b_;
  std::vector<BlockSlots> blocks_;
  TensorSlot head_w_, head_b_, wa_, wb_, wq_, wk_;
  Matrix<T> prototypes_;
  bool ready_ = false;
};

/// Appends `m` class-agnostic patch tokens sampled without replacement from
/// `confounder` (class token excluded). Appended tokens keep the position ids
/// of their source grid cells.
template <typename T>
PatchSequence<T> patch_intervene(const PatchSequence<T>& sequence, const PatchSequence<T>& confounder, int m,
                                 Rng& rng);

/// Attention rollout from the class token to each patch, averaged over heads
/// with identity residual mixing; returns a grid x grid map.
template <typename T>
MatrixD attention_rollout(const typename VisionTransformer<T>::Trace& trace, int grid);

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;

}  // namespace tscnet

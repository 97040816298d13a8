#include "tscnet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

namespace tscnet {

namespace {

// Fixed pixel standardisation applied before the patch projection.
constexpr double kPixelMean = 0.5;
constexpr double kPixelScale = 4.0;

constexpr double kLayerNormEps = 1e-5;

template <typename T>
using MatMap = Eigen::Map<Matrix<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Matrix<T>>;
template <typename T>
using VecMap = Eigen::Map<Vector<T>>;
template <typename T>
using CVecMap = Eigen::Map<const Vector<T>>;

template <typename T>
CMatMap<T> cmat(const ParameterBuffer<T>& buf, const TensorSlot& s) {
  return CMatMap<T>(buf.data() + s.offset, s.rows, s.cols);
}
template <typename T>
MatMap<T> mat(ParameterBuffer<T>& buf, const TensorSlot& s) {
  return MatMap<T>(buf.data() + s.offset, s.rows, s.cols);
}
template <typename T>
CVecMap<T> cvec(const ParameterBuffer<T>& buf, const TensorSlot& s) {
  return CVecMap<T>(buf.data() + s.offset, static_cast<Eigen::Index>(s.size()));
}
template <typename T>
VecMap<T> vec(ParameterBuffer<T>& buf, const TensorSlot& s) {
  return VecMap<T>(buf.data() + s.offset, static_cast<Eigen::Index>(s.size()));
}

template <typename T>
void layer_norm(const Matrix<T>& x, const CVecMap<T>& g, const CVecMap<T>& b, Matrix<T>& hat, Vector<T>& rstd,
                Matrix<T>& out) {
  const auto n = x.rows(), d = x.cols();
  hat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    hat.row(r) = x.row(r).array() - mean;
    const T var = hat.row(r).squaredNorm() / static_cast<T>(d);
    rstd(r) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    hat.row(r) *= rstd(r);
  }
  out = (hat.array().rowwise() * g.transpose().array()).matrix();
  out.rowwise() += b.transpose();
}

// Returns dx; accumulates dg and db.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dout, const Matrix<T>& hat, const Vector<T>& rstd,
                              const CVecMap<T>& g, VecMap<T> dg, VecMap<T> db) {
  dg.noalias() += (dout.array() * hat.array()).colwise().sum().matrix().transpose();
  db.noalias() += dout.colwise().sum().transpose();
  Matrix<T> dhat = (dout.array().rowwise() * g.transpose().array()).matrix();
  const T inv_d = T(1) / static_cast<T>(hat.cols());
  Matrix<T> dx(dout.rows(), dout.cols());
  for (Eigen::Index r = 0; r < dout.rows(); ++r) {
    const T m1 = dhat.row(r).sum() * inv_d;
    const T m2 = dhat.row(r).dot(hat.row(r)) * inv_d;
    dx.row(r) = rstd(r) * (dhat.row(r).array() - m1 - hat.row(r).array() * m2).matrix();
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(k * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T c = static_cast<T>(0.044715);
  const T t = std::tanh(k * (x + c * x * x * x));
  return static_cast<T>(0.5) * (T(1) + t) +
         static_cast<T>(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
}

template <typename T>
void softmax_rows(Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename T>
Vector<T> softmax(const Vector<T>& v) {
  Vector<T> out = (v.array() - v.maxCoeff()).exp();
  return out / out.sum();
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? T(0) : keep;
  return m;
}

}  // namespace

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw ParameterError("BackboneConfig: image_size must be a positive multiple of patch_size");
  if (channels <= 0) throw ParameterError("BackboneConfig: channels must be positive");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw ParameterError("BackboneConfig: embed_dim must be divisible by heads");
  if (depth < 0) throw ParameterError("BackboneConfig: depth must be non-negative");
  if (!(mlp_ratio > 0.0)) throw ParameterError("BackboneConfig: mlp_ratio must be positive");
  if (class_count < 1) throw ParameterError("BackboneConfig: class_count must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("BackboneConfig: dropout must be in [0, 1)");
}

int BackboneConfig::mlp_dim() const { return std::max(1, static_cast<int>(std::lround(embed_dim * mlp_ratio))); }

std::string to_string(HeadKind k) { return k == HeadKind::linear ? "linear" : "deconfounded"; }

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "deconfounded") return HeadKind::deconfounded;
  throw ParameterError("unknown head kind: " + s);
}

void ModelSpec::validate() const {
  backbone.validate();
  if (head == HeadKind::deconfounded && prototype_count < 1)
    throw ParameterError("ModelSpec: prototype_count must be positive");
  if (prototype_dim < 0 || attention_dim < 0) throw ParameterError("ModelSpec: negative dimension");
}

Image ImageClassifier::input_gradient(const Image&, int) const {
  throw UnsupportedModelError("model does not provide input gradients");
}

int ImageClassifier::predict(const Image& image) const {
  const VectorD l = logits(image);
  Eigen::Index best = 0;
  l.maxCoeff(&best);
  return static_cast<int>(best);
}

template <typename T>
VisionTransformer<T>::VisionTransformer(const ModelSpec& spec, uint64_t seed) : spec_(spec) {
  spec_.validate();
  const auto& c = spec_.backbone;
  const int d = c.embed_dim, h = c.mlp_dim();
  patch_w_ = add("patch.w", d, c.patch_dim());
  patch_b_ = add("patch.b", d);
  cls_ = add("cls", d);
  pos_ = add("pos", 1 + c.patch_count(), d);
  for (int b = 0; b < c.depth; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    BlockSlots s;
    s.ln1_g = add(p + "ln1.g", d);
    s.ln1_b = add(p + "ln1.b", d);
    s.qkv_w = add(p + "qkv.w", 3 * d, d);
    s.qkv_b = add(p + "qkv.b", 3 * d);
    s.proj_w = add(p + "proj.w", d, d);
    s.proj_b = add(p + "proj.b", d);
    s.ln2_g = add(p + "ln2.g", d);
    s.ln2_b = add(p + "ln2.b", d);
    s.fc1_w = add(p + "fc1.w", h, d);
    s.fc1_b = add(p + "fc1.b", h);
    s.fc2_w = add(p + "fc2.w", d, h);
    s.fc2_b = add(p + "fc2.b", d);
    blocks_.push_back(s);
  }
  if (c.depth > 0) {
    norm_g_ = add("norm.g", d);
    norm_b_ = add("norm.b", d);
  }
  if (spec_.head == HeadKind::deconfounded) {
    const int dp = spec_.resolved_prototype_dim(), dk = spec_.resolved_attention_dim();
    wa_ = add("head.wa", d, d);
    wb_ = add("head.wb", d, dp);
    wq_ = add("head.wq", dk, d);
    wk_ = add("head.wk", dk, dp);
  }
  head_w_ = add("head.w", c.class_count, d);
  head_b_ = add("head.b", c.class_count);
  params_.assign(named_.empty() ? 0 : named_.back().second.offset + named_.back().second.size(), T(0));
  initialise(seed);
}

template <typename T>
TensorSlot VisionTransformer<T>::add(const std::string& name, int rows, int cols) {
  const size_t offset = named_.empty() ? 0 : named_.back().second.offset + named_.back().second.size();
  TensorSlot s{offset, rows, cols};
  named_.emplace_back(name, s);
  return s;
}

template <typename T>
const TensorSlot& VisionTransformer<T>::slot(const std::string& name) const {
  for (const auto& [n, s] : named_)
    if (n == name) return s;
  throw ParameterError("unknown parameter tensor: " + name);
}

template <typename T>
void VisionTransformer<T>::initialise(uint64_t seed) {
  Rng rng(seed);
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& [name, s] : named_) {
    auto m = mat(params_, s);
    if (name == "head.wa") {
      m.setIdentity();
    } else if (name == "cls" || name == "pos") {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(0.02 * rng.normal());
    } else if (ends_with(name, ".g")) {
      m.setOnes();
    } else if (ends_with(name, ".b")) {
      m.setZero();
    } else {
      const double limit = std::sqrt(6.0 / (s.rows + s.cols));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
    }
  }
}

template <typename T>
void VisionTransformer<T>::set_prototypes(const MatrixD& prototypes) {
  if (prototypes.rows() < 1) throw ParameterError("set_prototypes: empty prototype dictionary");
  if (prototypes.cols() != spec_.resolved_prototype_dim())
    throw ParameterError("set_prototypes: prototype width " + std::to_string(prototypes.cols()) +
                         " does not match model prototype dimension " +
                         std::to_string(spec_.resolved_prototype_dim()));
  prototypes_ = prototypes.cast<T>();
}

template <typename T>
void VisionTransformer<T>::check_image(const Image& image) const {
  const auto& c = spec_.backbone;
  if (image.height != c.image_size || image.width != c.image_size || image.channels != c.channels)
    throw ParameterError("image shape " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                         std::to_string(image.channels) + " does not match the backbone configuration");
}

template <typename T>
PatchSequence<T> VisionTransformer<T>::embed_patches(const Image& image) const {
  check_image(image);
  const auto& c = spec_.backbone;
  const int g = c.grid(), p = c.patch_size, ch = c.channels, n = c.patch_count();
  PatchSequence<T> seq;
  seq.patches = Matrix<T>::Zero(1 + n, c.patch_dim());
  seq.position_ids.resize(1 + n);
  std::iota(seq.position_ids.begin(), seq.position_ids.end(), 0);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const int row = 1 + gy * g + gx;
      int k = 0;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int cc = 0; cc < ch; ++cc) seq.patches(row, k++) = static_cast<T>((image.at(gy * p + py, gx * p + px, cc) - kPixelMean) * kPixelScale);
    }
  const auto W = cmat(params_, patch_w_);
  const auto b = cvec(params_, patch_b_);
  const auto pos = cmat(params_, pos_);
  seq.tokens.resize(1 + n, c.embed_dim);
  seq.tokens.bottomRows(n).noalias() = seq.patches.bottomRows(n) * W.transpose();
  seq.tokens.bottomRows(n).rowwise() += b.transpose();
  seq.tokens.row(0) = cvec(params_, cls_).transpose();
  seq.tokens += pos;
  return seq;
}

template <typename T>
PatchSequence<T> patch_intervene(const PatchSequence<T>& sequence, const PatchSequence<T>& confounder, int m,
                                 Rng& rng) {
  if (m < 0) throw ParameterError("patch_intervene: negative token count");
  const int available = confounder.length() - 1;
  if (m > available)
    throw ParameterError("patch_intervene: requested " + std::to_string(m) + " confounder tokens but only " +
                         std::to_string(available) + " are available");
  if (sequence.tokens.cols() != confounder.tokens.cols() || sequence.patches.cols() != confounder.patches.cols())
    throw ParameterError("patch_intervene: sequences have different widths");
  if (m == 0) return sequence;
  std::vector<int> pool(available);
  std::iota(pool.begin(), pool.end(), 1);
  for (int i = 0; i < m; ++i) std::swap(pool[i], pool[i + rng.uniform_int(available - i)]);

  const int n = sequence.length();
  PatchSequence<T> out;
  out.tokens.resize(n + m, sequence.tokens.cols());
  out.patches.resize(n + m, sequence.patches.cols());
  out.tokens.topRows(n) = sequence.tokens;
  out.patches.topRows(n) = sequence.patches;
  out.position_ids = sequence.position_ids;
  for (int i = 0; i < m; ++i) {
    out.tokens.row(n + i) = confounder.tokens.row(pool[i]);
    out.patches.row(n + i) = confounder.patches.row(pool[i]);
    out.position_ids.push_back(confounder.position_ids[pool[i]]);
  }
  return out;
}

template <typename T>
Vector<T> VisionTransformer<T>::forward_backbone(const PatchSequence<T>& seq, Trace* trace, Rng* dropout_rng) const {
  const auto& c = spec_.backbone;
  const int d = c.embed_dim, nh = c.heads, dh = c.head_dim();
  if (seq.tokens.cols() != d || seq.length() < 1)
    throw ParameterError("forward_backbone: sequence width does not match embed_dim");
  const bool drop = dropout_rng != nullptr && c.dropout > 0.0;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto N = seq.tokens.rows();

  if (trace) trace->blocks.clear();
  Matrix<T> x = seq.tokens;
  for (const auto& s : blocks_) {
    BlockTrace bt;
    bt.input = x;
    layer_norm(x, cvec(params_, s.ln1_g), cvec(params_, s.ln1_b), bt.ln1_hat, bt.ln1_rstd, bt.ln1_out);
    bt.qkv.noalias() = bt.ln1_out * cmat(params_, s.qkv_w).transpose();
    bt.qkv.rowwise() += cvec(params_, s.qkv_b).transpose();
    bt.heads_out.resize(N, d);
    bt.attention.resize(nh);
    for (int h = 0; h < nh; ++h) {
      const auto Q = bt.qkv.middleCols(h * dh, dh);
      const auto K = bt.qkv.middleCols(d + h * dh, dh);
      const auto V = bt.qkv.middleCols(2 * d + h * dh, dh);
      Matrix<T>& A = bt.attention[h];
      A.noalias() = (Q * K.transpose()) * scale;
      softmax_rows(A);
      bt.heads_out.middleCols(h * dh, dh).noalias() = A * V;
    }
    Matrix<T> y = bt.heads_out * cmat(params_, s.proj_w).transpose();
    y.rowwise() += cvec(params_, s.proj_b).transpose();
    if (drop) {
      bt.drop_attn = dropout_mask<T>(N, d, c.dropout, *dropout_rng);
      y.array() *= bt.drop_attn.array();
    }
    bt.mid = x + y;
    layer_norm(bt.mid, cvec(params_, s.ln2_g), cvec(params_, s.ln2_b), bt.ln2_hat, bt.ln2_rstd, bt.ln2_out);
    bt.fc1_pre.noalias() = bt.ln2_out * cmat(params_, s.fc1_w).transpose();
    bt.fc1_pre.rowwise() += cvec(params_, s.fc1_b).transpose();
    bt.fc1_act = bt.fc1_pre.unaryExpr([](T v) { return gelu(v); });
    Matrix<T> z = bt.fc1_act * cmat(params_, s.fc2_w).transpose();
    z.rowwise() += cvec(params_, s.fc2_b).transpose();
    if (drop) {
      bt.drop_mlp = dropout_mask<T>(N, d, c.dropout, *dropout_rng);
      z.array() *= bt.drop_mlp.array();
    }
    x = bt.mid + z;
    if (trace) trace->blocks.push_back(std::move(bt));
  }

  Vector<T> cls = x.row(0).transpose();
  if (blocks_.empty()) return cls;
  const T mean = cls.mean();
  Vector<T> hat = cls.array() - mean;
  const T rstd = T(1) / std::sqrt(hat.squaredNorm() / static_cast<T>(d) + static_cast<T>(kLayerNormEps));
  hat *= rstd;
  if (trace) {
    trace->final_hat = hat;
    trace->final_rstd = rstd;
  }
  return (hat.array() * cvec(params_, norm_g_).array() + cvec(params_, norm_b_).array()).matrix();
}

template <typename T>
Vector<T> VisionTransformer<T>::forward_head(const Vector<T>& feature, HeadTrace* trace) const {
  if (spec_.head == HeadKind::deconfounded) return forward_deconfounded(feature, trace);
  if (feature.size() != spec_.backbone.embed_dim) throw ParameterError("forward_head: feature width mismatch");
  if (trace) trace->feature = feature;
  Vector<T> out = cmat(params_, head_w_) * feature + cvec(params_, head_b_);
  return out;
}

template <typename T>
Vector<T> VisionTransformer<T>::forward_deconfounded(const Vector<T>& feature, HeadTrace* trace) const {
  if (spec_.head != HeadKind::deconfounded)
    throw ConfigurationError("forward_deconfounded: model was built with a linear head");
  if (!has_prototypes()) throw ConfigurationError("forward_deconfounded: no prototype dictionary loaded");
  if (feature.size() != spec_.backbone.embed_dim)
    throw ParameterError("forward_deconfounded: feature width mismatch");
  const int dk = spec_.resolved_attention_dim();
  HeadTrace local;
  HeadTrace& t = trace ? *trace : local;
  t.feature = feature;
  t.query = cmat(params_, wq_) * feature;
  t.keys = prototypes_ * cmat(params_, wk_).transpose();
  t.scores = (t.keys * t.query) / std::sqrt(static_cast<T>(dk));
  t.mu = softmax(t.scores);
  t.mixture = prototypes_.transpose() * t.mu;
  t.fused = cmat(params_, wa_) * feature + cmat(params_, wb_) * t.mixture;
  Vector<T> out = cmat(params_, head_w_) * t.fused + cvec(params_, head_b_);
  return out;
}

template <typename T>
Vector<T> VisionTransformer<T>::backward_head(const HeadTrace& t, const Vector<T>& dlogits, ParameterBuffer<T>& grad) const {
  const auto Wc = cmat(params_, head_w_);
  if (spec_.head == HeadKind::linear) {
    mat(grad, head_w_).noalias() += dlogits * t.feature.transpose();
    vec(grad, head_b_) += dlogits;
    return Wc.transpose() * dlogits;
  }
  const int dk = spec_.resolved_attention_dim();
  mat(grad, head_w_).noalias() += dlogits * t.fused.transpose();
  vec(grad, head_b_) += dlogits;
  const Vector<T> dfused = Wc.transpose() * dlogits;
  const auto Wa = cmat(params_, wa_);
  const auto Wb = cmat(params_, wb_);
  const auto Wq = cmat(params_, wq_);
  mat(grad, wa_).noalias() += dfused * t.feature.transpose();
  mat(grad, wb_).noalias() += dfused * t.mixture.transpose();
  Vector<T> dfeature = Wa.transpose() * dfused;
  const Vector<T> dmix = Wb.transpose() * dfused;
  const Vector<T> dmu = prototypes_ * dmix;
  const T inner = t.mu.dot(dmu);
  const Vector<T> dscores =
      (t.mu.array() * (dmu.array() - inner)).matrix() / std::sqrt(static_cast<T>(dk));
  const Vector<T> dq = t.keys.transpose() * dscores;
  const Matrix<T> dkeys = dscores * t.query.transpose();
  mat(grad, wq_).noalias() += dq * t.feature.transpose();
  mat(grad, wk_).noalias() += dkeys.transpose() * prototypes_;
  dfeature.noalias() += Wq.transpose() * dq;
  return dfeature;
}

template <typename T>
Matrix<T> VisionTransformer<T>::backward_backbone(const Trace& trace, const Vector<T>& dfeature,
                                                  ParameterBuffer<T>& grad) const {
  const auto& c = spec_.backbone;
  const int d = c.embed_dim, nh = c.heads, dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  if (trace.blocks.size() != blocks_.size()) throw StateError("backward_backbone: trace does not match model");

  if (blocks_.empty()) {
    // Only the class token reaches the feature; the caller sizes the result
    // from the sequence it embedded.
    Matrix<T> dx = Matrix<T>::Zero(1, d);
    dx.row(0) = dfeature.transpose();
    return dx;
  }
  const auto N = trace.blocks.front().input.rows();
  Matrix<T> dx = Matrix<T>::Zero(N, d);
  {
    const auto g = cvec(params_, norm_g_);
    vec(grad, norm_g_).array() += dfeature.array() * trace.final_hat.array();
    vec(grad, norm_b_) += dfeature;
    const Vector<T> dhat = dfeature.array() * g.array();
    const T m1 = dhat.mean();
    const T m2 = dhat.dot(trace.final_hat) / static_cast<T>(d);
    dx.row(0) = (trace.final_rstd * (dhat.array() - m1 - trace.final_hat.array() * m2)).matrix().transpose();
  }

  for (int bi = static_cast<int>(blocks_.size()) - 1; bi >= 0; --bi) {
    const auto& s = blocks_[bi];
    const auto& bt = trace.blocks[bi];

    // MLP branch.
    Matrix<T> dz = dx;
    if (bt.drop_mlp.size() > 0) dz.array() *= bt.drop_mlp.array();
    mat(grad, s.fc2_w).noalias() += dz.transpose() * bt.fc1_act;
    vec(grad, s.fc2_b) += dz.colwise().sum().transpose();
    Matrix<T> dact = dz * cmat(params_, s.fc2_w);
    dact.array() *= bt.fc1_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    mat(grad, s.fc1_w).noalias() += dact.transpose() * bt.ln2_out;
    vec(grad, s.fc1_b) += dact.colwise().sum().transpose();
    const Matrix<T> dln2 = dact * cmat(params_, s.fc1_w);
    Matrix<T> dmid = dx + layer_norm_backward(dln2, bt.ln2_hat, bt.ln2_rstd, cvec(params_, s.ln2_g),
                                              vec(grad, s.ln2_g), vec(grad, s.ln2_b));

    // Attention branch.
    Matrix<T> dy = dmid;
    if (bt.drop_attn.size() > 0) dy.array() *= bt.drop_attn.array();
    mat(grad, s.proj_w).noalias() += dy.transpose() * bt.heads_out;
    vec(grad, s.proj_b) += dy.colwise().sum().transpose();
    const Matrix<T> dheads = dy * cmat(params_, s.proj_w);
    Matrix<T> dqkv(N, 3 * d);
    for (int h = 0; h < nh; ++h) {
      const auto Q = bt.qkv.middleCols(h * dh, dh);
      const auto K = bt.qkv.middleCols(d + h * dh, dh);
      const auto V = bt.qkv.middleCols(2 * d + h * dh, dh);
      const Matrix<T>& A = bt.attention[h];
      const auto dO = dheads.middleCols(h * dh, dh);
      Matrix<T> dA = dO * V.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() = A.transpose() * dO;
      const Vector<T> inner = (dA.array() * A.array()).rowwise().sum();
      Matrix<T> dS = (A.array() * (dA.array().colwise() - inner.array())).matrix() * scale;
      dqkv.middleCols(h * dh, dh).noalias() = dS * K;
      dqkv.middleCols(d + h * dh, dh).noalias() = dS.transpose() * Q;
    }
    mat(grad, s.qkv_w).noalias() += dqkv.transpose() * bt.ln1_out;
    vec(grad, s.qkv_b) += dqkv.colwise().sum().transpose();
    const Matrix<T> dln1 = dqkv * cmat(params_, s.qkv_w);
    dx = dmid + layer_norm_backward(dln1, bt.ln1_hat, bt.ln1_rstd, cvec(params_, s.ln1_g), vec(grad, s.ln1_g),
                                    vec(grad, s.ln1_b));
  }
  return dx;
}

template <typename T>
Matrix<T> VisionTransformer<T>::backward_embedding(const PatchSequence<T>& seq, const Matrix<T>& dtokens_in,
                                                   ParameterBuffer<T>& grad) const {
  const int n = seq.length();
  Matrix<T> dtokens = dtokens_in;
  if (dtokens.rows() != n) {
    // depth-0 backbones only report the class-token gradient
    Matrix<T> full = Matrix<T>::Zero(n, dtokens.cols());
    full.topRows(dtokens.rows()) = dtokens;
    dtokens = std::move(full);
  }
  const Eigen::Index rows = n - 1;
  auto gpos = mat(grad, pos_);
  for (int r = 0; r < n; ++r) gpos.row(seq.position_ids[r]) += dtokens.row(r);
  vec(grad, cls_) += dtokens.row(0).transpose();
  Matrix<T> dpatches = Matrix<T>::Zero(n, seq.patches.cols());
  if (rows > 0) {
    mat(grad, patch_w_).noalias() += dtokens.bottomRows(rows).transpose() * seq.patches.bottomRows(rows);
    vec(grad, patch_b_) += dtokens.bottomRows(rows).colwise().sum().transpose();
    dpatches.bottomRows(rows).noalias() = dtokens.bottomRows(rows) * cmat(params_, patch_w_);
  }
  return dpatches;
}

template <typename T>
Vector<T> VisionTransformer<T>::feature(const Image& image) const {
  return forward_backbone(embed_patches(image));
}

template <typename T>
Vector<T> VisionTransformer<T>::forward_inference(const Image& image) const {
  if (!ready_) throw StateError("forward_inference: model weights are not trained or loaded");
  return forward_head(forward_backbone(embed_patches(image)));
}

template <typename T>
std::vector<Vector<T>> VisionTransformer<T>::forward_inference(std::span<const Image> images) const {
  std::vector<Vector<T>> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(forward_inference(im));
  return out;
}

template <typename T>
VectorD VisionTransformer<T>::logits(const Image& image) const {
  return forward_inference(image).template cast<double>();
}

template <typename T>
Image VisionTransformer<T>::input_gradient(const Image& image, int class_id) const {
  if (class_id < 0 || class_id >= class_count()) throw ParameterError("input_gradient: class id out of range");
  const auto seq = embed_patches(image);
  Trace trace;
  HeadTrace ht;
  const Vector<T> f = forward_backbone(seq, &trace);
  forward_head(f, &ht);
  ParameterBuffer<T> scratch(params_.size(), T(0));
  Vector<T> dl = Vector<T>::Zero(class_count());
  dl(class_id) = T(1);
  const Vector<T> df = backward_head(ht, dl, scratch);
  const Matrix<T> dtok = backward_backbone(trace, df, scratch);
  const Matrix<T> dp = backward_embedding(seq, dtok, scratch);

  const auto& c = spec_.backbone;
  const int g = c.grid(), p = c.patch_size;
  Image out(image.height, image.width, image.channels);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const int row = 1 + gy * g + gx;
      int k = 0;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int cc = 0; cc < c.channels; ++cc)
            out.at(gy * p + py, gx * p + px, cc) = static_cast<double>(dp(row, k++)) * kPixelScale;
    }
  return out;
}

template <typename T>
std::string VisionTransformer<T>::fingerprint() const {
  std::vector<double> values(params_.begin(), params_.end());
  for (Eigen::Index i = 0; i < prototypes_.size(); ++i) values.push_back(static_cast<double>(prototypes_.data()[i]));
  return sha256_hex(std::span(reinterpret_cast<const uint8_t*>(values.data()), values.size() * sizeof(double)));
}

template <typename T>
MatrixD attention_rollout(const typename VisionTransformer<T>::Trace& trace, int grid) {
  if (trace.blocks.empty()) return MatrixD::Constant(grid, grid, 1.0 / (grid * grid));
  const auto N = trace.blocks.front().input.rows();
  MatrixD rollout = MatrixD::Identity(N, N);
  for (const auto& bt : trace.blocks) {
    MatrixD mean = MatrixD::Zero(N, N);
    for (const auto& a : bt.attention) mean += a.template cast<double>();
    mean /= static_cast<double>(bt.attention.size());
    MatrixD mixed = 0.5 * mean + 0.5 * MatrixD::Identity(N, N);
    for (Eigen::Index r = 0; r < N; ++r) mixed.row(r) /= mixed.row(r).sum();
    rollout = mixed * rollout;
  }
  MatrixD map(grid, grid);
  double total = 0.0;
  for (int i = 0; i < grid * grid; ++i) total += rollout(0, 1 + i);
  for (int i = 0; i < grid * grid; ++i) map(i / grid, i % grid) = total > 0 ? rollout(0, 1 + i) / total : 0.0;
  return map;
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template PatchSequence<float> patch_intervene(const PatchSequence<float>&, const PatchSequence<float>&, int, Rng&);
template PatchSequence<double> patch_intervene(const PatchSequence<double>&, const PatchSequence<double>&, int,
                                               Rng&);
template MatrixD attention_rollout<float>(const VisionTransformer<float>::Trace&, int);
template MatrixD attention_rollout<double>(const VisionTransformer<double>::Trace&, int);

}  // namespace tscnet

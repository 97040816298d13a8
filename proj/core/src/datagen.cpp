#include "tscnet/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

namespace tscnet {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kBaseShapes = 10;
constexpr int kShapeStyles = 4;
constexpr int kBaseTextures = 10;

enum class BaseShape { triangle, square, pentagon, hexagon, disc, ellipse, semicircle, plus, xcross, star };

constexpr std::array<BaseShape, kBaseShapes> kShapeOrder = {
    BaseShape::triangle, BaseShape::disc,    BaseShape::plus,       BaseShape::square, BaseShape::ellipse,
    BaseShape::xcross,   BaseShape::pentagon, BaseShape::semicircle, BaseShape::star,   BaseShape::hexagon};

int family_of(BaseShape s) {
  switch (s) {
    case BaseShape::triangle:
    case BaseShape::square:
    case BaseShape::pentagon:
    case BaseShape::hexagon:
      return 0;
    case BaseShape::disc:
    case BaseShape::ellipse:
    case BaseShape::semicircle:
      return 1;
    default:
      return 2;
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

bool inside_regular_polygon(double u, double v, int n) {
  const double rho = std::hypot(u, v);
  if (rho == 0.0) return true;
  const double sector = 2.0 * kPi / n;
  double theta = std::atan2(v, u) + kPi / 2.0;
  theta = std::fmod(std::fmod(theta, sector) + sector, sector);
  return rho <= std::cos(kPi / n) / std::cos(theta - kPi / n);
}

bool inside_polygon(double u, double v, const std::vector<std::array<double, 2>>& poly) {
  bool in = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

const std::vector<std::array<double, 2>>& star_polygon() {
  static const auto poly = [] {
    std::vector<std::array<double, 2>> p;
    for (int k = 0; k < 10; ++k) {
      const double r = (k % 2 == 0) ? 1.0 : 0.45;
      const double a = -kPi / 2.0 + k * kPi / 5.0;
      p.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return p;
  }();
  return poly;
}

bool inside_base(BaseShape s, double u, double v) {
  switch (s) {
    case BaseShape::triangle: return inside_regular_polygon(u, v - 0.15, 3);
    case BaseShape::square: return inside_regular_polygon(u, v, 4);
    case BaseShape::pentagon: return inside_regular_polygon(u, v, 5);
    case BaseShape::hexagon: return inside_regular_polygon(u, v, 6);
    case BaseShape::disc: return u * u + v * v <= 0.85;
    case BaseShape::ellipse: return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    case BaseShape::semicircle: return u * u + (v - 0.3) * (v - 0.3) <= 1.0 && v <= 0.3;
    case BaseShape::plus:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case BaseShape::xcross: {
      const double a = (u + v) / std::numbers::sqrt2;
      const double b = (u - v) / std::numbers::sqrt2;
      return (std::abs(a) <= 0.3 && std::abs(b) <= 1.0) || (std::abs(b) <= 0.3 && std::abs(a) <= 1.0);
    }
    case BaseShape::star: return inside_polygon(u, v, star_polygon());
  }
  return false;
}

bool inside_styled(BaseShape s, int style, double u, double v) {
  if (!inside_base(s, u, v)) return false;
  switch (style) {
    case 0: return true;
    case 1: return !inside_base(s, u / 0.55, v / 0.55);
    case 2: return !inside_base(s, u / 0.75, v / 0.75);
    default: return std::hypot(u, v) > 0.35;
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double luminance(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

int ImbalanceProfile::total() const { return std::accumulate(counts.begin(), counts.end(), 0); }

ImbalanceProfile build_imbalance_profile(int class_count, int n_max, double ratio) {
  if (class_count < 2) throw ParameterError("build_imbalance_profile: class count must be >= 2");
  if (n_max < 1) throw ParameterError("build_imbalance_profile: n_max must be >= 1");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ParameterError("build_imbalance_profile: ratio must be in (0, 1]");
  ImbalanceProfile p{class_count, n_max, ratio, {}};
  p.counts.reserve(class_count);
  for (int j = 0; j < class_count; ++j) {
    const double exact = n_max * std::pow(ratio, static_cast<double>(j) / (class_count - 1));
    p.counts.push_back(std::max(1, static_cast<int>(std::lround(exact))));
  }
  return p;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::head: return "head";
    case Split::mid: return "mid";
    case Split::tail: return "tail";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "head") return Split::head;
  if (s == "mid") return Split::mid;
  if (s == "tail") return Split::tail;
  throw ParameterError("unknown split name: " + s);
}

std::vector<int> LongTailDataset::train_counts() const {
  std::vector<int> counts(class_count(), 0);
  for (const auto& s : train) ++counts.at(s.label);
  return counts;
}

std::vector<size_t> LongTailDataset::fit_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < train.size(); ++i)
    if (!train[i].validation) out.push_back(i);
  return out;
}

std::vector<size_t> LongTailDataset::validation_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < train.size(); ++i)
    if (train[i].validation) out.push_back(i);
  return out;
}

int max_synthetic_classes() { return kBaseShapes * kShapeStyles; }

int synthetic_shape_family(int label) { return family_of(kShapeOrder[label % kBaseShapes]); }

RenderedShape render_shape(int label, int image_size, Rng& rng) {
  if (label < 0 || label >= max_synthetic_classes())
    throw ParameterError("render_shape: label outside the synthetic shape catalogue");
  const BaseShape base = kShapeOrder[label % kBaseShapes];
  const int style = label / kBaseShapes;
  const double s = image_size;
  const double cx = s / 2.0 + rng.uniform(-0.08, 0.08) * s;
  const double cy = s / 2.0 + rng.uniform(-0.08, 0.08) * s;
  const double radius = rng.uniform(0.28, 0.36) * s;
  const double rot = rng.uniform(-20.0, 20.0) * kPi / 180.0;
  const double cr = std::cos(rot), sr = std::sin(rot);

  RenderedShape out{Mask(image_size, image_size), {}};
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
      const double u = cr * dx + sr * dy, v = -sr * dx + cr * dy;
      out.mask.at(y, x) = inside_styled(base, style, u, v) ? 1 : 0;
    }
  }
  const auto rgb = hsv_to_rgb(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.85, 1.0));
  for (int c = 0; c < 3; ++c) out.color[c] = rgb[c];
  return out;
}

Image render_texture(int texture_id, int image_size, int channels, Rng& rng) {
  if (texture_id < 0) throw ParameterError("render_texture: negative texture id");
  if (channels != 1 && channels != 3) throw ParameterError("render_texture: channels must be 1 or 3");
  const int family = texture_id % kBaseTextures;
  const double freq_scale = 1.0 + 0.5 * (texture_id / kBaseTextures);
  const double s = image_size;

  // Fixed palette per family, small per-sample jitter.
  auto palette = [&](int k, double off) {
    auto c = hsv_to_rgb(0.1 * k + off, 0.55, 0.5);
    for (auto& v : c) v = std::clamp(v + rng.uniform(-0.04, 0.04), 0.0, 1.0);
    return c;
  };
  const auto c0 = palette(texture_id, 0.0);
  auto c1 = palette(texture_id, 0.45);
  for (auto& v : c1) v *= 0.45;
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const double ox = rng.uniform(0.0, s), oy = rng.uniform(0.0, s);
  double blob[3][3];
  for (auto& b : blob) {
    b[0] = rng.uniform(-2.0, 2.0);
    b[1] = rng.uniform(-2.0, 2.0);
    b[2] = rng.uniform(0.0, 2.0 * kPi);
  }

  Image img(image_size, image_size, channels);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double fx = x / s, fy = y / s;
      double t = 0.0;
      switch (family) {
        case 0: t = 0.5 + 0.5 * std::sin(2 * kPi * 4 * freq_scale * fy + phase); break;
        case 1: t = 0.5 + 0.5 * std::sin(2 * kPi * 4 * freq_scale * fx + phase); break;
        case 2: t = 0.5 + 0.5 * std::sin(2 * kPi * 3 * freq_scale * (fx + fy) + phase); break;
        case 3: t = 0.5 + 0.5 * std::sin(2 * kPi * 3 * freq_scale * (fx - fy) + phase); break;
        case 4: {
          const int period = std::max(2, static_cast<int>(8 / freq_scale));
          const int gx = static_cast<int>(std::floor((x + ox) / period));
          const int gy = static_cast<int>(std::floor((y + oy) / period));
          t = ((gx + gy) % 2 == 0) ? 1.0 : 0.0;
          break;
        }
        case 5: {
          const double period = 6.0 / freq_scale;
          const double mx = std::fmod(x + ox, period) - period / 2, my = std::fmod(y + oy, period) - period / 2;
          t = (mx * mx + my * my <= period * period / 9.0) ? 1.0 : 0.0;
          break;
        }
        case 6: {
          const double r = std::hypot(x - ox, y - oy);
          t = 0.5 + 0.5 * std::sin(2 * kPi * r / (5.0 / freq_scale) + phase);
          break;
        }
        case 7: {
          double acc = 0.0;
          for (const auto& b : blob) acc += std::sin(2 * kPi * (b[0] * fx + b[1] * fy) + b[2]);
          t = 0.5 + acc / 6.0;
          break;
        }
        case 8: t = 0.5 + 0.5 * std::sin(2 * kPi * 10 * freq_scale * fx + phase); break;
        default: t = rng.uniform(); break;
      }
      t = std::clamp(t, 0.0, 1.0);
      std::array<double, 3> c{};
      for (int k = 0; k < 3; ++k) c[k] = (1 - t) * c1[k] + t * c0[k];
      if (channels == 1) {
        img.at(y, x, 0) = quantize(luminance(c));
      } else {
        for (int k = 0; k < 3; ++k) img.at(y, x, k) = quantize(c[k]);
      }
    }
  }
  return img;
}

Image composite(const Image& background, const RenderedShape& shape) {
  Image out = background;
  const std::array<double, 3> col{shape.color[0], shape.color[1], shape.color[2]};
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      if (!shape.mask.at(y, x)) continue;
      if (out.channels == 1) {
        out.at(y, x, 0) = quantize(luminance(col));
      } else {
        for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = quantize(col[c]);
      }
    }
  return out;
}

Sample render_sample(int label, int texture_id, int image_size, int channels, uint64_t shape_seed,
                     uint64_t texture_seed) {
  Rng shape_rng(shape_seed), texture_rng(texture_seed);
  const auto shape = render_shape(label, image_size, shape_rng);
  const auto background = render_texture(texture_id, image_size, channels, texture_rng);
  Sample s;
  s.image = composite(background, shape);
  s.label = label;
  s.mask = shape.mask;
  s.background_id = texture_id;
  return s;
}

LongTailDataset generate_synthetic_dataset(const ImbalanceProfile& profile, const SyntheticOptions& opt) {
  if (profile.class_count < 2 || static_cast<int>(profile.counts.size()) != profile.class_count)
    throw ParameterError("generate_synthetic_dataset: invalid profile");
  if (profile.class_count > max_synthetic_classes())
    throw ParameterError("generate_synthetic_dataset: at most " + std::to_string(max_synthetic_classes()) +
                         " classes are supported");
  if (!(opt.confound_strength >= 0.0 && opt.confound_strength <= 1.0))
    throw ParameterError("generate_synthetic_dataset: confound strength must be in [0, 1]");
  if (opt.image_size < 8) throw ParameterError("generate_synthetic_dataset: image size must be >= 8");
  if (opt.texture_count < 1) throw ParameterError("generate_synthetic_dataset: need at least one texture");
  if (opt.test_per_class < 0) throw ParameterError("generate_synthetic_dataset: negative test size");
  if (!(opt.validation_fraction >= 0.0 && opt.validation_fraction < 1.0))
    throw ParameterError("generate_synthetic_dataset: validation fraction must be in [0, 1)");

  LongTailDataset ds;
  ds.profile = profile;
  ds.seed = opt.seed;
  ds.image_size = opt.image_size;
  ds.channels = opt.channels;
  ds.texture_count = opt.texture_count;
  ds.confound_strength = opt.confound_strength;
  const int C = profile.class_count, K = opt.texture_count;

  size_t index = 0;
  for (int c = 0; c < C; ++c) {
    for (int k = 0; k < profile.counts[c]; ++k, ++index) {
      Rng assign(derive_seed(opt.seed, 3, index));
      const bool confounded = assign.uniform() < opt.confound_strength;
      const int texture = confounded ? c % K : assign.uniform_int(K);
      ds.train.push_back(render_sample(c, texture, opt.image_size, opt.channels, derive_seed(opt.seed, 1, index),
                                       derive_seed(opt.seed, 2, index)));
    }
  }
  index = 0;
  for (int c = 0; c < C; ++c) {
    for (int k = 0; k < opt.test_per_class; ++k, ++index) {
      Rng assign(derive_seed(opt.seed, 6, index));
      ds.test.push_back(render_sample(c, assign.uniform_int(K), opt.image_size, opt.channels,
                                      derive_seed(opt.seed, 4, index), derive_seed(opt.seed, 5, index)));
    }
  }

  // Stratified validation slice.
  size_t offset = 0;
  for (int c = 0; c < C; ++c) {
    const int n = profile.counts[c];
    int n_val = static_cast<int>(std::lround(opt.validation_fraction * n));
    if (opt.validation_fraction > 0.0 && n >= 2) n_val = std::max(n_val, 1);
    n_val = std::min(n_val, n - 1);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(opt.seed, 7, c));
    rng.shuffle(order.begin(), order.end());
    for (int k = 0; k < n_val; ++k) ds.train[offset + order[k]].validation = true;
    offset += n;
  }

  ds.similarity_group.resize(C);
  for (int c = 0; c < C; ++c) ds.similarity_group[c] = synthetic_shape_family(c);
  assign_splits(ds, opt.head_fraction, opt.tail_fraction);
  return ds;
}

std::vector<Split> compute_splits(const std::vector<int>& counts, double head_fraction, double tail_fraction) {
  if (!(head_fraction >= 0.0 && head_fraction <= 1.0) || !(tail_fraction >= 0.0 && tail_fraction <= 1.0) ||
      head_fraction + tail_fraction > 1.0 + 1e-12)
    throw ParameterError("assign_splits: head/tail fractions must lie in [0,1] and sum to at most 1");
  const int C = static_cast<int>(counts.size());
  std::vector<int> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] > counts[b]; });
  const int n_head = std::min(C, static_cast<int>(std::ceil(head_fraction * C - 1e-9)));
  const int n_tail = std::min(C - n_head, static_cast<int>(std::floor(tail_fraction * C + 1e-9)));
  std::vector<Split> splits(C, Split::mid);
  for (int r = 0; r < C; ++r) {
    if (r < n_head)
      splits[order[r]] = Split::head;
    else if (r >= C - n_tail)
      splits[order[r]] = Split::tail;
  }
  return splits;
}

void assign_splits(LongTailDataset& dataset, double head_fraction, double tail_fraction) {
  dataset.splits = compute_splits(dataset.train_counts(), head_fraction, tail_fraction);
}

}  // namespace tscnet

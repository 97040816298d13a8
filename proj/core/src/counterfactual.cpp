#include "tscnet/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include <fftw3.h>

namespace tscnet {

namespace {

// FFTW planning is not thread-safe; plans are created once per shape under a
// lock and executed with the new-array interface.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }
  fftw_plan get(int h, int w, int c, int sign) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(h, w, c, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    int dims[2] = {h, w};
    fftw_complex* in = fftw_alloc_complex(static_cast<size_t>(h) * w * c);
    fftw_complex* out = fftw_alloc_complex(static_cast<size_t>(h) * w * c);
    fftw_plan p = fftw_plan_many_dft(2, dims, c, in, nullptr, c, 1, out, nullptr, c, 1, sign,
                                     FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(in);
    fftw_free(out);
    if (p == nullptr) throw Error("fftw: failed to create plan");
    plans_.emplace(key, p);
    return p;
  }
  ~PlanCache() {
    for (auto& [k, p] : plans_) fftw_destroy_plan(p);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int, int>, fftw_plan> plans_;
};

using Complex = std::complex<double>;

std::vector<Complex> transform(std::vector<Complex> data, int h, int w, int c, int sign) {
  std::vector<Complex> out(data.size());
  fftw_plan p = PlanCache::instance().get(h, w, c, sign);
  fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(data.data()), reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

double snap(double v) { return std::round(v * 1e9) / 1e9; }

}  // namespace

SpectralPair fft_decompose(const Image& image) {
  if (image.size() == 0) throw ParameterError("fft_decompose: empty image");
  std::vector<Complex> data(image.pixels.begin(), image.pixels.end());
  const auto spec = transform(std::move(data), image.height, image.width, image.channels, FFTW_FORWARD);
  SpectralPair out{image.height, image.width, image.channels, std::vector<double>(spec.size()),
                   std::vector<double>(spec.size())};
  for (size_t i = 0; i < spec.size(); ++i) {
    out.amplitude[i] = std::abs(spec[i]);
    double ph = std::arg(spec[i]);
    if (ph <= -std::numbers::pi) ph = std::numbers::pi;
    out.phase[i] = ph;
  }
  return out;
}

Image fft_recompose(const SpectralPair& s) {
  if (s.amplitude.size() != s.phase.size() ||
      s.amplitude.size() != static_cast<size_t>(s.height) * s.width * s.channels)
    throw ParameterError("fft_recompose: inconsistent spectrum");
  std::vector<Complex> data(s.amplitude.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = std::polar(s.amplitude[i], s.phase[i]);
  const auto spatial = transform(std::move(data), s.height, s.width, s.channels, FFTW_BACKWARD);
  Image out(s.height, s.width, s.channels);
  const double norm = 1.0 / (static_cast<double>(s.height) * s.width);
  for (size_t i = 0; i < spatial.size(); ++i) out.pixels[i] = spatial[i].real() * norm;
  return out;
}

std::vector<double> amplitude_mix(const std::vector<double>& a, const std::vector<double>& b, double lambda) {
  if (a.size() != b.size()) throw ParameterError("amplitude_mix: amplitude spectra have different shapes");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("amplitude_mix: lambda must be in [0, 1]");
  if (lambda == 0.0) return a;
  if (lambda == 1.0) return b;
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - lambda) * a[i] + lambda * b[i];
  return out;
}

Image amplitude_swap(const Image& x, const Image& x_prime, double lambda) {
  if (!x.same_shape(x_prime)) throw ParameterError("amplitude_swap: images have different shapes");
  SpectralPair sx = fft_decompose(x);
  const SpectralPair sp = fft_decompose(x_prime);
  sx.amplitude = amplitude_mix(sx.amplitude, sp.amplitude, lambda);
  return fft_recompose(sx);
}

AugmentResult counterfactual_augment(const Image& x, const Image& x_prime, double strength, Rng& rng) {
  if (!x.same_shape(x_prime)) throw ParameterError("counterfactual_augment: images have different shapes");
  if (!(strength >= 0.0 && strength <= 1.0))
    throw ParameterError("counterfactual_augment: strength must be in [0, 1]");
  const double lambda = strength * rng.uniform();
  if (lambda == 0.0) return {x, 0.0};
  Image out = amplitude_swap(x, x_prime, lambda);
  for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return {std::move(out), lambda};
}

StrengthTable StrengthTable::uniform(int class_count, double initial, double gamma, double step) {
  if (class_count < 1) throw ParameterError("StrengthTable: class count must be positive");
  if (!(initial >= 0.0 && initial <= 1.0)) throw ParameterError("StrengthTable: initial strength must be in [0, 1]");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("StrengthTable: gamma must be in (0, 1)");
  if (!(step > 0.0)) throw ParameterError("StrengthTable: step must be positive");
  return {std::vector<double>(class_count, initial), 0, gamma, step};
}

StrengthTable update_strength(const StrengthTable& table, const std::map<int, double>& acc, double gamma) {
  std::vector<double> dense(table.class_count());
  for (int c = 0; c < table.class_count(); ++c) {
    const auto it = acc.find(c);
    if (it == acc.end()) throw ParameterError("update_strength: no accuracy for class " + std::to_string(c));
    dense[c] = it->second;
  }
  return update_strength(table, dense, gamma);
}

StrengthTable update_strength(const StrengthTable& table, const std::vector<double>& acc, double gamma) {
  if (static_cast<int>(acc.size()) != table.class_count())
    throw ParameterError("update_strength: accuracy vector covers " + std::to_string(acc.size()) + " of " +
                         std::to_string(table.class_count()) + " classes");
  StrengthTable next = table;
  next.gamma = gamma;
  for (int c = 0; c < table.class_count(); ++c) {
    if (!(acc[c] >= 0.0 && acc[c] <= 1.0)) throw ParameterError("update_strength: accuracy must be in [0, 1]");
    const double moved = acc[c] >= gamma ? table.strength[c] + table.step : table.strength[c] - table.step;
    next.strength[c] = std::clamp(snap(moved), 0.0, 1.0);
  }
  ++next.epoch;
  return next;
}

std::vector<int> BalancedCounterfactualSet::label_histogram(int class_count) const {
  std::vector<int> h(class_count, 0);
  for (const auto& s : samples) ++h.at(s.label);
  return h;
}

std::vector<int> BalancedCounterfactualSet::augmented_counts(int class_count) const {
  std::vector<int> h(class_count, 0);
  for (const auto& s : samples)
    if (s.augmented) ++h.at(s.label);
  return h;
}

BalancedCounterfactualSet build_balanced_set(const LongTailDataset& dataset, const StrengthTable& table,
                                             const BalancedSetOptions& options, Rng& rng) {
  const int C = dataset.class_count();
  if (table.class_count() != C) throw ParameterError("build_balanced_set: strength table has the wrong class count");
  const auto fit = dataset.fit_indices();
  if (fit.empty()) throw DataError("build_balanced_set: dataset has no training samples");
  std::vector<std::vector<size_t>> members(C);
  for (size_t i : fit) members.at(dataset.train[i].label).push_back(i);
  int max_count = 0;
  for (int c = 0; c < C; ++c) {
    if (members[c].empty()) throw DataError("build_balanced_set: class " + std::to_string(c) + " has no samples");
    max_count = std::max(max_count, static_cast<int>(members[c].size()));
  }
  const int target = options.target_per_class > 0 ? options.target_per_class : dataset.profile.n_max;
  if (target < max_count && !options.allow_subsample)
    throw ParameterError("build_balanced_set: target " + std::to_string(target) + " is below the largest class (" +
                         std::to_string(max_count) + ") and subsampling is not allowed");

  BalancedCounterfactualSet out;
  out.target_per_class = target;
  out.samples.reserve(static_cast<size_t>(target) * C);
  for (int c = 0; c < C; ++c) {
    std::vector<size_t> originals = members[c];
    if (static_cast<int>(originals.size()) > target) {
      rng.shuffle(originals.begin(), originals.end());
      originals.resize(target);
      std::sort(originals.begin(), originals.end());
    }
    for (size_t i : originals) {
      BalancedSample s;
      s.image = dataset.train[i].image;
      s.label = c;
      s.source_id = static_cast<int>(i);
      out.samples.push_back(std::move(s));
    }
    for (int k = static_cast<int>(originals.size()); k < target; ++k) {
      const size_t src = members[c][rng.uniform_int(static_cast<int>(members[c].size()))];
      const size_t partner = fit[rng.uniform_int(static_cast<int>(fit.size()))];
      auto aug = counterfactual_augment(dataset.train[src].image, dataset.train[partner].image, table.strength[c], rng);
      BalancedSample s;
      s.image = std::move(aug.image);
      s.label = c;
      s.augmented = true;
      s.source_id = static_cast<int>(src);
      s.partner_id = static_cast<int>(partner);
      s.lambda = aug.lambda;
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace tscnet

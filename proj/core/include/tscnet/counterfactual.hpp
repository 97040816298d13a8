#pragma once

#include <map>
#include <string>
#include <vector>

#include "tscnet/common.hpp"
#include "tscnet/datagen.hpp"

namespace tscnet {

/// Per-channel 2-D DFT in polar form, laid out like Image (H x W x C).
/// The forward transform is unnormalised; the inverse divides by H*W.
struct SpectralPair {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> amplitude;  // >= 0
  std::vector<double> phase;      // (-pi, pi]
};

SpectralPair fft_decompose(const Image& image);
/// Real part of the inverse transform of amplitude * exp(i * phase). No clipping.
Image fft_recompose(const SpectralPair& spectrum);

/// (1 - lambda) * a + lambda * b, elementwise.
std::vector<double> amplitude_mix(const std::vector<double>& a, const std::vector<double>& b, double lambda);

/// Recomposition of x's phase with the amplitude mixed toward x_prime by
/// `lambda`, before clipping.
Image amplitude_swap(const Image& x, const Image& x_prime, double lambda);

struct AugmentResult {
  Image image;
  double lambda = 0.0;
};

/// Draws lambda ~ U(0, strength), mixes amplitudes, keeps x's phase and clips
/// to [0, 1]. lambda == 0 returns x unchanged.
AugmentResult counterfactual_augment(const Image& x, const Image& x_prime, double strength, Rng& rng);

/// Per-class counterfactual strength, adapted once per epoch.
struct StrengthTable {
  std::vector<double> strength;  // L_c in [0, 1]
  int epoch = 0;
  double gamma = 0.6;
  double step = 0.1;

  static StrengthTable uniform(int class_count, double initial, double gamma, double step = 0.1);
  int class_count() const { return static_cast<int>(strength.size()); }
};

/// L_c += step when acc_c >= gamma, else L_c -= step; clamp to [0, 1].
/// Values are snapped to a 1e-9 grid so that repeated +-0.1 steps land on the
/// decimal literals.
StrengthTable update_strength(const StrengthTable& table, const std::map<int, double>& per_class_accuracy,
                              double gamma);
StrengthTable update_strength(const StrengthTable& table, const std::vector<double>& per_class_accuracy,
                              double gamma);

struct BalancedSample {
  Image image;
  int label = 0;
  bool augmented = false;
  int source_id = -1;   // index into dataset.train of the content source
  int partner_id = -1;  // index of x' for augmented samples
  double lambda = 0.0;
};

struct BalancedCounterfactualSet {
  std::vector<BalancedSample> samples;
  int target_per_class = 0;

  std::vector<int> label_histogram(int class_count) const;
  std::vector<int> augmented_counts(int class_count) const;
};

struct BalancedSetOptions {
  int target_per_class = 0;  // 0: n_max of the training profile
  bool allow_subsample = false;
};

/// Pads every class of the fit split up to the target with counterfactual
/// augmentations of uniformly resampled members; partners come from the whole
/// fit split. Originals are always included (head classes are subsampled only
/// when allowed).
BalancedCounterfactualSet build_balanced_set(const LongTailDataset& dataset, const StrengthTable& table,
                                             const BalancedSetOptions& options, Rng& rng);

}  // namespace tscnet

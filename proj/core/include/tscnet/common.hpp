#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace tscnet {

// Error taxonomy shared by every module. Each kind maps onto one failure class
// of the public operations (bad arguments, bad configuration, wrong lifecycle
// state, malformed data, ingestion problems, file system problems).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
class ConfigurationError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};
class IngestionError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class UnsupportedModelError : public Error {
 public:
  using Error::Error;
};
class DivergenceError : public Error {
 public:
  using Error::Error;
};

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using MatrixD = Matrix<double>;
using VectorD = Vector<double>;
/// Flat parameter or gradient storage. Aligned so that vectorised reductions over
/// tensor slices are reproducible from run to run.
template <typename T>
using ParameterBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense image, interleaved height x width x channels, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(static_cast<size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

/// Binary per-pixel mask, 1 = foreground object.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> bits;

  Mask() = default;
  Mask(int h, int w, uint8_t fill = 0) : height(h), width(w), bits(static_cast<size_t>(h) * w, fill) {}

  uint8_t& at(int y, int x) { return bits[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x]; }
  size_t foreground_count() const;
  bool operator==(const Mask&) const = default;
};

// Deterministic random stream (xoshiro256**, splitmix64 seeding). The
// distributions are implemented here rather than taken from <random> so that
// streams are reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  uint64_t next();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  int uniform_int(int n);                  // [0, n)
  double normal();
  template <typename It>
  void shuffle(It first, It last) {
    for (auto n = last - first; n > 1; --n) std::swap(first[n - 1], first[uniform_int(static_cast<int>(n))]);
  }

 private:
  uint64_t state_[4];
};

/// Mixes a base seed with stream identifiers into an independent seed.
uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index = 0);

/// Hex SHA-256 of a byte range, a file, or a string.
std::string sha256_hex(std::span<const uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

void write_binary_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
std::vector<uint8_t> read_binary_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// Little-endian float64 matrix blobs.
void write_matrix_blob(const std::filesystem::path& path, const MatrixD& m);
MatrixD read_matrix_blob(const std::filesystem::path& path, int rows, int cols);

std::string version_string();

}  // namespace tscnet

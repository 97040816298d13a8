#include "tscnet/common.hpp"

#include <bit>
#include <cstring>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <openssl/evp.h>

namespace tscnet {

namespace {

uint64_t splitmix64(uint64_t& x) {
  uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

std::string to_hex(const unsigned char* digest, unsigned len) {
  std::ostringstream out;
  for (unsigned i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

}  // namespace

size_t Mask::foreground_count() const {
  size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

Rng::Rng(uint64_t seed) {
  for (auto& s : state_) s = splitmix64(seed);
}

uint64_t Rng::next() {
  const uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
  if (n <= 0) throw ParameterError("Rng::uniform_int: n must be positive");
  // Lemire's nearly-divisionless bounded integer.
  const uint64_t range = static_cast<uint64_t>(n);
  unsigned __int128 m = static_cast<unsigned __int128>(next()) * range;
  auto low = static_cast<uint64_t>(m);
  if (low < range) {
    const uint64_t threshold = -range % range;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next()) * range;
      low = static_cast<uint64_t>(m);
    }
  }
  return static_cast<int>(m >> 64);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
  uint64_t x = base;
  uint64_t a = splitmix64(x);
  x = a ^ (stream * 0xD1B54A32D192ED03ULL);
  uint64_t b = splitmix64(x);
  x = b ^ (index * 0x8CB92BA72F3D8DD7ULL);
  return splitmix64(x);
}

std::string sha256_hex(std::span<const uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  return to_hex(digest, len);
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  return sha256_hex(std::span<const uint8_t>(bytes));
}

void write_binary_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_binary_file(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_matrix_blob(const std::filesystem::path& path, const MatrixD& m) {
  static_assert(std::endian::native == std::endian::little, "blob format is little-endian");
  const auto* p = reinterpret_cast<const uint8_t*>(m.data());
  write_binary_file(path, std::span(p, static_cast<size_t>(m.size()) * sizeof(double)));
}

MatrixD read_matrix_blob(const std::filesystem::path& path, int rows, int cols) {
  const auto bytes = read_binary_file(path);
  const size_t expected = static_cast<size_t>(rows) * cols * sizeof(double);
  if (bytes.size() != expected)
    throw IoError("matrix blob " + path.string() + " has " + std::to_string(bytes.size()) +
                  " bytes, expected " + std::to_string(expected));
  MatrixD m(rows, cols);
  std::memcpy(m.data(), bytes.data(), expected);
  return m;
}

std::string version_string() {
#ifdef TSCNET_VERSION
  return TSCNET_VERSION;
#else
  return "unknown";
#endif
}

}  // namespace tscnet

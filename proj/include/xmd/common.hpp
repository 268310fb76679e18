#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmd {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

/// Error carrying the pipeline stage that produced it. The CLI prints
/// "[stage] message" and exits nonzero.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error(message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All stochastic code paths take an Rng so that a single
// seed pins the whole run. child() derives independent substreams.
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t x);

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Unbiased integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<int>(v % un);
  }

  VectorXd normal_vector(int n) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  MatrixXd normal_matrix(int rows, int cols) {
    MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

  /// Deterministic substream keyed on (seed, stream).
  Rng child(uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x9e3779b97f4a7c15ULL)));
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// FNV-1a digests, used for config digests and frozen-parameter checks.
// ---------------------------------------------------------------------------

VectorXd to_double(const VectorXf& v);
VectorXf to_float(const VectorXd& v);

uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t fnv1a64(const std::string& s);
uint64_t digest_matrix(const MatrixXf& m, uint64_t seed = 0xcbf29ce484222325ULL);
std::string digest_hex(uint64_t d);

// ---------------------------------------------------------------------------
// Flat little-endian float32 matrix files (signal storage, cache rows).
// ---------------------------------------------------------------------------

void write_f32_matrix(const std::filesystem::path& path, const MatrixXf& rows);
MatrixXf read_f32_matrix(const std::filesystem::path& path, int cols);

void append_f32(std::string& buffer, const float* data, size_t count);

/// $VAR / ${VAR} expansion, applied to path fields of config files only.
std::string expand_env(const std::string& s);

}  // namespace xmd

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "qcnn/quaternion.hpp"

namespace qcnn {

/// Deterministic random stream: mt19937_64 plus hand-rolled uniform/normal/
/// index transforms so that sequences are identical across platforms and
/// standard-library versions (std::normal_distribution and std::shuffle are
/// implementation-defined). Every consumer of randomness in the project goes
/// through this class.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : root_(seed), engine_(seed) {}

  /// Independent substream derived from the root seed and a label; forking
  /// does not consume state, so fork order is irrelevant.
  RandomStream fork(std::string_view label, std::uint64_t index = 0) const;

  std::uint64_t root_seed() const { return root_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Marsaglia polar method (no libm trig involved).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform index in [0, n) by rejection; n > 0.
  std::size_t index(std::size_t n);

  /// Fisher-Yates with our own index sampling; deterministic everywhere.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Uniform on S^3 (four i.i.d. normals, normalized); the induced rotations
  /// are Haar-uniform on SO(3).
  Quaternion unit_quaternion();

 private:
  std::uint64_t root_;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Quaternion random_unit_quaternion(RandomStream& rng);

}  // namespace qcnn

#include "qcnn/random.hpp"

#include <cmath>
#include <stdexcept>

namespace qcnn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

RandomStream RandomStream::fork(std::string_view label, std::uint64_t index) const {
  std::uint64_t h = splitmix64(root_ ^ splitmix64(fnv1a(label) + 0x9e3779b97f4a7c15ull * (index + 1)));
  return RandomStream(h);
}

double RandomStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  have_spare_ = true;
  return u * m;
}

std::size_t RandomStream::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("RandomStream::index: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

Quaternion RandomStream::unit_quaternion() {
  while (true) {
    Quaternion q{normal(), normal(), normal(), normal()};
    const double n = norm(q);
    if (n > 1e-12) return (1.0 / n) * q;
  }
}

Quaternion random_unit_quaternion(RandomStream& rng) { return rng.unit_quaternion(); }

}  // namespace qcnn

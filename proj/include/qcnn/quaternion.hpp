#pragma once

#include <cmath>
#include <stdexcept>

namespace qcnn {

struct Vector3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vector3 operator+(const Vector3& a, const Vector3& b) {
    return {a.x + b.x, a.y + b.y, a.z + b.z};
  }
  friend Vector3 operator-(const Vector3& a, const Vector3& b) {
    return {a.x - b.x, a.y - b.y, a.z - b.z};
  }
  friend Vector3 operator*(double s, const Vector3& v) {
    return {s * v.x, s * v.y, s * v.z};
  }
  friend bool operator==(const Vector3& a, const Vector3& b) {
    return a.x == b.x && a.y == b.y && a.z == b.z;
  }
};

inline double dot(const Vector3& a, const Vector3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

inline double norm(const Vector3& v) { return std::sqrt(dot(v, v)); }

/// Quaternion in scalar-first (w, x, y, z) layout. The whole project sticks
/// to this convention; every interface that serializes quaternions states it.
struct Quaternion {
  double w = 0.0, x = 0.0, y = 0.0, z = 0.0;

  friend Quaternion operator+(const Quaternion& a, const Quaternion& b) {
    return {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z};
  }
  friend Quaternion operator-(const Quaternion& a, const Quaternion& b) {
    return {a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z};
  }
  friend Quaternion operator*(double s, const Quaternion& q) {
    return {s * q.w, s * q.x, s * q.y, s * q.z};
  }
  friend bool operator==(const Quaternion& a, const Quaternion& b) {
    return a.w == b.w && a.x == b.x && a.y == b.y && a.z == b.z;
  }
};

inline double norm_squared(const Quaternion& q) {
  return q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z;
}

inline double norm(const Quaternion& q) { return std::sqrt(norm_squared(q)); }

/// Hamilton product p*q. Bilinear, associative, |p*q| = |p||q|.
inline Quaternion hamilton_product(const Quaternion& p, const Quaternion& q) {
  return {p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
          p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
          p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
          p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w};
}

inline Quaternion conjugate(const Quaternion& q) { return {q.w, -q.x, -q.y, -q.z}; }

// Degenerate rotation factors are surfaced at the source instead of letting
// infinities propagate through a filter stack.
inline constexpr double kInverseMagnitudeFloor = 1e-30;

inline Quaternion inverse(const Quaternion& q) {
  const double n2 = norm_squared(q);
  if (n2 < kInverseMagnitudeFloor * kInverseMagnitudeFloor)
    throw std::domain_error("quaternion inverse: magnitude below 1e-30 (degenerate rotation factor)");
  const double s = 1.0 / n2;
  return {q.w * s, -q.x * s, -q.y * s, -q.z * s};
}

/// r*q*r^-1: rotates the vector part of q by 2*arccos(r.w/|r|) about the
/// vector part of r, preserving the scalar part and the magnitude.
inline Quaternion conjugation_rotate(const Quaternion& r, const Quaternion& q) {
  return hamilton_product(hamilton_product(r, q), inverse(r));
}

inline Quaternion embed_pure(const Vector3& v) { return {0.0, v.x, v.y, v.z}; }

inline Vector3 vector_part(const Quaternion& q) { return {q.x, q.y, q.z}; }

}  // namespace qcnn

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgs/jet.hpp"

namespace cgs {

using Vec3 = std::array<double, 3>;
using Vec4 = std::array<double, 4>;
using Quat = std::array<double, 4>;  // (w, x, y, z)
using Mat3 = std::array<double, 9>;  // row-major

// Malformed or truncated input data (files, bitstreams).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr double kPi = 3.14159265358979323846;
constexpr double kLn2 = 0.69314718055994530942;

template <typename T>
inline T sigmoid(const T& x) {
  using std::exp;
  return T(1.0) / (T(1.0) + exp(-x));
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Standard normal CDF and density.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi); }

// Round half to even, matching IEEE default rounding of std::nearbyint.
inline double round_even(double x) { return std::nearbyint(x); }

inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      r[i * 3 + j] = s;
    }
  return r;
}

inline Mat3 transpose(const Mat3& a) {
  return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

inline Vec3 matvec(const Mat3& a, const Vec3& x) {
  return {a[0] * x[0] + a[1] * x[1] + a[2] * x[2], a[3] * x[0] + a[4] * x[1] + a[5] * x[2],
          a[6] * x[0] + a[7] * x[1] + a[8] * x[2]};
}

// Hamilton product a*b (apply b first, then a).
template <typename T>
inline std::array<T, 4> quat_mul(const std::array<T, 4>& a, const std::array<T, 4>& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

// Normalizes q; a zero quaternion maps to the identity.
template <typename T>
inline std::array<T, 4> quat_normalize(const std::array<T, 4>& q) {
  using std::sqrt;
  const T n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
  if (!(value_of(n2) > 0.0)) return {T(1.0), T(0.0), T(0.0), T(0.0)};
  const T inv = T(1.0) / sqrt(n2);
  return {q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv};
}

// Rotation matrix of a unit quaternion, row-major.
template <typename T>
inline std::array<T, 9> quat_to_matrix(const std::array<T, 4>& q) {
  const T &w = q[0], &x = q[1], &y = q[2], &z = q[3];
  return {T(1.0) - T(2.0) * (y * y + z * z), T(2.0) * (x * y - w * z), T(2.0) * (x * z + w * y),
          T(2.0) * (x * y + w * z), T(1.0) - T(2.0) * (x * x + z * z), T(2.0) * (y * z - w * x),
          T(2.0) * (x * z - w * y), T(2.0) * (y * z + w * x), T(1.0) - T(2.0) * (x * x + y * y)};
}

// IEEE 754 binary16 conversion (round to nearest even) for weight storage.
std::uint16_t float_to_half(float f);
float half_to_float(std::uint16_t h);
inline double round_to_half(double x) {
  return static_cast<double>(half_to_float(float_to_half(static_cast<float>(x))));
}

// Deterministic generator with portable uniform/normal draws (the standard
// distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ULL) { next(); }

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }

 private:
  std::uint64_t state_;
};

// Worker count used by the rasterizer. 1 is the reproducibility reference.
void set_thread_count(int n);
int thread_count();

// Runs fn(chunk, begin, end) over [0, n) split into thread_count() contiguous
// chunks. Chunk boundaries depend only on n and the thread count.
void parallel_chunks(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn);

}  // namespace cgs

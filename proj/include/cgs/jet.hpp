#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace cgs {

// Forward-mode dual number carrying N partial derivatives. Used to obtain
// small local Jacobians (quaternion algebra, covariance projection) that the
// hand-written reverse passes then contract with upstream gradients.
template <std::size_t N>
struct Jet {
  double a = 0.0;
  std::array<double, N> v{};

  Jet() = default;
  Jet(double value) : a(value) {}  // NOLINT: implicit constants are intended
  Jet(double value, std::size_t k) : a(value) { v[k] = 1.0; }

  static constexpr std::size_t size = N;
};

template <std::size_t N>
inline Jet<N> operator+(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a + y.a);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.v[i] + y.v[i];
  return r;
}

template <std::size_t N>
inline Jet<N> operator-(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a - y.a);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.v[i] - y.v[i];
  return r;
}

template <std::size_t N>
inline Jet<N> operator-(const Jet<N>& x) {
  Jet<N> r(-x.a);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = -x.v[i];
  return r;
}

template <std::size_t N>
inline Jet<N> operator*(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a * y.a);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.a * y.v[i] + y.a * x.v[i];
  return r;
}

template <std::size_t N>
inline Jet<N> operator/(const Jet<N>& x, const Jet<N>& y) {
  const double inv = 1.0 / y.a;
  Jet<N> r(x.a * inv);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = (x.v[i] - r.a * y.v[i]) * inv;
  return r;
}

template <std::size_t N>
inline Jet<N> operator+(const Jet<N>& x, double s) { return x + Jet<N>(s); }
template <std::size_t N>
inline Jet<N> operator+(double s, const Jet<N>& x) { return Jet<N>(s) + x; }
template <std::size_t N>
inline Jet<N> operator-(const Jet<N>& x, double s) { return x - Jet<N>(s); }
template <std::size_t N>
inline Jet<N> operator-(double s, const Jet<N>& x) { return Jet<N>(s) - x; }

template <std::size_t N>
inline Jet<N> operator*(const Jet<N>& x, double s) {
  Jet<N> r(x.a * s);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.v[i] * s;
  return r;
}
template <std::size_t N>
inline Jet<N> operator*(double s, const Jet<N>& x) { return x * s; }
template <std::size_t N>
inline Jet<N> operator/(const Jet<N>& x, double s) { return x * (1.0 / s); }
template <std::size_t N>
inline Jet<N> operator/(double s, const Jet<N>& x) { return Jet<N>(s) / x; }

template <std::size_t N>
inline Jet<N>& operator+=(Jet<N>& x, const Jet<N>& y) { return x = x + y; }
template <std::size_t N>
inline Jet<N>& operator-=(Jet<N>& x, const Jet<N>& y) { return x = x - y; }
template <std::size_t N>
inline Jet<N>& operator*=(Jet<N>& x, const Jet<N>& y) { return x = x * y; }

template <std::size_t N>
inline Jet<N> sqrt(const Jet<N>& x) {
  const double s = std::sqrt(x.a);
  Jet<N> r(s);
  const double d = 0.5 / s;
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.v[i] * d;
  return r;
}

template <std::size_t N>
inline Jet<N> exp(const Jet<N>& x) {
  const double e = std::exp(x.a);
  Jet<N> r(e);
  for (std::size_t i = 0; i < N; ++i) r.v[i] = x.v[i] * e;
  return r;
}

inline double value_of(double x) { return x; }
template <std::size_t N>
inline double value_of(const Jet<N>& x) { return x.a; }

}  // namespace cgs

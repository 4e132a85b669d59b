#pragma once

// Forward-mode dual numbers. Nesting Dual<Dual<double>> gives exact second
// directional derivatives, which is how the generic models obtain the
// lambda-contracted dynamics Hessians.

#include <cmath>

namespace neuromhe {

template <typename T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value), d(0.0) {}  // NOLINT: implicit by design of the scalar type
  constexpr Dual(T value, T deriv) : v(value), d(deriv) {}

  Dual& operator+=(const Dual& o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    d = (d * o.v - v * o.d) / (o.v * o.v);
    v /= o.v;
    return *this;
  }
};

template <typename T>
Dual<T> operator-(const Dual<T>& a) {
  return {-a.v, -a.d};
}
template <typename T>
Dual<T> operator+(Dual<T> a, const Dual<T>& b) {
  return a += b;
}
template <typename T>
Dual<T> operator-(Dual<T> a, const Dual<T>& b) {
  return a -= b;
}
template <typename T>
Dual<T> operator*(Dual<T> a, const Dual<T>& b) {
  return a *= b;
}
template <typename T>
Dual<T> operator/(Dual<T> a, const Dual<T>& b) {
  return a /= b;
}
template <typename T>
Dual<T> operator+(Dual<T> a, double b) {
  a.v += b;
  return a;
}
template <typename T>
Dual<T> operator+(double a, Dual<T> b) {
  b.v += a;
  return b;
}
template <typename T>
Dual<T> operator-(Dual<T> a, double b) {
  a.v -= b;
  return a;
}
template <typename T>
Dual<T> operator-(double a, const Dual<T>& b) {
  return {a - b.v, -b.d};
}
template <typename T>
Dual<T> operator*(Dual<T> a, double b) {
  a.v *= b;
  a.d *= b;
  return a;
}
template <typename T>
Dual<T> operator*(double a, Dual<T> b) {
  b.v *= a;
  b.d *= a;
  return b;
}
template <typename T>
Dual<T> operator/(Dual<T> a, double b) {
  a.v /= b;
  a.d /= b;
  return a;
}

template <typename T>
Dual<T> sin(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {sin(a.v), cos(a.v) * a.d};
}
template <typename T>
Dual<T> cos(const Dual<T>& a) {
  using std::cos;
  using std::sin;
  return {cos(a.v), -sin(a.v) * a.d};
}
template <typename T>
Dual<T> exp(const Dual<T>& a) {
  using std::exp;
  const T e = exp(a.v);
  return {e, e * a.d};
}
template <typename T>
Dual<T> tanh(const Dual<T>& a) {
  using std::tanh;
  const T t = tanh(a.v);
  return {t, (1.0 - t * t) * a.d};
}

inline double value_of(double x) { return x; }
template <typename T>
double value_of(const Dual<T>& x) {
  return value_of(x.v);
}

}  // namespace neuromhe

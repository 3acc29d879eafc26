#pragma once

#include <limits>

namespace merlin {

/// Value with first and second derivatives in time. Unavailable orders are
/// NaN and stay NaN through arithmetic.
struct Jet {
  double v = 0;
  double d1 = 0;
  double d2 = 0;
};

inline Jet constant_jet(double v) { return {v, 0, 0}; }

inline Jet operator+(const Jet& a, const Jet& b) { return {a.v + b.v, a.d1 + b.d1, a.d2 + b.d2}; }
inline Jet& operator+=(Jet& a, const Jet& b) {
  a.v += b.v;
  a.d1 += b.d1;
  a.d2 += b.d2;
  return a;
}
inline Jet operator*(double s, const Jet& a) { return {s * a.v, s * a.d1, s * a.d2}; }
inline Jet operator*(const Jet& a, const Jet& b) {
  return {a.v * b.v, a.d1 * b.v + a.v * b.d1, a.d2 * b.v + 2 * a.d1 * b.d1 + a.v * b.d2};
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace merlin

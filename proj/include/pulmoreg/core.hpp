// Basic value types, error categories and logging shared by every module.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>

namespace pulmoreg {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// World-space point or vector in millimetres (also used for per-axis spacing).
struct Vec3 {
  std::array<double, 3> e{0.0, 0.0, 0.0};

  constexpr double& operator[](int a) { return e[static_cast<std::size_t>(a)]; }
  constexpr double operator[](int a) const { return e[static_cast<std::size_t>(a)]; }

  constexpr Vec3& operator+=(const Vec3& o) {
    for (int a = 0; a < 3; ++a) (*this)[a] += o[a];
    return *this;
  }
  constexpr Vec3& operator-=(const Vec3& o) {
    for (int a = 0; a < 3; ++a) (*this)[a] -= o[a];
    return *this;
  }
  constexpr Vec3& operator*=(double s) {
    for (int a = 0; a < 3; ++a) (*this)[a] *= s;
    return *this;
  }
  friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
  friend constexpr Vec3 operator-(Vec3 a) { return a *= -1.0; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

inline constexpr double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return Vec3{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
/// Component-wise product.
inline constexpr Vec3 hadamard(const Vec3& a, const Vec3& b) {
  return Vec3{a[0] * b[0], a[1] * b[1], a[2] * b[2]};
}

/// Row-major 3x3 matrix; m[r][c].
using Mat3 = std::array<std::array<double, 3>, 3>;

inline constexpr Mat3 identity3() { return Mat3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline constexpr double det3(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

/// Determinant of the matrix whose columns are a, b, c.
inline constexpr double det_columns(const Vec3& a, const Vec3& b, const Vec3& c) {
  return dot(a, cross(b, c));
}

/// Voxel or control-point counts per axis.
using Index3 = std::array<int, 3>;

inline std::size_t voxel_count(const Index3& d) {
  return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) *
         static_cast<std::size_t>(d[2]);
}

// Error categories map onto the CLI exit codes: validation -> 1, numerical -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace log {

enum class Level { kDebug, kInfo, kWarning };

using Sink = std::function<void(Level, const std::string&)>;

inline Sink& sink() {
  static Sink s = [](Level level, const std::string& msg) {
    if (level == Level::kDebug) return;
    std::clog << (level == Level::kWarning ? "[warn] " : "[info] ") << msg << '\n';
  };
  return s;
}

inline void set_sink(Sink s) { sink() = std::move(s); }
inline void info(const std::string& msg) { sink()(Level::kInfo, msg); }
inline void warning(const std::string& msg) { sink()(Level::kWarning, msg); }
inline void debug(const std::string& msg) { sink()(Level::kDebug, msg); }

}  // namespace log

}  // namespace pulmoreg

// Shared value types, constants and error categories.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace eikonal {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr Vec2 operator*(double s, Vec2 v) { return v * s; }

inline constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

/// Unit vector e^{ia} viewed as a point of R^2.
inline Vec2 unit(double a) { return {std::cos(a), std::sin(a)}; }

/// Characteristic velocity i e^{ia} = (-sin a, cos a).
inline Vec2 char_velocity(double a) { return {-std::sin(a), std::cos(a)}; }

// Error categories. Every module throws one of these; the CLI maps them to
// exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MalformedInputError : Error {
  using Error::Error;
};
struct RangeError : Error {
  using Error::Error;
};
struct InconsistentJumpError : Error {
  using Error::Error;
};
struct NotApplicableError : Error {
  using Error::Error;
};
struct UnbalancedInputError : Error {
  using Error::Error;
};
struct InvalidPotentialError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct InvalidConstantError : Error {
  using Error::Error;
};
struct BookkeepingError : Error {
  using Error::Error;
};
struct InvariantViolation : Error {
  using Error::Error;
};

/// One weighted atom. For 2D measures only pos[0], pos[1] are meaningful.
struct Atom {
  std::array<double, 3> pos{};
  double weight = 0.0;
};

/// Finite weighted atom list on x (dim 2) or (x,a) (dim 3).
struct DiscreteMeasure {
  int dim = 3;
  std::string label;
  std::vector<Atom> atoms;

  [[nodiscard]] double total_variation() const {
    double s = 0.0;
    for (const auto& at : atoms) s += std::abs(at.weight);
    return s;
  }
  [[nodiscard]] double total_mass() const {
    double s = 0.0;
    for (const auto& at : atoms) s += at.weight;
    return s;
  }
  [[nodiscard]] bool empty() const { return atoms.empty(); }
  [[nodiscard]] std::size_t size() const { return atoms.size(); }
};

}  // namespace eikonal

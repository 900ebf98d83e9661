// Kinetic indicator, entropy defect measure and its spatial projection.
//
// Sign convention: the weight of U on a test function psi is
//   <U, psi> = int int e^{i(phi ^ a)} . grad_x psi dx da,
// so a piecewise-constant field contributes -(v2 - v1) . n |edge| per edge,
// with n pointing from cell 1 to cell 2.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "eikonal/core.hpp"
#include "eikonal/field.hpp"

namespace eikonal {

struct KineticSlice {
  double a = 0.0;
  int nx = 0;
  int ny = 0;
  std::vector<std::uint8_t> indicator;  // row-major from y_min

  [[nodiscard]] bool at(int i, int j) const { return indicator[static_cast<std::size_t>(j) * nx + i] != 0; }
};

inline KineticSlice chi(const LiftedField& f, double a) {
  if (!(a >= 0.0 && a <= f.M())) throw RangeError("chi: level a outside [0, M]");
  KineticSlice s{a, f.nx(), f.ny(), {}};
  s.indicator.reserve(f.values().size());
  for (double v : f.values()) s.indicator.push_back(v >= a ? 1 : 0);
  return s;
}

/// Integral over [a0, a1] of e^{i min(phi, a)} da, as a point of R^2.
inline Vec2 truncated_entropy_integral(double phi, double a0, double a1) {
  const double s = std::clamp(phi, a0, a1);
  Vec2 r{std::sin(s) - std::sin(a0), std::cos(a0) - std::cos(s)};
  if (a1 > s) r += unit(phi) * (a1 - s);
  return r;
}

struct EntropyOptions {
  int K = 64;  // uniform a-bins on [0, M]
};

/// U_phi on (x, a). Each edge flux jump is split evenly between the two
/// cells it separates and placed at their centers, so smooth regions cancel
/// to second order. Edges on the domain boundary are ignored.
inline DiscreteMeasure entropy_measure(const LiftedField& f, EntropyOptions opt = {}) {
  if (opt.K < 1) throw RangeError("entropy_measure: K must be positive");
  const int nx = f.nx(), ny = f.ny(), K = opt.K;
  const double da = f.M() / K;
  std::vector<double> w(static_cast<std::size_t>(nx) * ny * K, 0.0);
  auto idx = [&](int i, int j, int k) { return (static_cast<std::size_t>(j) * nx + i) * K + k; };

  auto edge = [&](int i1, int j1, int i2, int j2, Vec2 n, double len) {
    const double p1 = f.phi(i1, j1), p2 = f.phi(i2, j2);
    if (p1 == p2) return;
    const double lo = std::min(p1, p2);
    // Below min(phi) both cells carry e^{ia}; above max(phi) the jump is
    // the normal-trace mismatch, zero only for exactly balanced edges.
    const int k0 = std::clamp(static_cast<int>(std::floor(lo / da)), 0, K - 1);
    for (int k = k0; k < K; ++k) {
      const double a0 = k * da, a1 = (k + 1) * da;
      const Vec2 jump = truncated_entropy_integral(p2, a0, a1) - truncated_entropy_integral(p1, a0, a1);
      const double half = -0.5 * dot(jump, n) * len;
      w[idx(i1, j1, k)] += half;
      w[idx(i2, j2, k)] += half;
    }
  };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      if (i + 1 < nx) edge(i, j, i + 1, j, {1.0, 0.0}, f.dy());
      if (j + 1 < ny) edge(i, j, i, j + 1, {0.0, 1.0}, f.dx());
    }

  DiscreteMeasure U;
  U.dim = 3;
  U.label = "U_phi";
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const Vec2 c = f.cell_center(i, j);
      for (int k = 0; k < K; ++k) {
        const double v = w[idx(i, j, k)];
        if (v != 0.0) U.atoms.push_back({{c.x, c.y, (k + 0.5) * da}, v});
      }
    }
  return U;
}

/// nu = (p_x)_# |U|: atoms grouped by exact spatial position, ordered by (y, x).
inline DiscreteMeasure nu_projection(const DiscreteMeasure& U) {
  std::map<std::pair<double, double>, double> acc;
  for (const auto& at : U.atoms) acc[{at.pos[1], at.pos[0]}] += std::abs(at.weight);
  DiscreteMeasure nu;
  nu.dim = 2;
  nu.label = "nu";
  nu.atoms.reserve(acc.size());
  for (const auto& [k, v] : acc) nu.atoms.push_back({{k.second, k.first, 0.0}, v});
  return nu;
}

// ---------------------------------------------------------------------------
// Test functions

/// psi(x, a) = b(|x - c|_inf-box / sx) * b((a - ca) / sa), b(t) = (1 - t^2)^2.
struct BumpTest {
  Vec2 c;
  double sx = 0.3;
  double ca = 1.0;
  double sa = 0.5;

  [[nodiscard]] double gx(Vec2 p) const { return detail::bump((p.x - c.x) / sx) * detail::bump((p.y - c.y) / sx); }
  [[nodiscard]] Vec2 grad_gx(Vec2 p) const {
    const double tx = (p.x - c.x) / sx, ty = (p.y - c.y) / sx;
    return {detail::bump_d(tx) / sx * detail::bump(ty), detail::bump(tx) * detail::bump_d(ty) / sx};
  }
  /// Exact integral of grad g over the box [x0, x1] x [y0, y1].
  [[nodiscard]] Vec2 cell_grad_integral(double x0, double x1, double y0, double y1) const {
    auto tx = [&](double x) { return (x - c.x) / sx; };
    auto ty = [&](double y) { return (y - c.y) / sx; };
    const double dbx = detail::bump(tx(x1)) - detail::bump(tx(x0));
    const double dby = detail::bump(ty(y1)) - detail::bump(ty(y0));
    const double Ix = sx * (detail::bump_prim(tx(x1)) - detail::bump_prim(tx(x0)));
    const double Iy = sx * (detail::bump_prim(ty(y1)) - detail::bump_prim(ty(y0)));
    return {dbx * Iy, Ix * dby};
  }
  [[nodiscard]] double ha(double a) const { return detail::bump((a - ca) / sa); }
  [[nodiscard]] double dha(double a) const { return detail::bump_d((a - ca) / sa) / sa; }
  [[nodiscard]] bool x_support(Vec2 p) const { return std::abs(p.x - c.x) < sx && std::abs(p.y - c.y) < sx; }
  /// max(sup|psi|, sup|D psi|) for the product bump.
  [[nodiscard]] double c1_norm() const {
    constexpr double kMaxSlope = 1.5396007178390020;  // sup |b'| = 8 / (3 sqrt 3)
    return std::max({1.0, kMaxSlope / sx, kMaxSlope / sa});
  }
};

/// Admissibility of a candidate test function (defaults to "inside the domain").
using TestFilter = std::function<bool(const BumpTest&)>;

inline std::vector<BumpTest> make_test_family(const LiftedField& f, int count, std::uint64_t seed,
                                              const TestFilter& accept = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  std::vector<BumpTest> out;
  const double w = std::min(f.x_max() - f.x_min(), f.y_max() - f.y_min());
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > 100000) throw RangeError("no admissible test functions for the requested region");
    BumpTest t;
    t.sx = w * (0.07 + 0.1 * U01(rng));
    t.c = {f.x_min() + t.sx + (f.x_max() - f.x_min() - 2 * t.sx) * U01(rng),
           f.y_min() + t.sx + (f.y_max() - f.y_min() - 2 * t.sx) * U01(rng)};
    t.sa = std::min(f.M() / 2, 0.4 + 0.8 * U01(rng));
    t.ca = t.sa + (f.M() - 2 * t.sa) * U01(rng);
    if (accept && !accept(t)) continue;
    out.push_back(t);
  }
  return out;
}

namespace detail {

/// 8-point Gauss-Legendre on [lo, hi] split into pieces no wider than 0.05.
template <class F>
double gauss_integrate(F&& g, double lo, double hi) {
  static constexpr double xs[4] = {0.1834346424956498, 0.5255324099163290, 0.7966664774136267,
                                   0.9602898564975363};
  static constexpr double ws[4] = {0.3626837833783620, 0.3137066458778873, 0.2223810344533745,
                                   0.1012285362903763};
  if (!(hi > lo)) return 0.0;
  const int pieces = std::max(1, static_cast<int>(std::ceil((hi - lo) / 0.05)));
  const double h = (hi - lo) / pieces;
  double s = 0.0;
  for (int p = 0; p < pieces; ++p) {
    const double m = lo + (p + 0.5) * h, r = 0.5 * h;
    for (int q = 0; q < 4; ++q) s += ws[q] * r * (g(m - r * xs[q]) + g(m + r * xs[q]));
  }
  return s;
}

}  // namespace detail

/// Max over the test family of |int chi ie^{ia}.grad psi + <U, d_a psi>| / ||psi||_C1.
/// Both terms vanish together by one integration by parts in a.
inline double kinetic_residual(const LiftedField& f, const DiscreteMeasure& U, const std::vector<BumpTest>& tests) {
  double worst = 0.0;
  for (const auto& t : tests) {
    const double alo = std::max(0.0, t.ca - t.sa), ahi = std::min(f.M(), t.ca + t.sa);
    std::map<double, Vec2> cache;  // a-integral keyed by phi, exact reuse for piecewise-constant fields
    double lhs = 0.0;
    // chi is constant on each cell, so grad psi is integrated exactly there.
    const auto lo = f.cell_of(t.c - Vec2{t.sx, t.sx}), hi = f.cell_of(t.c + Vec2{t.sx, t.sx});
    for (int j = lo.j; j <= hi.j; ++j)
      for (int i = lo.i; i <= hi.i; ++i) {
        const Vec2 p = f.cell_center(i, j);
        const double ph = f.phi(i, j);
        auto it = cache.find(ph);
        if (it == cache.end()) {
          const double top = std::min(ph, ahi);
          Vec2 I{detail::gauss_integrate([&](double a) { return -std::sin(a) * t.ha(a); }, alo, top),
                 detail::gauss_integrate([&](double a) { return std::cos(a) * t.ha(a); }, alo, top)};
          it = cache.emplace(ph, I).first;
        }
        const double hx = 0.5 * f.dx(), hy = 0.5 * f.dy();
        lhs += dot(it->second, t.cell_grad_integral(p.x - hx, p.x + hx, p.y - hy, p.y + hy));
      }
    double rhs = 0.0;
    for (const auto& at : U.atoms) {
      const Vec2 p{at.pos[0], at.pos[1]};
      if (!t.x_support(p)) continue;
      rhs += at.weight * t.gx(p) * t.dha(at.pos[2]);
    }
    worst = std::max(worst, std::abs(lhs + rhs) / t.c1_norm());
  }
  return worst;
}

inline double kinetic_residual(const LiftedField& f, const DiscreteMeasure& U, int test_count,
                               std::uint64_t seed = 7, const TestFilter& accept = {}) {
  return kinetic_residual(f, U, make_test_family(f, test_count, seed, accept));
}

struct BurgersResult {
  std::vector<double> v;  // cos(phi), same layout as the field
  double flux_residual = 0.0;
};

/// v = cos(phi) solves d_x1 v + d_x2 sqrt(1 - v^2) = 0 when phi takes values in (0, pi).
inline BurgersResult burgers_transform(const LiftedField& f) {
  for (double p : f.values())
    if (!(p > 0.0 && p < kPi)) throw NotApplicableError("burgers_transform needs phi in (0, pi)");
  BurgersResult r;
  r.v.reserve(f.values().size());
  for (double p : f.values()) r.v.push_back(std::cos(p));
  // The flux (v, sqrt(1 - v^2)) is e^{i phi} on (0, pi); reuse the weak-divergence test.
  std::vector<double> rebuilt;
  rebuilt.reserve(r.v.size());
  for (double v : r.v) rebuilt.push_back(std::acos(std::clamp(v, -1.0, 1.0)));
  const LiftedField g(f.nx(), f.ny(), f.x_min(), f.x_max(), f.y_min(), f.y_max(), std::max(f.M(), kPi), f.R(),
                      std::move(rebuilt));
  r.flux_residual = check_divergence_free(g, 0.0).l1_residual;
  return r;
}

}  // namespace eikonal

#include <gtest/gtest.h>

#include "eikonal/kinetic.hpp"

using namespace eikonal;

namespace {

GridSpec grid(int n) {
  GridSpec g;
  g.nx = g.ny = n;
  return g;
}

const double kLineDensity = std::sqrt(3.0) - kPi / 3;

bool away_from_vortex_defects(const BumpTest& t) {
  const double r = norm(t.c);
  const double reach = std::sqrt(2.0) * t.sx;
  const bool annulus = r - reach > 0.3 && r + reach < 1.2;
  const bool off_cut = t.c.x < 0 || std::abs(t.c.y) > t.sx + 0.05;
  return annulus && off_cut;
}

}  // namespace

TEST(Chi, ConstantThresholds) {
  auto f = make_builtin(Builtin::constant, grid(16));
  auto s1 = chi(f, kPi / 2);
  auto s2 = chi(f, 3 * kPi / 2);
  for (auto v : s1.indicator) EXPECT_EQ(v, 1);
  for (auto v : s2.indicator) EXPECT_EQ(v, 0);
  EXPECT_THROW(chi(f, -0.1), RangeError);
  EXPECT_THROW(chi(f, 7.0), RangeError);
}

TEST(Chi, SingleJumpSelectsUpperHalf) {
  auto f = make_builtin(Builtin::single_jump, grid(16));
  auto s = chi(f, kPi / 2);
  for (int j = 0; j < 16; ++j)
    for (int i = 0; i < 16; ++i) EXPECT_EQ(s.at(i, j), f.cell_center(i, j).y > 0) << i << ',' << j;
}

TEST(EntropyMeasure, ConstantFieldIsEmpty) {
  for (double v : {0.0, 1.0, kPi, 5.0}) {
    auto U = entropy_measure(make_from_function(grid(64), [v](Vec2) { return v; }));
    EXPECT_TRUE(U.empty());
  }
}

TEST(EntropyMeasure, TruncatedIntegralMatchesQuadrature) {
  for (double phi : {0.3, 1.0, 2.5}) {
    const double a0 = 0.8, a1 = 1.9;
    auto exact = truncated_entropy_integral(phi, a0, a1);
    double cx = 0, cy = 0;
    const int N = 200000;
    for (int k = 0; k < N; ++k) {
      const double a = a0 + (k + 0.5) * (a1 - a0) / N;
      cx += std::cos(std::min(phi, a)) * (a1 - a0) / N;
      cy += std::sin(std::min(phi, a)) * (a1 - a0) / N;
    }
    EXPECT_NEAR(exact.x, cx, 1e-9);
    EXPECT_NEAR(exact.y, cy, 1e-9);
  }
}

TEST(EntropyMeasure, SingleJumpLineDensity) {
  // Oracle: midpoint quadrature of (sin a - 1/2) over (pi/6, 5pi/6).
  double q = 0;
  const int N = 100000;
  for (int k = 0; k < N; ++k) q += (std::sin(kPi / 6 + (k + 0.5) * (2 * kPi / 3) / N) - 0.5) * (2 * kPi / 3) / N;
  EXPECT_NEAR(q, kLineDensity, 1e-9);
  EXPECT_NEAR(kLineDensity, 0.6849, 1e-4);

  auto f = make_builtin(Builtin::single_jump, grid(64));
  auto U = entropy_measure(f);
  const double width = f.x_max() - f.x_min();
  EXPECT_NEAR(U.total_variation() / width, kLineDensity, 1e-12);
  for (const auto& at : U.atoms) {
    EXPECT_LT(at.weight, 0.0);
    EXPECT_LE(std::abs(at.pos[1]), f.dy());
    const double da = f.M() / 64;
    EXPECT_GT(at.pos[2] + da / 2, kPi / 6);
    EXPECT_LT(at.pos[2] - da / 2, 5 * kPi / 6);
  }
}

TEST(EntropyMeasure, DensityAtHalfPi) {
  const int K = 64;
  auto f = make_builtin(Builtin::single_jump, grid(64));
  auto U = entropy_measure(f, {K});
  const double da = f.M() / K;
  const int k = static_cast<int>(std::floor((kPi / 2) / da));
  double mass = 0;
  for (const auto& at : U.atoms)
    if (std::abs(at.pos[2] - (k + 0.5) * da) < 1e-12) mass += std::abs(at.weight);
  const double density = mass / ((f.x_max() - f.x_min()) * da);
  const double a0 = k * da, a1 = a0 + da;
  EXPECT_NEAR(density, (std::cos(a0) - std::cos(a1)) / da - 0.5, 1e-12);
  EXPECT_NEAR(density, 0.5, da * da);
}

TEST(NuProjection, Examples) {
  EXPECT_TRUE(nu_projection(DiscreteMeasure{}).empty());
  DiscreteMeasure U;
  U.atoms = {{{0.1, 0.2, 1.0}, 0.3}, {{0.1, 0.2, 2.0}, -0.2}};
  auto nu = nu_projection(U);
  ASSERT_EQ(nu.size(), 1u);
  EXPECT_DOUBLE_EQ(nu.atoms[0].weight, 0.5);
  EXPECT_EQ(nu.dim, 2);
}

TEST(NuProjection, PreservesTotalVariation) {
  for (auto b : {Builtin::single_jump, Builtin::two_jump, Builtin::vortex}) {
    auto U = entropy_measure(make_builtin(b, grid(48)));
    EXPECT_NEAR(nu_projection(U).total_variation(), U.total_variation(), 1e-12 * (1 + U.total_variation()));
  }
}

TEST(KineticResidual, ConstantVanishes) {
  auto f = make_builtin(Builtin::constant, grid(64));
  EXPECT_LT(kinetic_residual(f, entropy_measure(f), 20), 1e-10);
}

TEST(KineticResidual, SingleJumpBelowThreeSpacings) {
  auto f = make_builtin(Builtin::single_jump, grid(128));
  EXPECT_LT(kinetic_residual(f, entropy_measure(f, {32}), 20), 3 * f.cell_size());
}

TEST(KineticResidual, VortexAwayFromCutAndCenter) {
  auto f = make_builtin(Builtin::vortex, grid(128));
  EXPECT_LT(kinetic_residual(f, entropy_measure(f), 20, 11, away_from_vortex_defects), 3 * f.cell_size());
}

TEST(KineticResidual, HalvesUnderRefinement) {
  double prev = 0;
  for (int n : {64, 128, 256}) {
    auto f = make_builtin(Builtin::single_jump, grid(n));
    const double r = kinetic_residual(f, entropy_measure(f, {n / 2}), 20);
    if (prev > 0) {
      EXPECT_LE(r, 0.5 * prev) << n;
    }
    prev = r;
  }
}

TEST(Burgers, ConstantQuarterTurn) {
  auto f = make_builtin(Builtin::constant, grid(32), {{"phi", kPi / 2}});
  auto r = burgers_transform(f);
  for (double v : r.v) EXPECT_NEAR(v, 0.0, 1e-15);
  EXPECT_LT(r.flux_residual, 1e-12);
}

TEST(Burgers, SingleJumpRankineHugoniot) {
  auto f = make_builtin(Builtin::single_jump, grid(64));
  auto r = burgers_transform(f);
  EXPECT_NEAR(r.v.front(), std::sqrt(3.0) / 2, 1e-15);
  EXPECT_NEAR(r.v.back(), -std::sqrt(3.0) / 2, 1e-15);
  EXPECT_NEAR(std::sqrt(1 - r.v.front() * r.v.front()), 0.5, 1e-12);
  EXPECT_NEAR(std::sqrt(1 - r.v.back() * r.v.back()), 0.5, 1e-12);
  EXPECT_LT(r.flux_residual, 1e-12);
}

TEST(Burgers, VortexIsNotApplicable) {
  EXPECT_THROW(burgers_transform(make_builtin(Builtin::vortex, grid(32))), NotApplicableError);
}

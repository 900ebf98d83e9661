#include <gtest/gtest.h>

#include <sstream>

#include "eikonal/field.hpp"

using namespace eikonal;

namespace {

std::string constant_grid_text(int n, double value, double M) {
  std::ostringstream ss;
  ss << n << ' ' << n << " -1.5 1.5 -1.5 1.5 " << M << " 1\n";
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) ss << (i ? " " : "") << value;
    ss << '\n';
  }
  return ss.str();
}

GridSpec grid(int n) {
  GridSpec g;
  g.nx = g.ny = n;
  return g;
}

}  // namespace

TEST(LoadField, ConstantGridRoundTrips) {
  std::istringstream in(constant_grid_text(8, 1.0, kTwoPi));
  auto f = load_field(in);
  EXPECT_EQ(f.nx(), 8);
  for (double v : f.values()) EXPECT_EQ(v, 1.0);
  std::ostringstream out;
  write_field(out, f);
  std::istringstream back(out.str());
  EXPECT_EQ(load_field(back).values(), f.values());
}

TEST(LoadField, TooCoarseGridIsRejected) {
  std::istringstream in(constant_grid_text(2, 1.0, kTwoPi));
  EXPECT_THROW(load_field(in), RangeError);
}

TEST(LoadField, ValueAboveMIsRangeError) {
  std::istringstream in(constant_grid_text(8, 7.0, kTwoPi));
  try {
    load_field(in);
    FAIL() << "expected a range error";
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("phi(0,0)"), std::string::npos);
  }
}

TEST(LoadField, MissingRowIsMalformed) {
  auto text = constant_grid_text(8, 1.0, kTwoPi);
  text = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  std::istringstream in(text);
  try {
    load_field(in);
    FAIL() << "expected a malformed-input error";
  } catch (const MalformedInputError& e) {
    EXPECT_NE(std::string(e.what()).find("line"), std::string::npos);
  }
}

TEST(LoadField, GarbageTokenNamesLine) {
  std::istringstream in("8 8 -1.5 1.5 -1.5 1.5 6 1\n1 2 x\n");
  try {
    load_field(in);
    FAIL();
  } catch (const MalformedInputError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadField, BallMustFitInside) {
  GridSpec g = grid(16);
  g.R = 1.5;
  EXPECT_THROW(make_builtin(Builtin::constant, g), GeometryError);
}

TEST(MakeBuiltin, SingleJumpWithMatchingTracesIsValid) {
  EXPECT_DOUBLE_EQ(std::sin(kPi / 6), std::sin(5 * kPi / 6));
  auto f = make_builtin(Builtin::single_jump, grid(32));
  EXPECT_DOUBLE_EQ(f.phi(0, 0), kPi / 6);
  EXPECT_DOUBLE_EQ(f.phi(0, 31), 5 * kPi / 6);
}

TEST(MakeBuiltin, MismatchedTracesThrow) {
  EXPECT_THROW(make_builtin(Builtin::single_jump, grid(32), {{"phi_minus", kPi / 6}, {"phi_plus", kPi / 2}}),
               InconsistentJumpError);
}

TEST(MakeBuiltin, Deterministic) {
  for (auto b : {Builtin::constant, Builtin::single_jump, Builtin::two_jump, Builtin::vortex, Builtin::rarefaction}) {
    auto f1 = make_builtin(b, grid(48));
    auto f2 = make_builtin(b, grid(48));
    EXPECT_EQ(f1.values(), f2.values());
  }
}

TEST(MakeBuiltin, SpecStringParses) {
  auto f = field_from_spec("builtin:single_jump:nx=16,ny=24,phi_minus=0.5235987755982988");
  EXPECT_EQ(f.nx(), 16);
  EXPECT_EQ(f.ny(), 24);
  EXPECT_THROW(field_from_spec("builtin:nosuch"), MalformedInputError);
  EXPECT_THROW(field_from_spec("builtin:constant:phi=abc"), MalformedInputError);
}

TEST(Divergence, ConstantFieldIsExact) {
  auto f = make_builtin(Builtin::constant, grid(64));
  EXPECT_LT(check_divergence_free(f, 1e-12).l1_residual, 1e-12);
}

TEST(Divergence, SingleJumpBelowTwoSpacings) {
  auto f = make_builtin(Builtin::single_jump, grid(128));
  EXPECT_LT(check_divergence_free(f, 0).l1_residual, 2 * f.cell_size());
}

TEST(Divergence, BuiltinsConvergeUnderRefinement) {
  for (auto b : {Builtin::two_jump, Builtin::vortex, Builtin::rarefaction}) {
    double prev = 1e9;
    for (int n : {64, 128, 256}) {
      double r = check_divergence_free(make_builtin(b, grid(n)), 0).l1_residual;
      if (r < 1e-12) continue;
      EXPECT_LT(r, prev) << "family " << static_cast<int>(b) << " n " << n;
      prev = r;
    }
  }
}

TEST(Divergence, NonSolenoidalFieldStaysAway) {
  // e^{i x1} has divergence -sin(x1), which does not vanish.
  double prev = 0;
  for (int n : {32, 64, 128}) {
    GridSpec g = grid(n);
    auto f = make_from_function(g, [](Vec2 p) { return p.x + 2.0; });
    const double r = check_divergence_free(f, 0).l1_residual;
    EXPECT_GT(r, 0.05);
    if (prev > 0) {
      EXPECT_GT(r, 0.5 * prev);
    }
    prev = r;
  }
}

TEST(LebesgueScan, ConstantHasNoOscillation) {
  auto scan = boundary_lebesgue_scan(make_builtin(Builtin::constant, grid(64)), 1.0, 64);
  ASSERT_EQ(scan.size(), 64u);
  for (const auto& e : scan) EXPECT_EQ(e.oscillation, 0.0);
  EXPECT_THROW(boundary_lebesgue_scan(make_builtin(Builtin::constant, grid(64)), 1.0, 8), RangeError);
}

TEST(LebesgueScan, SingleJumpFlagsOnlyLineCrossings) {
  auto scan = boundary_lebesgue_scan(make_builtin(Builtin::single_jump, grid(128)), 1.0, 72);
  for (const auto& e : scan) {
    const double d = std::min({std::abs(e.angle), std::abs(e.angle - kPi), std::abs(e.angle - kTwoPi)});
    if (d < 1e-9) {
      EXPECT_GT(e.oscillation, 0.3) << e.angle;
    } else if (d > 0.1) {
      EXPECT_EQ(e.oscillation, 0.0) << e.angle;
    }
  }
}

TEST(LebesgueScan, VortexSmallAwayFromCut) {
  auto f = make_builtin(Builtin::vortex, grid(128));
  auto scan = boundary_lebesgue_scan(f, 1.0, 64);
  for (const auto& e : scan) {
    if (e.angle < 0.2 || e.angle > kTwoPi - 0.2) continue;
    EXPECT_LT(e.oscillation, 2 * f.cell_size()) << e.angle;
  }
  EXPECT_GT(scan[0].oscillation, 1.0);
}

#include <gtest/gtest.h>

#include <random>

#include "eikonal/transport.hpp"

using namespace eikonal;

namespace {

DiscreteMeasure single(double x, double y, double a, double w = 1.0) {
  DiscreteMeasure m;
  m.atoms.push_back({{x, y, a}, w});
  return m;
}

/// Random measures whose weights are multiples of 1/D with a common total.
std::pair<DiscreteMeasure, DiscreteMeasure> rational_instance(std::mt19937_64& rng, int max_atoms, int D) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int n = 1 + static_cast<int>(rng() % max_atoms), m = 1 + static_cast<int>(rng() % max_atoms);
  const int units = D;
  auto split = [&](int k) {
    std::vector<int> w(k, 1);
    for (int r = k; r < units; ++r) w[rng() % k]++;
    return w;
  };
  DiscreteMeasure a, b;
  for (int w : split(n)) a.atoms.push_back({{U(rng), U(rng), 3 * U(rng)}, static_cast<double>(w) / D});
  for (int w : split(m)) b.atoms.push_back({{U(rng), U(rng), 3 * U(rng)}, static_cast<double>(w) / D});
  return {a, b};
}

DiscreteMeasure random_measure(std::mt19937_64& rng, int n, double total) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  DiscreteMeasure m;
  double s = 0;
  for (int i = 0; i < n; ++i) {
    m.atoms.push_back({{U(rng), U(rng), 2 * U(rng)}, 0.1 + U(rng)});
    s += m.atoms.back().weight;
  }
  for (auto& at : m.atoms) at.weight *= total / s;
  return m;
}

void expect_marginals(const DiscreteMeasure& a, const DiscreteMeasure& b, const TransportPlan& p) {
  std::vector<double> ra(a.size(), 0.0), rb(b.size(), 0.0);
  for (const auto& pr : p.pairs) {
    EXPECT_GT(pr.mass, 0.0);
    ra[pr.src] += pr.mass;
    rb[pr.dst] += pr.mass;
  }
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(ra[i], a.atoms[i].weight, 1e-12);
  for (std::size_t j = 0; j < b.size(); ++j) EXPECT_NEAR(rb[j], b.atoms[j].weight, 1e-12);
}

GridSpec grid(int n) {
  GridSpec g;
  g.nx = g.ny = n;
  return g;
}

double fitted_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += std::log(x[i]);
    sy += std::log(y[i]);
    sxx += std::log(x[i]) * std::log(x[i]);
    sxy += std::log(x[i]) * std::log(y[i]);
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

TEST(Metric, TriangleInequalityOnRandomTriples) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  for (int k = 0; k < 1000; ++k) {
    AnisotropicMetric d{0.5 + std::abs(U(rng)) * 5};
    std::array<double, 3> p{U(rng), U(rng), U(rng)}, q{U(rng), U(rng), U(rng)}, r{U(rng), U(rng), U(rng)};
    EXPECT_LE(d(p, r), d(p, q) + d(q, r) + 1e-12);
    EXPECT_DOUBLE_EQ(d(p, q), d(q, p));
  }
}

TEST(W1Plan, SinglePairExamples) {
  for (double L : {0.5, 1.0, 7.0}) EXPECT_DOUBLE_EQ(w1_plan(single(0, 0, 0), single(0, 0, 1), {L}).cost, 1.0);
  EXPECT_DOUBLE_EQ(w1_plan(single(0, 0, 0), single(1, 0, 0), {2.0}).cost, 2.0);
}

TEST(W1Plan, MatchesBruteForceOnSmallRationalInstances) {
  std::mt19937_64 rng(2024);
  for (int inst = 0; inst < 50; ++inst) {
    auto [a, b] = rational_instance(rng, 6, 12);
    AnisotropicMetric d{1.0 + (rng() % 5)};
    auto p = w1_plan(a, b, d);
    EXPECT_NEAR(p.cost, brute_force_w1(a, b, d, 12), 1e-12) << "instance " << inst;
    expect_marginals(a, b, p);
  }
}

TEST(W1Plan, FiveAtomInstanceAgainstOracle) {
  std::mt19937_64 rng(77);
  for (int inst = 0; inst < 10; ++inst) {
    auto [a, b] = rational_instance(rng, 5, 10);
    AnisotropicMetric d{3.0};
    EXPECT_NEAR(w1_plan(a, b, d).cost, brute_force_w1(a, b, d, 10), 1e-12);
  }
}

TEST(W1Plan, RejectsUnbalancedAndNegative) {
  EXPECT_THROW(w1_plan(single(0, 0, 0, 1.0), single(0, 0, 0, 0.5), {1.0}), UnbalancedInputError);
  EXPECT_THROW(w1_plan(single(0, 0, 0, -1.0), single(0, 0, 0, -1.0), {1.0}), RangeError);
}

TEST(W1Plan, SelfDistanceIsZero) {
  std::mt19937_64 rng(9);
  auto m = random_measure(rng, 30, 1.0);
  EXPECT_NEAR(w1_plan(m, m, {4.0}).cost, 0.0, 1e-12);
}

TEST(W1Plan, CostIsFixedOrderSum) {
  std::mt19937_64 rng(10);
  auto a = random_measure(rng, 20, 1.0), b = random_measure(rng, 25, 1.0);
  AnisotropicMetric d{3.0};
  auto p = w1_plan(a, b, d);
  double c = 0;
  for (const auto& pr : p.pairs) c += pr.mass * d(a.atoms[pr.src].pos, b.atoms[pr.dst].pos);
  EXPECT_EQ(c, p.cost);
  for (std::size_t k = 1; k < p.pairs.size(); ++k)
    EXPECT_TRUE(p.pairs[k - 1].src < p.pairs[k].src ||
                (p.pairs[k - 1].src == p.pairs[k].src && p.pairs[k - 1].dst < p.pairs[k].dst));
  expect_marginals(a, b, p);
}

TEST(W1Plan, TriangleInequalityOfDistance) {
  std::mt19937_64 rng(11);
  AnisotropicMetric d{2.0};
  for (int k = 0; k < 10; ++k) {
    auto a = random_measure(rng, 15, 1.0), b = random_measure(rng, 12, 1.0), c = random_measure(rng, 18, 1.0);
    EXPECT_LE(w1_plan(a, c, d).cost, w1_plan(a, b, d).cost + w1_plan(b, c, d).cost + 1e-9);
  }
}

TEST(W1Plan, ScalesLinearlyWithMass) {
  std::mt19937_64 rng(12);
  auto a = random_measure(rng, 20, 1.0), b = random_measure(rng, 20, 1.0);
  AnisotropicMetric d{5.0};
  const double base = w1_plan(a, b, d).cost;
  for (auto* m : {&a, &b})
    for (auto& at : m->atoms) at.weight *= 4.0;
  EXPECT_NEAR(w1_plan(a, b, d).cost, 4.0 * base, 1e-12 * (1 + base));
}

TEST(W1Plan, DeterministicAcrossRuns) {
  std::mt19937_64 rng(13);
  auto a = random_measure(rng, 40, 1.0), b = random_measure(rng, 40, 1.0);
  auto p1 = w1_plan(a, b, {3.0}), p2 = w1_plan(a, b, {3.0});
  ASSERT_EQ(p1.pairs.size(), p2.pairs.size());
  for (std::size_t k = 0; k < p1.pairs.size(); ++k) {
    EXPECT_EQ(p1.pairs[k].src, p2.pairs[k].src);
    EXPECT_EQ(p1.pairs[k].mass, p2.pairs[k].mass);
  }
}

TEST(Dual, TrivialPotentials) {
  auto a = single(0, 0, 0), b = single(0, 0, 1);
  AnisotropicMetric d{1.0};
  auto zero = [](const std::array<double, 3>&) { return 0.0; };
  auto up = [](const std::array<double, 3>& p) { return p[2]; };
  auto down = [](const std::array<double, 3>& p) { return -p[2]; };
  EXPECT_EQ(w1_dual_lower_bound(a, b, d, zero), 0.0);
  EXPECT_DOUBLE_EQ(w1_dual_lower_bound(a, b, d, up), -1.0);
  EXPECT_DOUBLE_EQ(w1_dual_lower_bound(a, b, d, down), 1.0);
}

TEST(Dual, LipschitzViolationIsReported) {
  auto a = single(0, 0, 0), b = single(0, 0, 1);
  auto steep = [](const std::array<double, 3>& p) { return 3 * p[2]; };
  try {
    w1_dual_lower_bound(a, b, {1.0}, steep);
    FAIL();
  } catch (const InvalidPotentialError& e) {
    EXPECT_NE(std::string(e.what()).find("atoms 0 and 1"), std::string::npos);
  }
}

TEST(Dual, PlanPotentialsCloseTheGap) {
  std::mt19937_64 rng(31);
  for (int inst = 0; inst < 20; ++inst) {
    const int n = 2 + static_cast<int>(rng() % 49), m = 2 + static_cast<int>(rng() % 49);
    auto a = random_measure(rng, n, 1.0), b = random_measure(rng, m, 1.0);
    AnisotropicMetric d{1.0 + static_cast<double>(rng() % 8)};
    auto p = w1_plan(a, b, d);
    const double dual = w1_dual_lower_bound(a, b, d, p.source_potential, p.target_potential);
    EXPECT_LE(dual, p.cost + 1e-9);
    EXPECT_NEAR(dual, p.cost, 1e-9) << inst;
  }
}

TEST(Trim, EqualMassesUnchanged) {
  std::mt19937_64 rng(41);
  auto a = random_measure(rng, 5, 1.0), b = random_measure(rng, 7, 1.0);
  auto r = trim_unbalanced(a, b, {2.0}, 10.0);
  EXPECT_EQ(r.mu1.size(), a.size());
  EXPECT_EQ(r.mu2.size(), b.size());
  EXPECT_EQ(r.removed1, 0.0);
  EXPECT_EQ(r.removed2, 0.0);
}

TEST(Trim, DropsTheCostlierSourceAtom) {
  DiscreteMeasure a;
  a.atoms = {{{0.0, 0.0, 0.0}, 1.0}, {{1.0, 0.0, 0.0}, 1.0}};
  auto b = single(0.1, 0.0, 0.0);
  auto r = trim_unbalanced(a, b, {1.0}, 5.0);
  ASSERT_EQ(r.mu1.size(), 1u);
  EXPECT_DOUBLE_EQ(r.mu1.atoms[0].pos[0], 0.0);
  EXPECT_NEAR(r.removed1, 1.0, 1e-12);
  EXPECT_NEAR(r.mu1.total_mass(), r.mu2.total_mass(), 1e-12);
}

TEST(Trim, EmptyLighterSideEmptiesBoth) {
  std::mt19937_64 rng(42);
  auto a = random_measure(rng, 4, 1.0);
  auto r = trim_unbalanced(a, DiscreteMeasure{}, {1.0}, 5.0);
  EXPECT_TRUE(r.mu1.empty());
  EXPECT_TRUE(r.mu2.empty());
}

TEST(Trim, RemovedMassIsTheImbalance) {
  std::mt19937_64 rng(43);
  for (int k = 0; k < 10; ++k) {
    auto a = random_measure(rng, 12, 1.3), b = random_measure(rng, 9, 1.0);
    auto r = trim_unbalanced(a, b, {3.0}, 10.0);
    EXPECT_LE(r.removed1, 0.3 + 1e-12);
    EXPECT_NEAR(r.mu1.total_mass(), r.mu2.total_mass(), 1e-12);
    for (const auto& at : r.mu1.atoms) EXPECT_GT(at.weight, 0.0);
  }
}

TEST(BoundaryDiscrepancy, ConstantFieldVanishes) {
  EXPECT_EQ(boundary_discrepancy(make_builtin(Builtin::constant, grid(64)), 1.0 / 64), 0.0);
}

TEST(BoundaryDiscrepancy, RejectsLargeTimes) {
  auto f = make_builtin(Builtin::constant, grid(64));
  EXPECT_THROW(boundary_discrepancy(f, 0.6), GeometryError);
  EXPECT_THROW(boundary_discrepancy(f, 0.0), GeometryError);
}

TEST(BoundaryDiscrepancy, TransversalJumpDecaysLinearly) {
  auto f = make_builtin(Builtin::single_jump, grid(128));
  std::vector<double> t, e;
  for (int n = 4; n <= 8; ++n) {
    t.push_back(std::ldexp(1.0, -n));
    e.push_back(boundary_discrepancy(f, t.back()));
  }
  EXPECT_GE(fitted_slope(t, e), 1.0);
}

TEST(BoundaryDiscrepancy, TangentJumpDecaysSlower) {
  // Jump exactly on a grid edge, ball radius chosen to touch it.
  const double edge = -1.5 + 107 * 3.0 / 128;
  GridSpec g = grid(128);
  g.R = edge;
  auto f = make_builtin(Builtin::single_jump, g, {{"offset", edge}});
  std::vector<double> t, e;
  for (int n = 4; n <= 8; ++n) {
    t.push_back(std::ldexp(1.0, -n));
    e.push_back(boundary_discrepancy(f, t.back()));
  }
  EXPECT_LT(fitted_slope(t, e), 0.8);
}

TEST(BuildingBlock, ConstantFieldIsIdentity) {
  auto st = building_block_map(make_builtin(Builtin::constant, grid(64)), 5);
  EXPECT_EQ(st.plan.cost, 0.0);
  EXPECT_TRUE(st.plan.pairs.empty());
  EXPECT_EQ(st.epsilon, 0.0);
  EXPECT_GT(st.identity_mass, 0.0);
}

TEST(BuildingBlock, SingleJumpRespectsBound) {
  auto f = make_builtin(Builtin::single_jump, grid(64));
  auto st = building_block_map(f, 6);
  EXPECT_NEAR(st.t_bar, 1.0 / 64, 0);
  EXPECT_NEAR(st.L, 1 / std::sqrt(std::max(st.epsilon, st.t_bar)), 1e-15);
  EXPECT_LE(st.plan.cost, st.bound + st.slack);
  EXPECT_LE(st.removed1, st.epsilon * st.t_bar + 1e-12);
  EXPECT_LE(st.removed2, st.epsilon * st.t_bar + 1e-12);
}

TEST(BuildingBlock, VerticalCostTracksDefect) {
  auto f = make_builtin(Builtin::single_jump, grid(64));
  const double nu_ball = (std::sqrt(3.0) - kPi / 3) * 2.0;
  for (int n = 5; n <= 8; ++n) {
    auto st = building_block_map(f, n);
    const double ref = st.t_bar * nu_ball;
    EXPECT_GT(st.vertical_cost(), 0.5 * ref) << n;
    EXPECT_LT(st.vertical_cost(), 2.0 * ref) << n;
  }
}

TEST(BuildingBlock, RejectsBadLevels) {
  auto f = make_builtin(Builtin::constant, grid(64));
  EXPECT_THROW(building_block_map(f, 0), RangeError);
  EXPECT_THROW(building_block_map(f, 1), GeometryError);
}

#include <gtest/gtest.h>

#include <sstream>

#include "eikonal/io.hpp"

using namespace eikonal;

namespace {

GridSpec grid(int n) {
  GridSpec g;
  g.nx = g.ny = n;
  return g;
}

CurveEnsemble round_trip(const CurveEnsemble& e) {
  std::stringstream c, n;
  const auto curves = e.curves();
  io::write_curves(c, curves);
  io::write_nodes(n, curves);
  return io::read_ensemble(c, n, io::ensemble_json(e), e.field);
}

}  // namespace

TEST(Io, NumbersUseSeventeenDigits) {
  EXPECT_EQ(io::num(0.1), "0.10000000000000001");
  EXPECT_EQ(io::num(1.0), "1");
  EXPECT_EQ(io::num(-2.5e-300), "-2.5e-300");
}

TEST(Io, MeasureRoundTripIsExact) {
  const auto f = make_builtin(Builtin::single_jump, grid(16));
  const auto U = entropy_measure(f);
  std::stringstream ss;
  io::write_measure(ss, U);
  const auto back = io::read_measure(ss, 3);
  ASSERT_EQ(back.size(), U.size());
  for (std::size_t k = 0; k < U.size(); ++k) {
    EXPECT_EQ(back.atoms[k].pos, U.atoms[k].pos);
    EXPECT_EQ(back.atoms[k].weight, U.atoms[k].weight);
  }
  const auto nu = nu_projection(U);
  std::stringstream s2;
  io::write_measure(s2, nu);
  EXPECT_EQ(s2.str().substr(0, 11), "x,y,weight\n");
  EXPECT_EQ(io::read_measure(s2, 2).total_mass(), nu.total_mass());
}

TEST(Io, MalformedTablesAreRejected) {
  std::stringstream wrong_header("x,y,w\n0,0,1\n");
  EXPECT_THROW(io::read_measure(wrong_header, 2), MalformedInputError);
  std::stringstream short_row("x,y,weight\n0,1\n");
  EXPECT_THROW(io::read_measure(short_row, 2), MalformedInputError);
  std::stringstream text("x,y,weight\n0,1,abc\n");
  EXPECT_THROW(io::read_measure(text, 2), MalformedInputError);
}

TEST(Io, EnsembleRoundTripKeepsFunctionals) {
  const auto f = make_builtin(Builtin::single_jump, grid(32));
  for (Side s : {Side::hypograph, Side::epigraph}) {
    const auto e = build_representation(f, 5, s);
    const auto back = round_trip(e);
    EXPECT_EQ(back.side, e.side);
    EXPECT_EQ(back.n, e.n);
    EXPECT_EQ(back.alive_mass, e.alive_mass);
    EXPECT_EQ(back.segments.size(), e.curves().size());
    EXPECT_NEAR(vertical_cost(back), vertical_cost(e), 1e-12 * vertical_cost(e));
    EXPECT_NEAR(horizontal_error(back), horizontal_error(e), 1e-12 * horizontal_error(e));
    const auto d0 = pushforward_at(e, 0.5), d1 = pushforward_at(back, 0.5);
    EXPECT_NEAR(d0.total_mass(), d1.total_mass(), 1e-12);
  }
}

TEST(Io, NodeRowsAtOneTimeMustPairUp) {
  const auto f = std::make_shared<const LiftedField>(make_builtin(Builtin::constant, grid(16)));
  const auto meta = io::ensemble_json(build_representation(*f, 3, Side::hypograph));
  std::stringstream curves("id,side,weight,t_minus,t_plus\n0,hypograph,1,0,1\n");
  std::stringstream nodes("id,t,x,y,a\n0,0,0,0,1\n0,0.5,0,0,1\n0,0.5,0,0.1,1\n0,0.5,0,0.2,1\n");
  EXPECT_THROW(io::read_ensemble(curves, nodes, meta, f), MalformedInputError);
  std::stringstream c2("id,side,weight,t_minus,t_plus\n0,epigraph,1,0,1\n");
  std::stringstream n2("id,t,x,y,a\n0,0,0,0,1\n");
  EXPECT_THROW(io::read_ensemble(c2, n2, meta, f), MalformedInputError);
}

TEST(Io, ReportJsonCarriesTheSchemaKeys) {
  RectifiabilityReport r;
  r.n = 6;
  r.negative.sector_masses = {0.5, 0.0};
  r.negative.shock_concentration = {0.9, 1.0};
  const auto j = io::report_json(r);
  for (const char* k : {"n", "sector_masses", "jump_mass", "shock_concentration", "jump_on_sigma_fraction",
                        "nu_on_sigma_fraction", "unpaired_residual"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["sector_masses"][0], 0.5);
  std::stringstream ss;
  io::write_json(ss, j);
  EXPECT_EQ(ss.str().back(), '\n');
}

TEST(Io, ShockAndSigmaTables) {
  ShockCurve sc;
  sc.anchor = {0.1, -0.2};
  sc.l = 2;
  sc.samples = {{0.0, 1.0}, {0.5, 1.25}};
  std::stringstream s;
  io::write_shocks(s, {sc});
  EXPECT_EQ(s.str(), "anchor_x,anchor_y,l,s,f\n0.10000000000000001,-0.20000000000000001,2,0,1\n"
                     "0.10000000000000001,-0.20000000000000001,2,0.5,1.25\n");
  std::stringstream g;
  io::write_sigma(g, {SigmaPoint{{0.5, 0.25}, 1.5, 1.0}});
  EXPECT_EQ(g.str(), "x,y,max_ratio\n0.5,0.25,1.5\n");
}

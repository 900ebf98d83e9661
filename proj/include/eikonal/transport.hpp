// Exact discrete W1 transport under the anisotropic metric L|dx| + |da|,
// duality certificates, unbalanced trimming and the per-level building block.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "eikonal/core.hpp"
#include "eikonal/field.hpp"
#include "eikonal/kinetic.hpp"
#include "eikonal/network_simplex.hpp"

namespace eikonal {

struct AnisotropicMetric {
  double L = 1.0;

  [[nodiscard]] double operator()(const std::array<double, 3>& p, const std::array<double, 3>& q) const {
    const double dx = p[0] - q[0], dy = p[1] - q[1];
    return L * std::sqrt(dx * dx + dy * dy) + std::abs(p[2] - q[2]);
  }
};

struct PlanPair {
  int src = 0;
  int dst = 0;
  double mass = 0.0;
};

struct TransportPlan {
  std::vector<PlanPair> pairs;  // sorted by (src, dst)
  double cost = 0.0;
  // A 1-Lipschitz dual potential evaluated on the atoms of each measure,
  // attaining sum psi dmu1 - sum psi dmu2 = cost.
  std::vector<double> source_potential;
  std::vector<double> target_potential;
};

struct W1Options {
  int initial_neighbours = 6;  // candidate arcs per atom before pricing the dense problem
  bool potentials = true;      // skip the O(n m) dual envelope when only the plan is needed
};

namespace detail {

inline void check_nonnegative(const DiscreteMeasure& mu, const char* name) {
  for (const auto& at : mu.atoms)
    if (!(at.weight >= 0.0)) throw RangeError(std::string(name) + " has a negative or NaN weight");
}

inline double metric_span(const DiscreteMeasure& a, const DiscreteMeasure& b, const AnisotropicMetric& d) {
  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto* mu : {&a, &b})
    for (const auto& at : mu->atoms)
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], at.pos[k]);
        hi[k] = std::max(hi[k], at.pos[k]);
      }
  if (lo[0] > hi[0]) return 0.0;
  return d(lo, hi);
}

}  // namespace detail

/// Optimal plan between equal-mass nonnegative measures. Sparse candidate
/// arcs are grown by pricing every pair against the current duals until no
/// pair has negative reduced cost, so the result is optimal for the dense problem.
inline TransportPlan w1_plan(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2, const AnisotropicMetric& d,
                             W1Options opt = {}) {
  if (!(d.L > 0.0)) throw RangeError("metric scale L must be positive");
  detail::check_nonnegative(mu1, "mu1");
  detail::check_nonnegative(mu2, "mu2");
  const double m1 = mu1.total_mass(), m2 = mu2.total_mass();
  if (std::abs(m1 - m2) > 1e-12 * std::max(1.0, std::max(m1, m2)))
    throw UnbalancedInputError("w1_plan needs equal masses, got " + std::to_string(m1) + " and " +
                               std::to_string(m2));

  std::vector<int> S, T;  // indices of atoms with positive weight
  for (int i = 0; i < static_cast<int>(mu1.size()); ++i)
    if (mu1.atoms[i].weight > 0.0) S.push_back(i);
  for (int j = 0; j < static_cast<int>(mu2.size()); ++j)
    if (mu2.atoms[j].weight > 0.0) T.push_back(j);

  TransportPlan plan;
  plan.source_potential.assign(mu1.size(), 0.0);
  plan.target_potential.assign(mu2.size(), 0.0);
  if (S.empty() || T.empty()) return plan;

  const int ns = static_cast<int>(S.size()), nt = static_cast<int>(T.size());
  std::vector<double> supply(ns), demand(nt);
  for (int i = 0; i < ns; ++i) supply[i] = mu1.atoms[S[i]].weight;
  for (int j = 0; j < nt; ++j) demand[j] = mu2.atoms[T[j]].weight;
  const double big = (detail::metric_span(mu1, mu2, d) + 1.0) * (ns + nt + 1);
  NetworkSimplex ns_solver(supply, demand, big);
  auto cost = [&](int i, int j) { return d(mu1.atoms[S[i]].pos, mu2.atoms[T[j]].pos); };

  std::vector<char> present(static_cast<std::size_t>(ns) * nt, 0);
  auto add = [&](int i, int j) {
    char& p = present[static_cast<std::size_t>(i) * nt + j];
    if (p) return;
    p = 1;
    ns_solver.add_arc(i, j, cost(i, j));
  };
  const int k = std::max(1, opt.initial_neighbours);
  {
    std::vector<std::pair<double, int>> buf;
    for (int i = 0; i < ns; ++i) {
      buf.clear();
      for (int j = 0; j < nt; ++j) buf.emplace_back(cost(i, j), j);
      const int kk = std::min(k, nt);
      std::partial_sort(buf.begin(), buf.begin() + kk, buf.end());
      for (int q = 0; q < kk; ++q) add(i, buf[q].second);
    }
    for (int j = 0; j < nt; ++j) {
      buf.clear();
      for (int i = 0; i < ns; ++i) buf.emplace_back(cost(i, j), i);
      const int kk = std::min(k, ns);
      std::partial_sort(buf.begin(), buf.begin() + kk, buf.end());
      for (int q = 0; q < kk; ++q) add(buf[q].second, j);
    }
  }

  const double tol = 1e-12 * std::max(1.0, big);
  for (int round = 0;; ++round) {
    ns_solver.solve();
    int added = 0;
    std::vector<std::pair<double, int>> worst;
    for (int i = 0; i < ns; ++i) {
      worst.clear();
      for (int j = 0; j < nt; ++j) {
        if (present[static_cast<std::size_t>(i) * nt + j]) continue;
        const double r = ns_solver.reduced_cost(i, j, cost(i, j));
        if (r < -tol) worst.emplace_back(r, j);
      }
      const int kk = std::min<int>(4, static_cast<int>(worst.size()));
      std::partial_sort(worst.begin(), worst.begin() + kk, worst.end());
      for (int q = 0; q < kk; ++q) add(i, worst[q].second);
      added += kk;
    }
    if (added == 0) break;
    if (round > 10000) throw InvariantViolation("transport pricing did not converge");
  }
  if (ns_solver.artificial_flow() > 1e-9 * std::max(1.0, m1))
    throw InvariantViolation("transport solve left flow on artificial arcs");

  for (int a = 0; a < ns_solver.arc_count(); ++a) {
    const double f = ns_solver.arc_flow(a);
    if (f > 0.0) plan.pairs.push_back({S[ns_solver.arc_source(a)], T[ns_solver.arc_sink(a)], f});
  }
  std::sort(plan.pairs.begin(), plan.pairs.end(),
            [](const PlanPair& x, const PlanPair& y) { return x.src != y.src ? x.src < y.src : x.dst < y.dst; });
  for (const auto& p : plan.pairs) plan.cost += p.mass * d(mu1.atoms[p.src].pos, mu2.atoms[p.dst].pos);

  if (!opt.potentials) return plan;

  // Dual: psi = -pot on the solver nodes, then its inf-convolution over the
  // targets, which is 1-Lipschitz everywhere and keeps the dual value.
  std::vector<double> psi_t(nt);
  for (int j = 0; j < nt; ++j) psi_t[j] = -ns_solver.sink_potential(j);
  const double shift = psi_t.empty() ? 0.0 : *std::min_element(psi_t.begin(), psi_t.end());
  for (double& v : psi_t) v -= shift;
  auto envelope = [&](const std::array<double, 3>& z) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < nt; ++j) best = std::min(best, d(z, mu2.atoms[T[j]].pos) + psi_t[j]);
    return best;
  };
  for (std::size_t i = 0; i < mu1.size(); ++i) plan.source_potential[i] = envelope(mu1.atoms[i].pos);
  for (std::size_t j = 0; j < mu2.size(); ++j) plan.target_potential[j] = envelope(mu2.atoms[j].pos);
  return plan;
}

/// sum psi dmu1 - sum psi dmu2 after checking that psi is 1-Lipschitz on the union support.
inline double w1_dual_lower_bound(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2,
                                  const AnisotropicMetric& d, const std::vector<double>& psi1,
                                  const std::vector<double>& psi2) {
  if (psi1.size() != mu1.size() || psi2.size() != mu2.size())
    throw MalformedInputError("potential must have one value per atom");
  std::vector<std::pair<const Atom*, double>> pts;
  for (std::size_t i = 0; i < mu1.size(); ++i) pts.emplace_back(&mu1.atoms[i], psi1[i]);
  for (std::size_t j = 0; j < mu2.size(); ++j) pts.emplace_back(&mu2.atoms[j], psi2[j]);
  for (std::size_t p = 0; p < pts.size(); ++p)
    for (std::size_t q = p + 1; q < pts.size(); ++q) {
      const double dist = d(pts[p].first->pos, pts[q].first->pos);
      const double gap = std::abs(pts[p].second - pts[q].second);
      if (gap > dist * (1 + 1e-12) + 1e-12)
        throw InvalidPotentialError("potential is not 1-Lipschitz: atoms " + std::to_string(p) + " and " +
                                    std::to_string(q) + " differ by " + std::to_string(gap) +
                                    " at distance " + std::to_string(dist));
    }
  double v = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) v += psi1[i] * mu1.atoms[i].weight;
  for (std::size_t j = 0; j < mu2.size(); ++j) v -= psi2[j] * mu2.atoms[j].weight;
  return v;
}

inline double w1_dual_lower_bound(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2,
                                  const AnisotropicMetric& d,
                                  const std::function<double(const std::array<double, 3>&)>& psi) {
  std::vector<double> p1, p2;
  for (const auto& at : mu1.atoms) p1.push_back(psi(at.pos));
  for (const auto& at : mu2.atoms) p2.push_back(psi(at.pos));
  return w1_dual_lower_bound(mu1, mu2, d, p1, p2);
}

/// Exhaustive minimum over all integral plans when every weight is a
/// multiple of 1/denominator. Vertices of the transportation polytope are
/// integral, so this is the exact optimum. Intended for a handful of atoms.
inline double brute_force_w1(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2, const AnisotropicMetric& d,
                             int denominator) {
  auto to_units = [&](const DiscreteMeasure& mu) {
    std::vector<int> u;
    for (const auto& at : mu.atoms) {
      const double s = at.weight * denominator;
      const double r = std::round(s);
      if (std::abs(s - r) > 1e-9 || r < 0) throw RangeError("brute_force_w1: weight is not a multiple of 1/D");
      u.push_back(static_cast<int>(r));
    }
    return u;
  };
  const auto sup = to_units(mu1);
  auto dem = to_units(mu2);
  if (std::accumulate(sup.begin(), sup.end(), 0) != std::accumulate(dem.begin(), dem.end(), 0))
    throw UnbalancedInputError("brute_force_w1 needs equal masses");
  const int n = static_cast<int>(sup.size()), m = static_cast<int>(dem.size());
  std::vector<std::vector<double>> c(n, std::vector<double>(m));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) c[i][j] = d(mu1.atoms[i].pos, mu2.atoms[j].pos);

  std::map<std::pair<int, std::vector<int>>, double> memo;
  std::function<double(int, std::vector<int>&)> best = [&](int i, std::vector<int>& rem) -> double {
    if (i == n) return 0.0;
    auto key = std::make_pair(i, rem);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    double out = std::numeric_limits<double>::infinity();
    // Distribute sup[i] units over sinks, sink by sink.
    std::function<void(int, int, double)> split = [&](int j, int left, double acc) {
      if (j == m - 1) {
        if (left > rem[j]) return;
        rem[j] -= left;
        out = std::min(out, acc + left * c[i][j] + best(i + 1, rem));
        rem[j] += left;
        return;
      }
      for (int q = 0; q <= std::min(left, rem[j]); ++q) {
        rem[j] -= q;
        split(j + 1, left - q, acc + q * c[i][j]);
        rem[j] += q;
      }
    };
    split(0, sup[i], 0.0);
    memo.emplace(std::move(key), out);
    return out;
  };
  if (n == 0 || m == 0) return 0.0;
  return best(0, dem) / denominator;
}

// ---------------------------------------------------------------------------
// Unbalanced trimming

struct TrimResult {
  DiscreteMeasure mu1;
  DiscreteMeasure mu2;
  double removed1 = 0.0;  // ||mu1 - mu1'||
  double removed2 = 0.0;  // ||mu2 - mu2'||
  double penalty = 0.0;   // diam * |m1 - m2|, the extra cost the trimming can hide
};

/// Equalizes masses by matching the heavier measure against the lighter one
/// augmented with a virtual atom at the support centroid, then discarding
/// whatever the virtual atom absorbed.
inline TrimResult trim_unbalanced(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2,
                                  const AnisotropicMetric& d, double diam, W1Options opt = {}) {
  detail::check_nonnegative(mu1, "mu1");
  detail::check_nonnegative(mu2, "mu2");
  TrimResult r{mu1, mu2, 0.0, 0.0, 0.0};
  const double m1 = mu1.total_mass(), m2 = mu2.total_mass();
  const double gap = m1 - m2;
  if (std::abs(gap) <= 1e-12 * std::max(1.0, std::max(m1, m2))) return r;
  r.penalty = diam * std::abs(gap);
  const bool first_heavier = gap > 0;
  const DiscreteMeasure& heavy = first_heavier ? mu1 : mu2;
  DiscreteMeasure light = first_heavier ? mu2 : mu1;

  std::array<double, 3> centroid{};
  std::size_t count = 0;
  for (const auto* mu : {&mu1, &mu2})
    for (const auto& at : mu->atoms) {
      for (int k = 0; k < 3; ++k) centroid[k] += at.pos[k];
      ++count;
    }
  for (double& v : centroid) v /= static_cast<double>(count);
  const int virt = static_cast<int>(light.size());
  light.atoms.push_back({centroid, heavy.total_mass() - light.total_mass()});

  DiscreteMeasure heavy_trim = heavy;
  const auto plan = w1_plan(heavy, light, d, opt);
  for (const auto& p : plan.pairs)
    if (p.dst == virt) heavy_trim.atoms[p.src].weight -= p.mass;
  DiscreteMeasure kept;
  kept.dim = heavy.dim;
  kept.label = heavy.label;
  double removed = 0.0;
  for (std::size_t i = 0; i < heavy.size(); ++i) {
    const double w = std::max(0.0, heavy_trim.atoms[i].weight);
    removed += heavy.atoms[i].weight - w;
    if (w > 0.0) kept.atoms.push_back({heavy.atoms[i].pos, w});
  }
  light.atoms.pop_back();
  DiscreteMeasure light_kept;
  light_kept.dim = light.dim;
  light_kept.label = light.label;
  for (const auto& at : light.atoms)
    if (at.weight > 0.0) light_kept.atoms.push_back(at);
  if (first_heavier) {
    r.mu1 = std::move(kept);
    r.mu2 = std::move(light_kept);
    r.removed1 = removed;
  } else {
    r.mu2 = std::move(kept);
    r.mu1 = std::move(light_kept);
    r.removed2 = removed;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Boundary discrepancy

struct DiscrepancyOptions {
  int boundary_samples = 65536;
  int a_bins = 64;
  int time_nodes = 4;
};

/// (1/t) int_0^t int_0^M int_{dB_R} |chi(x, a) - chi(x - ie^{ia}s, a)| by midpoint quadrature.
inline double boundary_discrepancy(const LiftedField& f, double t_bar, DiscrepancyOptions opt = {}) {
  if (!(t_bar > 0.0)) throw GeometryError("boundary_discrepancy needs t > 0");
  if (!(t_bar < f.ball_clearance())) throw GeometryError("t exceeds the distance from B_R to the domain boundary");
  const Vec2 c = f.center();
  const double dth = kTwoPi / opt.boundary_samples, da = f.M() / opt.a_bins, dt = t_bar / opt.time_nodes;
  std::vector<Vec2> vel(opt.a_bins);
  for (int k = 0; k < opt.a_bins; ++k) vel[k] = char_velocity((k + 0.5) * da);
  double total = 0.0;
  for (int s = 0; s < opt.boundary_samples; ++s) {
    const Vec2 x = c + unit((s + 0.5) * dth) * f.R();
    const double px = f.phi_at(x);
    for (int k = 0; k < opt.a_bins; ++k) {
      const double a = (k + 0.5) * da;
      const bool cx = px >= a;
      int differ = 0;
      for (int q = 0; q < opt.time_nodes; ++q) {
        const Vec2 y = x - vel[k] * ((q + 0.5) * dt);
        differ += (f.phi_at(y) >= a) != cx;
      }
      total += differ;
    }
  }
  return total * f.R() * dth * da * dt / t_bar;
}

// ---------------------------------------------------------------------------
// Building block of the construction

struct TransportStep {
  int n = 0;
  double t_bar = 0.0;
  double epsilon = 0.0;
  double L = 1.0;
  // Trimmed difference parts: rho2 carries free-flight mass missing from the
  // static hypograph, rho1 the reverse. The common part moves by identity.
  DiscreteMeasure rho1;
  DiscreteMeasure rho2;
  double identity_mass = 0.0;
  double removed1 = 0.0;
  double removed2 = 0.0;
  TransportPlan plan;  // from rho2 (sources) to rho1 (targets)
  double nu_ball = 0.0;
  double bound = 0.0;
  double slack = 0.0;
  [[nodiscard]] double vertical_cost() const {
    double s = 0.0;
    for (const auto& p : plan.pairs) s += p.mass * std::abs(rho2.atoms[p.src].pos[2] - rho1.atoms[p.dst].pos[2]);
    return s;
  }
};

struct BlockOptions {
  int K = 64;
  DiscrepancyOptions discrepancy{};
};

inline double cor35_bound(double t_bar, double eps, double nu_ball, double R, double M) {
  const double se = std::sqrt(eps);
  return (t_bar + std::pow(t_bar, 1.5)) * nu_ball + se * t_bar * (2 * R + se * M);
}

/// Cell-by-bin masses of chi^1 = chi 1_{B_R} and chi^2 = chi(x - ie^{ia} t) 1_{B_R}.
/// The shifted cell is intersected exactly with the grid, and each cell
/// contributes the exact a-length of {a in bin : a <= phi}.
inline std::pair<DiscreteMeasure, DiscreteMeasure> block_measures(const LiftedField& f, double t_bar, int K) {
  DiscreteMeasure chi1, chi2;
  chi1.label = "chi1";
  chi2.label = "chi2";
  const double dx = f.dx(), dy = f.dy(), da = f.M() / K;
  for (int j = 0; j < f.ny(); ++j)
    for (int i = 0; i < f.nx(); ++i) {
      const Vec2 p = f.cell_center(i, j);
      if (!f.in_ball(p)) continue;
      for (int k = 0; k < K; ++k) {
        const double a0 = k * da, ac = a0 + 0.5 * da;
        const double m1 = f.cell_area() * std::clamp(f.phi(i, j) - a0, 0.0, da);
        const Vec2 q = p - char_velocity(ac) * t_bar;
        const double x0 = q.x - 0.5 * dx, x1 = q.x + 0.5 * dx, y0 = q.y - 0.5 * dy, y1 = q.y + 0.5 * dy;
        const auto lo = f.cell_of({x0, y0}), hi = f.cell_of({x1, y1});
        double m2 = 0.0;
        for (int jj = lo.j; jj <= hi.j; ++jj)
          for (int ii = lo.i; ii <= hi.i; ++ii) {
            const Vec2 cc = f.cell_center(ii, jj);
            const double ox = std::min(x1, cc.x + 0.5 * dx) - std::max(x0, cc.x - 0.5 * dx);
            const double oy = std::min(y1, cc.y + 0.5 * dy) - std::max(y0, cc.y - 0.5 * dy);
            if (ox > 0 && oy > 0) m2 += ox * oy * std::clamp(f.phi(ii, jj) - a0, 0.0, da);
          }
        if (m1 > 0) chi1.atoms.push_back({{p.x, p.y, ac}, m1});
        if (m2 > 0) chi2.atoms.push_back({{p.x, p.y, ac}, m2});
      }
    }
  return {chi1, chi2};
}

inline TransportStep building_block_map(const LiftedField& f, int n, BlockOptions opt = {}) {
  if (n < 1) throw RangeError("building_block_map needs n >= 1");
  TransportStep st;
  st.n = n;
  st.t_bar = std::ldexp(1.0, -n);
  if (!(st.t_bar < f.ball_clearance())) throw GeometryError("2^-n exceeds the distance from B_R to the boundary");
  st.epsilon = boundary_discrepancy(f, st.t_bar, opt.discrepancy);
  st.L = 1.0 / std::sqrt(std::max(st.epsilon, st.t_bar));
  const AnisotropicMetric d{st.L};

  auto [chi1, chi2] = block_measures(f, st.t_bar, opt.K);
  // Both lists are cell-major with identical (cell, bin) keys when present.
  std::map<std::array<double, 3>, std::pair<double, double>> merged;
  for (const auto& at : chi1.atoms) merged[at.pos].first += at.weight;
  for (const auto& at : chi2.atoms) merged[at.pos].second += at.weight;
  DiscreteMeasure excess, deficit;
  excess.label = "rho2";
  deficit.label = "rho1";
  // Overlap sums reproduce a constant cell only up to rounding; ignore that.
  const double noise = 1e-10 * f.cell_area() * f.M() / opt.K;
  for (const auto& [pos, m] : merged) {
    st.identity_mass += std::min(m.first, m.second);
    const double diff = m.second - m.first;
    if (diff > noise) excess.atoms.push_back({pos, diff});
    else if (diff < -noise) deficit.atoms.push_back({pos, -diff});
  }
  const double h = f.cell_size();
  const double diam = d({f.x_min(), f.y_min(), 0.0}, {f.x_max(), f.y_max(), f.M()});
  auto trimmed = trim_unbalanced(excess, deficit, d, diam);
  st.rho2 = std::move(trimmed.mu1);
  st.rho1 = std::move(trimmed.mu2);
  st.removed2 = trimmed.removed1;
  st.removed1 = trimmed.removed2;
  st.plan = w1_plan(st.rho2, st.rho1, d);

  const auto U = entropy_measure(f, {opt.K});
  for (const auto& at : U.atoms)
    if (f.in_ball({at.pos[0], at.pos[1]})) st.nu_ball += std::abs(at.weight);
  st.bound = cor35_bound(st.t_bar, st.epsilon, st.nu_ball, f.R(), f.M());
  st.slack = 2.0 * (st.L * std::sqrt(2.0) * h + f.M() / opt.K) * st.rho2.total_mass();
  return st;
}

}  // namespace eikonal

// Structure of the defect measure: jump events, pairing of hypograph and
// epigraph defects, sector covering, shock-curve envelopes, detection of the
// concentration set and the final concentration report.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "core.hpp"
#include "field.hpp"
#include "kinetic.hpp"
#include "lagrangian.hpp"

namespace eikonal {

// ---------------------------------------------------------------------------
// Sector covering of [0, M]

struct SectorCover {
  double M = kTwoPi;
  int L = 0;
  std::vector<double> lo, hi;     // open intervals (lo[l], hi[l])
  std::vector<Vec2> e, e_perp;    // e_l and i e_l

  [[nodiscard]] int count() const { return L + 1; }
  [[nodiscard]] bool contains(int l, double a) const { return a > lo[l] && a < hi[l]; }
  /// Ordinate direction of the shock frame: -e_perp, so that at equal
  /// abscissa the smaller angle sits higher.
  [[nodiscard]] Vec2 up(int l) const { return e_perp[l] * -1.0; }
};

inline SectorCover sector_cover(double M) {
  if (!(M > 0.0)) throw RangeError("sector_cover: M must be positive");
  SectorCover c;
  c.M = M;
  c.L = static_cast<int>(std::floor(2.0 * M / kPi));
  for (int l = 0; l <= c.L; ++l) {
    c.lo.push_back(l * kPi / 2 - kPi / 8);
    c.hi.push_back((l + 1) * kPi / 2 + kPi / 8);
    const Vec2 el = char_velocity(l * kPi / 2 + kPi / 4);
    c.e.push_back(el);
    c.e_perp.push_back({-el.y, el.x});
  }
  return c;
}

// ---------------------------------------------------------------------------
// Jump events

struct JumpEvent {
  int curve = 0;  // segment index in the ensemble
  Side side = Side::hypograph;
  double t = 0.0;
  Vec2 x;
  double a_lo = 0.0;
  double a_hi = 0.0;
  int sign = 0;
  double mass = 0.0;  // curve weight; the defect mass is mass * (a_hi - a_lo)

  [[nodiscard]] double defect_mass() const { return mass * (a_hi - a_lo); }
};

/// One event per node where the angle changes, in segment order.
inline std::vector<JumpEvent> jump_events(const CurveEnsemble& e) {
  std::vector<JumpEvent> out;
  for (int s = 0; s < static_cast<int>(e.segments.size()); ++s) {
    const auto& seg = e.segments[s];
    for (int k = seg.node_begin; k < seg.node_end; ++k)
      if (auto d = detail::defect_of(e.nodes[k], seg.weight))
        out.push_back({s, e.side, d->t, d->x, d->a_lo, d->a_hi, d->sign, seg.weight});
  }
  return out;
}

inline constexpr int kJumpClass = -1;

/// Smallest sector containing both endpoint angles, or kJumpClass.
inline int classify_event(double a_lo, double a_hi, const SectorCover& c) {
  for (int l = 0; l < c.count(); ++l)
    if (c.contains(l, a_lo) && c.contains(l, a_hi)) return l;
  return kJumpClass;
}
inline int classify_event(const JumpEvent& ev, const SectorCover& c) { return classify_event(ev.a_lo, ev.a_hi, c); }

// ---------------------------------------------------------------------------
// Pairing of hypograph-negative and epigraph-positive defects

struct PairedEvent {
  int hyp = 0;  // index into the hypograph event list
  int epi = 0;  // index into the epigraph event list
  double t = 0.0;
  Vec2 x;
  double a_lo = 0.0;  // hull of the shared a-bins
  double a_hi = 0.0;
  double mass = 0.0;  // defect mass
  int cls = kJumpClass;
};

struct PairingResult {
  std::vector<PairedEvent> pairs;
  double hyp_mass = 0.0;  // total defect mass of the selected hypograph events
  double epi_mass = 0.0;
  double paired_mass = 0.0;
  double residual = 0.0;  // min(hyp_mass, epi_mass) - paired_mass

  [[nodiscard]] double paired_fraction() const {
    const double m = std::min(hyp_mass, epi_mass);
    return m > 0.0 ? paired_mass / m : 1.0;
  }
};

struct PairingOptions {
  int hyp_sign = -1;  // -1 pairs hypograph decreases with epigraph increases
  double dt = 0.0;    // time cell; 0 takes t_bar
  double da = 0.0;    // angle cell; 0 takes the ensemble's level spacing
  bool neighbours = true;  // second pass over adjacent spatial cells
};

namespace detail {

struct PairCellKey {
  int step, i, j, k;
  auto operator<=>(const PairCellKey&) const = default;
};

struct PairCellSide {
  std::vector<std::pair<int, double>> members;  // event index, mass in the cell
  double total = 0.0;
  double left = 0.0;
};

}  // namespace detail

/// Discrete disintegration over (time step, field cell, a-bin) cells. Within
/// a cell the two sides are matched proportionally. With `neighbours` the
/// leftovers are then matched against the eight adjacent spatial cells, in
/// key order, since the two sides relocate on opposite sides of a shock.
inline PairingResult pair_defects(const std::vector<JumpEvent>& hyp, const std::vector<JumpEvent>& epi,
                                  const LiftedField& f, const SectorCover& cover, PairingOptions opt = {}) {
  if (!(opt.dt > 0.0) || !(opt.da > 0.0)) throw RangeError("pair_defects: time and angle cell sizes must be positive");
  using detail::PairCellKey;
  using detail::PairCellSide;
  std::map<PairCellKey, std::pair<PairCellSide, PairCellSide>> cells;
  PairingResult r;
  auto deposit = [&](const std::vector<JumpEvent>& evs, int want_sign, bool is_hyp) {
    for (int q = 0; q < static_cast<int>(evs.size()); ++q) {
      const auto& ev = evs[q];
      if (ev.sign != want_sign) continue;
      const int step = static_cast<int>(std::lround(ev.t / opt.dt));
      const auto c = f.cell_of(ev.x);
      const int k0 = static_cast<int>(std::floor(ev.a_lo / opt.da));
      const int k1 = static_cast<int>(std::ceil(ev.a_hi / opt.da));
      for (int k = k0; k < k1; ++k) {
        const double ov = std::min(ev.a_hi, (k + 1) * opt.da) - std::max(ev.a_lo, k * opt.da);
        if (ov <= 0.0) continue;
        auto& cs = is_hyp ? cells[{step, c.i, c.j, k}].first : cells[{step, c.i, c.j, k}].second;
        const double m = ev.mass * ov;
        cs.members.push_back({q, m});
        cs.total += m;
        (is_hyp ? r.hyp_mass : r.epi_mass) += m;
      }
    }
  };
  deposit(hyp, opt.hyp_sign, true);
  deposit(epi, -opt.hyp_sign, false);

  struct Acc {
    double mass = 0.0;
    int k_lo = 0, k_hi = 0;
  };
  std::map<std::pair<int, int>, Acc> acc;  // (hyp, epi) -> mass and a-bin range
  auto match = [&](PairCellSide& h, PairCellSide& e, double m, int k) {
    if (m <= 0.0) return;
    // Every member has been consumed in the same proportion so far.
    for (const auto& [hq, hm] : h.members)
      for (const auto& [eq, em] : e.members) {
        const double v = m * (hm / h.total) * (em / e.total);
        if (v <= 0.0) continue;
        auto it = acc.try_emplace({hq, eq}, Acc{0.0, k, k}).first;
        it->second.mass += v;
        it->second.k_lo = std::min(it->second.k_lo, k);
        it->second.k_hi = std::max(it->second.k_hi, k);
      }
    h.left -= m;
    e.left -= m;
    r.paired_mass += m;
  };
  for (auto& [key, sides] : cells) {
    sides.first.left = sides.first.total;
    sides.second.left = sides.second.total;
  }
  for (auto& [key, sides] : cells) {
    if (sides.first.total > 0.0 && sides.second.total > 0.0)
      match(sides.first, sides.second, std::min(sides.first.total, sides.second.total), key.k);
  }
  if (opt.neighbours) {
    const double eps = 1e-15;
    for (auto& [key, sides] : cells) {
      auto& h = sides.first;
      if (h.left <= eps * h.total) continue;
      for (int dj = -1; dj <= 1 && h.left > eps * h.total; ++dj)
        for (int di = -1; di <= 1 && h.left > eps * h.total; ++di) {
          if (di == 0 && dj == 0) continue;
          auto it = cells.find({key.step, key.i + di, key.j + dj, key.k});
          if (it == cells.end()) continue;
          auto& e = it->second.second;
          if (e.left <= eps * e.total) continue;
          match(h, e, std::min(h.left, e.left), key.k);
        }
    }
  }

  r.pairs.reserve(acc.size());
  for (const auto& [hk, v] : acc) {
    const auto& he = hyp[hk.first];
    const auto& ee = epi[hk.second];
    PairedEvent p;
    p.hyp = hk.first;
    p.epi = hk.second;
    p.t = he.t;
    p.x = he.x;
    p.a_lo = std::max(v.k_lo * opt.da, std::max(he.a_lo, ee.a_lo));
    p.a_hi = std::min((v.k_hi + 1) * opt.da, std::min(he.a_hi, ee.a_hi));
    p.mass = v.mass;
    const int ch = classify_event(he, cover), ce = classify_event(ee, cover);
    p.cls = ch == kJumpClass || ce == kJumpClass ? kJumpClass : ch;
    r.pairs.push_back(p);
  }
  r.residual = std::min(r.hyp_mass, r.epi_mass) - r.paired_mass;
  return r;
}

/// Pairs the defects of a hypograph and an epigraph ensemble built at the same level.
inline PairingResult pair_defects(const CurveEnsemble& hyp, const CurveEnsemble& epi, PairingOptions opt = {}) {
  if (hyp.side != Side::hypograph || epi.side != Side::epigraph)
    throw RangeError("pair_defects expects a hypograph and an epigraph ensemble");
  if (hyp.n != epi.n) throw RangeError("pair_defects: ensembles were built at different levels");
  if (opt.dt <= 0.0) opt.dt = hyp.t_bar;
  if (opt.da <= 0.0) opt.da = hyp.da;
  return pair_defects(jump_events(hyp), jump_events(epi), *hyp.field, sector_cover(hyp.field->M()), opt);
}

// ---------------------------------------------------------------------------
// Lipschitz envelopes and shock curves

/// Largest C-Lipschitz minorant of the samples, evaluated at the sample
/// coordinates and returned sorted by s. An anchor joins the samples, so the
/// result passes through it unless some sample lies below its C-cone.
inline std::vector<std::pair<double, double>> lipschitz_envelope(
    std::vector<std::pair<double, double>> samples, double C,
    std::optional<std::pair<double, double>> anchor = std::nullopt) {
  if (!(C > std::tan(3 * kPi / 8)))
    throw InvalidConstantError("lipschitz_envelope: C = " + std::to_string(C) + " must exceed tan(3pi/8)");
  if (anchor) samples.push_back(*anchor);
  std::stable_sort(samples.begin(), samples.end(), [](const auto& p, const auto& q) { return p.first < q.first; });
  const std::size_t n = samples.size();
  for (std::size_t k = 1; k < n; ++k)
    samples[k].second = std::min(samples[k].second, samples[k - 1].second + C * (samples[k].first - samples[k - 1].first));
  for (std::size_t k = n - 1; k-- > 0;)
    samples[k].second = std::min(samples[k].second, samples[k + 1].second + C * (samples[k + 1].first - samples[k].first));
  return samples;
}

struct ShockOptions {
  double C = 2.5;
  double anchor_spacing_cells = 4.0;
  // Curves lighter than this many slot volumes are below the resolution of
  // the construction, which ignores slot mismatches of that size.
  double min_weight = 1e-9;
};

/// Graph w = f(s) in the frame of sector l, where s = x.e_l and w = x.up_l,
/// starting at the anchor.
struct ShockCurve {
  Vec2 anchor;
  int l = 0;
  int col = 0;  // anchor lattice indices
  int row = 0;
  double C = 0.0;
  std::vector<std::pair<double, double>> samples;  // (s, f), sorted, first is the anchor

  /// Value between samples, taken from the largest C-Lipschitz interpolant,
  /// or from the smallest one when `upper` is false.
  [[nodiscard]] std::optional<double> f_at(double s, bool upper = true) const {
    if (samples.empty() || s < samples.front().first || s > samples.back().first) return std::nullopt;
    auto it = std::lower_bound(samples.begin(), samples.end(), s,
                               [](const auto& p, double v) { return p.first < v; });
    if (it == samples.begin()) return it->second;
    const auto& [s1, f1] = *it;
    const auto& [s0, f0] = *(it - 1);
    return upper ? std::min(f0 + C * (s - s0), f1 + C * (s1 - s)) : std::max(f0 - C * (s - s0), f1 - C * (s1 - s));
  }
};

namespace detail {

/// Anchor lattice of one sector: c + i D e_l + j D up_l inside B_R.
struct AnchorFrame {
  Vec2 c, e, up;
  double R = 1.0, delta = 0.0, h = 0.0;
  double s_c = 0.0, w_c = 0.0;  // frame coordinates of the center
  int imin = 0, imax = -1;
  double s_base = 0.0;  // left edge of abscissa bin 0
  int bins = 0;

  AnchorFrame(const LiftedField& f, const SectorCover& cv, int l, double spacing_cells)
      : c(f.center()), e(cv.e[l]), up(cv.up(l)), R(f.R()), delta(spacing_cells * f.cell_size()), h(f.cell_size()) {
    s_c = dot(c, e);
    w_c = dot(c, up);
    const int m = static_cast<int>(std::ceil(R / delta));
    imin = -m, imax = m;
    s_base = s_c - R - h;
    bins = static_cast<int>(std::ceil((2 * R + 2 * h) / h));
  }
  [[nodiscard]] double col_s(int i) const { return s_c + i * delta; }
  [[nodiscard]] double row_w(int j) const { return w_c + j * delta; }
  [[nodiscard]] Vec2 anchor(int i, int j) const { return c + e * (i * delta) + up * (j * delta); }
  [[nodiscard]] bool valid(int i, int j) const { return norm(anchor(i, j) - c) < R; }
  [[nodiscard]] int bin(double s) const { return std::clamp(static_cast<int>(std::floor((s - s_base) / h)), 0, bins - 1); }
  [[nodiscard]] double bin_center(int b) const { return s_base + (b + 0.5) * h; }
  /// Largest row strictly below w, clamped to the lattice.
  [[nodiscard]] int row_below(double w) const {
    return std::min(imax, static_cast<int>(std::ceil((w - w_c) / delta)) - 1);
  }
  /// Smallest row strictly above w.
  [[nodiscard]] int row_above(double w) const {
    return std::max(imin, static_cast<int>(std::floor((w - w_c) / delta)) + 1);
  }
};

struct Crossing {
  int col;
  double w;
};

struct SectorPiece {
  int seg;
  double weight;
  double t0, t1;
  double s0, w0, s1, w1;
  bool defect = false;  // the run's angle changes at the start of this piece
  [[nodiscard]] double w_at(double s) const { return s1 > s0 ? w0 + (w1 - w0) * (s - s0) / (s1 - s0) : w0; }
};

/// Visits every straight piece of every maximal run during which the angle
/// stays in sector l, with the anchor columns the run has crossed so far.
/// Crossings from index `fresh` on were made inside this piece.
template <class Visit>
void walk_sector(const CurveEnsemble& e, const SectorCover& cv, int l, const AnchorFrame& fr, double min_weight,
                 Visit&& visit) {
  const double w_min = min_weight * e.slot_volume();
  std::unordered_map<int, std::vector<Crossing>> saved;  // run context of forked segments
  std::vector<Crossing> ctx;
  auto in = [&](double a) { return cv.contains(l, a); };
  for (int s = 0; s < static_cast<int>(e.segments.size()); ++s) {
    const auto& seg = e.segments[s];
    if (seg.node_end - seg.node_begin < 2) continue;
    const auto& first = e.nodes[seg.node_begin];
    bool active = false, inherited = false;
    ctx.clear();
    if (seg.parent >= 0 && in(first.a_pre) && in(first.a_post)) {
      if (auto it = saved.find(seg.parent); it != saved.end()) {
        ctx = it->second;
        active = inherited = true;
      }
    }
    if (!active) active = in(first.a_post);
    for (int k = seg.node_begin; k + 1 < seg.node_end; ++k) {
      const auto& nd = e.nodes[k];
      if (k > seg.node_begin && !(in(nd.a_pre) && in(nd.a_post))) {
        ctx.clear();
        active = in(nd.a_post);
      }
      if (!active) continue;
      const auto& nx = e.nodes[k + 1];
      const Vec2 p0 = nd.x_post, p1 = nx.x_pre;
      SectorPiece pc{s, seg.weight, nd.t, nx.t, dot(p0, fr.e), dot(p0, fr.up), dot(p1, fr.e), dot(p1, fr.up)};
      pc.defect = (k > seg.node_begin || inherited) && nd.a_pre != nd.a_post;
      const std::size_t fresh = ctx.size();
      if (pc.s1 > pc.s0) {
        const int i0 = std::max(fr.imin, static_cast<int>(std::floor((pc.s0 - fr.s_c) / fr.delta)) + 1);
        for (int i = i0; i <= fr.imax && fr.col_s(i) <= pc.s1; ++i) ctx.push_back({i, pc.w_at(fr.col_s(i))});
      }
      if (seg.weight >= w_min) visit(pc, ctx, fresh);
    }
    if (seg.forked && active) saved[s] = ctx;
  }
}

// Portion of a piece that counts for crossing q: everything after the column.
inline double portion_start(const SectorPiece& pc, const AnchorFrame& fr, const std::vector<Crossing>& ctx,
                            std::size_t q, std::size_t fresh) {
  return q >= fresh ? fr.col_s(ctx[q].col) : pc.s0;
}

}  // namespace detail

/// Shock curves of all sectors, built from the hypograph ensemble. For each
/// anchor the curves counted are those that crossed the anchor's column above
/// it and have stayed in the sector since; their lowest ordinate per abscissa
/// bin is the minorized profile. Anchors none of whose runs carry a defect
/// after the crossing are dropped: their curves bound nothing.
inline std::vector<ShockCurve> shock_family(const CurveEnsemble& hyp, const SectorCover& cv, ShockOptions opt = {}) {
  if (!(opt.C > std::tan(3 * kPi / 8))) throw InvalidConstantError("shock_family: C must exceed tan(3pi/8)");
  const auto& f = *hyp.field;
  std::vector<ShockCurve> out;
  constexpr double kNone = std::numeric_limits<double>::infinity();
  for (int l = 0; l < cv.count(); ++l) {
    detail::AnchorFrame fr(f, cv, l, opt.anchor_spacing_cells);
    const int ni = fr.imax - fr.imin + 1;
    // prof[(i, b, j)]: lowest ordinate from runs whose highest admissible row is j.
    std::vector<double> prof(static_cast<std::size_t>(ni) * fr.bins * ni, kNone);
    std::vector<char> live(static_cast<std::size_t>(ni) * ni, 0);  // (i, j) as in prof
    auto live_at = [&](int i, int j) -> char& { return live[static_cast<std::size_t>(i - fr.imin) * ni + (j - fr.imin)]; };
    auto at = [&](int i, int b, int j) -> double& {
      return prof[(static_cast<std::size_t>(i - fr.imin) * fr.bins + b) * ni + (j - fr.imin)];
    };
    bool any = false;
    detail::walk_sector(hyp, cv, l, fr, opt.min_weight, [&](const detail::SectorPiece& pc, const auto& ctx, std::size_t fresh) {
      for (std::size_t q = 0; q < ctx.size(); ++q) {
        const int j = fr.row_below(ctx[q].w);
        if (j < fr.imin) continue;
        if (pc.defect && q < fresh) live_at(ctx[q].col, j) = 1;
        const double sa = detail::portion_start(pc, fr, ctx, q, fresh);
        if (pc.s1 < sa) continue;
        for (int b = fr.bin(sa); b <= fr.bin(pc.s1); ++b) {
          const double lo = std::max(sa, fr.s_base + b * fr.h), hi = std::min(pc.s1, fr.s_base + (b + 1) * fr.h);
          if (hi < lo) continue;
          double& v = at(ctx[q].col, b, j);
          v = std::min({v, pc.w_at(lo), pc.w_at(hi)});
          any = true;
        }
      }
    });
    if (!any) continue;
    for (int i = fr.imin; i <= fr.imax; ++i)
      for (int b = 0; b < fr.bins; ++b)
        for (int j = fr.imax - 1; j >= fr.imin; --j) at(i, b, j) = std::min(at(i, b, j), at(i, b, j + 1));
    for (int i = fr.imin; i <= fr.imax; ++i)
      for (int j = fr.imax - 1; j >= fr.imin; --j) live_at(i, j) |= live_at(i, j + 1);
    for (int i = fr.imin; i <= fr.imax; ++i)
      for (int j = fr.imin; j <= fr.imax; ++j) {
        if (!fr.valid(i, j) || !live_at(i, j)) continue;
        std::vector<std::pair<double, double>> smp;
        const double s_bar = fr.col_s(i);
        for (int b = fr.bin(s_bar); b < fr.bins; ++b)
          if (at(i, b, j) < kNone) smp.push_back({std::max(s_bar, fr.bin_center(b)), at(i, b, j)});
        if (smp.empty()) continue;
        ShockCurve sc;
        sc.anchor = fr.anchor(i, j);
        sc.l = l;
        sc.col = i;
        sc.row = j;
        sc.C = opt.C;
        sc.samples = lipschitz_envelope(std::move(smp), opt.C, std::make_pair(s_bar, fr.row_w(j)));
        out.push_back(std::move(sc));
      }
  }
  return out;
}

struct CrossingAudit {
  double hyp_violation = 0.0;  // weight x time of hypograph portions below f - tol
  double hyp_audited = 0.0;
  double epi_violation = 0.0;  // weight x time of epigraph portions above f + tol
  double epi_audited = 0.0;

  [[nodiscard]] double violation() const { return hyp_violation + epi_violation; }
  [[nodiscard]] double audited() const { return hyp_audited + epi_audited; }
  [[nodiscard]] double fraction() const { return audited() > 0.0 ? violation() / audited() : 0.0; }
};

/// Measures how much curve mass crosses the shock curves the wrong way.
/// Between samples a curve counts as crossing only if it crosses every
/// C-Lipschitz interpolant.
/// Hypograph runs that crossed a column above an anchor are checked against
/// the highest such anchor's curve, epigraph runs that crossed below one
/// against the lowest, since curves of one column are ordered by row.
inline CrossingAudit no_crossing_audit(const CurveEnsemble& hyp, const CurveEnsemble& epi,
                                       const std::vector<ShockCurve>& family, const SectorCover& cv, double tol,
                                       ShockOptions opt = {}) {
  CrossingAudit r;
  const auto& f = *hyp.field;
  for (int l = 0; l < cv.count(); ++l) {
    detail::AnchorFrame fr(f, cv, l, opt.anchor_spacing_cells);
    const int ni = fr.imax - fr.imin + 1;
    std::vector<const ShockCurve*> grid(static_cast<std::size_t>(ni) * ni, nullptr);
    bool any = false;
    for (const auto& sc : family)
      if (sc.l == l) {
        grid[static_cast<std::size_t>(sc.col - fr.imin) * ni + (sc.row - fr.imin)] = &sc;
        any = true;
      }
    if (!any) continue;
    auto curve = [&](int i, int j) { return grid[static_cast<std::size_t>(i - fr.imin) * ni + (j - fr.imin)]; };

    for (const auto* ens : {&hyp, &epi}) {
      const bool upper = ens->side == Side::hypograph;
      detail::walk_sector(*ens, cv, l, fr, opt.min_weight, [&](const detail::SectorPiece& pc, const auto& ctx, std::size_t fresh) {
        std::vector<std::pair<const ShockCurve*, double>> checks;  // curve, start abscissa
        for (std::size_t q = 0; q < ctx.size(); ++q) {
          const ShockCurve* sc = nullptr;
          if (upper) {
            for (int j = fr.row_below(ctx[q].w); j >= fr.imin && !sc; --j) sc = curve(ctx[q].col, j);
          } else {
            for (int j = fr.row_above(ctx[q].w); j <= fr.imax && !sc; ++j) sc = curve(ctx[q].col, j);
          }
          if (sc) checks.push_back({sc, detail::portion_start(pc, fr, ctx, q, fresh)});
        }
        if (checks.empty() || !(pc.s1 > pc.s0)) return;
        const int m = std::max(1, static_cast<int>(std::ceil(2.0 * (pc.s1 - pc.s0) / fr.h)));
        const double dt = (pc.t1 - pc.t0) / m;
        for (int q = 0; q < m; ++q) {
          const double s = pc.s0 + (q + 0.5) * (pc.s1 - pc.s0) / m;
          const double w = pc.w_at(s);
          bool audited = false, bad = false;
          for (const auto& [sc, sa] : checks) {
            if (s < sa) continue;
            const auto fv = sc->f_at(s, !upper);
            if (!fv) continue;
            audited = true;
            bad = bad || (upper ? w < *fv - tol : w > *fv + tol);
          }
          if (!audited) continue;
          (upper ? r.hyp_audited : r.epi_audited) += pc.weight * dt;
          if (bad) (upper ? r.hyp_violation : r.epi_violation) += pc.weight * dt;
        }
      });
    }
  }
  return r;
}

/// Mirror image of an ensemble across the line through p with direction d.
/// Angles follow the reflected velocities. Used as a negative control for the
/// crossing audit.
inline CurveEnsemble reflect_ensemble(const CurveEnsemble& e, Vec2 p, Vec2 d) {
  CurveEnsemble r = e;
  const Vec2 u = d * (1.0 / norm(d));
  const double beta = std::atan2(u.y, u.x);
  auto mx = [&](Vec2 x) {
    const Vec2 q = x - p;
    return p + u * (2.0 * dot(q, u)) - q;
  };
  auto ma = [&](double a) {
    double b = std::fmod(2 * beta + kPi - a, kTwoPi);
    return b < 0 ? b + kTwoPi : b;
  };
  for (auto& nd : r.nodes) {
    nd.x_pre = mx(nd.x_pre);
    nd.x_post = mx(nd.x_post);
    nd.a_pre = ma(nd.a_pre);
    nd.a_post = ma(nd.a_post);
  }
  return r;
}


/// Runs every curve backwards: t -> 1 - t and a -> a + pi (mod 2 pi), which
/// keeps the side and flips the sign of every jump. Forks become merges, so
/// parent links are dropped.
inline CurveEnsemble reverse_ensemble(const CurveEnsemble& e) {
  CurveEnsemble r = e;
  auto ma = [](double a) { return std::fmod(a + kPi, kTwoPi); };
  for (auto& seg : r.segments) {
    seg.parent = -1;
    seg.forked = false;
    std::tie(seg.t_start, seg.t_end) = std::make_pair(1.0 - seg.t_end, 1.0 - seg.t_start);
    std::reverse(r.nodes.begin() + seg.node_begin, r.nodes.begin() + seg.node_end);
    for (int k = seg.node_begin; k < seg.node_end; ++k) {
      auto& nd = r.nodes[k];
      nd = CurveNode{1.0 - nd.t, nd.x_post, ma(nd.a_post), nd.x_pre, ma(nd.a_pre)};
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Grid helpers

namespace detail {

/// Boolean mask over the field cells.
struct CellMask {
  const LiftedField* f = nullptr;
  std::vector<char> on;

  explicit CellMask(const LiftedField& field)
      : f(&field), on(static_cast<std::size_t>(field.nx()) * field.ny(), 0) {}
  void mark(Vec2 x) {
    if (!f->in_domain(x)) return;
    const auto c = f->cell_of(x);
    on[static_cast<std::size_t>(c.j) * f->nx() + c.i] = 1;
  }
  [[nodiscard]] bool test(Vec2 x) const {
    if (!f->in_domain(x)) return false;
    const auto c = f->cell_of(x);
    return on[static_cast<std::size_t>(c.j) * f->nx() + c.i] != 0;
  }
  /// Grows the mask by every cell whose center is within r cells.
  void dilate(double r) {
    const int m = static_cast<int>(std::floor(r));
    std::vector<char> out = on;
    const int nx = f->nx(), ny = f->ny();
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        if (!on[static_cast<std::size_t>(j) * nx + i]) continue;
        for (int dj = -m; dj <= m; ++dj)
          for (int di = -m; di <= m; ++di) {
            const int a = i + di, b = j + dj;
            if (a < 0 || b < 0 || a >= nx || b >= ny || di * di + dj * dj > r * r) continue;
            out[static_cast<std::size_t>(b) * nx + a] = 1;
          }
      }
    on = std::move(out);
  }
};

/// Spatial measure binned onto the field cells.
inline std::vector<double> bin_measure(const LiftedField& f, const DiscreteMeasure& mu) {
  std::vector<double> g(static_cast<std::size_t>(f.nx()) * f.ny(), 0.0);
  for (const auto& at : mu.atoms) {
    const Vec2 x{at.pos[0], at.pos[1]};
    if (!f.in_domain(x)) continue;
    const auto c = f.cell_of(x);
    g[static_cast<std::size_t>(c.j) * f.nx() + c.i] += std::abs(at.weight);
  }
  return g;
}

/// Mass of a binned measure over the cells whose centers lie strictly inside B_r of cell (i, j).
inline double ball_mass(const LiftedField& f, const std::vector<double>& g, int i, int j, double r) {
  const int mi = static_cast<int>(std::ceil(r / f.dx())), mj = static_cast<int>(std::ceil(r / f.dy()));
  const double r2 = r * r * (1.0 - 1e-12);
  double s = 0.0;
  for (int dj = -mj; dj <= mj; ++dj)
    for (int di = -mi; di <= mi; ++di) {
      const int a = i + di, b = j + dj;
      if (a < 0 || b < 0 || a >= f.nx() || b >= f.ny()) continue;
      const double dx = di * f.dx(), dy = dj * f.dy();
      if (dx * dx + dy * dy < r2) s += g[static_cast<std::size_t>(b) * f.nx() + a];
    }
  return s;
}

inline void check_radii(const std::vector<double>& radii, const char* who) {
  if (radii.size() < 3) throw RangeError(std::string(who) + ": need at least three radii");
  for (std::size_t k = 0; k < radii.size(); ++k) {
    if (!(radii[k] > 0.0)) throw RangeError(std::string(who) + ": radii must be positive");
    if (k > 0 && !(radii[k] < radii[k - 1])) throw RangeError(std::string(who) + ": radii must be decreasing");
  }
}

/// Samples of B_r(x) on a sub-cell lattice aligned with the grid, each of area (h/sub)^2.
template <class F>
void for_ball_samples(const LiftedField& f, Vec2 x, double r, int sub, F&& fn) {
  const double hx = f.dx() / sub, hy = f.dy() / sub;
  const int i0 = static_cast<int>(std::floor((x.x - r - f.x_min()) / hx)), i1 = static_cast<int>(std::ceil((x.x + r - f.x_min()) / hx));
  const int j0 = static_cast<int>(std::floor((x.y - r - f.y_min()) / hy)), j1 = static_cast<int>(std::ceil((x.y + r - f.y_min()) / hy));
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i) {
      const Vec2 p{f.x_min() + (i + 0.5) * hx, f.y_min() + (j + 0.5) * hy};
      if (norm(p - x) < r) fn(p, hx * hy);
    }
}

}  // namespace detail

/// Default radii for the density ratios: 4, 2 and 1 cells.
inline std::vector<double> default_radii(const LiftedField& f) {
  const double h = f.cell_size();
  return {4 * h, 2 * h, h};
}

// ---------------------------------------------------------------------------
// Detection of the concentration set

struct SigmaPoint {
  Vec2 x;
  double max_ratio = 0.0;  // max over radii of nu(B_r(x)) / r
  double min_ratio = 0.0;  // min over radii, the finite-scale stand-in for the limsup as r -> 0
};

/// Cell centers in B_R whose density ratio stays at or above the threshold at
/// every radius. The smallest radius controls how far the set spreads from
/// the support of nu.
inline std::vector<SigmaPoint> sigma_detect(const LiftedField& f, const DiscreteMeasure& nu,
                                            const std::vector<double>& radii, double threshold) {
  detail::check_radii(radii, "sigma_detect");
  const auto g = detail::bin_measure(f, nu);
  std::vector<SigmaPoint> out;
  for (int j = 0; j < f.ny(); ++j)
    for (int i = 0; i < f.nx(); ++i) {
      const Vec2 x = f.cell_center(i, j);
      if (!f.in_ball(x)) continue;
      SigmaPoint p{x, 0.0, std::numeric_limits<double>::infinity()};
      for (double r : radii) {
        const double q = detail::ball_mass(f, g, i, j, r) / r;
        p.max_ratio = std::max(p.max_ratio, q);
        p.min_ratio = std::min(p.min_ratio, q);
      }
      if (p.min_ratio >= threshold && p.min_ratio > 0.0) out.push_back(p);
    }
  return out;
}

/// Fraction of the mass of nu inside B_R that lies within tol_cells of the points.
inline double mass_near(const LiftedField& f, const DiscreteMeasure& nu, const std::vector<SigmaPoint>& pts,
                        double tol_cells) {
  detail::CellMask mask(f);
  for (const auto& p : pts) mask.mark(p.x);
  mask.dilate(tol_cells);
  double tot = 0.0, near = 0.0;
  for (const auto& at : nu.atoms) {
    const Vec2 x{at.pos[0], at.pos[1]};
    if (!f.in_ball(x)) continue;
    tot += std::abs(at.weight);
    if (mask.test(x)) near += std::abs(at.weight);
  }
  return tot > 0.0 ? near / tot : 1.0;
}

// ---------------------------------------------------------------------------
// Pointwise diagnostics of the field

/// (1/r^2) times the integral over B_r(x) of |phi - mean|, for each radius.
inline std::vector<double> vmo_check(const LiftedField& f, Vec2 x, const std::vector<double>& radii, int sub = 4) {
  std::vector<double> out;
  for (double r : radii) {
    if (!(r > 0.0)) throw RangeError("vmo_check: radii must be positive");
    if (norm(x - f.center()) + r >= f.R()) throw RangeError("vmo_check: ball leaves B_R");
    std::vector<std::pair<double, double>> v;
    double area = 0.0, mean = 0.0;
    detail::for_ball_samples(f, x, r, sub, [&](Vec2 p, double w) {
      const double phi = f.phi_at(p);
      v.push_back({phi, w});
      area += w;
      mean += phi * w;
    });
    mean /= area;
    double osc = 0.0;
    for (const auto& [phi, w] : v) osc += std::abs(phi - mean) * w;
    out.push_back(osc / (r * r));
  }
  return out;
}

/// Straight piece of a jump set. The normal points into the phi_minus side.
struct JumpPiece {
  Vec2 p0, p1;
  double phi_minus = 0.0;
  double phi_plus = 0.0;
  Vec2 normal;
};

/// Jump set of the single-jump field: the horizontal chord at the given
/// height, cut at whole cells inside `fraction` of the radius.
inline std::vector<JumpPiece> single_jump_set(const LiftedField& f, double offset = 0.0, double phi_minus = kPi / 6,
                                              double phi_plus = 5 * kPi / 6, double fraction = 0.8) {
  const Vec2 c = f.center();
  const double half = std::sqrt(std::max(0.0, f.R() * f.R() - (offset - c.y) * (offset - c.y))) * fraction;
  const double x0 = f.x_min() + std::ceil((c.x - half - f.x_min()) / f.dx()) * f.dx();
  const double x1 = f.x_min() + std::floor((c.x + half - f.x_min()) / f.dx()) * f.dx();
  return {JumpPiece{{x0, offset}, {x1, offset}, phi_minus, phi_plus, {0.0, -1.0}}};
}

/// Density per unit length of the formula over [a0, a1], averaged over the bin.
inline double jump_formula_density(const JumpPiece& J, double a0, double a1) {
  const double lo = std::max(a0, J.phi_minus), hi = std::min(a1, J.phi_plus);
  if (!(hi > lo)) return 0.0;
  const double cm = std::cos(J.phi_minus), sm = std::sin(J.phi_minus);
  const double ix = std::sin(hi) - std::sin(lo) - (hi - lo) * cm;
  const double iy = std::cos(lo) - std::cos(hi) - (hi - lo) * sm;
  return (J.normal.x * ix + J.normal.y * iy) / (a1 - a0);
}

struct JumpFormulaResult {
  std::vector<double> a;         // bin centers
  std::vector<double> measured;  // U per unit length and unit angle
  std::vector<double> formula;
  double residual = 0.0;         // L^1-in-a distance relative to the formula's L^1 norm
  double length = 0.0;
};

/// Compares U, binned in a with K bins, against the jump formula on a band of
/// half-width band_cells around each piece. Each end of a piece is ramped
/// over taper * length.
inline JumpFormulaResult jump_formula_check(const LiftedField& f, const DiscreteMeasure& U,
                                            const std::vector<JumpPiece>& J, int K, double band_cells = 1.5,
                                            double taper = 0.25) {
  if (K < 1) throw RangeError("jump_formula_check: K must be positive");
  if (!(taper >= 0.0 && taper <= 0.5)) throw RangeError("jump_formula_check: taper must lie in [0, 0.5]");
  JumpFormulaResult r;
  const double da = f.M() / K;
  r.a.resize(K);
  r.measured.assign(K, 0.0);
  r.formula.assign(K, 0.0);
  for (int k = 0; k < K; ++k) r.a[k] = (k + 0.5) * da;
  const double band = band_cells * f.cell_size();
  for (const auto& p : J) {
    const double len = norm(p.p1 - p.p0);
    if (!(len > 0.0)) continue;
    const Vec2 t = (p.p1 - p.p0) * (1.0 / len), nrm{-t.y, t.x};
    // Trapezoid window along the piece. A hard cut at the ends lands at an
    // arbitrary phase of the staircase, and the per-edge fluxes above phi+
    // only cancel over whole periods, so the error would oscillate with h.
    const double ramp = taper * len;
    auto window = [&](double s) {
      if (s <= 0.0 || s >= len) return 0.0;
      if (ramp <= 0.0) return 1.0;
      return std::min({1.0, s / ramp, (len - s) / ramp});
    };
    const double eff = len - ramp;
    r.length += eff;
    for (int k = 0; k < K; ++k) r.formula[k] += eff * jump_formula_density(p, k * da, (k + 1) * da);
    for (const auto& at : U.atoms) {
      const Vec2 q = Vec2{at.pos[0], at.pos[1]} - p.p0;
      if (std::abs(dot(q, nrm)) >= band) continue;
      const double wgt = window(dot(q, t));
      if (wgt == 0.0) continue;
      const int k = std::clamp(static_cast<int>(std::floor(at.pos[2] / da)), 0, K - 1);
      r.measured[k] += wgt * at.weight / da;
    }
  }
  double diff = 0.0, ref = 0.0;
  for (int k = 0; k < K; ++k) {
    if (r.length > 0.0) {
      r.measured[k] /= r.length;
      r.formula[k] /= r.length;
    }
    diff += std::abs(r.measured[k] - r.formula[k]) * da;
    ref += std::abs(r.formula[k]) * da;
  }
  r.residual = ref > 0.0 ? diff / ref : diff;
  return r;
}

enum class DichotomyVerdict { first, second, both, neither };

inline const char* verdict_name(DichotomyVerdict v) {
  switch (v) {
    case DichotomyVerdict::first: return "area";
    case DichotomyVerdict::second: return "dissipation";
    case DichotomyVerdict::both: return "both";
    case DichotomyVerdict::neither: return "neither";
  }
  return "neither";
}

struct DichotomyResult {
  std::vector<double> ratio1;  // |{phi >= a - delta} n B_r| / r^2
  std::vector<double> ratio2;  // nu(B_r) / r
  DichotomyVerdict verdict = DichotomyVerdict::neither;
};

struct DichotomyFloors {
  double area = 0.05;          // times delta
  double dissipation = 0.01;   // times delta^3
};

inline DichotomyResult density_dichotomy(const LiftedField& f, const DiscreteMeasure& nu, Vec2 x, double a,
                                         double delta, const std::vector<double>& radii, DichotomyFloors fl = {},
                                         int sub = 4) {
  if (!(delta > 0.0 && delta < kPi / 2)) throw RangeError("density_dichotomy: delta must lie in (0, pi/2)");
  detail::check_radii(radii, "density_dichotomy");
  DichotomyResult r;
  for (double rad : radii) {
    double area = 0.0;
    detail::for_ball_samples(f, x, rad, sub, [&](Vec2 p, double w) {
      if (f.phi_at(p) >= a - delta) area += w;
    });
    double m = 0.0;
    for (const auto& at : nu.atoms)
      if (norm(Vec2{at.pos[0], at.pos[1]} - x) < rad) m += std::abs(at.weight);
    r.ratio1.push_back(area / (rad * rad));
    r.ratio2.push_back(m / rad);
  }
  const bool c1 = *std::min_element(r.ratio1.begin(), r.ratio1.end()) >= fl.area * delta;
  const bool c2 = *std::min_element(r.ratio2.begin(), r.ratio2.end()) >= fl.dissipation * delta * delta * delta;
  r.verdict = c1 && c2 ? DichotomyVerdict::both
              : c1     ? DichotomyVerdict::first
              : c2     ? DichotomyVerdict::second
                       : DichotomyVerdict::neither;
  return r;
}

// ---------------------------------------------------------------------------
// Concentration report

struct PartReport {
  std::vector<double> sector_masses;        // paired defect mass per sector
  double jump_mass = 0.0;                   // paired defect mass of the jump class
  std::vector<double> shock_concentration;  // per sector, fraction within tolerance of the shock family
  double jump_on_sigma_fraction = 1.0;
  double unpaired_residual = 0.0;
  double paired_fraction = 1.0;
};

struct ReportOptions {
  double tol_cells = 2.0;
  double audit_tol_cells = 1.0;
  std::vector<double> radii;  // empty: default_radii
  double sigma_threshold = 0.1 * (std::sqrt(3.0) - kPi / 3);
  ShockOptions shock;
  bool positive = true;
};

struct RectifiabilityReport {
  int n = 0;
  PartReport negative;
  PartReport positive;  // mirrored pipeline; empty when disabled
  double nu_mass = 0.0;
  double nu_on_sigma_fraction = 1.0;
  CrossingAudit audit;
  std::vector<SigmaPoint> sigma;
  std::vector<ShockCurve> shocks;
};

namespace detail {

inline CellMask shock_mask(const LiftedField& f, const SectorCover& cv, const std::vector<ShockCurve>& family,
                           int l, double tol_cells) {
  CellMask m(f);
  const double step = 0.25 * f.cell_size();
  for (const auto& sc : family) {
    if (sc.l != l) continue;
    for (std::size_t k = 0; k + 1 < sc.samples.size(); ++k) {
      const Vec2 a = cv.e[l] * sc.samples[k].first + cv.up(l) * sc.samples[k].second;
      const Vec2 b = cv.e[l] * sc.samples[k + 1].first + cv.up(l) * sc.samples[k + 1].second;
      const int q = std::max(1, static_cast<int>(std::ceil(norm(b - a) / step)));
      for (int i = 0; i <= q; ++i) {
        const Vec2 x = a + (b - a) * (static_cast<double>(i) / q);
        if (f.in_ball(x)) m.mark(x);
      }
    }
  }
  m.dilate(tol_cells);
  return m;
}

/// Negative part of the defect of a hypograph/epigraph pair. Pair locations
/// pass through `to_field` before the Sigma test.
template <class Map>
PartReport part_report(const CurveEnsemble& hyp, const CurveEnsemble& epi, const SectorCover& cv,
                       const CellMask& sigma_mask, Map&& to_field, const ReportOptions& opt,
                       std::vector<ShockCurve>* family_out) {
  const auto& f = *hyp.field;
  PairingOptions po;
  po.dt = hyp.t_bar;
  po.da = hyp.da;
  const auto pr = pair_defects(jump_events(hyp), jump_events(epi), f, cv, po);
  auto family = shock_family(hyp, cv, opt.shock);
  PartReport r;
  r.unpaired_residual = pr.residual;
  r.paired_fraction = pr.paired_fraction();
  r.sector_masses.assign(cv.count(), 0.0);
  r.shock_concentration.assign(cv.count(), 1.0);
  std::vector<double> near(cv.count(), 0.0);
  std::vector<std::optional<CellMask>> masks(cv.count());
  double jump_near = 0.0;
  for (const auto& p : pr.pairs) {
    if (p.cls == kJumpClass) {
      r.jump_mass += p.mass;
      if (sigma_mask.test(to_field(p.x))) jump_near += p.mass;
      continue;
    }
    r.sector_masses[p.cls] += p.mass;
    if (!masks[p.cls]) masks[p.cls] = shock_mask(f, cv, family, p.cls, opt.tol_cells);
    if (masks[p.cls]->test(p.x)) near[p.cls] += p.mass;
  }
  for (int l = 0; l < cv.count(); ++l)
    if (r.sector_masses[l] > 0.0) r.shock_concentration[l] = near[l] / r.sector_masses[l];
  if (r.jump_mass > 0.0) r.jump_on_sigma_fraction = jump_near / r.jump_mass;
  if (family_out) *family_out = std::move(family);
  return r;
}

}  // namespace detail

/// Splits the paired defect into sector and jump classes and measures how
/// much of each sits near the shock family and near the detected set. The
/// positive part runs the same pipeline on the time-reversed ensembles.
inline RectifiabilityReport rectifiability_report(const CurveEnsemble& hyp, const CurveEnsemble& epi,
                                                  const DiscreteMeasure& nu, const ReportOptions& opt = {}) {
  if (hyp.side != Side::hypograph || epi.side != Side::epigraph)
    throw RangeError("rectifiability_report expects a hypograph and an epigraph ensemble");
  if (hyp.n != epi.n) throw RangeError("rectifiability_report: ensembles were built at different levels");
  const auto& f = *hyp.field;
  RectifiabilityReport r;
  r.n = hyp.n;
  const auto radii = opt.radii.empty() ? default_radii(f) : opt.radii;
  r.sigma = sigma_detect(f, nu, radii, opt.sigma_threshold);
  for (const auto& at : nu.atoms)
    if (f.in_ball({at.pos[0], at.pos[1]})) r.nu_mass += std::abs(at.weight);
  r.nu_on_sigma_fraction = mass_near(f, nu, r.sigma, opt.tol_cells);
  detail::CellMask sigma_mask(f);
  for (const auto& p : r.sigma) sigma_mask.mark(p.x);
  sigma_mask.dilate(opt.tol_cells);

  const auto cv = sector_cover(f.M());
  r.negative = detail::part_report(hyp, epi, cv, sigma_mask, [](Vec2 x) { return x; }, opt, &r.shocks);
  r.audit = no_crossing_audit(hyp, epi, r.shocks, cv, opt.audit_tol_cells * f.cell_size(), opt.shock);

  if (opt.positive) {
    const auto mcv = sector_cover(std::max(f.M(), kTwoPi));
    r.positive = detail::part_report(reverse_ensemble(hyp), reverse_ensemble(epi), mcv, sigma_mask,
                                     [](Vec2 x) { return x; }, opt, nullptr);
  }
  return r;
}

}  // namespace eikonal

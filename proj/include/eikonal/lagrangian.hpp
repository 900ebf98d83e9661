// Approximate Lagrangian representation of the hypograph {a <= phi} or the
// epigraph {a >= phi} inside B_R.
//
// Particles sit on a co-moving lattice: one square lattice per a-level,
// translated with that level's characteristic velocity. Free flight never
// moves a particle off its slot, so each step only has to compare slot
// occupancy with the target indicator and relocate the mismatch by optimal
// transport in the anisotropic metric of the step.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <unordered_map>
#include <vector>

#include "eikonal/kinetic.hpp"
#include "eikonal/transport.hpp"

namespace eikonal {

enum class Side { hypograph, epigraph };

inline const char* side_name(Side s) { return s == Side::hypograph ? "hypograph" : "epigraph"; }

/// Target indicator: a <= phi on the hypograph, a >= phi on the epigraph.
inline bool on_side(Side s, double a, double phi) { return s == Side::hypograph ? a <= phi : a >= phi; }

// ---------------------------------------------------------------------------
// Seed classification for one step of length t_bar

enum class SeedKind { E1, E2, E3, outside };

struct SeedLabel {
  SeedKind kind = SeedKind::outside;
  double time = 0.0;  // exit offset for E2, entry offset for E3, from the start of the step
};

namespace detail {

// Larger root of |q + s v|^2 = R^2 (leaving the disc).
inline double exit_offset(Vec2 q, Vec2 v, double R) {
  const double b = dot(q, v);
  return -b + std::sqrt(std::max(0.0, b * b - (dot(q, q) - R * R)));
}

// Smaller root (entering the disc), never negative.
inline double entry_offset(Vec2 q, Vec2 v, double R) {
  const double b = dot(q, v);
  return std::max(0.0, -b - std::sqrt(std::max(0.0, b * b - (dot(q, q) - R * R))));
}

}  // namespace detail

inline SeedLabel classify_seed(Vec2 x, double a, Vec2 center, double R, double t_bar) {
  const Vec2 v = char_velocity(a);
  const Vec2 q = x - center;
  const Vec2 q1 = q + t_bar * v;
  const bool in0 = dot(q, q) < R * R, in1 = dot(q1, q1) < R * R;
  if (in0 && in1) return {SeedKind::E1, 0.0};
  if (in0) return {SeedKind::E2, detail::exit_offset(q, v, R)};
  if (in1) return {SeedKind::E3, detail::entry_offset(q, v, R)};
  return {};
}

struct LabelledSeed {
  Vec2 x;
  double a = 0.0;
  SeedLabel label;
};

/// Labels every (x, a) cell center of a spacing-h lattice with `levels`
/// a-levels that lies within R + t_bar of the ball center.
inline std::vector<LabelledSeed> partition_E123(const LiftedField& f, double t_bar, int levels, double h) {
  if (!(t_bar > 0.0) || !(h > 0.0) || levels < 1) throw RangeError("partition_E123 needs t_bar, h > 0 and levels >= 1");
  std::vector<LabelledSeed> out;
  const double reach = f.R() + t_bar;
  const int span = static_cast<int>(std::ceil(reach / h)) + 1;
  const double da = f.M() / levels;
  for (int k = 0; k < levels; ++k) {
    const double a = (k + 0.5) * da;
    for (int j = -span; j < span; ++j)
      for (int i = -span; i < span; ++i) {
        const Vec2 x = f.center() + Vec2{(i + 0.5) * h, (j + 0.5) * h};
        if (norm(x - f.center()) >= reach) continue;
        const auto lab = classify_seed(x, a, f.center(), f.R(), t_bar);
        if (lab.kind != SeedKind::outside) out.push_back({x, a, lab});
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curves

/// State change at time t. Starts and ends have pre == post; relocations
/// carry the state just before and just after.
struct CurveNode {
  double t = 0.0;
  Vec2 x_pre;
  double a_pre = 0.0;
  Vec2 x_post;
  double a_post = 0.0;
};

/// A piece of curve history with constant weight. A segment that forks ends
/// there and its children continue it, so a full curve is the chain of
/// segments from a root to a leaf.
struct CurveSegment {
  int parent = -1;
  double weight = 0.0;
  double t_start = 0.0;
  double t_end = 1.0;
  int node_begin = 0;
  int node_end = 0;
  bool exited = false;
  bool forked = false;
};

struct Curve {
  int id = 0;
  Side side = Side::hypograph;
  double weight = 0.0;
  double t_minus = 0.0;
  double t_plus = 1.0;
  std::vector<CurveNode> nodes;
};

struct CurveEnsemble {
  int n = 0;
  Side side = Side::hypograph;
  double t_bar = 0.0;
  double epsilon = 0.0;
  double L = 1.0;
  int levels = 0;      // a-levels of the particle lattice
  double slot = 0.0;   // spatial lattice spacing
  double da = 0.0;     // a-level spacing
  std::shared_ptr<const LiftedField> field;

  std::vector<CurveSegment> segments;
  std::vector<CurveNode> nodes;  // grouped by segment, see CurveSegment::node_begin

  // Mass bookkeeping per step boundary l = 0..2^n (time l * t_bar).
  std::vector<double> alive_mass, injected_mass, exited_mass;
  double initial_mass = 0.0;
  double trimmed_mass = 0.0;    // never nonzero: unmatched excess stays in place
  double unmatched_mass = 0.0;  // sum over steps of excess left without a partner
  long relocations = 0;
  long forks = 0;
  long max_step_atoms = 0;

  // Set by good_curve_filter: states violating the side condition by more than
  // the tolerance are excluded from pushforwards.
  double containment_tol = -1.0;
  std::vector<char> filtered;

  [[nodiscard]] double slot_volume() const { return slot * slot * da; }

  /// Position and angle of segment s at time t, or nothing if not alive.
  [[nodiscard]] std::optional<std::pair<Vec2, double>> state_at(int s, double t) const {
    const auto& seg = segments[s];
    if (t < seg.t_start || t >= seg.t_end) return std::nullopt;
    int k = seg.node_begin;
    while (k + 1 < seg.node_end && nodes[k + 1].t <= t) ++k;
    const auto& nd = nodes[k];
    const Vec2 x = nd.x_post + (t - nd.t) * char_velocity(nd.a_post);
    if (containment_tol >= 0.0 && !filtered.empty() && filtered[s]) {
      const double phi = field->phi_at(x);
      const bool ok = side == Side::hypograph ? nd.a_post <= phi + containment_tol : nd.a_post >= phi - containment_tol;
      if (!ok) return std::nullopt;
    }
    return std::make_pair(x, nd.a_post);
  }

  [[nodiscard]] bool is_leaf(int s) const { return !segments[s].forked; }

  /// Materializes the leaf curves, prepending the history of their ancestors.
  [[nodiscard]] std::vector<Curve> curves() const {
    std::vector<Curve> out;
    std::vector<int> chain;
    for (int s = 0; s < static_cast<int>(segments.size()); ++s) {
      if (!is_leaf(s)) continue;
      chain.clear();
      for (int p = s; p >= 0; p = segments[p].parent) chain.push_back(p);
      Curve c;
      c.id = static_cast<int>(out.size());
      c.side = side;
      c.weight = segments[s].weight;
      c.t_minus = segments[chain.back()].t_start;
      c.t_plus = segments[s].t_end;
      for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        const auto& seg = segments[*it];
        // An ancestor's closing node duplicates the child's opening node.
        const int end = *it == s ? seg.node_end : seg.node_end - 1;
        for (int k = seg.node_begin; k < end; ++k) c.nodes.push_back(nodes[k]);
      }
      out.push_back(std::move(c));
    }
    return out;
  }
};

struct LagrangianOptions {
  int levels = 0;              // a-levels; 0 picks max(8, 2^(n-1))
  double slot_scale = 2.0;     // spatial spacing in units of t_bar
  int max_children = 8;        // cap on the pieces one particle may split into per step
  bool identity_plan = false;  // diagnostic: never relocate
  double epsilon = -1.0;       // boundary discrepancy; negative measures it
  DiscrepancyOptions discrepancy{};
};

namespace detail {

class RepresentationBuilder {
 public:
  RepresentationBuilder(const LiftedField& f, int n, Side side, const LagrangianOptions& opt)
      : opt_(opt) {
    if (n < 1 || n > 16) throw RangeError("dyadic level n must lie in [1, 16]");
    if (opt.slot_scale <= 0.0 || opt.max_children < 1) throw RangeError("invalid lagrangian options");
    e_.n = n;
    e_.side = side;
    e_.t_bar = std::ldexp(1.0, -n);
    e_.field = std::make_shared<LiftedField>(f);
    e_.levels = opt.levels > 0 ? opt.levels : std::max(8, 1 << (n - 1));
    e_.slot = opt.slot_scale * e_.t_bar;
    e_.da = f.M() / e_.levels;
    if (opt.identity_plan) {
      e_.epsilon = 0.0;
    } else {
      e_.epsilon = opt.epsilon >= 0.0 ? opt.epsilon : boundary_discrepancy(f, e_.t_bar, opt.discrepancy);
    }
    e_.L = 1.0 / std::sqrt(std::max(e_.epsilon, e_.t_bar));
    c_ = f.center();
    R_ = f.R();
    steps_ = 1 << n;
    setup_levels();
  }

  CurveEnsemble run() {
    seed();
    e_.alive_mass.push_back(e_.initial_mass);
    e_.injected_mass.push_back(0.0);
    e_.exited_mass.push_back(0.0);
    for (int l = 0; l < steps_; ++l) step(l);
    close();
    return std::move(e_);
  }

 private:
  struct Level {
    double a;
    Vec2 v;
    int i0, j0, wi, wj;
    std::vector<int> head;
  };
  struct Particle {
    int seg;
    int level;
    int i, j;
    double w;
    int next;
  };
  struct SlotRef {
    int level, i, j;
    double mass;
  };

  void setup_levels() {
    const double h = e_.slot;
    levels_.resize(e_.levels);
    for (int k = 0; k < e_.levels; ++k) {
      auto& L = levels_[k];
      L.a = (k + 0.5) * e_.da;
      L.v = char_velocity(L.a);
      L.i0 = static_cast<int>(std::floor((-R_ - std::max(0.0, L.v.x)) / h - 0.5)) - 2;
      L.j0 = static_cast<int>(std::floor((-R_ - std::max(0.0, L.v.y)) / h - 0.5)) - 2;
      L.wi = static_cast<int>(std::ceil((R_ - std::min(0.0, L.v.x)) / h - 0.5)) + 3 - L.i0;
      L.wj = static_cast<int>(std::ceil((R_ - std::min(0.0, L.v.y)) / h - 0.5)) + 3 - L.j0;
      L.head.assign(static_cast<std::size_t>(L.wi) * L.wj, -1);
    }
  }

  [[nodiscard]] Vec2 rel(int k, int i, int j, double t) const {
    const auto& L = levels_[k];
    return Vec2{(i + 0.5) * e_.slot, (j + 0.5) * e_.slot} + t * L.v;
  }
  int& head(int k, int i, int j) {
    auto& L = levels_[k];
    return L.head[static_cast<std::size_t>(j - L.j0) * L.wi + (i - L.i0)];
  }
  // Slot volume times the fraction of the level's a-bin on the target side of phi.
  [[nodiscard]] double target(int k, Vec2 q) const {
    const double phi = e_.field->phi_at(c_ + q);
    const double lo = k * e_.da;
    const double len = e_.side == Side::hypograph ? phi - lo : lo + e_.da - phi;
    return e_.slot * e_.slot * std::clamp(len, 0.0, e_.da);
  }
  [[nodiscard]] bool inside(Vec2 q) const { return dot(q, q) < R_ * R_; }

  int new_particle(int seg, int k, int i, int j, double w) {
    int id;
    if (!free_.empty()) {
      id = free_.back();
      free_.pop_back();
    } else {
      id = static_cast<int>(parts_.size());
      parts_.emplace_back();
    }
    int& hd = head(k, i, j);
    parts_[id] = {seg, k, i, j, w, hd};
    hd = id;
    return id;
  }

  int new_segment(int parent, double w, double t) {
    CurveSegment s;
    s.parent = parent;
    s.weight = w;
    s.t_start = t;
    segs_.push_back(s);
    return static_cast<int>(segs_.size()) - 1;
  }

  void log_node(int seg, double t, Vec2 xp, double ap, Vec2 xq, double aq) {
    log_.push_back({seg, CurveNode{t, xp, ap, xq, aq}});
  }

  // Slot index range of level k that can be inside the ball at t0 or t1.
  void slot_range(int k, double t0, double t1, int& ilo, int& ihi, int& jlo, int& jhi) const {
    const auto& L = levels_[k];
    const double h = e_.slot;
    const double sx0 = std::min(t0 * L.v.x, t1 * L.v.x), sx1 = std::max(t0 * L.v.x, t1 * L.v.x);
    const double sy0 = std::min(t0 * L.v.y, t1 * L.v.y), sy1 = std::max(t0 * L.v.y, t1 * L.v.y);
    ilo = std::max(L.i0, static_cast<int>(std::floor((-R_ - sx1) / h - 0.5)) - 1);
    ihi = std::min(L.i0 + L.wi - 1, static_cast<int>(std::ceil((R_ - sx0) / h - 0.5)) + 1);
    jlo = std::max(L.j0, static_cast<int>(std::floor((-R_ - sy1) / h - 0.5)) - 1);
    jhi = std::min(L.j0 + L.wj - 1, static_cast<int>(std::ceil((R_ - sy0) / h - 0.5)) + 1);
  }

  // Widens [a, b] to cover the slots of row j that are inside the ball at time t, padded by one slot.
  void row_span(int k, int j, double t, int& a, int& b) const {
    const double h = e_.slot;
    const Vec2 o = rel(k, 0, j, t);
    const double r2 = R_ * R_ - o.y * o.y;
    if (r2 <= 0.0) return;
    const double r = std::sqrt(r2);
    a = std::min(a, static_cast<int>(std::floor((-r - o.x) / h)) - 1);
    b = std::max(b, static_cast<int>(std::ceil((r - o.x) / h)) + 1);
  }

  void seed() {
    const double tol = 1e-12 * e_.slot_volume();
    for (int k = 0; k < e_.levels; ++k) {
      int ilo, ihi, jlo, jhi;
      slot_range(k, 0.0, 0.0, ilo, ihi, jlo, jhi);
      for (int j = jlo; j <= jhi; ++j)
        for (int i = ilo; i <= ihi; ++i) {
          const Vec2 q = rel(k, i, j, 0.0);
          if (!inside(q)) continue;
          const double w = target(k, q);
          if (w <= tol) continue;
          const int s = new_segment(-1, w, 0.0);
          log_node(s, 0.0, c_ + q, levels_[k].a, c_ + q, levels_[k].a);
          new_particle(s, k, i, j, w);
          e_.initial_mass += w;
        }
    }
  }

  void end_segment(int seg, double t, Vec2 x, double a, bool exited) {
    log_node(seg, t, x, a, x, a);
    segs_[seg].t_end = t;
    segs_[seg].exited = exited;
  }

  void step(int l) {
    const double t0 = l * e_.t_bar, t1 = (l + 1) * e_.t_bar;
    const double vol = e_.slot_volume();
    const double tol = 1e-9 * vol;
    double injected = 0.0, exited = 0.0;
    excess_.clear();
    deficit_.clear();
    for (int k = 0; k < e_.levels; ++k) {
      const auto& L = levels_[k];
      int ilo, ihi, jlo, jhi;
      slot_range(k, t0, t1, ilo, ihi, jlo, jhi);
      for (int j = jlo; j <= jhi; ++j) {
        int a = ihi + 1, b = ilo - 1;
        row_span(k, j, t0, a, b);
        row_span(k, j, t1, a, b);
        for (int i = std::max(a, ilo); i <= std::min(b, ihi); ++i) {
          const Vec2 q0 = rel(k, i, j, t0), q1 = rel(k, i, j, t1);
          const bool in0 = inside(q0), in1 = inside(q1);
          int& hd = head(k, i, j);
          if (hd >= 0 && !in0) throw BookkeepingError("particle found outside the ball at the start of a step");
          if (hd >= 0 && !in1) {
            const double s = detail::exit_offset(q0, L.v, R_);
            const Vec2 x = c_ + q0 + s * L.v;
            for (int p = hd; p >= 0;) {
              const int nx = parts_[p].next;
              end_segment(parts_[p].seg, t0 + s, x, L.a, true);
              exited += parts_[p].w;
              free_.push_back(p);
              p = nx;
            }
            hd = -1;
          }
          if (hd < 0 && !in0 && in1) {
            const double w = target(k, q0);
            if (w > tol) {
              const double s = detail::entry_offset(q0, L.v, R_);
              const Vec2 x = c_ + q0 + s * L.v;
              const int seg = new_segment(-1, w, t0 + s);
              log_node(seg, t0 + s, x, L.a, x, L.a);
              new_particle(seg, k, i, j, w);
              injected += w;
            }
          }
          if (!in1) continue;
          double m = 0.0;
          for (int p = hd; p >= 0; p = parts_[p].next) m += parts_[p].w;
          const double d = m - target(k, q1);
          if (d > tol) excess_.push_back({k, i, j, d});
          else if (d < -tol) deficit_.push_back({k, i, j, -d});
        }
      }
    }
    if (!opt_.identity_plan) relocate(t1);
    e_.injected_mass.push_back(e_.injected_mass.back() + injected);
    e_.exited_mass.push_back(e_.exited_mass.back() + exited);
    double alive = 0.0;
    for (const auto& L : levels_)
      for (int hd : L.head)
        for (int p = hd; p >= 0; p = parts_[p].next) alive += parts_[p].w;
    e_.alive_mass.push_back(alive);
  }

  [[nodiscard]] std::array<double, 3> atom_pos(const SlotRef& s, double t) const {
    const Vec2 x = c_ + rel(s.level, s.i, s.j, t);
    return {x.x, x.y, levels_[s.level].a};
  }

  void relocate(double t) {
    if (excess_.empty() || deficit_.empty()) {
      for (const auto& s : excess_) e_.unmatched_mass += s.mass;
      return;
    }
    DiscreteMeasure src, dst;
    src.dim = dst.dim = 3;
    for (const auto& s : excess_) src.atoms.push_back({atom_pos(s, t), s.mass});
    for (const auto& s : deficit_) dst.atoms.push_back({atom_pos(s, t), s.mass});
    e_.max_step_atoms = std::max<long>(e_.max_step_atoms, static_cast<long>(src.size() + dst.size()));

    // Balance with a virtual atom at the centroid; whatever it absorbs stays put.
    const double gap = src.total_mass() - dst.total_mass();
    const int virt_src = gap < 0 ? static_cast<int>(src.size()) : -1;
    const int virt_dst = gap > 0 ? static_cast<int>(dst.size()) : -1;
    if (gap != 0.0) {
      std::array<double, 3> cen{};
      for (const auto* mu : {&src, &dst})
        for (const auto& at : mu->atoms)
          for (int c = 0; c < 3; ++c) cen[c] += at.pos[c];
      for (double& v : cen) v /= static_cast<double>(src.size() + dst.size());
      (gap > 0 ? dst : src).atoms.push_back({cen, std::abs(gap)});
    }
    W1Options wo;
    wo.potentials = false;
    const auto plan = w1_plan(src, dst, AnisotropicMetric{e_.L}, wo);

    std::vector<std::vector<std::pair<int, double>>> moves(excess_.size());
    for (const auto& p : plan.pairs) {
      if (p.src == virt_src) continue;
      if (p.dst == virt_dst) {
        e_.unmatched_mass += p.mass;
        continue;
      }
      moves[p.src].push_back({p.dst, p.mass});
    }
    for (std::size_t s = 0; s < excess_.size(); ++s)
      if (!moves[s].empty()) apply_moves(excess_[s], moves[s], t);
  }

  void apply_moves(const SlotRef& s, const std::vector<std::pair<int, double>>& mv, double t) {
    const auto& Ls = levels_[s.level];
    const Vec2 xs = c_ + rel(s.level, s.i, s.j, t);
    int& hd = head(s.level, s.i, s.j);
    double m = 0.0, out = 0.0;
    for (int p = hd; p >= 0; p = parts_[p].next) m += parts_[p].w;
    for (const auto& [d, mass] : mv) out += mass;
    std::vector<int> members;
    for (int p = hd; p >= 0; p = parts_[p].next) members.push_back(p);
    hd = -1;

    struct Piece {
      int dst;  // -1 keeps the particle in its slot
      double w;
    };
    // Particles in a slot share one state, so whole particles are handed to
    // destinations in order and only those straddling a boundary are split.
    std::vector<Piece> plan;
    if (m - out > 1e-12 * m) plan.push_back({-1, m - out});
    for (const auto& [d, mass] : mv) plan.push_back({d, mass});
    if (plan.empty()) plan.push_back({-1, m});
    std::size_t cur = 0;
    double cur_left = plan[0].w;
    std::vector<Piece> pieces;
    for (int p : members) {
      const double w = parts_[p].w;
      const int seg = parts_[p].seg;
      pieces.clear();
      double need = w;
      while (need > 0.0) {
        // The final destination absorbs rounding left over from the others.
        const bool tail = cur + 1 == plan.size();
        const double take = tail ? need : std::min(need, cur_left);
        if (take > 1e-12 * w) pieces.push_back({plan[cur].dst, take});
        need -= take;
        cur_left -= take;
        if (!tail && cur_left <= 1e-12 * w) cur_left += plan[++cur].w;
      }
      if (pieces.empty()) pieces.push_back({plan[cur].dst, w});
      std::stable_sort(pieces.begin(), pieces.end(), [](const Piece& a, const Piece& b) { return a.w > b.w; });
      if (static_cast<int>(pieces.size()) > opt_.max_children) pieces.resize(opt_.max_children);
      double kept = 0.0;
      for (const auto& pc : pieces) kept += pc.w;
      for (auto& pc : pieces) pc.w *= w / kept;

      auto dest = [&](const Piece& pc, int& k, int& i, int& j) {
        if (pc.dst < 0) {
          k = s.level, i = s.i, j = s.j;
        } else {
          const auto& d = deficit_[pc.dst];
          k = d.level, i = d.i, j = d.j;
        }
      };
      if (pieces.size() == 1) {
        int k, i, j;
        dest(pieces[0], k, i, j);
        if (pieces[0].dst >= 0) {
          log_node(seg, t, xs, Ls.a, c_ + rel(k, i, j, t), levels_[k].a);
          ++e_.relocations;
        }
        parts_[p].w = w;
        parts_[p].level = k, parts_[p].i = i, parts_[p].j = j;
        int& h2 = head(k, i, j);
        parts_[p].next = h2;
        h2 = p;
        continue;
      }
      ++e_.forks;
      end_segment(seg, t, xs, Ls.a, false);
      segs_[seg].forked = true;
      free_.push_back(p);
      for (const auto& pc : pieces) {
        int k, i, j;
        dest(pc, k, i, j);
        const int child = new_segment(seg, pc.w, t);
        log_node(child, t, xs, Ls.a, c_ + rel(k, i, j, t), levels_[k].a);
        if (pc.dst >= 0) ++e_.relocations;
        new_particle(child, k, i, j, pc.w);
      }
    }
  }

  void close() {
    for (const auto& L : levels_)
      for (int hd : L.head)
        for (int p = hd; p >= 0; p = parts_[p].next) {
          const auto& pt = parts_[p];
          const Vec2 x = c_ + rel(pt.level, pt.i, pt.j, 1.0);
          end_segment(pt.seg, 1.0, x, L.a, false);
        }
    // Group the node log by segment, keeping time order within each segment.
    std::vector<int> count(segs_.size() + 1, 0);
    for (const auto& [s, nd] : log_) ++count[s + 1];
    for (std::size_t s = 0; s < segs_.size(); ++s) count[s + 1] += count[s];
    e_.nodes.resize(log_.size());
    std::vector<int> fill(count.begin(), count.end() - 1);
    for (const auto& [s, nd] : log_) e_.nodes[fill[s]++] = nd;
    for (std::size_t s = 0; s < segs_.size(); ++s) {
      segs_[s].node_begin = count[s];
      segs_[s].node_end = count[s + 1];
    }
    e_.segments = std::move(segs_);
  }

  LagrangianOptions opt_;
  CurveEnsemble e_;
  Vec2 c_;
  double R_ = 1.0;
  int steps_ = 0;
  std::vector<Level> levels_;
  std::vector<Particle> parts_;
  std::vector<int> free_;
  std::vector<CurveSegment> segs_;
  std::vector<std::pair<int, CurveNode>> log_;
  std::vector<SlotRef> excess_, deficit_;
};

}  // namespace detail

inline CurveEnsemble build_representation(const LiftedField& f, int n, Side side, const LagrangianOptions& opt = {}) {
  return detail::RepresentationBuilder(f, n, side, opt).run();
}

// ---------------------------------------------------------------------------
// Pushforwards and error functionals

/// Atoms (x, y, a) at the positions of the curves alive at time t.
inline DiscreteMeasure pushforward_at(const CurveEnsemble& e, double t) {
  if (!(t >= 0.0 && t < 1.0)) throw RangeError("pushforward time must lie in [0, 1)");
  DiscreteMeasure mu;
  mu.dim = 3;
  mu.label = side_name(e.side);
  for (int s = 0; s < static_cast<int>(e.segments.size()); ++s)
    if (auto st = e.state_at(s, t)) mu.atoms.push_back({{st->first.x, st->first.y, st->second}, e.segments[s].weight});
  return mu;
}

/// alive + exited - initial - injected at step boundary l; zero up to rounding.
inline double accounting_gap(const CurveEnsemble& e, int l) {
  return e.alive_mass.at(l) + e.exited_mass.at(l) + e.trimmed_mass - e.initial_mass - e.injected_mass.at(l);
}

namespace detail {

// Sum in sorted order so the result does not depend on the order of the terms.
inline double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double v : terms) s += v;
  return s;
}

template <class Fn>
double node_functional(const CurveEnsemble& e, Fn&& per_node) {
  std::vector<double> terms;
  for (const auto& seg : e.segments)
    for (int k = seg.node_begin; k < seg.node_end; ++k) {
      const double v = per_node(e.nodes[k]);
      if (v != 0.0) terms.push_back(seg.weight * v);
    }
  return ordered_sum(terms);
}

template <class Fn>
double node_functional(const std::vector<Curve>& curves, Fn&& per_node) {
  std::vector<double> terms;
  for (const auto& c : curves)
    for (const auto& nd : c.nodes) {
      const double v = per_node(nd);
      if (v != 0.0) terms.push_back(c.weight * v);
    }
  return ordered_sum(terms);
}

inline double jump_x(const CurveNode& nd) { return norm(nd.x_post - nd.x_pre); }
inline double jump_a(const CurveNode& nd) { return std::abs(nd.a_post - nd.a_pre); }

}  // namespace detail

/// e_h: weight times total spatial relocation, summed over curves.
inline double horizontal_error(const CurveEnsemble& e) { return detail::node_functional(e, detail::jump_x); }
inline double horizontal_error(const std::vector<Curve>& c) { return detail::node_functional(c, detail::jump_x); }

/// e_v: weight times total variation of a, summed over curves.
inline double vertical_cost(const CurveEnsemble& e) { return detail::node_functional(e, detail::jump_a); }
inline double vertical_cost(const std::vector<Curve>& c) { return detail::node_functional(c, detail::jump_a); }

struct DefectAtom {
  double t = 0.0;
  Vec2 x;  // midpoint of the relocation
  double a_lo = 0.0;
  double a_hi = 0.0;
  int sign = 0;  // +1 where a increases, -1 where it decreases
  double weight = 1.0;

  [[nodiscard]] double length() const { return a_hi - a_lo; }
};

struct CurveDefect {
  std::vector<DefectAtom> atoms;

  [[nodiscard]] double total_length() const {
    double s = 0.0;
    for (const auto& a : atoms) s += a.length();
    return s;
  }
};

namespace detail {
inline std::optional<DefectAtom> defect_of(const CurveNode& nd, double weight) {
  if (nd.a_post == nd.a_pre) return std::nullopt;
  return DefectAtom{nd.t, 0.5 * (nd.x_pre + nd.x_post), std::min(nd.a_pre, nd.a_post), std::max(nd.a_pre, nd.a_post),
                    nd.a_post > nd.a_pre ? 1 : -1, weight};
}
}  // namespace detail

/// Jump part of the defect of one curve, with unit weight per atom.
inline CurveDefect curve_defect(const Curve& c) {
  CurveDefect d;
  for (const auto& nd : c.nodes)
    if (auto at = detail::defect_of(nd, 1.0)) d.atoms.push_back(*at);
  return d;
}

/// All weighted defect atoms of an ensemble; shared history is counted once.
inline std::vector<DefectAtom> ensemble_defects(const CurveEnsemble& e) {
  std::vector<DefectAtom> out;
  for (const auto& seg : e.segments)
    for (int k = seg.node_begin; k < seg.node_end; ++k)
      if (auto at = detail::defect_of(e.nodes[k], seg.weight)) out.push_back(*at);
  return out;
}

struct RepresentationError {
  double tv = 0.0;  // sum over lattice slots of |pushforward - lattice reference|
  double w1 = 0.0;  // W1 to the lattice reference in the unit metric, plus diam * |mass gap|
  double continuum_tv = 0.0;  // same TV against the exact target mass of each slot box
  double continuum_w1 = 0.0;  // upper bound on W1 to the continuous target measure
  double reference_mass = 0.0;
  double pushforward_mass = 0.0;
};

namespace detail {

// Upper bound on the transport of signed cell imbalances. Each dyadic box
// passes its imbalance to its parent at the cost of the parent's diameter;
// once few boxes remain they are matched exactly between box centers.
// `position` maps fractional (k, i, j) indices to a point of (x, a) space.
template <class Pos>
double tree_transport_bound(std::vector<std::pair<std::array<int, 3>, double>> cells, double box_diam0, double top_diam,
                            Pos&& position) {
  double cost = 0.0;
  int s = 0;
  for (; cells.size() > 1500; ++s) {
    const double parent_diam = box_diam0 * std::ldexp(1.0, s + 1);
    std::map<std::array<int, 3>, double> up;
    for (const auto& [key, d] : cells) {
      cost += std::abs(d) * parent_diam;
      up[{key[0] >> 1, key[1] >> 1, key[2] >> 1}] += d;
    }
    cells.assign(up.begin(), up.end());
  }
  DiscreteMeasure plus, minus;
  plus.dim = minus.dim = 3;
  const double scale = std::ldexp(1.0, s);
  for (const auto& [key, d] : cells) {
    if (d == 0.0) continue;
    cost += std::abs(d) * box_diam0 * scale;  // gather at the box center
    const auto p = position((key[0] + 0.5) * scale - 0.5, (key[1] + 0.5) * scale - 0.5, (key[2] + 0.5) * scale - 0.5);
    (d > 0 ? plus : minus).atoms.push_back({p, std::abs(d)});
  }
  if (plus.empty() || minus.empty()) return cost + top_diam * (plus.total_mass() + minus.total_mass());
  W1Options wo;
  wo.potentials = false;
  const AnisotropicMetric unit{1.0};
  const auto trim = trim_unbalanced(plus, minus, unit, top_diam, wo);
  return cost + w1_plan(trim.mu1, trim.mu2, unit, wo).cost + trim.penalty;
}

}  // namespace detail

/// Distances between the pushforward at t and the target measure. The
/// lattice variant samples the side condition at slot centers, which is what
/// the construction tracks; the continuum variant integrates it over each
/// slot box with `sub` x `sub` samples.
inline RepresentationError representation_error(const CurveEnsemble& e, double t, int sub = 4) {
  if (!(t >= 0.0 && t < 1.0)) throw RangeError("representation time must lie in [0, 1)");
  const auto& f = *e.field;
  const Vec2 c = f.center();
  const double R = f.R(), h = e.slot, da = e.da;
  auto key = [](int k, int i, int j) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k)) << 42) ^
           (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i + (1 << 20))) << 21) ^
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(j + (1 << 20)));
  };
  struct Slot {
    int k, i, j;
    double mass, lattice, exact, intra;
  };
  std::unordered_map<std::uint64_t, std::size_t> index;
  std::vector<Slot> slots;
  auto at = [&](int k, int i, int j) -> Slot& {
    auto [it, fresh] = index.emplace(key(k, i, j), slots.size());
    if (fresh) slots.push_back({k, i, j, 0.0, 0.0, 0.0, 0.0});
    return slots[it->second];
  };

  RepresentationError r;
  for (int s = 0; s < static_cast<int>(e.segments.size()); ++s) {
    const auto st = e.state_at(s, t);
    if (!st) continue;
    const int k = std::clamp(static_cast<int>(std::floor(st->second / da)), 0, e.levels - 1);
    const Vec2 q = st->first - c - t * char_velocity((k + 0.5) * da);
    const int i = static_cast<int>(std::lround(q.x / h - 0.5)), j = static_cast<int>(std::lround(q.y / h - 0.5));
    at(k, i, j).mass += e.segments[s].weight;
    r.pushforward_mass += e.segments[s].weight;
  }

  // Mean distance to the center of a uniform unit square.
  constexpr double kSquareMean = 0.38259785823210634;
  auto side_part = [&](int k, double phi) {
    const double lo = k * da, hi = lo + da;
    return e.side == Side::hypograph ? std::pair{lo, std::clamp(phi, lo, hi)} : std::pair{std::clamp(phi, lo, hi), hi};
  };
  // Integral of |a - a_k| over [a0, a1] inside the bin.
  auto abs_moment = [&](int k, double a0, double a1) {
    const double ak = (k + 0.5) * da;
    auto F = [ak](double a) { return a < ak ? -0.5 * (ak - a) * (ak - a) : 0.5 * (a - ak) * (a - ak); };
    return F(a1) - F(a0);
  };
  const double hs = h / sub;
  for (int k = 0; k < e.levels; ++k) {
    const Vec2 v = char_velocity((k + 0.5) * da);
    const int ilo = static_cast<int>(std::floor((-R - t * v.x) / h)) - 2, ihi = static_cast<int>(std::ceil((R - t * v.x) / h)) + 1;
    const int jlo = static_cast<int>(std::floor((-R - t * v.y) / h)) - 2, jhi = static_cast<int>(std::ceil((R - t * v.y) / h)) + 1;
    for (int j = jlo; j <= jhi; ++j)
      for (int i = ilo; i <= ihi; ++i) {
        const Vec2 q = Vec2{(i + 0.5) * h, (j + 0.5) * h} + t * v;
        if (norm(q) >= R + h) continue;
        double lattice = 0.0, exact = 0.0, moment = 0.0;
        if (dot(q, q) < R * R) {
          const auto [a0, a1] = side_part(k, f.phi_at(c + q));
          lattice = h * h * (a1 - a0);
        }
        for (int sj = 0; sj < sub; ++sj)
          for (int si = 0; si < sub; ++si) {
            const Vec2 p = q + Vec2{(si + 0.5) * hs - 0.5 * h, (sj + 0.5) * hs - 0.5 * h};
            if (dot(p, p) >= R * R) continue;
            const auto [a0, a1] = side_part(k, f.phi_at(c + p));
            exact += hs * hs * (a1 - a0);
            moment += hs * hs * abs_moment(k, a0, a1);
          }
        if (lattice <= 0.0 && exact <= 0.0) continue;
        auto& sl = at(k, i, j);
        sl.lattice = lattice;
        sl.exact = exact;
        sl.intra = exact > 0.0 ? kSquareMean * h + moment / exact : 0.0;
        r.reference_mass += lattice;
      }
  }

  DiscreteMeasure plus, minus;
  plus.dim = minus.dim = 3;
  const double tol = 1e-12 * e.slot_volume();
  double intra = 0.0;
  std::vector<std::pair<std::array<int, 3>, double>> cdiff;
  for (const auto& sl : slots) {
    const double d = sl.mass - sl.lattice;
    r.tv += std::abs(d);
    const double dc = sl.mass - sl.exact;
    r.continuum_tv += std::abs(dc);
    intra += std::min(sl.mass, sl.exact) * sl.intra;
    if (std::abs(dc) > tol) cdiff.push_back({{sl.k, sl.i, sl.j}, dc});
    if (std::abs(d) <= tol) continue;
    const Vec2 x = c + Vec2{(sl.i + 0.5) * h, (sl.j + 0.5) * h} + t * char_velocity((sl.k + 0.5) * da);
    (d > 0 ? plus : minus).atoms.push_back({{x.x, x.y, (sl.k + 0.5) * da}, std::abs(d)});
  }
  const double diam = 2 * R + f.M();
  std::sort(cdiff.begin(), cdiff.end());
  // Cells of different levels drift apart by t |v(a) - v(b)| <= t |a - b|.
  const double box_diam0 = std::sqrt(2.0) * h + (1.0 + t) * da;
  auto position = [&](double k, double i, double j) {
    const Vec2 x = c + Vec2{(i + 0.5) * h, (j + 0.5) * h} + t * char_velocity((k + 0.5) * da);
    return std::array<double, 3>{x.x, x.y, (k + 0.5) * da};
  };
  r.continuum_w1 = intra + detail::tree_transport_bound(std::move(cdiff), box_diam0, diam, position);

  if (plus.empty() && minus.empty()) return r;
  const AnisotropicMetric unit{1.0};
  W1Options wo;
  wo.potentials = false;
  if (plus.empty() || minus.empty()) {
    r.w1 = diam * (plus.total_mass() + minus.total_mass());
    return r;
  }
  const auto trim = trim_unbalanced(plus, minus, unit, diam, wo);
  r.w1 = w1_plan(trim.mu1, trim.mu2, unit, wo).cost + trim.penalty;
  return r;
}

// ---------------------------------------------------------------------------
// Decomposition of the entropy defect along curves

struct DecompositionReport {
  double res_signed = 0.0;  // hypograph defects against L^1 x U
  double res_abs = 0.0;     // |defects| against L^1 x |U|
  double res_epi = 0.0;     // epigraph defects against -(L^1 x U)
  double hyp_negative_mass = 0.0;
  double epi_positive_mass = 0.0;
  double u_negative_mass = 0.0;  // |U^-|(B_R)
};

/// Product test function tau(t) g(x) h(a) supported in (0,1) x B_R x (0, M).
struct SpaceTimeTest {
  BumpTest xa;
  double ct = 0.5;
  double st = 0.25;

  [[nodiscard]] double tau(double t) const { return detail::bump((t - ct) / st); }
  [[nodiscard]] double tau_integral() const { return st * (detail::bump_prim(1.0) - detail::bump_prim(-1.0)); }
  [[nodiscard]] double h_integral(double lo, double hi) const {
    return xa.sa * (detail::bump_prim((hi - xa.ca) / xa.sa) - detail::bump_prim((lo - xa.ca) / xa.sa));
  }
  [[nodiscard]] double c1_norm() const {
    constexpr double kMaxSlope = 1.5396007178390020;
    return std::max(xa.c1_norm(), kMaxSlope / st);
  }
};

inline std::vector<SpaceTimeTest> make_space_time_tests(const LiftedField& f, int count, std::uint64_t seed) {
  const Vec2 c = f.center();
  const double R = f.R();
  auto inside = [c, R](const BumpTest& b) { return norm(b.c - c) + std::sqrt(2.0) * b.sx < R; };
  auto xa = make_test_family(f, count, seed, inside);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  std::vector<SpaceTimeTest> out;
  for (const auto& b : xa) {
    SpaceTimeTest t{b};
    t.st = 0.2 + 0.25 * U01(rng);
    t.ct = t.st + (1.0 - 2 * t.st) * U01(rng);
    out.push_back(t);
  }
  return out;
}

inline DecompositionReport decomposition_residual(const CurveEnsemble& hyp, const CurveEnsemble& epi,
                                                  const DiscreteMeasure& U, int count = 20, std::uint64_t seed = 5) {
  if (hyp.side != Side::hypograph || epi.side != Side::epigraph)
    throw RangeError("decomposition_residual expects a hypograph and an epigraph ensemble");
  const auto& f = *hyp.field;
  const auto dh = ensemble_defects(hyp), de = ensemble_defects(epi);
  DecompositionReport r;
  for (const auto& d : dh)
    if (d.sign < 0) r.hyp_negative_mass += d.weight * d.length();
  for (const auto& d : de)
    if (d.sign > 0) r.epi_positive_mass += d.weight * d.length();
  std::vector<const Atom*> u_ball;
  for (const auto& at : U.atoms)
    if (f.in_ball({at.pos[0], at.pos[1]})) {
      u_ball.push_back(&at);
      if (at.weight < 0) r.u_negative_mass -= at.weight;
    }

  for (const auto& psi : make_space_time_tests(f, count, seed)) {
    auto pair = [&](const std::vector<DefectAtom>& ds, bool absolute) {
      double s = 0.0;
      for (const auto& d : ds) {
        const double g = psi.xa.gx(d.x);
        if (g == 0.0) continue;
        s += (absolute ? 1 : d.sign) * d.weight * psi.tau(d.t) * g * psi.h_integral(d.a_lo, d.a_hi);
      }
      return s;
    };
    double u = 0.0, u_abs = 0.0;
    for (const Atom* at : u_ball) {
      const double v = psi.xa.gx({at->pos[0], at->pos[1]}) * psi.xa.ha(at->pos[2]);
      u += at->weight * v;
      u_abs += std::abs(at->weight) * v;
    }
    u *= psi.tau_integral();
    u_abs *= psi.tau_integral();
    const double c1 = psi.c1_norm();
    r.res_signed = std::max(r.res_signed, std::abs(pair(dh, false) - u) / c1);
    r.res_abs = std::max(r.res_abs, std::abs(pair(dh, true) - u_abs) / c1);
    r.res_epi = std::max(r.res_epi, std::abs(pair(de, false) + u) / c1);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Good-curve selection

struct GoodCurveResult {
  CurveEnsemble ensemble;
  double dropped_mass = 0.0;  // integral over time of the weight of violating states
  double flagged_mass = 0.0;  // same for states inside the boundary bin but within tolerance
  long dropped_segments = 0;
};

/// Removes the time portions where a segment violates the side condition by
/// more than `tol_bins` a-bins, for segments whose violating fraction of
/// lifetime exceeds theta. States are sampled `samples_per_step` times per step.
inline GoodCurveResult good_curve_filter(const CurveEnsemble& e, double theta = 0.0, double tol_bins = 1.0,
                                         int samples_per_step = 4) {
  GoodCurveResult r;
  r.ensemble = e;
  auto& out = r.ensemble;
  out.containment_tol = tol_bins * e.da;
  out.filtered.assign(e.segments.size(), 0);
  const auto& f = *e.field;
  const double dt = e.t_bar / samples_per_step;
  for (int s = 0; s < static_cast<int>(e.segments.size()); ++s) {
    const auto& seg = e.segments[s];
    double bad = 0.0, edge = 0.0;
    for (int k = seg.node_begin; k + 1 < seg.node_end; ++k) {
      const auto& nd = e.nodes[k];
      const double t1 = e.nodes[k + 1].t;
      const int m = std::max(1, static_cast<int>(std::ceil((t1 - nd.t) / dt)));
      const double w = (t1 - nd.t) / m;
      for (int q = 0; q < m; ++q) {
        const Vec2 x = nd.x_post + (nd.t + (q + 0.5) * w - nd.t) * char_velocity(nd.a_post);
        const double phi = f.phi_at(x);
        const double over = e.side == Side::hypograph ? nd.a_post - phi : phi - nd.a_post;
        if (over > out.containment_tol) bad += w;
        else if (over > -e.da) edge += w;
      }
    }
    const double life = seg.t_end - seg.t_start;
    r.flagged_mass += seg.weight * edge;
    if (bad > theta * life && bad > 0.0) {
      out.filtered[s] = 1;
      r.dropped_mass += seg.weight * bad;
      ++r.dropped_segments;
    }
  }
  return r;
}

}  // namespace eikonal

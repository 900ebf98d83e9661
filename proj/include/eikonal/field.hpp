// Lifted divergence-free unit vector fields on a cell-centered grid.
//
// The field u = e^{i phi} is never stored; only the lifting phi in [0, M] is.
// Evaluation off the grid is nearest-cell (piecewise constant).
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "eikonal/core.hpp"

namespace eikonal {

struct GridIndex {
  int i = 0;
  int j = 0;
  constexpr bool operator==(const GridIndex&) const = default;
};

class LiftedField {
 public:
  LiftedField() = default;

  LiftedField(int nx, int ny, double x_min, double x_max, double y_min, double y_max,
              double M, double R, std::vector<double> phi)
      : nx_(nx), ny_(ny), x_min_(x_min), x_max_(x_max), y_min_(y_min), y_max_(y_max),
        M_(M), R_(R), phi_(std::move(phi)) {
    validate();
    dx_ = (x_max_ - x_min_) / nx_;
    dy_ = (y_max_ - y_min_) / ny_;
  }

  [[nodiscard]] int nx() const { return nx_; }
  [[nodiscard]] int ny() const { return ny_; }
  [[nodiscard]] double x_min() const { return x_min_; }
  [[nodiscard]] double x_max() const { return x_max_; }
  [[nodiscard]] double y_min() const { return y_min_; }
  [[nodiscard]] double y_max() const { return y_max_; }
  [[nodiscard]] double M() const { return M_; }
  [[nodiscard]] double R() const { return R_; }
  [[nodiscard]] double dx() const { return dx_; }
  [[nodiscard]] double dy() const { return dy_; }
  [[nodiscard]] double cell_size() const { return std::max(dx(), dy()); }
  [[nodiscard]] double cell_area() const { return dx() * dy(); }
  [[nodiscard]] Vec2 center() const { return {0.5 * (x_min_ + x_max_), 0.5 * (y_min_ + y_max_)}; }
  [[nodiscard]] const std::vector<double>& values() const { return phi_; }

  [[nodiscard]] double phi(int i, int j) const { return phi_[static_cast<std::size_t>(j) * nx_ + i]; }
  [[nodiscard]] Vec2 cell_center(int i, int j) const {
    return {x_min_ + (i + 0.5) * dx(), y_min_ + (j + 0.5) * dy()};
  }
  [[nodiscard]] bool in_domain(Vec2 p) const {
    return p.x >= x_min_ && p.x <= x_max_ && p.y >= y_min_ && p.y <= y_max_;
  }
  /// Nearest cell, clamped to the grid.
  [[nodiscard]] GridIndex cell_of(Vec2 p) const {
    int i = static_cast<int>(std::floor((p.x - x_min_) / dx_));
    int j = static_cast<int>(std::floor((p.y - y_min_) / dy_));
    return {std::clamp(i, 0, nx_ - 1), std::clamp(j, 0, ny_ - 1)};
  }
  [[nodiscard]] double phi_at(Vec2 p) const {
    auto c = cell_of(p);
    return phi(c.i, c.j);
  }
  /// Open ball B_R around the domain center.
  [[nodiscard]] bool in_ball(Vec2 p) const { return norm(p - center()) < R_; }
  /// Distance from the closed ball to the domain boundary.
  [[nodiscard]] double ball_clearance() const {
    auto c = center();
    double d = std::min({c.x - x_min_, x_max_ - c.x, c.y - y_min_, y_max_ - c.y});
    return d - R_;
  }

 private:
  void validate() const {
    if (nx_ < 8 || ny_ < 8)
      throw RangeError("grid resolution must be at least 8x8, got " + std::to_string(nx_) + "x" +
                       std::to_string(ny_));
    if (!(x_max_ > x_min_) || !(y_max_ > y_min_)) throw RangeError("empty domain rectangle");
    if (!(M_ > 0.0)) throw RangeError("angular bound M must be positive");
    if (!(R_ > 0.0)) throw RangeError("ball radius R must be positive");
    if (!(ball_clearance() > 0.0)) throw GeometryError("closed ball B_R is not strictly inside the domain");
    if (phi_.size() != static_cast<std::size_t>(nx_) * ny_) throw MalformedInputError("phi grid has wrong size");
    for (int j = 0; j < ny_; ++j)
      for (int i = 0; i < nx_; ++i) {
        double v = phi(i, j);
        if (!(v >= 0.0 && v <= M_))
          throw RangeError("phi(" + std::to_string(i) + "," + std::to_string(j) + ") = " + std::to_string(v) +
                           " outside [0, M]");
      }
  }

  int nx_ = 0, ny_ = 0;
  double x_min_ = 0, x_max_ = 0, y_min_ = 0, y_max_ = 0;
  double dx_ = 0, dy_ = 0;  // cached: cell lookups sit in the hottest loops
  double M_ = 0, R_ = 0;
  std::vector<double> phi_;
};

// ---------------------------------------------------------------------------
// Ingestion

namespace detail {

inline std::vector<double> parse_numbers(const std::string& line, std::size_t line_no) {
  std::vector<double> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
      throw MalformedInputError("line " + std::to_string(line_no) + ": cannot parse '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

/// Text grid: header `nx ny x_min x_max y_min y_max M R`, then ny rows of nx
/// values, first row at y_min.
inline LiftedField load_field(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  if (!next_line()) throw MalformedInputError("line 1: missing header");
  auto header = detail::parse_numbers(line, line_no);
  if (header.size() != 8)
    throw MalformedInputError("line " + std::to_string(line_no) + ": header needs 8 values");
  const int nx = static_cast<int>(header[0]);
  const int ny = static_cast<int>(header[1]);
  if (nx <= 0 || ny <= 0 || nx != header[0] || ny != header[1])
    throw MalformedInputError("line " + std::to_string(line_no) + ": nx, ny must be positive integers");
  const double M = header[6];
  std::vector<double> phi;
  phi.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j) {
    if (!next_line())
      throw MalformedInputError("line " + std::to_string(line_no + 1) + ": missing row " + std::to_string(j));
    auto row = detail::parse_numbers(line, line_no);
    if (static_cast<int>(row.size()) != nx)
      throw MalformedInputError("line " + std::to_string(line_no) + ": expected " + std::to_string(nx) +
                                " values, got " + std::to_string(row.size()));
    for (int i = 0; i < nx; ++i) {
      if (!(row[i] >= 0.0 && row[i] <= M))
        throw RangeError("line " + std::to_string(line_no) + ": phi(" + std::to_string(i) + "," +
                         std::to_string(j) + ") = " + std::to_string(row[i]) + " outside [0, M]");
      phi.push_back(row[i]);
    }
  }
  if (next_line()) throw MalformedInputError("line " + std::to_string(line_no) + ": trailing data");
  return LiftedField(nx, ny, header[2], header[3], header[4], header[5], M, header[7], std::move(phi));
}

inline LiftedField load_field(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedInputError("cannot open field file '" + path + "'");
  return load_field(in);
}

inline void write_field(std::ostream& out, const LiftedField& f) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << f.nx() << ' ' << f.ny() << ' ' << num(f.x_min()) << ' ' << num(f.x_max()) << ' ' << num(f.y_min())
      << ' ' << num(f.y_max()) << ' ' << num(f.M()) << ' ' << num(f.R()) << '\n';
  for (int j = 0; j < f.ny(); ++j) {
    for (int i = 0; i < f.nx(); ++i) out << (i ? " " : "") << num(f.phi(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Builtin families

enum class Builtin { constant, single_jump, two_jump, vortex, rarefaction };

struct GridSpec {
  int nx = 64;
  int ny = 64;
  double half_width = 1.5;  // domain is the square [-w, w]^2
  double R = 1.0;
  double M = kTwoPi;
};

/// Family parameters, looked up by name with per-family defaults.
///   constant:    phi (pi)
///   single_jump: phi_minus (pi/6), phi_plus (5pi/6), offset (0); jump line x2 = offset
///   two_jump:    phi_out (pi/6), phi_in (5pi/6), half_width (0.3); strip |x2| < half_width
///   vortex:      cx, cy (0, 0); phi = arg(x - c) + pi/2, cut on the ray x2 = cy, x1 > cx
///   rarefaction: cx, cy (0, -3); same formula with the center outside the domain
using BuiltinParams = std::map<std::string, double>;

inline Builtin builtin_from_name(std::string_view name) {
  if (name == "constant") return Builtin::constant;
  if (name == "single_jump") return Builtin::single_jump;
  if (name == "two_jump") return Builtin::two_jump;
  if (name == "vortex") return Builtin::vortex;
  if (name == "rarefaction") return Builtin::rarefaction;
  throw MalformedInputError("unknown builtin field '" + std::string(name) + "'");
}

inline LiftedField make_from_function(const GridSpec& g, const std::function<double(Vec2)>& fn) {
  const double w = g.half_width;
  const double dx = 2 * w / g.nx, dy = 2 * w / g.ny;
  std::vector<double> phi(static_cast<std::size_t>(g.nx) * g.ny);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i)
      phi[static_cast<std::size_t>(j) * g.nx + i] = fn({-w + (i + 0.5) * dx, -w + (j + 0.5) * dy});
  return LiftedField(g.nx, g.ny, -w, w, -w, w, g.M, g.R, std::move(phi));
}

inline LiftedField make_builtin(Builtin family, GridSpec g, const BuiltinParams& p = {}) {
  auto get = [&](const char* key, double def) {
    auto it = p.find(key);
    return it == p.end() ? def : it->second;
  };
  auto check_traces = [](double lo, double hi) {
    // Normal is e2, so the normal traces are sin(phi).
    if (std::abs(std::sin(lo) - std::sin(hi)) > 1e-12)
      throw InconsistentJumpError("normal traces differ across the jump: sin(" + std::to_string(lo) +
                                  ") != sin(" + std::to_string(hi) + ")");
  };
  switch (family) {
    case Builtin::constant: {
      const double v = get("phi", kPi);
      return make_from_function(g, [v](Vec2) { return v; });
    }
    case Builtin::single_jump: {
      const double lo = get("phi_minus", kPi / 6), hi = get("phi_plus", 5 * kPi / 6), c = get("offset", 0.0);
      check_traces(lo, hi);
      return make_from_function(g, [=](Vec2 x) { return x.y < c ? lo : hi; });
    }
    case Builtin::two_jump: {
      const double out = get("phi_out", kPi / 6), in = get("phi_in", 5 * kPi / 6), hw = get("half_width", 0.3);
      check_traces(out, in);
      return make_from_function(g, [=](Vec2 x) { return std::abs(x.y) < hw ? in : out; });
    }
    case Builtin::vortex:
    case Builtin::rarefaction: {
      const bool vortex = family == Builtin::vortex;
      const double cx = get("cx", 0.0), cy = get("cy", vortex ? 0.0 : -3.0);
      if (vortex && p.find("M") == p.end()) g.M = 2.5 * kPi;
      return make_from_function(g, [=](Vec2 x) {
        double th = std::atan2(x.y - cy, x.x - cx);
        if (th < 0) th += kTwoPi;
        return th + 0.5 * kPi;
      });
    }
  }
  throw MalformedInputError("unhandled builtin family");
}

/// Parses `builtin:name[:k=v,k=v,...]` (grid keys nx, ny, half_width, R, M
/// are recognised alongside family parameters) or a grid-file path.
inline LiftedField field_from_spec(const std::string& spec) {
  constexpr std::string_view prefix = "builtin:";
  if (spec.rfind(prefix, 0) != 0) return load_field(spec);
  std::string rest = spec.substr(prefix.size());
  std::string name = rest, params;
  if (auto pos = rest.find(':'); pos != std::string::npos) {
    name = rest.substr(0, pos);
    params = rest.substr(pos + 1);
  }
  GridSpec g;
  BuiltinParams bp;
  std::stringstream ss(params);
  std::string kv;
  while (std::getline(ss, kv, ',')) {
    if (kv.empty()) continue;
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw MalformedInputError("field parameter '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq);
    double v = 0.0;
    const std::string val = kv.substr(eq + 1);
    auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
    if (ec != std::errc() || ptr != val.data() + val.size())
      throw MalformedInputError("field parameter '" + key + "' has non-numeric value '" + val + "'");
    if (key == "nx") g.nx = static_cast<int>(v);
    else if (key == "ny") g.ny = static_cast<int>(v);
    else if (key == "half_width") g.half_width = v;
    else if (key == "R") g.R = v;
    else if (key == "M") { g.M = v; bp[key] = v; }
    else bp[key] = v;
  }
  return make_builtin(builtin_from_name(name), g, bp);
}

// ---------------------------------------------------------------------------
// Diagnostics

struct DivergenceReport {
  double l1_residual = 0.0;
  GridIndex worst_cell;
  double tolerance = 0.0;
  [[nodiscard]] bool passed() const { return l1_residual <= tolerance; }
};

namespace detail {

/// C^1 bump (1 - t^2)^2 on [-1, 1] and its derivative.
inline double bump(double t) {
  if (std::abs(t) >= 1.0) return 0.0;
  const double s = 1.0 - t * t;
  return s * s;
}
inline double bump_d(double t) {
  if (std::abs(t) >= 1.0) return 0.0;
  return -4.0 * t * (1.0 - t * t);
}

/// Antiderivative of the bump, constant outside [-1, 1].
inline double bump_prim(double t) {
  t = std::clamp(t, -1.0, 1.0);
  const double t2 = t * t;
  return t * (1.0 - 2.0 * t2 / 3.0 + t2 * t2 / 5.0);
}

}  // namespace detail

/// Weak divergence test: max over tensor-product bumps (3 scales, lattice of
/// centers at half-scale spacing) of |sum u . grad psi| / ||grad psi||_{L1}, by cell midpoints.
inline DivergenceReport check_divergence_free(const LiftedField& f, double tol) {
  DivergenceReport rep;
  rep.tolerance = tol;
  const double dx = f.dx(), dy = f.dy();
  std::vector<double> ux(f.values().size()), uy(f.values().size());
  for (std::size_t k = 0; k < ux.size(); ++k) {
    ux[k] = std::cos(f.values()[k]);
    uy[k] = std::sin(f.values()[k]);
  }
  // Scales are fixed fractions of the domain so the family does not shrink
  // with the grid; a point singularity then resolves under refinement.
  const double width = std::min(f.x_max() - f.x_min(), f.y_max() - f.y_min());
  for (double frac : {1.0 / 32, 1.0 / 16, 1.0 / 8}) {
    const int hx = std::max(2, static_cast<int>(std::lround(frac * width / dx)));
    const int hy = std::max(2, static_cast<int>(std::lround(frac * width / dy)));
    if (2 * hx + 1 > f.nx() || 2 * hy + 1 > f.ny()) continue;
    const double sx = hx * dx, sy = hy * dy;
    const int stride_x = std::max(1, hx / 2), stride_y = std::max(1, hy / 2);
    for (int cj = hy; cj + hy < f.ny(); cj += stride_y)
      for (int ci = hx; ci + hx < f.nx(); ci += stride_x) {
        const Vec2 c = f.cell_center(ci, cj);
        double num = 0.0, den = 0.0;
        for (int j = cj - hy + 1; j < cj + hy; ++j)
          for (int i = ci - hx + 1; i < ci + hx; ++i) {
            const Vec2 p = f.cell_center(i, j);
            const double tx = (p.x - c.x) / sx, ty = (p.y - c.y) / sy;
            const double gx = detail::bump_d(tx) / sx * detail::bump(ty);
            const double gy = detail::bump(tx) * detail::bump_d(ty) / sy;
            const std::size_t k = static_cast<std::size_t>(j) * f.nx() + i;
            num += ux[k] * gx + uy[k] * gy;
            den += std::abs(gx) + std::abs(gy);
          }
        if (den <= 0.0) continue;
        const double r = std::abs(num) / den;
        if (r > rep.l1_residual) {
          rep.l1_residual = r;
          rep.worst_cell = {ci, cj};
        }
      }
  }
  return rep;
}

struct BoundaryScanEntry {
  double angle = 0.0;
  double oscillation = 0.0;             // at the smallest radius
  std::vector<double> by_radius;        // radii 8h, 4h, 2h
};

/// Mean oscillation of phi over inner half-balls at sampled points of the
/// circle of radius R around the domain center.
inline std::vector<BoundaryScanEntry> boundary_lebesgue_scan(const LiftedField& f, double R, int samples) {
  if (samples < 16) throw RangeError("boundary scan needs at least 16 samples");
  const double h = f.cell_size();
  const Vec2 c = f.center();
  std::vector<BoundaryScanEntry> out;
  out.reserve(samples);
  for (int k = 0; k < samples; ++k) {
    BoundaryScanEntry e;
    e.angle = kTwoPi * k / samples;
    const Vec2 n = unit(e.angle);
    const Vec2 x = c + n * R;
    for (double mult : {8.0, 4.0, 2.0}) {
      const double r = mult * h;
      std::vector<double> vals;
      const auto lo = f.cell_of(x - Vec2{r, r}), hi = f.cell_of(x + Vec2{r, r});
      for (int j = lo.j; j <= hi.j; ++j)
        for (int i = lo.i; i <= hi.i; ++i) {
          const Vec2 p = f.cell_center(i, j);
          if (norm(p - x) <= r && dot(p - x, n) <= 0.0) vals.push_back(f.phi(i, j));
        }
      double osc = 0.0;
      if (!vals.empty()) {
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        for (double v : vals) osc += std::abs(v - mean);
        osc /= static_cast<double>(vals.size());
      }
      e.by_radius.push_back(osc);
    }
    e.oscillation = e.by_radius.back();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace eikonal

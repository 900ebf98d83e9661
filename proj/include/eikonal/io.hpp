// CSV and JSON artifacts. Every number is written with 17 significant
// digits, so reading a file back reproduces the doubles exactly.
#pragma once

#include <charconv>
#include <cstdio>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eikonal/core.hpp"
#include "eikonal/field.hpp"
#include "eikonal/lagrangian.hpp"
#include "eikonal/rectifiability.hpp"
#include "eikonal/transport.hpp"

namespace eikonal::io {

using json = nlohmann::ordered_json;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

// Writes one comma-separated row of numbers.
template <class... T>
void row(std::ostream& out, T... v) {
  bool first = true;
  ((out << (first ? "" : ",") << num(static_cast<double>(v)), first = false), ...);
  out << '\n';
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse(const std::string& s, std::size_t line) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw MalformedInputError("line " + std::to_string(line) + ": '" + s + "' is not a number");
  return v;
}

// Reads a CSV with the given header into rows of numbers.
inline std::vector<std::vector<double>> read_table(std::istream& in, const std::string& header) {
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw MalformedInputError("expected header '" + header + "', found '" + line + "'");
  const std::size_t cols = split(header).size();
  std::vector<std::vector<double>> rows;
  for (std::size_t no = 2; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != cols)
      throw MalformedInputError("line " + std::to_string(no) + ": expected " + std::to_string(cols) + " columns");
    std::vector<double> r;
    r.reserve(cols);
    for (const auto& c : cells) r.push_back(parse(c, no));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<double> doubles(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array()) throw MalformedInputError(std::string("missing array '") + key + "'");
  return j[key].get<std::vector<double>>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Measures and fields

/// Columns x,y,weight for spatial measures and x,y,a,weight otherwise.
inline void write_measure(std::ostream& out, const DiscreteMeasure& mu) {
  out << (mu.dim == 2 ? "x,y,weight\n" : "x,y,a,weight\n");
  for (const auto& at : mu.atoms) {
    if (mu.dim == 2) detail::row(out, at.pos[0], at.pos[1], at.weight);
    else detail::row(out, at.pos[0], at.pos[1], at.pos[2], at.weight);
  }
}

inline DiscreteMeasure read_measure(std::istream& in, int dim) {
  DiscreteMeasure mu;
  mu.dim = dim;
  for (const auto& r : detail::read_table(in, dim == 2 ? "x,y,weight" : "x,y,a,weight"))
    mu.atoms.push_back(dim == 2 ? Atom{{r[0], r[1], 0.0}, r[2]} : Atom{{r[0], r[1], r[2]}, r[3]});
  return mu;
}

/// Cell centers and angles, for plotting.
inline void write_field_samples(std::ostream& out, const LiftedField& f) {
  out << "x,y,phi\n";
  for (int j = 0; j < f.ny(); ++j)
    for (int i = 0; i < f.nx(); ++i) {
      const Vec2 c = f.cell_center(i, j);
      detail::row(out, c.x, c.y, f.phi(i, j));
    }
}

// ---------------------------------------------------------------------------
// Transport steps

/// The building-block plan, from rho2 atoms to rho1 atoms.
inline void write_plan(std::ostream& out, const TransportStep& st) {
  out << "src_x,src_y,src_a,dst_x,dst_y,dst_a,mass\n";
  for (const auto& p : st.plan.pairs) {
    const auto& s = st.rho2.atoms.at(p.src).pos;
    const auto& d = st.rho1.atoms.at(p.dst).pos;
    detail::row(out, s[0], s[1], s[2], d[0], d[1], d[2], p.mass);
  }
}

inline json step_json(const TransportStep& st) {
  return {{"n", st.n}, {"t_bar", st.t_bar}, {"epsilon", st.epsilon}, {"L", st.L}, {"cost", st.plan.cost},
          {"bound", st.bound}};
}

// ---------------------------------------------------------------------------
// Curve ensembles
//
// Curves are the materialized leaves, each carrying its full history. A
// relocation is two node rows at the same time, the state before and the
// state after; start and end nodes are single rows. A start or end node that
// repeats the state of a relocation at the same time is left out, so every
// run of equal times is either one plain row or whole relocation pairs.

inline void write_curves(std::ostream& out, const std::vector<Curve>& curves) {
  out << "id,side,weight,t_minus,t_plus\n";
  for (const auto& c : curves)
    out << c.id << ',' << side_name(c.side) << ',' << num(c.weight) << ',' << num(c.t_minus) << ','
        << num(c.t_plus) << '\n';
}

inline void write_nodes(std::ostream& out, const std::vector<Curve>& curves) {
  out << "id,t,x,y,a\n";
  auto moved = [](const CurveNode& nd) { return nd.x_pre != nd.x_post || nd.a_pre != nd.a_post; };
  for (const auto& c : curves)
    for (std::size_t k = 0; k < c.nodes.size(); ++k) {
      const auto& nd = c.nodes[k];
      if (moved(nd)) {
        detail::row(out, c.id, nd.t, nd.x_pre.x, nd.x_pre.y, nd.a_pre);
      } else {
        const bool dup_prev = k > 0 && c.nodes[k - 1].t == nd.t && c.nodes[k - 1].x_post == nd.x_post &&
                              c.nodes[k - 1].a_post == nd.a_post;
        const bool dup_next = k + 1 < c.nodes.size() && c.nodes[k + 1].t == nd.t &&
                              c.nodes[k + 1].x_pre == nd.x_post && c.nodes[k + 1].a_pre == nd.a_post;
        if (dup_prev || dup_next) continue;
      }
      detail::row(out, c.id, nd.t, nd.x_post.x, nd.x_post.y, nd.a_post);
    }
}

/// Everything about an ensemble that the curve and node tables do not hold.
inline json ensemble_json(const CurveEnsemble& e) {
  return {{"n", e.n},
          {"side", side_name(e.side)},
          {"t_bar", e.t_bar},
          {"epsilon", e.epsilon},
          {"L", e.L},
          {"levels", e.levels},
          {"slot", e.slot},
          {"da", e.da},
          {"initial_mass", e.initial_mass},
          {"unmatched_mass", e.unmatched_mass},
          {"relocations", e.relocations},
          {"forks", e.forks},
          {"alive_mass", e.alive_mass},
          {"injected_mass", e.injected_mass},
          {"exited_mass", e.exited_mass}};
}

/// Rebuilds an ensemble from its three artifacts. Each curve becomes one
/// root segment, so shared histories appear once per leaf.
inline CurveEnsemble read_ensemble(std::istream& curves, std::istream& nodes, const json& meta,
                                   std::shared_ptr<const LiftedField> field) {
  CurveEnsemble e;
  try {
    e.n = meta.at("n").get<int>();
    const auto side = meta.at("side").get<std::string>();
    if (side != "hypograph" && side != "epigraph") throw MalformedInputError("unknown side '" + side + "'");
    e.side = side == "hypograph" ? Side::hypograph : Side::epigraph;
    e.t_bar = meta.at("t_bar").get<double>();
    e.epsilon = meta.at("epsilon").get<double>();
    e.L = meta.at("L").get<double>();
    e.levels = meta.at("levels").get<int>();
    e.slot = meta.at("slot").get<double>();
    e.da = meta.at("da").get<double>();
    e.initial_mass = meta.at("initial_mass").get<double>();
    e.unmatched_mass = meta.at("unmatched_mass").get<double>();
    e.relocations = meta.at("relocations").get<long>();
    e.forks = meta.at("forks").get<long>();
  } catch (const json::exception& ex) {
    throw MalformedInputError(std::string("ensemble metadata: ") + ex.what());
  }
  e.alive_mass = detail::doubles(meta, "alive_mass");
  e.injected_mass = detail::doubles(meta, "injected_mass");
  e.exited_mass = detail::doubles(meta, "exited_mass");
  e.field = std::move(field);

  // The side column is text, so the curve table is parsed by hand.
  std::string line;
  if (!std::getline(curves, line) || line != "id,side,weight,t_minus,t_plus")
    throw MalformedInputError("curve table has an unexpected header");
  for (std::size_t no = 2; std::getline(curves, line); ++no) {
    if (line.empty()) continue;
    const auto c = detail::split(line);
    if (c.size() != 5) throw MalformedInputError("curve table line " + std::to_string(no) + ": expected 5 columns");
    if (c[1] != side_name(e.side)) throw MalformedInputError("curve table line " + std::to_string(no) + ": wrong side");
    if (detail::parse(c[0], no) != static_cast<double>(e.segments.size()))
      throw MalformedInputError("curve table line " + std::to_string(no) + ": ids must run 0, 1, 2, ...");
    CurveSegment s;
    s.weight = detail::parse(c[2], no);
    s.t_start = detail::parse(c[3], no);
    s.t_end = detail::parse(c[4], no);
    e.segments.push_back(s);
  }

  const auto rows = detail::read_table(nodes, "id,t,x,y,a");
  std::size_t k = 0;
  for (int id = 0; id < static_cast<int>(e.segments.size()); ++id) {
    auto& seg = e.segments[id];
    seg.node_begin = static_cast<int>(e.nodes.size());
    while (k < rows.size() && static_cast<int>(rows[k][0]) == id) {
      // Rows sharing a time: one plain node, or relocations in pairs.
      std::size_t m = k;
      while (m < rows.size() && static_cast<int>(rows[m][0]) == id && rows[m][1] == rows[k][1]) ++m;
      auto state = [&](std::size_t r) { return std::make_pair(Vec2{rows[r][2], rows[r][3]}, rows[r][4]); };
      if (m - k == 1) {
        const auto [x, a] = state(k);
        e.nodes.push_back({rows[k][1], x, a, x, a});
      } else if ((m - k) % 2 == 1) {
        throw MalformedInputError("curve " + std::to_string(id) + ": odd number of node rows at t = " + num(rows[k][1]));
      }
      for (std::size_t q = k; m - k > 1 && q < m; q += 2) {
        const auto [x0, a0] = state(q);
        const auto [x1, a1] = state(q + 1);
        e.nodes.push_back({rows[k][1], x0, a0, x1, a1});
      }
      k = m;
    }
    seg.node_end = static_cast<int>(e.nodes.size());
    if (seg.node_end == seg.node_begin) throw MalformedInputError("curve " + std::to_string(id) + " has no nodes");
  }
  if (k != rows.size()) throw MalformedInputError("node table refers to unknown or unordered curve ids");
  return e;
}

// ---------------------------------------------------------------------------
// Rectifiability artifacts

inline void write_sigma(std::ostream& out, const std::vector<SigmaPoint>& pts) {
  out << "x,y,max_ratio\n";
  for (const auto& p : pts) detail::row(out, p.x.x, p.x.y, p.max_ratio);
}

/// One row per sample, with s along e_l and f along the ordinate up_l.
inline void write_shocks(std::ostream& out, const std::vector<ShockCurve>& family) {
  out << "anchor_x,anchor_y,l,s,f\n";
  for (const auto& sc : family)
    for (const auto& [s, f] : sc.samples) detail::row(out, sc.anchor.x, sc.anchor.y, sc.l, s, f);
}

inline json part_json(const PartReport& p) {
  return {{"sector_masses", p.sector_masses},
          {"jump_mass", p.jump_mass},
          {"shock_concentration", p.shock_concentration},
          {"jump_on_sigma_fraction", p.jump_on_sigma_fraction},
          {"unpaired_residual", p.unpaired_residual},
          {"paired_fraction", p.paired_fraction}};
}

/// Report keys describe the negative part; the positive part and the audit
/// are nested.
inline json report_json(const RectifiabilityReport& r) {
  json j{{"n", r.n}};
  j["sector_masses"] = r.negative.sector_masses;
  j["jump_mass"] = r.negative.jump_mass;
  j["shock_concentration"] = r.negative.shock_concentration;
  j["jump_on_sigma_fraction"] = r.negative.jump_on_sigma_fraction;
  j["nu_on_sigma_fraction"] = r.nu_on_sigma_fraction;
  j["unpaired_residual"] = r.negative.unpaired_residual;
  j["paired_fraction"] = r.negative.paired_fraction;
  j["nu_mass"] = r.nu_mass;
  j["sigma_points"] = r.sigma.size();
  j["shock_curves"] = r.shocks.size();
  j["positive"] = part_json(r.positive);
  j["audit"] = {{"hyp_violation", r.audit.hyp_violation},
                {"hyp_audited", r.audit.hyp_audited},
                {"epi_violation", r.audit.epi_violation},
                {"epi_audited", r.audit.epi_audited},
                {"fraction", r.audit.fraction()}};
  return j;
}

/// Pretty-printed JSON with a trailing newline.
inline void write_json(std::ostream& out, const json& j) { out << j.dump(2) << '\n'; }

}  // namespace eikonal::io

// Primal network simplex for uncapacitated transportation problems.
//
// Sources carry positive supply, sinks positive demand. An artificial root
// is joined to every node by big-cost arcs, which give a strongly feasible
// starting tree and absorb infeasibility while the caller's arc set is still
// sparse. Arcs may be added between solves; the current tree is kept.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "eikonal/core.hpp"

namespace eikonal {

class NetworkSimplex {
 public:
  NetworkSimplex(const std::vector<double>& supply, const std::vector<double>& demand, double big_cost)
      : ns_(static_cast<int>(supply.size())), nt_(static_cast<int>(demand.size())), big_(big_cost) {
    const int N = ns_ + nt_ + 1;
    root_ = N - 1;
    parent_.assign(N, -1);
    parent_arc_.assign(N, -1);
    depth_.assign(N, 0);
    pot_.assign(N, 0.0);
    adj_.assign(N, {});
    for (int i = 0; i < ns_; ++i) push_arc(i, root_, big_, supply[i], true);
    for (int j = 0; j < nt_; ++j) push_arc(root_, ns_ + j, big_, demand[j], true);
    for (int a = 0; a < static_cast<int>(from_.size()); ++a) {
      const int x = from_[a] == root_ ? to_[a] : from_[a];
      adj_[x].push_back(a);
      adj_[root_].push_back(a);
      parent_[x] = root_;
      parent_arc_[x] = a;
      depth_[x] = 1;
      pot_[x] = from_[a] == root_ ? big_ : -big_;
    }
    artificial_ = static_cast<int>(from_.size());
  }

  /// Adds a real arc from source i to sink j. Returns its id.
  int add_arc(int i, int j, double cost) {
    push_arc(i, ns_ + j, cost, 0.0, false);
    return static_cast<int>(from_.size()) - 1;
  }

  [[nodiscard]] int arc_count() const { return static_cast<int>(from_.size()) - artificial_; }
  [[nodiscard]] int arc_source(int id) const { return from_[artificial_ + id]; }
  [[nodiscard]] int arc_sink(int id) const { return to_[artificial_ + id] - ns_; }
  [[nodiscard]] double arc_flow(int id) const { return flow_[artificial_ + id]; }
  [[nodiscard]] double arc_cost(int id) const { return cost_[artificial_ + id]; }

  /// Node potentials with reduced cost c + pot(source) - pot(sink) >= 0 at optimum.
  [[nodiscard]] double source_potential(int i) const { return pot_[i]; }
  [[nodiscard]] double sink_potential(int j) const { return pot_[ns_ + j]; }
  [[nodiscard]] double reduced_cost(int i, int j, double cost) const { return cost + pot_[i] - pot_[ns_ + j]; }

  /// Flow still routed through the root (nonzero means the arc set is infeasible).
  [[nodiscard]] double artificial_flow() const {
    double s = 0.0;
    for (int a = 0; a < artificial_; ++a) s += flow_[a];
    return s;
  }

  [[nodiscard]] long pivots() const { return pivots_; }

  void solve() {
    const double eps = 1e-13 * std::max(1.0, big_);
    const long guard = 50L * static_cast<long>(from_.size()) * static_cast<long>(parent_.size()) + 1000;
    while (true) {
      const int e = select_entering(eps);
      if (e < 0) return;
      pivot(e);
      if (++pivots_ > guard) throw InvariantViolation("network simplex exceeded its pivot budget");
    }
  }

 private:
  void push_arc(int u, int v, double c, double f, bool tree) {
    from_.push_back(u);
    to_.push_back(v);
    cost_.push_back(c);
    flow_.push_back(f);
    in_tree_.push_back(tree ? 1 : 0);
  }

  [[nodiscard]] double rc(int a) const { return cost_[a] + pot_[from_[a]] - pot_[to_[a]]; }

  int select_entering(double eps) {
    const int A = static_cast<int>(from_.size());
    const int block = std::max(16, static_cast<int>(std::sqrt(static_cast<double>(A))));
    int best = -1;
    double best_rc = -eps;
    int scanned = 0, in_block = 0;
    while (scanned < A) {
      const int a = next_arc_;
      next_arc_ = (next_arc_ + 1) % A;
      ++scanned;
      if (!in_tree_[a]) {
        const double r = rc(a);
        if (r < best_rc) {
          best_rc = r;
          best = a;
        }
      }
      if (++in_block == block) {
        if (best >= 0) return best;
        in_block = 0;
      }
    }
    return best;
  }

  void pivot(int e) {
    const int u = from_[e], v = to_[e];
    // Apex of the cycle.
    int a = u, b = v;
    while (a != b) {
      if (depth_[a] >= depth_[b]) a = parent_[a];
      else b = parent_[b];
    }
    const int w = a;

    // Leaving arc: last blocking arc along the cycle oriented u -> v, starting at w.
    double delta = std::numeric_limits<double>::infinity();
    int leave = -1;
    bool leave_on_u_side = false;
    for (int x = u; x != w; x = parent_[x]) {
      const int pa = parent_arc_[x];
      if (from_[pa] == x && flow_[pa] < delta) {  // traversed downward against the arc
        delta = flow_[pa];
        leave = pa;
        leave_on_u_side = true;
      }
    }
    for (int x = v; x != w; x = parent_[x]) {
      const int pa = parent_arc_[x];
      if (from_[pa] != x && flow_[pa] <= delta) {  // traversed upward against the arc
        delta = flow_[pa];
        leave = pa;
        leave_on_u_side = false;
      }
    }
    if (leave < 0) throw InvariantViolation("network simplex found an unbounded cycle");

    if (delta > 0.0) {
      flow_[e] += delta;
      for (int x = u; x != w; x = parent_[x]) {
        const int pa = parent_arc_[x];
        flow_[pa] += from_[pa] == x ? -delta : delta;
      }
      for (int x = v; x != w; x = parent_[x]) {
        const int pa = parent_arc_[x];
        flow_[pa] += from_[pa] == x ? delta : -delta;
      }
    }
    flow_[leave] = 0.0;
    if (leave == e) return;

    // Detach the subtree below the leaving arc and rehang it on the entering arc.
    in_tree_[leave] = 0;
    remove_adj(from_[leave], leave);
    remove_adj(to_[leave], leave);
    in_tree_[e] = 1;
    const int q = leave_on_u_side ? u : v;
    const int outside = leave_on_u_side ? v : u;
    parent_[q] = outside;
    parent_arc_[q] = e;
    depth_[q] = depth_[outside] + 1;
    pot_[q] = from_[e] == outside ? pot_[outside] + cost_[e] : pot_[outside] - cost_[e];
    stack_.clear();
    stack_.push_back(q);
    while (!stack_.empty()) {
      const int x = stack_.back();
      stack_.pop_back();
      for (int arc : adj_[x]) {
        const int y = from_[arc] == x ? to_[arc] : from_[arc];
        if (y == parent_[x] && arc == parent_arc_[x]) continue;
        parent_[y] = x;
        parent_arc_[y] = arc;
        depth_[y] = depth_[x] + 1;
        pot_[y] = from_[arc] == x ? pot_[x] + cost_[arc] : pot_[x] - cost_[arc];
        stack_.push_back(y);
      }
    }
    adj_[u].push_back(e);
    adj_[v].push_back(e);
  }

  void remove_adj(int x, int arc) {
    auto& l = adj_[x];
    l.erase(std::find(l.begin(), l.end(), arc));
  }

  int ns_, nt_, root_ = 0, artificial_ = 0;
  double big_;
  std::vector<int> from_, to_;
  std::vector<double> cost_, flow_;
  std::vector<char> in_tree_;
  std::vector<int> parent_, parent_arc_, depth_;
  std::vector<double> pot_;
  std::vector<std::vector<int>> adj_;
  std::vector<int> stack_;
  int next_arc_ = 0;
  long pivots_ = 0;
};

}  // namespace eikonal

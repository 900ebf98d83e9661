// Pipeline driver: kinetic -> represent -> verify -> rectify -> report.
// Stages hand over through files in the output directory.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "eikonal/io.hpp"

namespace fs = std::filesystem;
using namespace eikonal;
using io::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string field;
  int grid = 0;  // 0 keeps the field's own resolution
  int n_min = 4, n_max = 7;
  int K = 64;
  int tests = 20;
  std::string out = "eikonal_out";
  int threads = 1;
  std::uint64_t seed = 7;
  double sigma_threshold = 0.1 * (std::sqrt(3.0) - kPi / 3);
  double area_floor = 0.05;
  double dissipation_floor = 0.01;
  double tol_cells = 2.0;
  double audit_tol_cells = 1.0;
  double anchor_spacing = 4.0;
  double C = 2.5;
};

// ---------------------------------------------------------------------------
// Configuration

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw UsageError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

std::pair<int, int> parse_range(const std::string& key, const std::string& v) {
  const auto colon = v.find(':');
  if (colon == std::string::npos) {
    const int n = parse_value<int>(key, v);
    return {n, n};
  }
  return {parse_value<int>(key, v.substr(0, colon)), parse_value<int>(key, v.substr(colon + 1))};
}

void set_key(RunConfig& c, const std::string& key, const std::string& v) {
  if (key == "field") c.field = v;
  else if (key == "grid") c.grid = parse_value<int>(key, v);
  else if (key == "n") std::tie(c.n_min, c.n_max) = parse_range(key, v);
  else if (key == "K") c.K = parse_value<int>(key, v);
  else if (key == "tests") c.tests = parse_value<int>(key, v);
  else if (key == "out") c.out = v;
  else if (key == "threads") c.threads = parse_value<int>(key, v);
  else if (key == "seed") c.seed = parse_value<std::uint64_t>(key, v);
  else if (key == "sigma_threshold") c.sigma_threshold = parse_value<double>(key, v);
  else if (key == "area_floor") c.area_floor = parse_value<double>(key, v);
  else if (key == "dissipation_floor") c.dissipation_floor = parse_value<double>(key, v);
  else if (key == "tol_cells") c.tol_cells = parse_value<double>(key, v);
  else if (key == "audit_tol_cells") c.audit_tol_cells = parse_value<double>(key, v);
  else if (key == "anchor_spacing") c.anchor_spacing = parse_value<double>(key, v);
  else if (key == "C") c.C = parse_value<double>(key, v);
  else throw UsageError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

void load_config(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(no) + " is not 'key = value'");
    set_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw UsageError("config key '" + key + "' " + what);
  };
  need(!c.field.empty(), "field", "is required (builtin name, builtin:name[:k=v,...] or a field file)");
  need(c.grid == 0 || c.grid >= 8, "grid", "must be at least 8");
  need(c.n_min >= 1 && c.n_min <= c.n_max && c.n_max <= 12, "n", "must be min:max with 1 <= min <= max <= 12");
  need(c.K >= 1, "K", "must be positive");
  need(c.tests >= 1, "tests", "must be positive");
  need(!c.out.empty(), "out", "must name a directory");
  need(c.threads >= 1, "threads", "must be positive");
  need(c.sigma_threshold > 0, "sigma_threshold", "must be positive");
  need(c.area_floor >= 0 && c.dissipation_floor >= 0, "area_floor", "and dissipation_floor must be non-negative");
  need(c.tol_cells >= 0 && c.audit_tol_cells >= 0, "tol_cells", "and audit_tol_cells must be non-negative");
  need(c.anchor_spacing > 0, "anchor_spacing", "must be positive");
  need(c.C > std::tan(3 * kPi / 8), "C", "must exceed tan(3pi/8) = 2.4142");
}

/// Builtin names may omit the prefix; `grid` overrides a builtin's resolution.
std::string field_spec(const RunConfig& c) {
  std::string s = c.field;
  bool builtin = s.rfind("builtin:", 0) == 0;
  if (!builtin) {
    const auto name = s.substr(0, s.find(':'));
    for (const char* b : {"constant", "single_jump", "two_jump", "vortex", "rarefaction"})
      if (name == b) builtin = true;
    if (builtin) s = "builtin:" + s;
  }
  if (builtin && c.grid > 0) {
    const auto n = std::to_string(c.grid);
    s += (s.find(':', 8) == std::string::npos ? ":" : ",") + ("nx=" + n + ",ny=" + n);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Artifacts

struct Paths {
  fs::path dir;

  [[nodiscard]] fs::path at(const std::string& name) const { return dir / name; }
  [[nodiscard]] fs::path level(const std::string& stem, int n, const char* ext) const {
    return dir / (stem + "_n" + std::to_string(n) + ext);
  }
  [[nodiscard]] fs::path side(const std::string& stem, Side s, int n, const char* ext) const {
    return dir / (stem + "_" + side_name(s) + "_n" + std::to_string(n) + ext);
  }
};

std::ofstream create(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw UsageError("out: cannot write '" + p.string() + "'");
  return out;
}

std::ifstream require(const fs::path& p, const char* producer) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DependencyError("missing '" + p.string() + "'; run `" + producer + "` first");
  return in;
}

json read_json(const fs::path& p, const char* producer) {
  auto in = require(p, producer);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw MalformedInputError("'" + p.string() + "': " + e.what());
  }
}

void put_json(const fs::path& p, const json& j) {
  auto out = create(p);
  io::write_json(out, j);
}

struct Context {
  RunConfig cfg;
  std::string spec;
  Paths paths;
  std::shared_ptr<const LiftedField> field;

  // Stages after kinetic must see artifacts made for the same field.
  void check_field(const char* producer) const {
    const auto k = read_json(paths.at("kinetic.json"), "run kinetic");
    if (k.value("field", std::string()) != spec)
      throw DependencyError("artifacts in '" + paths.dir.string() + "' belong to field '" +
                            k.value("field", std::string()) + "'; run `" + producer + "` first");
  }
  void check_levels(const char* stage_file, const char* producer) const {
    for (int n = cfg.n_min; n <= cfg.n_max; ++n) require(paths.level(stage_file, n, ".json"), producer);
  }

  [[nodiscard]] CurveEnsemble ensemble(Side s, int n) const {
    auto c = require(paths.side("curves", s, n, ".csv"), "run represent");
    auto nd = require(paths.side("nodes", s, n, ".csv"), "run represent");
    return io::read_ensemble(c, nd, read_json(paths.side("ensemble", s, n, ".json"), "run represent"), field);
  }
  [[nodiscard]] DiscreteMeasure measure(const char* name, int dim) const {
    auto in = require(paths.at(name), "run kinetic");
    return io::read_measure(in, dim);
  }
};

// ---------------------------------------------------------------------------
// Stages

void stage_kinetic(const Context& cx) {
  const auto& f = *cx.field;
  EntropyOptions eo;
  eo.K = cx.cfg.K;
  const auto U = entropy_measure(f, eo);
  const auto nu = nu_projection(U);
  {
    auto out = create(cx.paths.at("field.csv"));
    io::write_field_samples(out, f);
  }
  {
    auto out = create(cx.paths.at("U.csv"));
    io::write_measure(out, U);
  }
  {
    auto out = create(cx.paths.at("nu.csv"));
    io::write_measure(out, nu);
  }
  double nu_ball = 0.0;
  for (const auto& at : nu.atoms)
    if (f.in_ball({at.pos[0], at.pos[1]})) nu_ball += at.weight;
  put_json(cx.paths.at("kinetic.json"), {{"field", cx.spec},
                                         {"nx", f.nx()},
                                         {"ny", f.ny()},
                                         {"K", cx.cfg.K},
                                         {"U_total_variation", U.total_variation()},
                                         {"U_atoms", U.size()},
                                         {"nu_ball_mass", nu_ball},
                                         {"kinetic_residual", kinetic_residual(f, U, cx.cfg.tests, cx.cfg.seed)}});
}

void stage_represent(const Context& cx) {
  cx.check_field("run kinetic");
  const auto& f = *cx.field;
  for (int n = cx.cfg.n_min; n <= cx.cfg.n_max; ++n) {
    BlockOptions bo;
    bo.K = cx.cfg.K;
    const auto st = building_block_map(f, n, bo);
    {
      auto out = create(cx.paths.level("plan", n, ".csv"));
      io::write_plan(out, st);
    }
    for (Side s : {Side::hypograph, Side::epigraph}) {
      const auto e = build_representation(f, n, s);
      for (int l = 0; l < static_cast<int>(e.alive_mass.size()); ++l)
        if (std::abs(accounting_gap(e, l)) > 1e-9 * std::max(1.0, e.initial_mass))
          throw InvariantViolation("mass accounting does not close at step " + std::to_string(l) + " of the " +
                                   side_name(s) + " ensemble, n = " + std::to_string(n));
      const auto curves = e.curves();
      {
        auto out = create(cx.paths.side("curves", s, n, ".csv"));
        io::write_curves(out, curves);
      }
      {
        auto out = create(cx.paths.side("nodes", s, n, ".csv"));
        io::write_nodes(out, curves);
      }
      put_json(cx.paths.side("ensemble", s, n, ".json"), io::ensemble_json(e));
    }
    // Written last, so its presence marks a complete level.
    put_json(cx.paths.level("step", n, ".json"), io::step_json(st));
  }
}

void stage_verify(const Context& cx) {
  cx.check_field("run kinetic");
  cx.check_levels("step", "run represent");
  const auto U = cx.measure("U.csv", 3);
  for (int n = cx.cfg.n_min; n <= cx.cfg.n_max; ++n) {
    const auto hyp = cx.ensemble(Side::hypograph, n), epi = cx.ensemble(Side::epigraph, n);
    const auto d = decomposition_residual(hyp, epi, U, cx.cfg.tests, cx.cfg.seed);
    const auto w = representation_error(hyp, 0.5);
    put_json(cx.paths.level("summary", n, ".json"),
             {{"n", n},
              {"e_h", horizontal_error(hyp)},
              {"e_v", vertical_cost(hyp)},
              {"alive_mass", hyp.alive_mass},
              {"res_signed", d.res_signed},
              {"res_abs", d.res_abs},
              {"res_epi", d.res_epi},
              {"hyp_negative_mass", d.hyp_negative_mass},
              {"epi_positive_mass", d.epi_positive_mass},
              {"u_negative_mass", d.u_negative_mass},
              {"w1_half", w.continuum_w1},
              {"epigraph",
               {{"e_h", horizontal_error(epi)}, {"e_v", vertical_cost(epi)}, {"alive_mass", epi.alive_mass}}}});
  }
}

void stage_rectify(const Context& cx) {
  cx.check_field("run kinetic");
  cx.check_levels("step", "run represent");
  const auto nu = cx.measure("nu.csv", 2);
  ReportOptions ro;
  ro.tol_cells = cx.cfg.tol_cells;
  ro.audit_tol_cells = cx.cfg.audit_tol_cells;
  ro.sigma_threshold = cx.cfg.sigma_threshold;
  ro.shock.C = cx.cfg.C;
  ro.shock.anchor_spacing_cells = cx.cfg.anchor_spacing;
  for (int n = cx.cfg.n_min; n <= cx.cfg.n_max; ++n) {
    const auto r = rectifiability_report(cx.ensemble(Side::hypograph, n), cx.ensemble(Side::epigraph, n), nu, ro);
    auto frac_ok = [](double v) { return v >= -1e-12 && v <= 1 + 1e-12; };
    bool ok = frac_ok(r.nu_on_sigma_fraction) && frac_ok(r.audit.fraction()) && r.negative.unpaired_residual >= -1e-9;
    for (double c : r.negative.shock_concentration) ok = ok && frac_ok(c);
    if (!ok) throw InvariantViolation("report fractions out of range at n = " + std::to_string(n));
    {
      auto out = create(cx.paths.level("sigma", n, ".csv"));
      io::write_sigma(out, r.sigma);
    }
    {
      auto out = create(cx.paths.level("shock", n, ".csv"));
      io::write_shocks(out, r.shocks);
    }
    // Dichotomy ratios at the first detected point, for plotting.
    json dich = json::object();
    if (!r.sigma.empty()) {
      const auto& f = *cx.field;
      const Vec2 x = r.sigma[r.sigma.size() / 2].x;
      const double a = f.phi_at(x), delta = std::min(0.5, 0.49 * kPi);
      const double h = f.cell_size();
      std::vector<double> radii{8 * h, 4 * h, 2 * h};
      while (!radii.empty() && norm(x - f.center()) + radii.front() >= f.R()) radii.erase(radii.begin());
      if (radii.size() >= 3) {
        const auto d = density_dichotomy(f, nu, x, a, delta, radii, {cx.cfg.area_floor, cx.cfg.dissipation_floor});
        dich = {{"x", x.x}, {"y", x.y}, {"a", a}, {"delta", delta}, {"radii", radii},
                {"ratio1", d.ratio1}, {"ratio2", d.ratio2}, {"verdict", verdict_name(d.verdict)}};
      }
    }
    auto j = io::report_json(r);
    j["dichotomy"] = dich;
    put_json(cx.paths.level("report", n, ".json"), j);
  }
}

void stage_report(const Context& cx) {
  cx.check_field("run kinetic");
  cx.check_levels("summary", "run verify");
  cx.check_levels("report", "run rectify");
  json levels = json::array();
  auto decay = create(cx.paths.at("decay.csv"));
  decay << "n,e_h,e_v,res_signed,res_abs,w1_half\n";
  for (int n = cx.cfg.n_min; n <= cx.cfg.n_max; ++n) {
    const auto s = read_json(cx.paths.level("summary", n, ".json"), "run verify");
    auto r = read_json(cx.paths.level("report", n, ".json"), "run rectify");
    decay << n << ',' << io::num(s.at("e_h").get<double>()) << ',' << io::num(s.at("e_v").get<double>()) << ','
          << io::num(s.at("res_signed").get<double>()) << ',' << io::num(s.at("res_abs").get<double>()) << ','
          << io::num(s.at("w1_half").get<double>()) << '\n';
    r.erase("dichotomy");
    levels.push_back(r);
  }
  const auto k = read_json(cx.paths.at("kinetic.json"), "run kinetic");
  put_json(cx.paths.at("report.json"),
           {{"field", cx.spec}, {"nu_ball_mass", k.at("nu_ball_mass")}, {"levels", levels}});
}

int run(const std::string& command, RunConfig cfg) {
  validate(cfg);
  Context cx{cfg, field_spec(cfg), Paths{cfg.out}, nullptr};
  std::error_code ec;
  fs::create_directories(cx.paths.dir, ec);
  if (ec || !fs::is_directory(cx.paths.dir)) throw UsageError("out: cannot create directory '" + cfg.out + "'");
  try {
    cx.field = std::make_shared<const LiftedField>(field_from_spec(cx.spec));
  } catch (const InconsistentJumpError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(std::string("field: ") + e.what());
  }
  const std::map<std::string, void (*)(const Context&)> stages{{"kinetic", stage_kinetic},
                                                                {"represent", stage_represent},
                                                                {"verify", stage_verify},
                                                                {"rectify", stage_rectify},
                                                                {"report", stage_report}};
  if (command == "all") {
    for (const char* s : {"kinetic", "represent", "verify", "rectify", "report"}) stages.at(s)(cx);
  } else {
    stages.at(command)(cx);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lagrangian representation and rectifiability diagnostics for eikonal fields"};
  app.require_subcommand(1);
  auto* run_cmd = app.add_subcommand("run", "Run one pipeline stage, or all of them");
  std::string command, config_path, field, n_range, out;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  run_cmd->add_option("command", command, "kinetic | represent | verify | rectify | report | all")
      ->required()
      ->check(CLI::IsMember({"kinetic", "represent", "verify", "rectify", "report", "all"}));
  run_cmd->add_option("--config", config_path, "key = value file, # starts a comment");
  run_cmd->add_option("--field", field, "builtin name, builtin:name[:k=v,...], or a field file");
  run_cmd->add_option("--n", n_range, "level range min:max");
  run_cmd->add_option("--out", out, "output directory");
  run_cmd->add_option("--threads", threads, "worker threads");
  run_cmd->add_option("--seed", seed, "seed for randomized test families");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config(cfg, config_path);
    if (!field.empty()) cfg.field = field;
    if (!n_range.empty()) set_key(cfg, "n", n_range);
    if (!out.empty()) cfg.out = out;
    if (threads) cfg.threads = *threads;
    if (seed) cfg.seed = *seed;
    return run(command, cfg);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return 3;
  } catch (const InvariantViolation& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 4;
  } catch (const BookkeepingError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 4;
  } catch (const InconsistentJumpError& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 4;
  } catch (const MalformedInputError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }
}

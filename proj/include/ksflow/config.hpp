#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ksflow/adapt.hpp"
#include "ksflow/flow.hpp"
#include "ksflow/ksmodel.hpp"

namespace ksflow {

/// Complete description of one adaptive run. Mirrors the flat key-value
/// config file format one to one.
struct RunConfig {
  std::string name = "custom";
  Molecule molecule;
  Vec3 lo = Vec3(-20, -20, -20);
  Vec3 hi = Vec3(20, 20, 20);
  int cells = 4;
  int prerefine = 0;
  double prerefine_radius = 0.0;
  int maxrefine = 6;
  double theta = 0.5;
  double epsilon = 1e-6;
  double dt_max = 0.1;
  int max_halvings = 40;
  long max_steps = 200000;
  bool hartree_enabled = true;
  HartreeBcMode hartree_bc = HartreeBcMode::Zero;
  int multipole_order = 0;
  bool xc_enabled = true;
  ExternalKind external = ExternalKind::Coulomb;
  IndicatorMode indicator_mode = IndicatorMode::Literal;
  int quad_degree = 2;
  int quad_degree_singular = 4;
  double cg_tol = 1e-10;
  double mass_tol = 1e-12;
  InitKind init = InitKind::Gaussian;
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string outdir = "out";
  bool export_density = false;
  bool export_indicator = false;
  bool offset_nuclei_from_nodes = false;

  void validate() const {
    if (maxrefine < 0) throw ConfigError("maxrefine must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(theta > 0.0 && theta < 1.0))
      throw ConfigError("theta must lie in (0,1)");
    if (!(cg_tol > 0.0 && mass_tol > 0.0 && dt_max > 0.0))
      throw ConfigError("tolerances and dt_max must be positive");
    if (cells < 1) throw ConfigError("cells must be >= 1");
  }

  ModelOptions model_options() const {
    ModelOptions opt;
    opt.hartree_enabled = hartree_enabled;
    opt.xc_enabled = xc_enabled;
    opt.hartree_bc = hartree_bc;
    opt.multipole_order = multipole_order;
    opt.external = external;
    opt.quad_degree = quad_degree;
    opt.quad_degree_singular = quad_degree_singular;
    opt.poisson_tol = cg_tol;
    opt.mass_tol = mass_tol;
    return opt;
  }

  FlowControls flow_controls() const {
    FlowControls ctl;
    ctl.epsilon = epsilon;
    ctl.dt_max = dt_max;
    ctl.max_halvings = max_halvings;
    ctl.max_steps = max_steps;
    return ctl;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<double> parse_csv_doubles(const std::string& s,
                                             const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(trim(item)));
    } catch (...) {
      throw ConfigError("config: cannot parse number in '" + key + "'");
    }
  }
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "off" || s == "0" || s == "no") return false;
  throw ConfigError("config: bad boolean for '" + key + "'");
}

}  // namespace detail

/// Parses the flat key = value format; '#' starts a comment, nuclei are
/// given as repeated `nucleus = x,y,z,Z` lines.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  cfg.molecule.nuclei.clear();
  std::stringstream ss(text);
  std::string line;
  bool orbitals_given = false;
  while (std::getline(ss, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value, got '" + line + "'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));

    auto num = [&](const char* k) {
      try {
        return std::stod(val);
      } catch (...) {
        throw ConfigError(std::string("config: bad number for '") + k + "'");
      }
    };

    if (key == "name") cfg.name = val;
    else if (key == "domain_lo") {
      auto v = detail::parse_csv_doubles(val, key);
      if (v.size() != 3) throw ConfigError("config: domain_lo needs 3 values");
      cfg.lo = Vec3(v[0], v[1], v[2]);
    } else if (key == "domain_hi") {
      auto v = detail::parse_csv_doubles(val, key);
      if (v.size() != 3) throw ConfigError("config: domain_hi needs 3 values");
      cfg.hi = Vec3(v[0], v[1], v[2]);
    } else if (key == "nucleus") {
      auto v = detail::parse_csv_doubles(val, key);
      if (v.size() != 4)
        throw ConfigError("config: nucleus needs x,y,z,Z");
      cfg.molecule.nuclei.push_back(Nucleus{Vec3(v[0], v[1], v[2]), v[3]});
    } else if (key == "n_orbitals") {
      cfg.molecule.n_orbitals = static_cast<int>(num("n_orbitals"));
      orbitals_given = true;
    } else if (key == "occupations") {
      cfg.molecule.occupations = detail::parse_csv_doubles(val, key);
    } else if (key == "cells") cfg.cells = static_cast<int>(num("cells"));
    else if (key == "prerefine") cfg.prerefine = static_cast<int>(num("prerefine"));
    else if (key == "prerefine_radius") cfg.prerefine_radius = num("prerefine_radius");
    else if (key == "maxrefine") cfg.maxrefine = static_cast<int>(num("maxrefine"));
    else if (key == "theta") cfg.theta = num("theta");
    else if (key == "epsilon") cfg.epsilon = num("epsilon");
    else if (key == "dt_max") cfg.dt_max = num("dt_max");
    else if (key == "max_halvings") cfg.max_halvings = static_cast<int>(num("max_halvings"));
    else if (key == "max_steps") cfg.max_steps = static_cast<long>(num("max_steps"));
    else if (key == "hartree") cfg.hartree_enabled = detail::parse_bool(val, key);
    else if (key == "hartree_bc") {
      if (val == "zero") cfg.hartree_bc = HartreeBcMode::Zero;
      else if (val == "multipole") cfg.hartree_bc = HartreeBcMode::Multipole;
      else throw ConfigError("config: hartree_bc must be zero|multipole");
    } else if (key == "multipole_order") cfg.multipole_order = static_cast<int>(num("multipole_order"));
    else if (key == "xc") cfg.xc_enabled = detail::parse_bool(val, key);
    else if (key == "external") {
      if (val == "coulomb") cfg.external = ExternalKind::Coulomb;
      else if (val == "harmonic") cfg.external = ExternalKind::Harmonic;
      else throw ConfigError("config: external must be coulomb|harmonic");
    } else if (key == "indicator_mode") {
      if (val == "literal") cfg.indicator_mode = IndicatorMode::Literal;
      else if (val == "zz") cfg.indicator_mode = IndicatorMode::ZZ;
      else throw ConfigError("config: indicator_mode must be literal|zz");
    } else if (key == "quad_degree") cfg.quad_degree = static_cast<int>(num("quad_degree"));
    else if (key == "quad_degree_singular") cfg.quad_degree_singular = static_cast<int>(num("quad_degree_singular"));
    else if (key == "cg_tol") cfg.cg_tol = num("cg_tol");
    else if (key == "mass_tol") cfg.mass_tol = num("mass_tol");
    else if (key == "init") {
      if (val == "gaussian") cfg.init = InitKind::Gaussian;
      else if (val == "random") cfg.init = InitKind::Random;
      else throw ConfigError("config: init must be gaussian|random");
    } else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(std::stoull(val));
    else if (key == "deterministic") cfg.deterministic = detail::parse_bool(val, key);
    else if (key == "outdir") cfg.outdir = val;
    else if (key == "export_density") cfg.export_density = detail::parse_bool(val, key);
    else if (key == "export_indicator") cfg.export_indicator = detail::parse_bool(val, key);
    else if (key == "offset_nuclei_from_nodes") cfg.offset_nuclei_from_nodes = detail::parse_bool(val, key);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  if (!orbitals_given && !cfg.molecule.nuclei.empty())
    cfg.molecule.n_orbitals = 1;
  if (cfg.molecule.occupations.empty())
    cfg.molecule.occupations.assign(
        static_cast<size_t>(cfg.molecule.n_orbitals), 2.0);
  if (cfg.offset_nuclei_from_nodes)
    for (Nucleus& nuc : cfg.molecule.nuclei)
      nuc.position += Vec3(1e-6, 1e-6, 1e-6);
  cfg.validate();
  return cfg;
}

/// Built-in configurations for the shipped systems.
inline RunConfig builtin_config(const std::string& name) {
  auto parse = [&](const char* text) {
    RunConfig c = parse_config_text(text);
    return c;
  };
  if (name == "he")
    return parse(R"(
name = he
domain_lo = -20,-20,-20
domain_hi = 20,20,20
nucleus = 0,0,0,2
n_orbitals = 1
occupations = 2
cells = 8
prerefine = 9
prerefine_radius = 1.5
maxrefine = 6
theta = 0.5
epsilon = 3e-7
hartree_bc = zero
xc = on
)");
  if (name == "h2_paper")
    return parse(R"(
name = h2_paper
domain_lo = -20,-20,-20
domain_hi = 20,20,20
nucleus = -0.7414,0,0,1
nucleus = 0.7414,0,0,1
n_orbitals = 2
occupations = 2,2
cells = 8
prerefine = 9
prerefine_radius = 1.5
maxrefine = 6
theta = 0.5
epsilon = 3e-7
hartree_bc = multipole
multipole_order = 0
xc = on
)");
  if (name == "h2")
    return parse(R"(
name = h2
domain_lo = -20,-20,-20
domain_hi = 20,20,20
nucleus = -0.7414,0,0,1
nucleus = 0.7414,0,0,1
n_orbitals = 1
occupations = 2
cells = 8
prerefine = 9
prerefine_radius = 1.5
maxrefine = 6
theta = 0.5
epsilon = 3e-7
hartree_bc = multipole
multipole_order = 0
xc = on
)");
  if (name == "lih")
    return parse(R"(
name = lih
domain_lo = -10,-10,-10
domain_hi = 10,10,10
nucleus = -1.0075,0,0,3
nucleus = 2.0075,0,0,1
n_orbitals = 2
occupations = 2,2
cells = 6
prerefine = 9
prerefine_radius = 1.0
maxrefine = 6
theta = 0.5
epsilon = 3e-7
hartree_bc = multipole
multipole_order = 0
xc = on
)");
  if (name == "harmonic_n1" || name == "harmonic_n2")
    return parse((std::string(R"(
name = harmonic
domain_lo = -8,-8,-8
domain_hi = 8,8,8
external = harmonic
hartree = off
xc = off
cells = 6
maxrefine = 0
epsilon = 1e-12
init = random
seed = 12345
n_orbitals = )") + (name == "harmonic_n1" ? "1" : "2") + "\n")
                     .c_str());
  throw ConfigError("unknown builtin config '" + name + "'");
}

/// Loads a config file, falling back to the builtin of the same name.
inline RunConfig load_config(const std::string& path_or_name) {
  std::ifstream is(path_or_name);
  if (is.good()) {
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
  }
  return builtin_config(path_or_name);
}

/// Flat string echo of every field, embedded in summary.json.
inline std::map<std::string, std::string> config_echo(const RunConfig& c) {
  std::map<std::string, std::string> m;
  auto fmt = [](double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
  };
  m["name"] = c.name;
  m["domain_lo"] = fmt(c.lo[0]) + "," + fmt(c.lo[1]) + "," + fmt(c.lo[2]);
  m["domain_hi"] = fmt(c.hi[0]) + "," + fmt(c.hi[1]) + "," + fmt(c.hi[2]);
  for (size_t k = 0; k < c.molecule.nuclei.size(); ++k) {
    const Nucleus& n = c.molecule.nuclei[k];
    m["nucleus_" + std::to_string(k)] = fmt(n.position[0]) + "," +
                                        fmt(n.position[1]) + "," +
                                        fmt(n.position[2]) + "," +
                                        fmt(n.charge);
  }
  m["n_orbitals"] = std::to_string(c.molecule.n_orbitals);
  {
    std::string occ;
    for (size_t i = 0; i < c.molecule.occupations.size(); ++i)
      occ += (i ? "," : "") + fmt(c.molecule.occupations[i]);
    m["occupations"] = occ;
  }
  m["cells"] = std::to_string(c.cells);
  m["prerefine"] = std::to_string(c.prerefine);
  m["prerefine_radius"] = fmt(c.prerefine_radius);
  m["maxrefine"] = std::to_string(c.maxrefine);
  m["theta"] = fmt(c.theta);
  m["epsilon"] = fmt(c.epsilon);
  m["dt_max"] = fmt(c.dt_max);
  m["max_halvings"] = std::to_string(c.max_halvings);
  m["max_steps"] = std::to_string(c.max_steps);
  m["hartree"] = c.hartree_enabled ? "on" : "off";
  m["hartree_bc"] =
      c.hartree_bc == HartreeBcMode::Zero ? "zero" : "multipole";
  m["multipole_order"] = std::to_string(c.multipole_order);
  m["xc"] = c.xc_enabled ? "on" : "off";
  m["external"] =
      c.external == ExternalKind::Coulomb ? "coulomb" : "harmonic";
  m["indicator_mode"] =
      c.indicator_mode == IndicatorMode::Literal ? "literal" : "zz";
  m["quad_degree"] = std::to_string(c.quad_degree);
  m["quad_degree_singular"] = std::to_string(c.quad_degree_singular);
  m["cg_tol"] = fmt(c.cg_tol);
  m["mass_tol"] = fmt(c.mass_tol);
  m["init"] = c.init == InitKind::Gaussian ? "gaussian" : "random";
  m["seed"] = std::to_string(c.seed);
  m["deterministic"] = c.deterministic ? "true" : "false";
  m["outdir"] = c.outdir;
  m["export_density"] = c.export_density ? "true" : "false";
  m["export_indicator"] = c.export_indicator ? "true" : "false";
  m["offset_nuclei_from_nodes"] =
      c.offset_nuclei_from_nodes ? "true" : "false";
  return m;
}

}  // namespace ksflow

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ksflow/adapt.hpp"
#include "ksflow/config.hpp"
#include "ksflow/flow.hpp"
#include "ksflow/ksmodel.hpp"
#include "ksflow/version.hpp"

namespace ksflow {

struct LevelRecord {
  int level = 0;
  int dofs = 0;
  int tets = 0;
  EnergyBreakdown energy;
  double residual = 0.0;
  int steps = 0;
  double wall_time_s = 0.0;
  double max_gram_err = 0.0;
};

struct RunSummary {
  std::vector<LevelRecord> levels;
  double final_energy = 0.0;
  std::string termination = "converged";
  int exit_code = 0;
  double final_residual = 0.0;
  double max_gram_err = 0.0;
  std::vector<HistoryRecord> history;
  std::vector<FlowEvent> events;
  std::map<std::string, std::string> config;
  std::shared_ptr<const Mesh> final_mesh;  // mesh of the last level
  Eigen::VectorXd final_density;           // nodal density on final_mesh
};

namespace detail {

inline void write_history_csv(const RunSummary& s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "step,t,dt,E_total,E_kin,E_ext,E_har,E_xc,E_nuc,grad_norm,gram_err,"
        "level\n";
  os.precision(17);
  for (const HistoryRecord& r : s.history) {
    os << r.step << "," << r.t << "," << r.dt << "," << r.energy.total << ","
       << r.energy.kinetic << "," << r.energy.external << ","
       << r.energy.hartree << "," << r.energy.xc << "," << r.energy.nuclear
       << "," << r.grad_norm << "," << r.gram_err << "," << r.level << "\n";
  }
}

inline void write_summary_json(const RunSummary& s, bool deterministic,
                               const std::string& path) {
  nlohmann::json j;
  j["version"] = kVersion;
  j["termination"] = s.termination;
  j["final_energy"] = s.final_energy;
  j["final_residual"] = s.final_residual;
  j["max_gram_err"] = s.max_gram_err;
  j["config_echo"] = s.config;
  j["levels"] = nlohmann::json::array();
  for (const LevelRecord& L : s.levels) {
    nlohmann::json l;
    l["level"] = L.level;
    l["dofs"] = L.dofs;
    l["tets"] = L.tets;
    l["energy"] = {{"kinetic", L.energy.kinetic},
                   {"external", L.energy.external},
                   {"hartree", L.energy.hartree},
                   {"xc", L.energy.xc},
                   {"nuclear", L.energy.nuclear},
                   {"total", L.energy.total}};
    l["residual"] = L.residual;
    l["steps"] = L.steps;
    // Deterministic runs zero the timings so identical inputs produce
    // byte-identical summaries.
    l["wall_time_s"] = deterministic ? 0.0 : L.wall_time_s;
    l["max_gram_err"] = L.max_gram_err;
    j["levels"].push_back(l);
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << j.dump(2) << "\n";
}

}  // namespace detail

/// Runs the full adaptive loop: flow to the stopping criterion on each
/// mesh, then estimate -> mark -> bisect -> transfer -> reorthonormalize,
/// up to maxrefine levels. All file outputs land in cfg.outdir.
inline RunSummary run(const RunConfig& cfg) {
  RunSummary summary;
  summary.config = config_echo(cfg);
  std::filesystem::create_directories(cfg.outdir);

  auto finish = [&](int code, const std::string& termination) {
    summary.exit_code = code;
    summary.termination = termination;
    if (!summary.levels.empty())
      summary.final_energy = summary.levels.back().energy.total;
    detail::write_history_csv(summary, cfg.outdir + "/history.csv");
    detail::write_summary_json(summary, cfg.deterministic,
                               cfg.outdir + "/summary.json");
    return summary;
  };

  try {
    std::vector<Vec3> centers;
    for (const Nucleus& n : cfg.molecule.nuclei) centers.push_back(n.position);

    Mesh base = build_box_mesh(cfg.lo, cfg.hi, cfg.cells);
    if (cfg.prerefine > 0 && !centers.empty())
      base = refine_near(base, centers, cfg.prerefine, cfg.prerefine_radius);
    auto mesh = std::make_shared<const Mesh>(std::move(base));

    FlowControls ctl = cfg.flow_controls();
    double t_carry = 0.0;
    std::vector<Eigen::VectorXd> transferred;  // full nodal orbitals

    for (int level = 0; level <= cfg.maxrefine; ++level) {
      auto wall0 = std::chrono::steady_clock::now();
      KsContext ctx(mesh, cfg.molecule, cfg.model_options());

      OrbitalSet U;
      if (level == 0) {
        U = initial_orbitals(ctx, cfg.init, cfg.seed);
      } else {
        U.coeff.resize(ctx.n_interior(), cfg.molecule.n_orbitals);
        for (int i = 0; i < cfg.molecule.n_orbitals; ++i)
          U.coeff.col(i) = ctx.restrictv(transferred[static_cast<size_t>(i)]);
        U.occupations = cfg.molecule.occupations;
        U = orthonormalize(ctx.mass_interior(), U);
      }

      double h_min = element_sizes(*mesh).min_h;
      double dt0 = std::min(h_min * h_min, ctl.dt_max);
      FlowState state = make_flow_state(ctx, std::move(U), dt0, level);
      state.t = t_carry;

      InnerLoopReport rep = inner_loop(ctx, state, ctl);
      t_carry = state.t;

      summary.history.insert(summary.history.end(), state.history.begin(),
                             state.history.end());
      summary.events.insert(summary.events.end(), state.events.begin(),
                            state.events.end());
      summary.max_gram_err =
          std::max(summary.max_gram_err, state.max_gram_err);
      summary.final_residual = rep.final_residual;
      summary.final_mesh = mesh;
      summary.final_density = state.eval.rho_nodal;

      LevelRecord rec;
      rec.level = level;
      rec.dofs = ctx.n_interior();
      rec.tets = mesh->n_tets();
      rec.energy = state.eval.energy;
      rec.residual = rep.final_residual;
      rec.steps = rep.steps_taken;
      rec.max_gram_err = state.max_gram_err;
      rec.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        wall0)
              .count();
      summary.levels.push_back(rec);

      if (cfg.export_density) {
        std::vector<double> rho(state.eval.rho_nodal.data(),
                                state.eval.rho_nodal.data() +
                                    state.eval.rho_nodal.size());
        write_vtk(*mesh, cfg.outdir + "/density_" + std::to_string(level) +
                             ".vtk",
                  "rho", &rho);
        if (level == cfg.maxrefine)
          write_vtk(*mesh, cfg.outdir + "/density_final.vtk", "rho", &rho);
      }

      if (!rep.converged) return finish(2, "budget-exhausted");
      if (level == cfg.maxrefine) break;

      IndicatorField eta =
          indicator(*mesh, state.eval.rho_nodal, cfg.indicator_mode);
      if (cfg.export_indicator)
        write_indicator_csv(*mesh, eta, cfg.outdir + "/indicator_" +
                                            std::to_string(level) + ".csv");
      MarkSet marks = mark(eta, cfg.theta);
      if (marks.marked.empty()) break;  // indicator exhausted

      Mesh fine = bisect(*mesh, marks.marked);
      transferred.clear();
      for (int i = 0; i < cfg.molecule.n_orbitals; ++i) {
        Eigen::VectorXd full = ctx.expand(state.U.coeff.col(i));
        std::vector<double> fv(full.data(), full.data() + full.size());
        std::vector<double> tv = transfer_nodal(fv, *mesh, fine);
        transferred.push_back(
            Eigen::Map<Eigen::VectorXd>(tv.data(), static_cast<int>(tv.size())));
      }
      mesh = std::make_shared<const Mesh>(std::move(fine));
    }
    return finish(0, "converged");
  } catch (const FlowStalledError& e) {
    return finish(1, std::string("flow-stalled: ") + e.what());
  } catch (const SolverStagnationError& e) {
    return finish(1, std::string("solver-stagnation: ") + e.what());
  } catch (const RefinementFailureError& e) {
    return finish(1, std::string("refinement-failure: ") + e.what());
  } catch (const Error& e) {
    return finish(1, std::string("error: ") + e.what());
  }
}

struct LinearOracleReport {
  double flow_energy = 0.0;
  double eig_energy = 0.0;
  double rel_gap = 0.0;
  double subspace_angle = 0.0;
  int steps = 0;
  double residual = 0.0;
  int dofs = 0;
};

/// Validation mode: runs the flow on the linear model (Hartree and xc
/// disabled) and compares against a dense generalized eigensolver, both in
/// energy and in the subspace angle (degeneracy-closed).
inline LinearOracleReport run_linear_oracle(const RunConfig& cfg,
                                            int dense_cap = 3000) {
  if (cfg.hartree_enabled || cfg.xc_enabled)
    throw ConfigError(
        "run_linear_oracle: requires hartree = off and xc = off");

  std::vector<Vec3> centers;
  for (const Nucleus& n : cfg.molecule.nuclei) centers.push_back(n.position);
  Mesh base = build_box_mesh(cfg.lo, cfg.hi, cfg.cells);
  if (cfg.prerefine > 0 && !centers.empty())
    base = refine_near(base, centers, cfg.prerefine, cfg.prerefine_radius);
  auto mesh = std::make_shared<const Mesh>(std::move(base));

  KsContext ctx(mesh, cfg.molecule, cfg.model_options());
  const int n = ctx.n_interior();
  const int N = cfg.molecule.n_orbitals;
  if (n > dense_cap)
    throw ConfigError("run_linear_oracle: " + std::to_string(n) +
                      " dofs exceed the dense cap");
  if (N >= n)
    throw ConfigError("run_linear_oracle: n_orbitals must be below the dof "
                      "count");

  FlowControls ctl = cfg.flow_controls();
  double h_min = element_sizes(*mesh).min_h;
  FlowState state =
      make_flow_state(ctx, initial_orbitals(ctx, cfg.init, cfg.seed),
                      std::min(h_min * h_min, ctl.dt_max));
  InnerLoopReport rep = inner_loop(ctx, state, ctl);

  InteriorBlocks W = split_interior(ctx.external_matrix(), ctx.dofs());
  Eigen::MatrixXd H =
      0.5 * Eigen::MatrixXd(ctx.stiffness_interior()) + Eigen::MatrixXd(W.ii);
  Eigen::MatrixXd M = Eigen::MatrixXd(ctx.mass_interior());
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(H, M);
  if (ges.info() != Eigen::Success)
    throw Error("run_linear_oracle: dense eigensolver failed");

  LinearOracleReport out;
  out.dofs = n;
  out.steps = rep.steps_taken;
  out.residual = rep.final_residual;
  out.flow_energy = state.eval.energy.total;
  for (int i = 0; i < N; ++i)
    out.eig_energy += cfg.molecule.occupation(i) * ges.eigenvalues()[i];
  out.rel_gap = std::abs(out.flow_energy - out.eig_energy) /
                std::abs(out.eig_energy);

  // Degeneracy-closed eigenspace: include all eigenvectors within a
  // relative tolerance of the N-th eigenvalue.
  double lamN = ges.eigenvalues()[N - 1];
  int width = N;
  while (width < n &&
         ges.eigenvalues()[width] <= lamN + 1e-8 * std::abs(lamN))
    ++width;
  Eigen::MatrixXd X = ges.eigenvectors().leftCols(width);
  Eigen::MatrixXd D =
      state.U.coeff - X * (X.transpose() * (M * state.U.coeff));
  Eigen::MatrixXd Sd = D.transpose() * M * D;
  double s2 = std::max(0.0, Sd.eigenvalues().real().maxCoeff());
  out.subspace_angle = std::asin(std::min(1.0, std::sqrt(s2)));
  return out;
}

}  // namespace ksflow

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ksflow/errors.hpp"
#include "ksflow/ksmodel.hpp"

namespace ksflow {

/// Rank-2N skew operator A v = g (U^T M v) - U (G^T v) frozen at one state.
/// G is recomputed as M g from the solved Riesz columns, which makes A
/// exactly M-skew independently of the inner-solver tolerance; the Cayley
/// update below then preserves the Gram matrix to rounding.
struct SkewApplication {
  Eigen::MatrixXd U;   // linearization state (interior coefficients)
  Eigen::MatrixXd g;   // Riesz representatives of the gradient load
  Eigen::MatrixXd G;   // M g
  Eigen::MatrixXd MU;  // M U
};

inline SkewApplication build_skew(const KsContext& ctx, const OrbitalSet& U,
                                  const Eigen::MatrixXd& gradient) {
  SkewApplication s;
  s.U = U.coeff;
  s.g = riesz_representatives(ctx, gradient);
  s.G = ctx.mass_interior() * s.g;
  s.MU = ctx.mass_interior() * U.coeff;
  return s;
}

inline Eigen::MatrixXd apply_A(const SkewApplication& s,
                               const Eigen::MatrixXd& V) {
  return s.g * (s.MU.transpose() * V) - s.U * (s.G.transpose() * V);
}

/// One linearized step: solves (I + dt/2 A) U' = (I - dt/2 A) U exactly via
/// the low-rank (Woodbury) reduction to a 2N x 2N dense system.
inline Eigen::MatrixXd cayley_step(const SkewApplication& s, double dt,
                                   double cond_limit = 1e14) {
  const int N = static_cast<int>(s.U.cols());
  const double tau = 0.5 * dt;
  if (dt == 0.0) return s.U;

  Eigen::MatrixXd AU = apply_A(s, s.U);
  Eigen::MatrixXd B = s.U - tau * AU;

  Eigen::MatrixXd DW(2 * N, 2 * N);
  DW.topLeftCorner(N, N) = s.MU.transpose() * s.g;
  DW.topRightCorner(N, N) = s.MU.transpose() * s.U;
  DW.bottomLeftCorner(N, N) = -(s.G.transpose() * s.g);
  DW.bottomRightCorner(N, N) = -(s.G.transpose() * s.U);

  Eigen::MatrixXd C =
      Eigen::MatrixXd::Identity(2 * N, 2 * N) + tau * DW;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinU |
                                               Eigen::ComputeThinV);
  double smin = svd.singularValues()(2 * N - 1);
  double smax = svd.singularValues()(0);
  if (!(smin > 0.0) || smax / smin > cond_limit)
    throw StepFailureError("cayley_step: reduced system is singular",
                           smin > 0.0 ? smax / smin
                                      : std::numeric_limits<double>::infinity());

  Eigen::MatrixXd DB(2 * N, static_cast<int>(B.cols()));
  DB.topRows(N) = s.MU.transpose() * B;
  DB.bottomRows(N) = -(s.G.transpose() * B);
  Eigen::MatrixXd Y = C.partialPivLu().solve(DB);
  return B - tau * (s.g * Y.topRows(N) + s.U * Y.bottomRows(N));
}

struct HistoryRecord {
  int step = 0;
  double t = 0.0;
  double dt = 0.0;
  EnergyBreakdown energy;
  double grad_norm = 0.0;
  double gram_err = 0.0;
  int level = 0;
};

struct FlowEvent {
  enum class Kind { Accept, Reject, Double };
  Kind kind = Kind::Accept;
  int step = 0;
  double dt = 0.0;
  int level = 0;
};

struct FlowControls {
  double epsilon = 1e-6;
  double dt_max = 0.1;
  int max_halvings = 40;
  double dt_min = 1e-16;
  int dt_double_interval = 200;
  long max_steps = 200000;
};

/// Trajectory state: current orbitals with their evaluation, flow time,
/// step size, and the append-only history/event logs.
struct FlowState {
  OrbitalSet U;
  KsEval eval;
  double t = 0.0;
  double dt = 0.0;
  int step_index = 0;
  int level = 0;
  int consecutive_halvings = 0;
  double last_residual = 0.0;
  double max_gram_err = 0.0;
  bool converged_on_mesh = false;
  bool budget_exhausted = false;
  std::vector<HistoryRecord> history;
  std::vector<FlowEvent> events;
};

inline FlowState make_flow_state(const KsContext& ctx, OrbitalSet U,
                                 double dt, int level = 0) {
  FlowState st;
  st.U = std::move(U);
  st.eval = evaluate(ctx, st.U);
  st.dt = dt;
  st.level = level;
  return st;
}

inline double gram_error(const KsContext& ctx, const Eigen::MatrixXd& coeff) {
  Eigen::MatrixXd S = gram(ctx.mass_interior(), coeff, coeff);
  S.diagonal().array() -= 1.0;
  return S.norm();
}

/// Energy-descent controller: accepts a candidate that strictly decreases
/// the total energy, otherwise halves dt and reports a retry. Throws
/// FlowStalledError after max_halvings consecutive rejections or dt
/// underflow.
inline bool accept_or_halve(const KsContext& ctx, FlowState& state,
                            const Eigen::MatrixXd& candidate,
                            KsEval cand_eval, const FlowControls& ctl) {
  if (cand_eval.energy.total < state.eval.energy.total) {
    double ge = gram_error(ctx, candidate);
    state.U.coeff = candidate;
    state.eval = std::move(cand_eval);
    state.t += state.dt;
    state.step_index += 1;
    state.consecutive_halvings = 0;
    state.max_gram_err = std::max(state.max_gram_err, ge);
    state.events.push_back(FlowEvent{FlowEvent::Kind::Accept,
                                     state.step_index, state.dt, state.level});
    return true;
  }
  state.events.push_back(FlowEvent{FlowEvent::Kind::Reject, state.step_index,
                                   state.dt, state.level});
  state.consecutive_halvings += 1;
  state.dt *= 0.5;
  if (state.consecutive_halvings > ctl.max_halvings || state.dt < ctl.dt_min)
    throw FlowStalledError("flow stalled: dt underflow after repeated halvings",
                           state.dt, state.last_residual);
  return false;
}

/// Periodic step enlargement: doubles dt every dt_double_interval accepted
/// steps, capped at dt_max.
inline void maybe_double_dt(FlowState& state, const FlowControls& ctl) {
  if (state.step_index > 0 &&
      state.step_index % ctl.dt_double_interval == 0) {
    double next = std::min(2.0 * state.dt, ctl.dt_max);
    if (next > state.dt) {
      state.dt = next;
      state.events.push_back(FlowEvent{FlowEvent::Kind::Double,
                                       state.step_index, state.dt,
                                       state.level});
    }
  }
}

struct InnerLoopReport {
  bool converged = false;
  int steps_taken = 0;
  double final_residual = 0.0;
};

/// Runs the linearized flow on the current mesh until the energy decrease
/// rate drops below epsilon: (E(U^n) - E(U^{n+1})) / dt < epsilon.
/// Candidates that fail to decrease the energy halve dt; a rejected
/// candidate whose energy change is already below the epsilon scale ends
/// the loop as converged (flat landscape) instead of stalling.
inline InnerLoopReport inner_loop(const KsContext& ctx, FlowState& state,
                                  const FlowControls& ctl) {
  InnerLoopReport report;
  const int steps_at_entry = state.step_index;

  auto record = [&](double resid) {
    HistoryRecord row;
    row.step = state.step_index;
    row.t = state.t;
    row.dt = state.dt;
    row.energy = state.eval.energy;
    row.grad_norm = resid;
    row.gram_err = gram_error(ctx, state.U.coeff);
    row.level = state.level;
    state.max_gram_err = std::max(state.max_gram_err, row.gram_err);
    state.history.push_back(row);
  };

  while (true) {
    Eigen::MatrixXd G = gradient_load(ctx, state.U, state.eval);
    SkewApplication skew = build_skew(ctx, state.U, G);
    double resid = grassmann_residual(ctx, state.U, skew.G, &skew.g);
    state.last_residual = resid;
    record(resid);

    if (state.step_index - steps_at_entry >= ctl.max_steps) {
      state.budget_exhausted = true;
      report.converged = false;
      report.steps_taken = state.step_index - steps_at_entry;
      report.final_residual = resid;
      return report;
    }

    bool stepped = false;
    while (!stepped) {
      Eigen::MatrixXd candidate = cayley_step(skew, state.dt);
      OrbitalSet cand;
      cand.coeff = candidate;
      cand.occupations = state.U.occupations;
      KsEval cand_eval = evaluate(ctx, cand);
      double dt_used = state.dt;
      double dE = state.eval.energy.total - cand_eval.energy.total;

      if (dE > 0.0) {
        accept_or_halve(ctx, state, candidate, std::move(cand_eval), ctl);
        maybe_double_dt(state, ctl);
        stepped = true;
        if (dE / dt_used < ctl.epsilon) {
          state.converged_on_mesh = true;
        }
      } else if (std::abs(dE) / dt_used < ctl.epsilon) {
        // Energy landscape is flat at the stopping scale; treat the mesh
        // as converged without accepting the non-decreasing candidate.
        state.converged_on_mesh = true;
        stepped = true;
      } else {
        accept_or_halve(ctx, state, candidate, std::move(cand_eval), ctl);
      }
    }

    if (state.converged_on_mesh) {
      Eigen::MatrixXd Gf = gradient_load(ctx, state.U, state.eval);
      SkewApplication sf = build_skew(ctx, state.U, Gf);
      double rf = grassmann_residual(ctx, state.U, sf.G, &sf.g);
      state.last_residual = rf;
      record(rf);
      report.converged = true;
      report.steps_taken = state.step_index - steps_at_entry;
      report.final_residual = rf;
      return report;
    }
  }
}

/// Loewdin symmetric orthonormalization in the M inner product:
/// U <- U S^(-1/2) with S = gram(M, U, U).
inline OrbitalSet orthonormalize(const SparseOperator& M,
                                 const OrbitalSet& U) {
  Eigen::MatrixXd S = gram(M, U.coeff, U.coeff);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < 1e-14)
    throw RankDeficiencyError("orthonormalize: rank-deficient orbital set",
                              min_eig);
  Eigen::MatrixXd C = es.eigenvectors() *
                      es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                      es.eigenvectors().transpose();
  OrbitalSet out;
  out.coeff = U.coeff * C;
  out.occupations = U.occupations;
  return out;
}

enum class InitKind { Gaussian, Random };

/// Deterministic initial orbitals: Gaussian bumps of width 1 bohr centered
/// at the nuclei (round-robin, widths stretched for repeats), or a seeded
/// random state; both Loewdin-orthonormalized.
inline OrbitalSet initial_orbitals(const KsContext& ctx, InitKind kind,
                                   std::uint64_t seed = 0) {
  const Molecule& mol = ctx.molecule();
  const Mesh& mesh = ctx.mesh();
  const int N = mol.n_orbitals;
  OrbitalSet U;
  U.coeff.resize(ctx.n_interior(), N);
  U.occupations.resize(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i)
    U.occupations[static_cast<size_t>(i)] = mol.occupation(i);

  if (kind == InitKind::Random) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for (int i = 0; i < U.coeff.rows(); ++i)
      for (int j = 0; j < N; ++j) U.coeff(i, j) = g(rng);
  } else {
    std::vector<Vec3> centers;
    for (const Nucleus& nuc : mol.nuclei) centers.push_back(nuc.position);
    if (centers.empty()) centers.push_back(0.5 * (mesh.lo() + mesh.hi()));
    const int M = static_cast<int>(centers.size());
    for (int j = 0; j < N; ++j) {
      const Vec3& c = centers[static_cast<size_t>(j % M)];
      double width = 1.0 + 0.5 * (j / M);
      for (int i = 0; i < ctx.n_interior(); ++i) {
        const Vec3& x =
            mesh.vertex(ctx.dofs().interior_to_vertex[static_cast<size_t>(i)]);
        U.coeff(i, j) =
            std::exp(-(x - c).squaredNorm() / (2.0 * width * width));
      }
    }
  }
  // Column pre-normalization keeps the cross-Gram well scaled even when a
  // bump barely overlaps the mesh vertices.
  for (int j = 0; j < N; ++j) {
    double nrm = std::sqrt(
        U.coeff.col(j).dot(ctx.mass_interior() * U.coeff.col(j)));
    if (nrm > 0.0)
      U.coeff.col(j) /= nrm;
    else
      U.coeff.col(j).setOnes();
  }
  return orthonormalize(ctx.mass_interior(), U);
}

}  // namespace ksflow

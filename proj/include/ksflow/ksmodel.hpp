#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "ksflow/errors.hpp"
#include "ksflow/fem.hpp"
#include "ksflow/mesh.hpp"
#include "ksflow/molecule.hpp"
#include "ksflow/xc.hpp"

namespace ksflow {

/// Discrete orbital tuple: interior nodal coefficients of u_1..u_N plus
/// occupations.
struct OrbitalSet {
  Eigen::MatrixXd coeff;  // n_interior x N
  std::vector<double> occupations;

  int n_orbitals() const { return static_cast<int>(coeff.cols()); }
  double occupation(int i) const {
    return occupations.empty() ? 2.0 : occupations[static_cast<size_t>(i)];
  }
};

/// Nodal electron density (all vertices; identically zero on the boundary).
struct DensityField {
  Eigen::VectorXd nodal;
};

struct EnergyBreakdown {
  double kinetic = 0.0;
  double external = 0.0;
  double hartree = 0.0;
  double xc = 0.0;
  double nuclear = 0.0;
  double total = 0.0;

  void finalize() { total = kinetic + external + hartree + xc + nuclear; }
};

enum class HartreeBcMode { Zero, Multipole };
enum class ExternalKind { Coulomb, Harmonic };

struct ModelOptions {
  bool hartree_enabled = true;
  bool xc_enabled = true;
  HartreeBcMode hartree_bc = HartreeBcMode::Zero;
  int multipole_order = 0;
  ExternalKind external = ExternalKind::Coulomb;
  double r_min = 1e-8;
  int quad_degree = 2;
  int quad_degree_singular = 4;
  int singular_layers = 2;  // neighborhood depth that gets the elevated rule
  double poisson_tol = 1e-10;
  double mass_tol = 1e-12;
};

/// Charge moments of a density about its centroid, used for far-field
/// Dirichlet data.
struct ChargeMoments {
  double charge = 0.0;
  Vec3 centroid = Vec3::Zero();
  Vec3 dipole = Vec3::Zero();          // vanishes about the centroid
  Eigen::Matrix3d quadrupole = Eigen::Matrix3d::Zero();  // traceless form
  int order = 0;

  double boundary_value(const Vec3& x) const {
    Vec3 d = x - centroid;
    double r = d.norm();
    if (r <= 0.0) return 0.0;
    double v = charge / r;
    if (order >= 1) v += dipole.dot(d) / (r * r * r);
    if (order >= 2) v += 0.5 * d.dot(quadrupole * d) / std::pow(r, 5);
    return v;
  }
};

/// Per-mesh Kohn-Sham evaluation context: dof map, assembled operators,
/// the external-potential matrix, and warm-started inner solvers.
///
/// The solvers and scratch buffers are mutable caches behind a logically
/// const interface; a context must not be shared between concurrent
/// writers.
class KsContext {
 public:
  KsContext(std::shared_ptr<const Mesh> mesh, Molecule molecule,
            ModelOptions options)
      : mesh_(std::move(mesh)),
        molecule_(std::move(molecule)),
        options_(options),
        dofs_(DofMap::build(*mesh_)),
        assembler_(*mesh_) {
    molecule_.validate(mesh_->lo(), mesh_->hi());
    M_full_ = assemble_mass(assembler_);
    K_full_ = assemble_stiffness(assembler_);
    InteriorBlocks mb = split_interior(M_full_, dofs_);
    InteriorBlocks kb = split_interior(K_full_, dofs_);
    M_ii_ = std::move(mb.ii);
    K_ii_ = std::move(kb.ii);
    K_ib_ = std::move(kb.ib);
    build_quadrature_selector();
    build_external_matrix();
    vertex_weights_ = M_full_ * Eigen::VectorXd::Ones(mesh_->n_vertices());
    W_dyn_ = assembler_.zeros();
    mass_solver_ = std::make_unique<SpdSolver>(M_ii_);
    poisson_solver_ = std::make_unique<SpdSolver>(K_ii_);
  }

  KsContext(const KsContext&) = delete;
  KsContext& operator=(const KsContext&) = delete;

  const Mesh& mesh() const { return *mesh_; }
  std::shared_ptr<const Mesh> mesh_ptr() const { return mesh_; }
  const Molecule& molecule() const { return molecule_; }
  const ModelOptions& options() const { return options_; }
  const DofMap& dofs() const { return dofs_; }
  const Assembler& assembler() const { return assembler_; }
  int n_interior() const { return dofs_.n_interior; }
  const SparseOperator& mass_full() const { return M_full_; }
  const SparseOperator& stiffness_full() const { return K_full_; }
  const SparseOperator& mass_interior() const { return M_ii_; }
  const SparseOperator& stiffness_interior() const { return K_ii_; }
  const SparseOperator& external_matrix() const { return W_ext_; }
  const QuadratureSelector& quadrature() const { return quad_; }

  double external_potential(const Vec3& x) const {
    if (options_.external == ExternalKind::Harmonic)
      return 0.5 * x.squaredNorm();
    double v = 0.0;
    for (const Nucleus& nuc : molecule_.nuclei)
      v -= nuc.charge / std::max((x - nuc.position).norm(), options_.r_min);
    return v;
  }

  Eigen::VectorXd expand(const Eigen::VectorXd& interior) const {
    return expand_interior_vec(interior, dofs_);
  }
  Eigen::VectorXd restrictv(const Eigen::VectorXd& full) const {
    return restrict_interior_vec(full, dofs_);
  }
  Eigen::MatrixXd expand_cols(const Eigen::MatrixXd& interior) const {
    Eigen::MatrixXd out =
        Eigen::MatrixXd::Zero(mesh_->n_vertices(), interior.cols());
    for (int i = 0; i < dofs_.n_interior; ++i)
      out.row(dofs_.interior_to_vertex[static_cast<size_t>(i)]) =
          interior.row(i);
    return out;
  }
  Eigen::MatrixXd restrict_cols(const Eigen::MatrixXd& full) const {
    Eigen::MatrixXd out(dofs_.n_interior, full.cols());
    for (int i = 0; i < dofs_.n_interior; ++i)
      out.row(i) = full.row(dofs_.interior_to_vertex[static_cast<size_t>(i)]);
    return out;
  }

  Eigen::VectorXd solve_mass(const Eigen::VectorXd& b,
                             const Eigen::VectorXd* guess = nullptr) const {
    return mass_solver_->solve(b, options_.mass_tol, -1, guess);
  }
  Eigen::VectorXd solve_poisson(const Eigen::VectorXd& b,
                                const Eigen::VectorXd* guess = nullptr) const {
    return poisson_solver_->solve(b, options_.poisson_tol, -1, guess);
  }
  double last_poisson_residual() const {
    return poisson_solver_->last_residual();
  }

  const SparseOperator& interior_boundary_coupling() const { return K_ib_; }
  /// Boundary values of a full-vertex field, in boundary-dof order.
  Eigen::VectorXd boundary_values(const Eigen::VectorXd& full) const {
    Eigen::VectorXd out(boundary_vertices_.size());
    for (size_t b = 0; b < boundary_vertices_.size(); ++b)
      out[static_cast<int>(b)] = full[boundary_vertices_[b]];
    return out;
  }
  const std::vector<int>& boundary_vertices() const {
    return boundary_vertices_;
  }
  const Eigen::VectorXd& vertex_weights() const { return vertex_weights_; }

  SparseOperator& dynamic_weight_buffer() const { return W_dyn_; }
  Eigen::VectorXd& hartree_warm() const { return hartree_warm_; }
  Eigen::MatrixXd& riesz_warm() const { return riesz_warm_; }

 private:
  void build_quadrature_selector() {
    quad_.base_degree = options_.quad_degree;
    quad_.elevated_degree = options_.quad_degree_singular;
    quad_.elevated.clear();
    if (options_.external != ExternalKind::Coulomb ||
        molecule_.nuclei.empty() || options_.singular_layers < 0)
      return;
    const Mesh& m = *mesh_;
    std::vector<char> mask(static_cast<size_t>(m.n_tets()), 0);
    std::vector<int> frontier;
    for (int t = 0; t < m.n_tets(); ++t)
      for (const Nucleus& nuc : molecule_.nuclei)
        if (m.tet_contains(t, nuc.position, 1e-9)) {
          mask[static_cast<size_t>(t)] = 1;
          frontier.push_back(t);
          break;
        }
    if (frontier.empty()) return;
    std::vector<std::vector<int>> v2t(static_cast<size_t>(m.n_vertices()));
    for (int t = 0; t < m.n_tets(); ++t)
      for (int v : m.tet(t).v) v2t[static_cast<size_t>(v)].push_back(t);
    for (int layer = 0; layer < options_.singular_layers; ++layer) {
      std::vector<int> next;
      for (int t : frontier)
        for (int v : m.tet(t).v)
          for (int s : v2t[static_cast<size_t>(v)])
            if (!mask[static_cast<size_t>(s)]) {
              mask[static_cast<size_t>(s)] = 1;
              next.push_back(s);
            }
      frontier = std::move(next);
    }
    quad_.elevated = std::move(mask);
  }

  void build_external_matrix() {
    auto vext = [this](int, const Vec3& x, const std::array<double, 4>&) {
      return external_potential(x);
    };
    W_ext_ = assemble_weighted_mass(assembler_, vext, quad_);
    boundary_vertices_.clear();
    for (int v = 0; v < mesh_->n_vertices(); ++v)
      if (mesh_->is_boundary(v)) boundary_vertices_.push_back(v);
  }

  std::shared_ptr<const Mesh> mesh_;
  Molecule molecule_;
  ModelOptions options_;
  DofMap dofs_;
  Assembler assembler_;
  SparseOperator M_full_, K_full_, M_ii_, K_ii_, K_ib_, W_ext_;
  QuadratureSelector quad_;
  std::vector<int> boundary_vertices_;
  Eigen::VectorXd vertex_weights_;

  mutable SparseOperator W_dyn_;
  mutable Eigen::VectorXd hartree_warm_;
  mutable Eigen::MatrixXd riesz_warm_;
  std::unique_ptr<SpdSolver> mass_solver_;
  std::unique_ptr<SpdSolver> poisson_solver_;
};

/// Nodal density rho_v = sum_i f_i U_{v,i}^2.
inline DensityField density(const KsContext& ctx, const OrbitalSet& U) {
  DensityField rho;
  rho.nodal = Eigen::VectorXd::Zero(ctx.mesh().n_vertices());
  Eigen::MatrixXd full = ctx.expand_cols(U.coeff);
  for (int i = 0; i < U.n_orbitals(); ++i)
    rho.nodal += U.occupation(i) * full.col(i).cwiseProduct(full.col(i));
  return rho;
}

/// Charge moments of a P1 nodal density (exact for the monopole and dipole;
/// quadrupole by elevated quadrature when requested).
inline ChargeMoments charge_moments(const KsContext& ctx,
                                    const Eigen::VectorXd& rho_nodal,
                                    int order) {
  const Mesh& m = ctx.mesh();
  ChargeMoments mom;
  mom.order = order;
  mom.charge = ctx.vertex_weights().dot(rho_nodal);
  if (mom.charge <= 1e-14) {
    mom.charge = 0.0;
    mom.centroid = 0.5 * (m.lo() + m.hi());
    return mom;
  }
  Eigen::MatrixXd X(m.n_vertices(), 3);
  for (int v = 0; v < m.n_vertices(); ++v) X.row(v) = m.vertex(v);
  Eigen::VectorXd Mrho = ctx.mass_full() * rho_nodal;
  mom.centroid = (X.transpose() * Mrho) / mom.charge;
  if (order >= 2) {
    Eigen::Matrix3d second = Eigen::Matrix3d::Zero();
    const QuadratureRule& rule = QuadratureRule::of_degree(4);
    for (int t = 0; t < m.n_tets(); ++t) {
      const Tet& T = m.tet(t);
      double V = m.volume(t);
      for (size_t q = 0; q < rule.points.size(); ++q) {
        const auto& lam = rule.points[q];
        Vec3 x = lam[0] * m.vertex(T.v[0]) + lam[1] * m.vertex(T.v[1]) +
                 lam[2] * m.vertex(T.v[2]) + lam[3] * m.vertex(T.v[3]);
        double r = lam[0] * rho_nodal[T.v[0]] + lam[1] * rho_nodal[T.v[1]] +
                   lam[2] * rho_nodal[T.v[2]] + lam[3] * rho_nodal[T.v[3]];
        Vec3 d = x - mom.centroid;
        second += rule.weights[q] * V * r * d * d.transpose();
      }
    }
    mom.quadrupole =
        3.0 * second - second.trace() * Eigen::Matrix3d::Identity();
  }
  return mom;
}

/// Core Poisson solve K v = 4 pi (load) with zero or multipole Dirichlet
/// data; returns the full nodal potential including boundary values.
inline Eigen::VectorXd solve_hartree_from_load(const KsContext& ctx,
                                               const Eigen::VectorXd& load_full,
                                               const ChargeMoments& moments,
                                               HartreeBcMode bc) {
  const Mesh& m = ctx.mesh();
  Eigen::VectorXd rhs = 4.0 * M_PI * ctx.restrictv(load_full);
  Eigen::VectorXd vb = Eigen::VectorXd::Zero(
      static_cast<int>(ctx.boundary_vertices().size()));
  if (bc == HartreeBcMode::Multipole) {
    const auto& bvs = ctx.boundary_vertices();
    for (size_t b = 0; b < bvs.size(); ++b)
      vb[static_cast<int>(b)] = moments.boundary_value(m.vertex(bvs[b]));
    rhs -= ctx.interior_boundary_coupling() * vb;
  }
  Eigen::VectorXd warm;
  if (ctx.hartree_warm().size() == rhs.size()) warm = ctx.hartree_warm();
  Eigen::VectorXd v_int =
      ctx.solve_poisson(rhs, warm.size() ? &warm : nullptr);
  ctx.hartree_warm() = v_int;
  Eigen::VectorXd v_full = ctx.expand(v_int);
  const auto& bvs = ctx.boundary_vertices();
  for (size_t b = 0; b < bvs.size(); ++b)
    v_full[bvs[b]] = vb[static_cast<int>(b)];
  return v_full;
}

/// Hartree potential of a nodal density: solves K v = 4 pi M rho with the
/// requested boundary conditions. Returns the full nodal field.
inline Eigen::VectorXd hartree_potential(const KsContext& ctx,
                                         const DensityField& rho,
                                         HartreeBcMode bc,
                                         int multipole_order = 0) {
  if (rho.nodal.size() != ctx.mesh().n_vertices())
    throw DimensionError("hartree_potential: density size mismatch");
  if (rho.nodal.minCoeff() < -1e-12)
    throw DomainError("hartree_potential: negative density");
  Eigen::VectorXd load = ctx.mass_full() * rho.nodal;
  ChargeMoments mom;
  if (bc == HartreeBcMode::Multipole)
    mom = charge_moments(ctx, rho.nodal, multipole_order);
  return solve_hartree_from_load(ctx, load, mom, bc);
}

/// Full evaluation of one state: energies, Hartree potential, densities,
/// and the operator products reused by the gradient.
struct KsEval {
  EnergyBreakdown energy;
  Eigen::VectorXd rho_nodal;       // all vertices
  Eigen::VectorXd v_hartree_full;  // all vertices (zero when disabled)
  Eigen::MatrixXd U_full;          // nv x N
  Eigen::MatrixXd KU_full;         // K U (full rows)
  Eigen::MatrixXd WU_full;         // W_ext U (full rows)
};

namespace detail {

/// One quadrature sweep over the mesh accumulating the Hartree load of the
/// pointwise (quadratic) density and, optionally, the xc energy.
inline void density_quadrature_pass(const KsContext& ctx,
                                    const Eigen::MatrixXd& U_full,
                                    const std::vector<double>& occ,
                                    bool want_xc, Eigen::VectorXd* load_out,
                                    double* exc_out) {
  const Mesh& m = ctx.mesh();
  const QuadratureRule& rule =
      QuadratureRule::of_degree(ctx.options().quad_degree);
  const int N = static_cast<int>(U_full.cols());
  Eigen::VectorXd load = Eigen::VectorXd::Zero(m.n_vertices());
  double exc = 0.0;
  for (int t = 0; t < m.n_tets(); ++t) {
    const Tet& T = m.tet(t);
    const double V = m.volume(t);
    for (size_t q = 0; q < rule.points.size(); ++q) {
      const auto& lam = rule.points[q];
      double rho_q = 0.0;
      for (int i = 0; i < N; ++i) {
        double ui = lam[0] * U_full(T.v[0], i) + lam[1] * U_full(T.v[1], i) +
                    lam[2] * U_full(T.v[2], i) + lam[3] * U_full(T.v[3], i);
        rho_q += occ[static_cast<size_t>(i)] * ui * ui;
      }
      const double wV = rule.weights[q] * V;
      if (load_out != nullptr) {
        for (int k = 0; k < 4; ++k)
          load[T.v[static_cast<size_t>(k)]] +=
              wV * lam[static_cast<size_t>(k)] * rho_q;
      }
      if (want_xc) exc += wV * xc_lda_eps(rho_q) * rho_q;
    }
  }
  if (load_out != nullptr) *load_out = std::move(load);
  if (exc_out != nullptr) *exc_out = exc;
}

}  // namespace detail

/// Total energy of an orbital set, with all pieces evaluated consistently
/// from the pointwise density so the gradient below is its exact
/// derivative (up to the far-field boundary data in multipole mode).
inline KsEval evaluate(const KsContext& ctx, const OrbitalSet& U) {
  const ModelOptions& opt = ctx.options();
  const int N = U.n_orbitals();
  std::vector<double> occ(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) occ[static_cast<size_t>(i)] = U.occupation(i);

  KsEval ev;
  ev.U_full = ctx.expand_cols(U.coeff);
  ev.KU_full = ctx.stiffness_full() * ev.U_full;
  ev.WU_full = ctx.external_matrix() * ev.U_full;

  ev.rho_nodal = Eigen::VectorXd::Zero(ctx.mesh().n_vertices());
  for (int i = 0; i < N; ++i)
    ev.rho_nodal +=
        occ[static_cast<size_t>(i)] * ev.U_full.col(i).cwiseProduct(ev.U_full.col(i));

  for (int i = 0; i < N; ++i) {
    const double f = occ[static_cast<size_t>(i)];
    ev.energy.kinetic += 0.5 * f * ev.U_full.col(i).dot(ev.KU_full.col(i));
    ev.energy.external += f * ev.U_full.col(i).dot(ev.WU_full.col(i));
  }

  Eigen::VectorXd load;
  double exc = 0.0;
  const bool need_pass = opt.hartree_enabled || opt.xc_enabled;
  if (need_pass)
    detail::density_quadrature_pass(ctx, ev.U_full, occ, opt.xc_enabled,
                                    opt.hartree_enabled ? &load : nullptr,
                                    opt.xc_enabled ? &exc : nullptr);

  if (opt.hartree_enabled) {
    ChargeMoments mom;
    if (opt.hartree_bc == HartreeBcMode::Multipole)
      mom = charge_moments(ctx, ev.rho_nodal, opt.multipole_order);
    ev.v_hartree_full =
        solve_hartree_from_load(ctx, load, mom, opt.hartree_bc);
    ev.energy.hartree = 0.5 * ev.v_hartree_full.dot(load);
  } else {
    ev.v_hartree_full = Eigen::VectorXd::Zero(ctx.mesh().n_vertices());
  }
  if (opt.xc_enabled) ev.energy.xc = exc;
  ev.energy.nuclear = nuclear_repulsion(ctx.molecule());
  ev.energy.finalize();
  return ev;
}

inline EnergyBreakdown total_energy(const KsContext& ctx,
                                    const OrbitalSet& U) {
  return evaluate(ctx, U).energy;
}

/// Load-vector (dual) representation of the energy gradient: column i is
/// the exact derivative dE/du_i = f_i (K + 2 W_ext + 2 W_dyn) u_i, where
/// W_dyn carries the Hartree and xc potentials of the current density.
inline Eigen::MatrixXd gradient_load(const KsContext& ctx, const OrbitalSet& U,
                                     const KsEval& ev) {
  const ModelOptions& opt = ctx.options();
  const int N = U.n_orbitals();
  const Mesh& m = ctx.mesh();

  Eigen::MatrixXd G_full = ev.KU_full + 2.0 * ev.WU_full;

  if (opt.hartree_enabled || opt.xc_enabled) {
    const Eigen::MatrixXd& U_full = ev.U_full;
    std::vector<double> occ(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) occ[static_cast<size_t>(i)] = U.occupation(i);
    const Eigen::VectorXd& vh = ev.v_hartree_full;
    const bool use_h = opt.hartree_enabled;
    const bool use_xc = opt.xc_enabled;
    auto weight = [&](int t, const Vec3&, const std::array<double, 4>& lam) {
      const Tet& T = m.tet(t);
      double w = 0.0;
      if (use_h)
        w += lam[0] * vh[T.v[0]] + lam[1] * vh[T.v[1]] + lam[2] * vh[T.v[2]] +
             lam[3] * vh[T.v[3]];
      if (use_xc) {
        double rho_q = 0.0;
        for (int i = 0; i < N; ++i) {
          double ui = lam[0] * U_full(T.v[0], i) + lam[1] * U_full(T.v[1], i) +
                      lam[2] * U_full(T.v[2], i) + lam[3] * U_full(T.v[3], i);
          rho_q += occ[static_cast<size_t>(i)] * ui * ui;
        }
        w += xc_lda(rho_q).v;
      }
      return w;
    };
    // Same base rule as the energy pass keeps the gradient the exact dual.
    QuadratureSelector base{opt.quad_degree, opt.quad_degree, {}};
    SparseOperator& W_dyn = ctx.dynamic_weight_buffer();
    assemble_weighted_mass_into(ctx.assembler(), W_dyn, weight, base);
    G_full += 2.0 * (W_dyn * ev.U_full);
  }

  for (int i = 0; i < N; ++i) G_full.col(i) *= U.occupation(i);
  return ctx.restrict_cols(G_full);
}

inline Eigen::MatrixXd gradient_load(const KsContext& ctx,
                                     const OrbitalSet& U) {
  KsEval ev = evaluate(ctx, U);
  return gradient_load(ctx, U, ev);
}

/// Riesz representatives g = M^-1 G of a gradient load (N mass solves,
/// warm-started across calls).
inline Eigen::MatrixXd riesz_representatives(const KsContext& ctx,
                                             const Eigen::MatrixXd& G) {
  Eigen::MatrixXd g(G.rows(), G.cols());
  Eigen::MatrixXd& warm = ctx.riesz_warm();
  const bool have_warm = warm.rows() == G.rows() && warm.cols() == G.cols();
  for (int i = 0; i < G.cols(); ++i) {
    Eigen::VectorXd w;
    if (have_warm) w = warm.col(i);
    g.col(i) = ctx.solve_mass(G.col(i), have_warm ? &w : nullptr);
  }
  warm = g;
  return g;
}

/// Discrete L2 norm of the Grassmann gradient: with Riesz columns
/// g = M^-1 G, the residual is R = g - U (G^T U) and the returned value is
/// sqrt(tr(R^T M R)).
inline double grassmann_residual(const KsContext& ctx, const OrbitalSet& U,
                                 const Eigen::MatrixXd& G,
                                 const Eigen::MatrixXd* g_precomputed =
                                     nullptr) {
  Eigen::MatrixXd g =
      g_precomputed != nullptr ? *g_precomputed : riesz_representatives(ctx, G);
  Eigen::MatrixXd R = g - U.coeff * (G.transpose() * U.coeff);
  Eigen::MatrixXd MR = ctx.mass_interior() * R;
  double norm2 = (R.transpose() * MR).trace();
  return std::sqrt(std::max(norm2, 0.0));
}

}  // namespace ksflow

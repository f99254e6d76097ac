#pragma once

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>

#include <cmath>
#include <utility>
#include <vector>

#include "ksflow/errors.hpp"
#include "ksflow/mesh.hpp"
#include "ksflow/quadrature.hpp"

namespace ksflow {

/// Symmetric sparse operator in compressed-row storage.
using SparseOperator = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Bijection between interior (non-Dirichlet) vertices and compact dof
/// indices; boundary vertices carry no dof (homogeneous Dirichlet space).
struct DofMap {
  std::vector<int> vertex_to_interior;  // -1 for boundary vertices
  std::vector<int> interior_to_vertex;
  int n_interior = 0;

  static DofMap build(const Mesh& mesh) {
    DofMap d;
    d.vertex_to_interior.assign(static_cast<size_t>(mesh.n_vertices()), -1);
    for (int v = 0; v < mesh.n_vertices(); ++v) {
      if (!mesh.is_boundary(v)) {
        d.vertex_to_interior[static_cast<size_t>(v)] = d.n_interior++;
        d.interior_to_vertex.push_back(v);
      }
    }
    return d;
  }
};

/// Volume and constant P1 basis gradients of one tet.
struct ElementGeometry {
  double volume = 0.0;
  std::array<Vec3, 4> grad;
};

inline ElementGeometry element_geometry(const Mesh& mesh, int t) {
  const Tet& T = mesh.tet(t);
  const Vec3& a = mesh.vertex(T.v[0]);
  Eigen::Matrix3d J;
  J.col(0) = mesh.vertex(T.v[1]) - a;
  J.col(1) = mesh.vertex(T.v[2]) - a;
  J.col(2) = mesh.vertex(T.v[3]) - a;
  Eigen::Matrix3d Jinv = J.inverse();
  ElementGeometry g;
  g.volume = std::abs(J.determinant()) / 6.0;
  for (int k = 0; k < 3; ++k) g.grad[static_cast<size_t>(k) + 1] = Jinv.row(k);
  g.grad[0] = -(g.grad[1] + g.grad[2] + g.grad[3]);
  return g;
}

/// Sparsity skeleton of vertex-coupled P1 operators for one mesh, with a
/// per-element scatter table so repeated assemblies reuse the structure.
class Assembler {
 public:
  explicit Assembler(const Mesh& mesh) : mesh_(&mesh) {
    const int nv = mesh.n_vertices();
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<size_t>(mesh.n_tets()) * 16);
    for (int t = 0; t < mesh.n_tets(); ++t) {
      const Tet& T = mesh.tet(t);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
          trips.emplace_back(T.v[static_cast<size_t>(i)],
                             T.v[static_cast<size_t>(j)], 0.0);
    }
    skeleton_.resize(nv, nv);
    skeleton_.setFromTriplets(trips.begin(), trips.end());
    skeleton_.makeCompressed();

    slots_.resize(static_cast<size_t>(mesh.n_tets()) * 16);
    const int* outer = skeleton_.outerIndexPtr();
    const int* inner = skeleton_.innerIndexPtr();
    for (int t = 0; t < mesh.n_tets(); ++t) {
      const Tet& T = mesh.tet(t);
      for (int i = 0; i < 4; ++i) {
        int row = T.v[static_cast<size_t>(i)];
        const int* begin = inner + outer[row];
        const int* end = inner + outer[row + 1];
        for (int j = 0; j < 4; ++j) {
          int col = T.v[static_cast<size_t>(j)];
          const int* it = std::lower_bound(begin, end, col);
          slots_[static_cast<size_t>(t) * 16 + static_cast<size_t>(i) * 4 +
                 static_cast<size_t>(j)] =
              static_cast<int>(it - inner);
        }
      }
    }
  }

  const Mesh& mesh() const { return *mesh_; }

  SparseOperator zeros() const { return skeleton_; }

  /// fn(t, elem) fills the symmetric 4x4 element matrix for tet t.
  template <class ElemFn>
  void assemble_into(SparseOperator& A, ElemFn&& fn) const {
    double* val = A.valuePtr();
    std::fill(val, val + A.nonZeros(), 0.0);
    Eigen::Matrix4d elem;
    for (int t = 0; t < mesh_->n_tets(); ++t) {
      fn(t, elem);
      const int* slot = slots_.data() + static_cast<size_t>(t) * 16;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
          val[slot[i * 4 + j]] += elem(i, j);
    }
  }

  template <class ElemFn>
  SparseOperator assemble(ElemFn&& fn) const {
    SparseOperator A = zeros();
    assemble_into(A, std::forward<ElemFn>(fn));
    return A;
  }

 private:
  const Mesh* mesh_;
  SparseOperator skeleton_;
  std::vector<int> slots_;
};

/// Full-vertex mass matrix from the exact P1 element formula
/// (|tau|/20 off-diagonal, |tau|/10 diagonal).
inline SparseOperator assemble_mass(const Assembler& as) {
  const Mesh& mesh = as.mesh();
  return as.assemble([&](int t, Eigen::Matrix4d& elem) {
    double V = mesh.volume(t);
    elem.setConstant(V / 20.0);
    elem.diagonal().setConstant(V / 10.0);
  });
}

inline SparseOperator assemble_mass(const Mesh& mesh) {
  return assemble_mass(Assembler(mesh));
}

/// Full-vertex stiffness matrix, exact for P1 (constant gradients).
inline SparseOperator assemble_stiffness(const Assembler& as) {
  const Mesh& mesh = as.mesh();
  return as.assemble([&](int t, Eigen::Matrix4d& elem) {
    ElementGeometry g = element_geometry(mesh, t);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        elem(i, j) = g.volume * g.grad[static_cast<size_t>(i)].dot(
                                    g.grad[static_cast<size_t>(j)]);
  });
}

inline SparseOperator assemble_stiffness(const Mesh& mesh) {
  return assemble_stiffness(Assembler(mesh));
}

/// Chooses the quadrature rule per element; `elevated` marks elements that
/// get the higher-order rule (near-singularity handling).
struct QuadratureSelector {
  int base_degree = 2;
  int elevated_degree = 4;
  std::vector<char> elevated;  // empty means base rule everywhere

  const QuadratureRule& rule_for(int t) const {
    if (!elevated.empty() && elevated[static_cast<size_t>(t)])
      return QuadratureRule::of_degree(elevated_degree);
    return QuadratureRule::of_degree(base_degree);
  }
};

/// Wraps an analytic scalar field into the weight interface
/// w(tet, x, barycentric).
template <class F>
auto analytic_weight(F&& f) {
  return [f = std::forward<F>(f)](int, const Vec3& x,
                                  const std::array<double, 4>&) {
    return f(x);
  };
}

/// P1 interpolation of a nodal field as a weight.
inline auto nodal_weight(const Mesh& mesh, const Eigen::VectorXd& nodal) {
  return [&mesh, &nodal](int t, const Vec3&, const std::array<double, 4>& lam) {
    const Tet& T = mesh.tet(t);
    return lam[0] * nodal[T.v[0]] + lam[1] * nodal[T.v[1]] +
           lam[2] * nodal[T.v[2]] + lam[3] * nodal[T.v[3]];
  };
}

/// Weighted mass matrix: entries int_tau w phi_i phi_j accumulated with the
/// selected quadrature rule per element.
template <class WeightFn>
void assemble_weighted_mass_into(const Assembler& as, SparseOperator& A,
                                 WeightFn&& w,
                                 const QuadratureSelector& sel = {}) {
  const Mesh& mesh = as.mesh();
  as.assemble_into(A, [&](int t, Eigen::Matrix4d& elem) {
    const QuadratureRule& rule = sel.rule_for(t);
    const Tet& T = mesh.tet(t);
    const Vec3& p0 = mesh.vertex(T.v[0]);
    const Vec3& p1 = mesh.vertex(T.v[1]);
    const Vec3& p2 = mesh.vertex(T.v[2]);
    const Vec3& p3 = mesh.vertex(T.v[3]);
    const double V = mesh.volume(t);
    elem.setZero();
    for (size_t q = 0; q < rule.points.size(); ++q) {
      const auto& lam = rule.points[q];
      Vec3 x = lam[0] * p0 + lam[1] * p1 + lam[2] * p2 + lam[3] * p3;
      double wq = w(t, x, lam);
      if (!std::isfinite(wq))
        throw AssemblyError(
            "assemble_weighted_mass: non-finite weight at a quadrature point");
      double scale = rule.weights[q] * V * wq;
      for (int i = 0; i < 4; ++i) {
        double li = scale * lam[static_cast<size_t>(i)];
        for (int j = 0; j < 4; ++j)
          elem(i, j) += li * lam[static_cast<size_t>(j)];
      }
    }
  });
}

template <class WeightFn>
SparseOperator assemble_weighted_mass(const Assembler& as, WeightFn&& w,
                                      const QuadratureSelector& sel = {}) {
  SparseOperator A = as.zeros();
  assemble_weighted_mass_into(as, A, std::forward<WeightFn>(w), sel);
  return A;
}

/// Load vector b_v = int f phi_v with the selected rule.
template <class WeightFn>
Eigen::VectorXd assemble_load(const Mesh& mesh, WeightFn&& f,
                              const QuadratureSelector& sel = {}) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(mesh.n_vertices());
  for (int t = 0; t < mesh.n_tets(); ++t) {
    const QuadratureRule& rule = sel.rule_for(t);
    const Tet& T = mesh.tet(t);
    const Vec3& p0 = mesh.vertex(T.v[0]);
    const Vec3& p1 = mesh.vertex(T.v[1]);
    const Vec3& p2 = mesh.vertex(T.v[2]);
    const Vec3& p3 = mesh.vertex(T.v[3]);
    const double V = mesh.volume(t);
    for (size_t q = 0; q < rule.points.size(); ++q) {
      const auto& lam = rule.points[q];
      Vec3 x = lam[0] * p0 + lam[1] * p1 + lam[2] * p2 + lam[3] * p3;
      double fq = f(t, x, lam);
      if (!std::isfinite(fq))
        throw AssemblyError(
            "assemble_load: non-finite integrand at a quadrature point");
      double scale = rule.weights[q] * V * fq;
      for (int i = 0; i < 4; ++i)
        b[T.v[static_cast<size_t>(i)]] += scale * lam[static_cast<size_t>(i)];
    }
  }
  return b;
}

/// Interior-interior and interior-boundary blocks of a full-vertex operator.
struct InteriorBlocks {
  SparseOperator ii;
  SparseOperator ib;
};

inline InteriorBlocks split_interior(const SparseOperator& full,
                                     const DofMap& dofs) {
  const int nv = static_cast<int>(dofs.vertex_to_interior.size());
  if (full.rows() != nv || full.cols() != nv)
    throw DimensionError("split_interior: operator does not match dof map");
  const int ni = dofs.n_interior;
  const int nb = nv - ni;
  std::vector<int> vertex_to_boundary(static_cast<size_t>(nv), -1);
  {
    int b = 0;
    for (int v = 0; v < nv; ++v)
      if (dofs.vertex_to_interior[static_cast<size_t>(v)] < 0)
        vertex_to_boundary[static_cast<size_t>(v)] = b++;
  }
  std::vector<Eigen::Triplet<double>> tii, tib;
  for (int row = 0; row < full.outerSize(); ++row) {
    int i = dofs.vertex_to_interior[static_cast<size_t>(row)];
    if (i < 0) continue;
    for (SparseOperator::InnerIterator it(full, row); it; ++it) {
      int j = dofs.vertex_to_interior[static_cast<size_t>(it.col())];
      if (j >= 0)
        tii.emplace_back(i, j, it.value());
      else
        tib.emplace_back(i, vertex_to_boundary[static_cast<size_t>(it.col())],
                         it.value());
    }
  }
  InteriorBlocks blocks;
  blocks.ii.resize(ni, ni);
  blocks.ii.setFromTriplets(tii.begin(), tii.end());
  blocks.ii.makeCompressed();
  blocks.ib.resize(ni, nb);
  blocks.ib.setFromTriplets(tib.begin(), tib.end());
  blocks.ib.makeCompressed();
  return blocks;
}

/// Gram matrix <U^T V> with entries u_i^T M v_j; the trace is the pairwise
/// L2 inner product of the orbital tuples.
inline Eigen::MatrixXd gram(const SparseOperator& M, const Eigen::MatrixXd& U,
                            const Eigen::MatrixXd& V) {
  if (M.rows() != U.rows() || M.cols() != V.rows())
    throw DimensionError("gram: dimension mismatch");
  return U.transpose() * (M * V);
}

/// Jacobi-preconditioned conjugate gradients for SPD systems; the contract
/// is ||Ax - b|| <= rel_tol ||b||.
class SpdSolver {
 public:
  explicit SpdSolver(const SparseOperator& A) : A_(&A) { cg_.compute(A); }

  Eigen::VectorXd solve(const Eigen::VectorXd& b, double rel_tol,
                        int max_iterations = -1,
                        const Eigen::VectorXd* guess = nullptr) const {
    if (rel_tol <= 0.0)
      throw DomainError("SpdSolver::solve: rel_tol must be positive");
    if (b.size() != A_->rows())
      throw DimensionError("SpdSolver::solve: rhs size mismatch");
    if (b.norm() == 0.0) return Eigen::VectorXd::Zero(b.size());
    cg_.setTolerance(rel_tol);
    cg_.setMaxIterations(max_iterations > 0 ? max_iterations
                                            : 10 * static_cast<int>(A_->rows()));
    Eigen::VectorXd x;
    if (guess != nullptr && guess->size() == b.size())
      x = cg_.solveWithGuess(b, *guess);
    else
      x = cg_.solve(b);
    if (cg_.info() != Eigen::Success)
      throw SolverStagnationError(
          "solve_spd: conjugate gradients stagnated (achieved " +
              std::to_string(cg_.error()) + " after " +
              std::to_string(cg_.iterations()) + " iterations)",
          cg_.error(), static_cast<int>(cg_.iterations()));
    return x;
  }

  double last_residual() const { return cg_.error(); }
  int last_iterations() const { return static_cast<int>(cg_.iterations()); }

 private:
  const SparseOperator* A_;
  mutable Eigen::ConjugateGradient<SparseOperator,
                                   Eigen::Lower | Eigen::Upper,
                                   Eigen::DiagonalPreconditioner<double>>
      cg_;
};

inline Eigen::VectorXd solve_spd(const SparseOperator& A,
                                 const Eigen::VectorXd& b, double rel_tol,
                                 int max_iterations = -1,
                                 const Eigen::VectorXd* guess = nullptr) {
  return SpdSolver(A).solve(b, rel_tol, max_iterations, guess);
}

/// Largest relative asymmetry over stored entries (diagnostic).
inline double symmetry_error(const SparseOperator& A) {
  SparseOperator D = SparseOperator(A - SparseOperator(A.transpose()));
  double num = 0.0;
  for (int k = 0; k < D.nonZeros(); ++k)
    num = std::max(num, std::abs(D.valuePtr()[k]));
  double den = 0.0;
  for (int k = 0; k < A.nonZeros(); ++k)
    den = std::max(den, std::abs(A.valuePtr()[k]));
  return den > 0 ? num / den : 0.0;
}

inline Eigen::VectorXd restrict_interior_vec(const Eigen::VectorXd& full,
                                             const DofMap& dofs) {
  Eigen::VectorXd out(dofs.n_interior);
  for (int i = 0; i < dofs.n_interior; ++i)
    out[i] = full[dofs.interior_to_vertex[static_cast<size_t>(i)]];
  return out;
}

inline Eigen::VectorXd expand_interior_vec(const Eigen::VectorXd& interior,
                                           const DofMap& dofs) {
  Eigen::VectorXd out =
      Eigen::VectorXd::Zero(static_cast<int>(dofs.vertex_to_interior.size()));
  for (int i = 0; i < dofs.n_interior; ++i)
    out[dofs.interior_to_vertex[static_cast<size_t>(i)]] = interior[i];
  return out;
}

}  // namespace ksflow

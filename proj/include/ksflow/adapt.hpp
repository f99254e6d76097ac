#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "ksflow/errors.hpp"
#include "ksflow/fem.hpp"
#include "ksflow/mesh.hpp"

namespace ksflow {

/// Recovered nodal gradient of a P1 field: per vertex, the volume-weighted
/// average of the constant element gradients over the incident tets.
inline Eigen::MatrixX3d recover_gradient(const Mesh& mesh,
                                         const Eigen::VectorXd& rho) {
  if (rho.size() != mesh.n_vertices())
    throw DimensionError("recover_gradient: field size mismatch");
  Eigen::MatrixX3d num = Eigen::MatrixX3d::Zero(mesh.n_vertices(), 3);
  Eigen::VectorXd den = Eigen::VectorXd::Zero(mesh.n_vertices());
  for (int t = 0; t < mesh.n_tets(); ++t) {
    const Tet& T = mesh.tet(t);
    ElementGeometry g = element_geometry(mesh, t);
    Vec3 grad = Vec3::Zero();
    for (int k = 0; k < 4; ++k)
      grad += rho[T.v[static_cast<size_t>(k)]] * g.grad[static_cast<size_t>(k)];
    for (int k = 0; k < 4; ++k) {
      num.row(T.v[static_cast<size_t>(k)]) += g.volume * grad.transpose();
      den[T.v[static_cast<size_t>(k)]] += g.volume;
    }
  }
  for (int v = 0; v < mesh.n_vertices(); ++v)
    if (den[v] > 0.0) num.row(v) /= den[v];
  return num;
}

struct IndicatorField {
  Eigen::VectorXd eta;
  double total = 0.0;
};

enum class IndicatorMode { Literal, ZZ };

/// Recovery-based error indicator on a density field.
///
/// Literal mode: eta_tau = h_tau * int_tau |grad R(grad rho)|^2 (the
/// recovered field is P1, its gradient a constant 3x3 per tet). ZZ mode:
/// eta_tau = int_tau |R(grad rho) - grad rho|^2.
inline IndicatorField indicator(const Mesh& mesh, const Eigen::VectorXd& rho,
                                IndicatorMode mode = IndicatorMode::Literal) {
  Eigen::MatrixX3d R = recover_gradient(mesh, rho);
  IndicatorField out;
  out.eta = Eigen::VectorXd::Zero(mesh.n_tets());
  for (int t = 0; t < mesh.n_tets(); ++t) {
    const Tet& T = mesh.tet(t);
    ElementGeometry g = element_geometry(mesh, t);
    if (mode == IndicatorMode::Literal) {
      // Jacobian of the recovered vector field (constant on the tet).
      Eigen::Matrix3d J = Eigen::Matrix3d::Zero();
      for (int k = 0; k < 4; ++k)
        J += g.grad[static_cast<size_t>(k)] *
             R.row(T.v[static_cast<size_t>(k)]);
      double h = mesh.longest_edge(t);
      out.eta[t] = h * g.volume * J.squaredNorm();
    } else {
      // Exact integral of the quadratic |R - grad rho|^2 via the P1 mass
      // pattern on nodal differences.
      Vec3 grad = Vec3::Zero();
      for (int k = 0; k < 4; ++k)
        grad += rho[T.v[static_cast<size_t>(k)]] *
                g.grad[static_cast<size_t>(k)];
      Eigen::Matrix<double, 4, 3> diff;
      for (int k = 0; k < 4; ++k)
        diff.row(k) = R.row(T.v[static_cast<size_t>(k)]) - grad.transpose();
      double acc = 0.0;
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 4; ++j)
            acc += diff(i, c) * diff(j, c) * (i == j ? 0.1 : 0.05);
      out.eta[t] = g.volume * acc;
    }
  }
  out.total = out.eta.sum();
  return out;
}

struct MarkSet {
  std::vector<int> marked;
  double theta = 0.5;
};

/// Greedy Doerfler marking: the shortest descending-eta prefix whose sum
/// reaches theta * total. Ties break by tet index; an identically zero
/// indicator yields an empty mark set.
inline MarkSet mark(const IndicatorField& eta, double theta) {
  if (!(theta > 0.0 && theta < 1.0))
    throw DomainError("mark: theta must lie in (0,1)");
  MarkSet out;
  out.theta = theta;
  if (eta.total <= 0.0) return out;

  std::vector<int> order(static_cast<size_t>(eta.eta.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (eta.eta[a] != eta.eta[b]) return eta.eta[a] > eta.eta[b];
    return a < b;
  });
  double target = theta * eta.total;
  double acc = 0.0;
  for (int t : order) {
    if (acc >= target) break;
    out.marked.push_back(t);
    acc += eta.eta[t];
  }
  std::sort(out.marked.begin(), out.marked.end());
  return out;
}

/// Per-level indicator dump: tet index, centroid, eta.
inline void write_indicator_csv(const Mesh& mesh, const IndicatorField& eta,
                                const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("write_indicator_csv: cannot open " + path);
  os << "tet,cx,cy,cz,eta\n";
  os.precision(17);
  for (int t = 0; t < mesh.n_tets(); ++t) {
    Vec3 c = mesh.centroid(t);
    os << t << "," << c[0] << "," << c[1] << "," << c[2] << "," << eta.eta[t]
       << "\n";
  }
}

}  // namespace ksflow

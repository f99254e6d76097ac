#pragma once

#include <vector>

#include "ksflow/errors.hpp"
#include "ksflow/mesh.hpp"

namespace ksflow {

struct Nucleus {
  Vec3 position = Vec3::Zero();
  double charge = 1.0;
};

/// Nuclear frame plus orbital bookkeeping. Occupations default to 2
/// (closed-shell spin pairing).
struct Molecule {
  std::vector<Nucleus> nuclei;
  int n_orbitals = 1;
  std::vector<double> occupations;

  double occupation(int i) const {
    if (occupations.empty()) return 2.0;
    return occupations[static_cast<size_t>(i)];
  }

  void validate(const Vec3& lo, const Vec3& hi) const {
    if (n_orbitals < 1)
      throw DomainError("Molecule: need at least one orbital");
    if (!occupations.empty() &&
        static_cast<int>(occupations.size()) != n_orbitals)
      throw DomainError("Molecule: occupations must match n_orbitals");
    for (double f : occupations)
      if (!(f > 0.0)) throw DomainError("Molecule: occupations must be positive");
    for (const Nucleus& nuc : nuclei) {
      if (!(nuc.charge > 0.0))
        throw DomainError("Molecule: nuclear charges must be positive");
      for (int d = 0; d < 3; ++d)
        if (!(nuc.position[d] > lo[d] && nuc.position[d] < hi[d]))
          throw DomainError("Molecule: nucleus outside the domain");
    }
  }
};

/// Pairwise nuclear repulsion sum_{j<k} Z_j Z_k / |R_j - R_k|.
inline double nuclear_repulsion(const Molecule& mol) {
  double e = 0.0;
  for (size_t j = 0; j < mol.nuclei.size(); ++j)
    for (size_t k = j + 1; k < mol.nuclei.size(); ++k)
      e += mol.nuclei[j].charge * mol.nuclei[k].charge /
           (mol.nuclei[j].position - mol.nuclei[k].position).norm();
  return e;
}

/// Coulomb external potential -sum_k Z_k/|x - R_k| with the distance
/// capped below at r_min to guard floating point at the singularities.
struct CoulombPotential {
  std::vector<Nucleus> nuclei;
  double r_min = 1e-8;

  double operator()(const Vec3& x) const {
    double v = 0.0;
    for (const Nucleus& nuc : nuclei)
      v -= nuc.charge / std::max((x - nuc.position).norm(), r_min);
    return v;
  }
};

}  // namespace ksflow

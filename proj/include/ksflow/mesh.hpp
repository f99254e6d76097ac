#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ksflow/errors.hpp"

namespace ksflow {

using Vec3 = Eigen::Vector3d;

/// Tetrahedron with the vertex ordering used by tagged bisection.
/// The refinement edge is (v[0], v[tag]) with tag in {1,2,3}; `flipped`
/// tracks the orientation parity of the stored order relative to the
/// positively oriented convention.
struct Tet {
  std::array<int, 4> v;
  int tag = 3;
  bool flipped = false;
};

struct ConformityReport {
  bool conforming = true;
  std::string detail;
};

namespace detail {
inline std::uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b);
}
inline std::uint64_t next_mesh_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

/// Conforming tetrahedral mesh of an axis-aligned box. Instances are
/// immutable after construction; refinement produces a new mesh whose
/// vertex indices extend those of its parent, so nodal fields transfer
/// exactly through the midpoint genealogy.
class Mesh {
 public:
  Mesh(std::vector<Vec3> vertices, std::vector<Tet> tets,
       std::vector<std::array<int, 2>> parent_edges, Vec3 lo, Vec3 hi,
       int level, std::vector<std::uint64_t> ancestry)
      : vertices_(std::move(vertices)),
        tets_(std::move(tets)),
        parent_edge_(std::move(parent_edges)),
        lo_(std::move(lo)),
        hi_(std::move(hi)),
        level_(level),
        id_(detail::next_mesh_id()),
        ancestry_(std::move(ancestry)) {
    rebuild_boundary_flags();
  }

  int n_vertices() const { return static_cast<int>(vertices_.size()); }
  int n_tets() const { return static_cast<int>(tets_.size()); }
  const Vec3& vertex(int v) const { return vertices_[static_cast<size_t>(v)]; }
  const std::vector<Vec3>& vertices() const { return vertices_; }
  const Tet& tet(int t) const { return tets_[static_cast<size_t>(t)]; }
  const std::vector<Tet>& tets() const { return tets_; }
  bool is_boundary(int v) const { return boundary_[static_cast<size_t>(v)]; }
  const std::vector<bool>& boundary_flags() const { return boundary_; }
  /// Provenance of a vertex: {-1,-1} for original lattice vertices,
  /// otherwise the endpoints of the bisected edge it is the midpoint of.
  const std::array<int, 2>& parent_edge(int v) const {
    return parent_edge_[static_cast<size_t>(v)];
  }
  const Vec3& lo() const { return lo_; }
  const Vec3& hi() const { return hi_; }
  int level() const { return level_; }
  std::uint64_t id() const { return id_; }

  bool descends_from(const Mesh& ancestor) const {
    if (ancestor.id_ == id_) return true;
    for (auto a : ancestry_)
      if (a == ancestor.id_) return true;
    return false;
  }
  std::vector<std::uint64_t> ancestry_plus_self() const {
    auto out = ancestry_;
    out.push_back(id_);
    return out;
  }

  std::array<int, 2> refinement_edge(int t) const {
    const Tet& T = tets_[static_cast<size_t>(t)];
    return {T.v[0], T.v[static_cast<size_t>(T.tag)]};
  }

  /// Signed volume under the mesh orientation convention (positive for all
  /// tets of a valid mesh).
  double signed_volume(int t) const {
    const Tet& T = tets_[static_cast<size_t>(t)];
    const Vec3& a = vertex(T.v[0]);
    Eigen::Matrix3d J;
    J.col(0) = vertex(T.v[1]) - a;
    J.col(1) = vertex(T.v[2]) - a;
    J.col(2) = vertex(T.v[3]) - a;
    double s = J.determinant() / 6.0;
    return T.flipped ? -s : s;
  }
  double volume(int t) const { return std::abs(signed_volume(t)); }

  double longest_edge(int t) const {
    const Tet& T = tets_[static_cast<size_t>(t)];
    double m = 0.0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        m = std::max(m, (vertex(T.v[i]) - vertex(T.v[j])).norm());
    return m;
  }

  Vec3 centroid(int t) const {
    const Tet& T = tets_[static_cast<size_t>(t)];
    return 0.25 * (vertex(T.v[0]) + vertex(T.v[1]) + vertex(T.v[2]) +
                   vertex(T.v[3]));
  }

  /// Barycentric coordinates of x with respect to tet t.
  std::array<double, 4> barycentric(int t, const Vec3& x) const {
    const Tet& T = tets_[static_cast<size_t>(t)];
    const Vec3& a = vertex(T.v[0]);
    Eigen::Matrix3d J;
    J.col(0) = vertex(T.v[1]) - a;
    J.col(1) = vertex(T.v[2]) - a;
    J.col(2) = vertex(T.v[3]) - a;
    Vec3 lam = J.partialPivLu().solve(x - a);
    return {1.0 - lam[0] - lam[1] - lam[2], lam[0], lam[1], lam[2]};
  }

  /// Containment test with a barycentric-coordinate tolerance.
  bool tet_contains(int t, const Vec3& x, double tol = 1e-12) const {
    auto l = barycentric(t, x);
    for (double li : l)
      if (li < -tol) return false;
    return true;
  }

  /// Linear scan point location; returns -1 if x lies outside the mesh.
  int locate_tet(const Vec3& x) const {
    for (int t = 0; t < n_tets(); ++t)
      if (tet_contains(t, x)) return t;
    return -1;
  }

  double min_dihedral_angle(int t) const;

 private:
  void rebuild_boundary_flags() {
    constexpr double tol = 1e-12;
    boundary_.assign(vertices_.size(), false);
    for (size_t v = 0; v < vertices_.size(); ++v) {
      const Vec3& p = vertices_[v];
      for (int d = 0; d < 3; ++d) {
        if (std::abs(p[d] - lo_[d]) <= tol || std::abs(p[d] - hi_[d]) <= tol) {
          boundary_[v] = true;
          break;
        }
      }
    }
  }

  std::vector<Vec3> vertices_;
  std::vector<Tet> tets_;
  std::vector<bool> boundary_;
  std::vector<std::array<int, 2>> parent_edge_;
  Vec3 lo_, hi_;
  int level_ = 0;
  std::uint64_t id_;
  std::vector<std::uint64_t> ancestry_;
};

inline double Mesh::min_dihedral_angle(int t) const {
  const Tet& T = tets_[static_cast<size_t>(t)];
  // Inward face normals; the dihedral along the edge shared by faces (i,j)
  // is pi minus the angle between their normals.
  std::array<Vec3, 4> n;
  for (int i = 0; i < 4; ++i) {
    std::array<int, 3> f;
    int k = 0;
    for (int j = 0; j < 4; ++j)
      if (j != i) f[static_cast<size_t>(k++)] = T.v[static_cast<size_t>(j)];
    Vec3 a = vertex(f[0]), b = vertex(f[1]), c = vertex(f[2]);
    Vec3 nn = (b - a).cross(c - a);
    if (nn.dot(vertex(T.v[static_cast<size_t>(i)]) - a) < 0) nn = -nn;
    n[static_cast<size_t>(i)] = nn.normalized();
  }
  double min_angle = std::numeric_limits<double>::max();
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      double c = std::clamp(-n[static_cast<size_t>(i)].dot(
                                n[static_cast<size_t>(j)]),
                            -1.0, 1.0);
      min_angle = std::min(min_angle, std::acos(c));
    }
  return min_angle;
}

/// Kuhn triangulation of a box split into n^3 cubes, 6 tets per cube.
/// Every tet runs along a monotone lattice path from the cube's low corner
/// to its high corner, tagged for bisection at the main diagonal first;
/// translated copies of the same pattern keep the triangulation conforming
/// and bisection-compatible.
inline Mesh build_box_mesh(const Vec3& lo, const Vec3& hi, int n) {
  for (int d = 0; d < 3; ++d)
    if (!(hi[d] > lo[d]))
      throw InvalidDomainError("build_box_mesh: box is degenerate (hi <= lo)");
  if (n < 1) throw InvalidDomainError("build_box_mesh: need n >= 1");

  const int m = n + 1;
  std::vector<Vec3> vertices;
  vertices.reserve(static_cast<size_t>(m) * m * m);
  Vec3 h = (hi - lo) / n;
  for (int k = 0; k < m; ++k)
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < m; ++i)
        vertices.emplace_back(lo[0] + i * h[0], lo[1] + j * h[1],
                              lo[2] + k * h[2]);

  auto vid = [m](int i, int j, int k) { return i + m * (j + m * k); };

  static const std::array<std::array<int, 3>, 6> perms = {
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

  std::vector<Tet> tets;
  tets.reserve(static_cast<size_t>(n) * n * n * 6);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        for (const auto& p : perms) {
          std::array<int, 3> c = {i, j, k};
          Tet T;
          T.v[0] = vid(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            c[static_cast<size_t>(p[static_cast<size_t>(s)])] += 1;
            T.v[static_cast<size_t>(s) + 1] = vid(c[0], c[1], c[2]);
          }
          T.tag = 3;
          // Parity of the axis permutation fixes the orientation sign.
          int inv = (p[0] > p[1]) + (p[0] > p[2]) + (p[1] > p[2]);
          T.flipped = (inv % 2) != 0;
          tets.push_back(T);
        }
      }

  std::vector<std::array<int, 2>> parents(vertices.size(),
                                          std::array<int, 2>{-1, -1});
  return Mesh(std::move(vertices), std::move(tets), std::move(parents), lo, hi,
              0, {});
}

/// Bisects every marked tet at least once and restores conformity by
/// recursively bisecting incompatible neighbors. The result is nested in
/// the input: every new vertex is the midpoint of an existing edge.
inline Mesh bisect(const Mesh& mesh, const std::vector<int>& marked,
                   int max_closure_depth = 50) {
  struct WorkTet {
    std::array<int, 4> v;
    int tag;
    bool flipped;
    bool alive;
  };

  std::vector<Vec3> verts(mesh.vertices());
  // Inherited vertices keep their provenance so that nodal transfer works
  // across any number of generations.
  std::vector<std::array<int, 2>> parents;
  parents.reserve(verts.size());
  for (int v = 0; v < mesh.n_vertices(); ++v)
    parents.push_back(mesh.parent_edge(v));

  std::vector<WorkTet> tets;
  tets.reserve(static_cast<size_t>(mesh.n_tets()) * 2);
  for (const Tet& T : mesh.tets())
    tets.push_back(WorkTet{T.v, T.tag, T.flipped, true});

  std::vector<std::vector<int>> v2t(verts.size());
  for (size_t t = 0; t < tets.size(); ++t)
    for (int v : tets[t].v) v2t[static_cast<size_t>(v)].push_back(static_cast<int>(t));

  std::unordered_map<std::uint64_t, int> midpoint;

  auto sharing_edge = [&](int a, int b, std::vector<int>& out) {
    out.clear();
    for (int t : v2t[static_cast<size_t>(a)]) {
      if (!tets[static_cast<size_t>(t)].alive) continue;
      const auto& tv = tets[static_cast<size_t>(t)].v;
      if (tv[0] == b || tv[1] == b || tv[2] == b || tv[3] == b)
        out.push_back(t);
    }
  };

  auto get_midpoint = [&](int a, int b) {
    auto key = detail::edge_key(a, b);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    int z = static_cast<int>(verts.size());
    verts.push_back(0.5 * (verts[static_cast<size_t>(a)] +
                           verts[static_cast<size_t>(b)]));
    parents.push_back({a, b});
    v2t.emplace_back();
    midpoint.emplace(key, z);
    return z;
  };

  auto split_one = [&](int t, int z) {
    WorkTet& P = tets[static_cast<size_t>(t)];
    P.alive = false;
    const int d = P.tag;
    const int d2 = (d == 1) ? 3 : d - 1;

    WorkTet c1{P.v, d2, P.flipped, true};
    c1.v[static_cast<size_t>(d)] = z;

    WorkTet c2;
    c2.tag = d2;
    c2.flipped = P.flipped != (d != 2);
    c2.alive = true;
    int k = 0;
    for (int s = 1; s <= d; ++s) c2.v[static_cast<size_t>(k++)] = P.v[static_cast<size_t>(s)];
    c2.v[static_cast<size_t>(k++)] = z;
    for (int s = d + 1; s <= 3; ++s) c2.v[static_cast<size_t>(k++)] = P.v[static_cast<size_t>(s)];

    for (const WorkTet& c : {c1, c2}) {
      int idx = static_cast<int>(tets.size());
      tets.push_back(c);
      for (int v : c.v) v2t[static_cast<size_t>(v)].push_back(idx);
    }
  };

  std::vector<int> patch;
  auto ensure_split = [&](auto&& self, int t, int depth) -> void {
    if (depth > max_closure_depth)
      throw RefinementFailureError(
          "bisect: conformity closure exceeded depth bound " +
          std::to_string(max_closure_depth));
    while (tets[static_cast<size_t>(t)].alive) {
      const WorkTet& T = tets[static_cast<size_t>(t)];
      const int a = T.v[0];
      const int b = T.v[static_cast<size_t>(T.tag)];
      sharing_edge(a, b, patch);
      int incompatible = -1;
      for (int s : patch) {
        const WorkTet& S = tets[static_cast<size_t>(s)];
        // Compatible iff S's refinement edge equals {a,b} as a set.
        int ra = S.v[0], rb = S.v[static_cast<size_t>(S.tag)];
        if (!((ra == a && rb == b) || (ra == b && rb == a))) {
          incompatible = s;
          break;
        }
      }
      if (incompatible >= 0) {
        self(self, incompatible, depth + 1);
        continue;  // patch changed; rescan
      }
      // Whole patch agrees on the refinement edge: split it atomically.
      std::vector<int> to_split = patch;
      int z = get_midpoint(a, b);
      for (int s : to_split)
        if (tets[static_cast<size_t>(s)].alive) split_one(s, z);
    }
  };

  for (int t : marked) {
    if (t < 0 || t >= mesh.n_tets())
      throw DimensionError("bisect: marked tet index out of range");
    if (tets[static_cast<size_t>(t)].alive) ensure_split(ensure_split, t, 0);
  }

  std::vector<Tet> out;
  out.reserve(tets.size());
  for (const WorkTet& T : tets)
    if (T.alive) out.push_back(Tet{T.v, T.tag, T.flipped});

  return Mesh(std::move(verts), std::move(out), std::move(parents), mesh.lo(),
              mesh.hi(), mesh.level() + 1, mesh.ancestry_plus_self());
}

struct ElementSizeField {
  std::vector<double> h;
  double min_h = 0.0;
  double max_h = 0.0;
};

/// Per-tet diameter (longest edge length).
inline ElementSizeField element_sizes(const Mesh& mesh) {
  ElementSizeField f;
  f.h.resize(static_cast<size_t>(mesh.n_tets()));
  f.min_h = std::numeric_limits<double>::max();
  f.max_h = 0.0;
  for (int t = 0; t < mesh.n_tets(); ++t) {
    double h = mesh.longest_edge(t);
    f.h[static_cast<size_t>(t)] = h;
    f.min_h = std::min(f.min_h, h);
    f.max_h = std::max(f.max_h, h);
  }
  return f;
}

/// Exact P1 nodal interpolation from an ancestor mesh onto a descendant:
/// inherited vertices copy their values, midpoints average their parent
/// edge endpoints (recursively through the genealogy).
inline std::vector<double> transfer_nodal(const std::vector<double>& field,
                                          const Mesh& coarse,
                                          const Mesh& fine) {
  if (static_cast<int>(field.size()) != coarse.n_vertices())
    throw DimensionError("transfer_nodal: field size does not match mesh");
  if (!fine.descends_from(coarse))
    throw LineageError("transfer_nodal: fine mesh is not a descendant");

  std::vector<double> out(static_cast<size_t>(fine.n_vertices()));
  const int nc = coarse.n_vertices();
  for (int v = 0; v < fine.n_vertices(); ++v) {
    if (v < nc) {
      out[static_cast<size_t>(v)] = field[static_cast<size_t>(v)];
    } else {
      auto pe = fine.parent_edge(v);
      out[static_cast<size_t>(v)] = 0.5 * (out[static_cast<size_t>(pe[0])] +
                                           out[static_cast<size_t>(pe[1])]);
    }
  }
  return out;
}

/// Evaluate a P1 nodal field at an arbitrary point (linear-scan location).
inline double eval_p1(const Mesh& mesh, const std::vector<double>& nodal,
                      const Vec3& x) {
  int t = mesh.locate_tet(x);
  if (t < 0) throw DomainError("eval_p1: point outside mesh");
  auto lam = mesh.barycentric(t, x);
  const Tet& T = mesh.tet(t);
  double s = 0.0;
  for (int i = 0; i < 4; ++i)
    s += lam[static_cast<size_t>(i)] * nodal[static_cast<size_t>(T.v[static_cast<size_t>(i)])];
  return s;
}

/// Mesh validity audit. The cheap pass checks face incidence counts and
/// orientation; the exhaustive pass additionally verifies that no vertex
/// lies inside the closure of a tet it does not belong to (no hanging
/// nodes), realizing the pairwise-intersection check.
inline ConformityReport audit_conformity(const Mesh& mesh,
                                         bool exhaustive = false) {
  ConformityReport rep;
  constexpr double tol = 1e-12;

  for (int t = 0; t < mesh.n_tets(); ++t) {
    if (mesh.signed_volume(t) <= 0.0) {
      rep.conforming = false;
      rep.detail = "tet " + std::to_string(t) + " has non-positive volume";
      return rep;
    }
  }

  std::map<std::array<int, 3>, int> face_count;
  for (int t = 0; t < mesh.n_tets(); ++t) {
    const Tet& T = mesh.tet(t);
    static const std::array<std::array<int, 3>, 4> fidx = {
        {{1, 2, 3}, {0, 2, 3}, {0, 1, 3}, {0, 1, 2}}};
    for (const auto& f : fidx) {
      std::array<int, 3> face = {T.v[static_cast<size_t>(f[0])],
                                 T.v[static_cast<size_t>(f[1])],
                                 T.v[static_cast<size_t>(f[2])]};
      std::sort(face.begin(), face.end());
      face_count[face] += 1;
    }
  }
  for (const auto& [face, c] : face_count) {
    if (c > 2) {
      rep.conforming = false;
      rep.detail = "face shared by more than two tets";
      return rep;
    }
    if (c == 1) {
      // A once-counted face must lie on a box plane.
      bool on_plane = false;
      for (int d = 0; d < 3 && !on_plane; ++d) {
        for (double plane : {mesh.lo()[d], mesh.hi()[d]}) {
          bool all = true;
          for (int v : face)
            if (std::abs(mesh.vertex(v)[d] - plane) > tol) all = false;
          if (all) {
            on_plane = true;
            break;
          }
        }
      }
      if (!on_plane) {
        rep.conforming = false;
        rep.detail = "interior face with a single incident tet (hanging)";
        return rep;
      }
    }
  }

  if (exhaustive) {
    for (int t = 0; t < mesh.n_tets(); ++t) {
      const Tet& T = mesh.tet(t);
      double h = mesh.longest_edge(t);
      for (int v = 0; v < mesh.n_vertices(); ++v) {
        if (v == T.v[0] || v == T.v[1] || v == T.v[2] || v == T.v[3]) continue;
        auto lam = mesh.barycentric(t, mesh.vertex(v));
        bool inside = true;
        for (double l : lam)
          if (l < -1e-9 / std::max(1.0, h)) inside = false;
        if (inside) {
          rep.conforming = false;
          rep.detail = "vertex " + std::to_string(v) +
                       " hangs inside the closure of tet " + std::to_string(t);
          return rep;
        }
      }
    }
  }
  return rep;
}

/// Rounds of bisection around the given centers. radius == 0 marks only
/// tets whose closure contains a center; radius > 0 additionally marks
/// tets with a vertex inside the ball.
inline Mesh refine_near(const Mesh& mesh, const std::vector<Vec3>& centers,
                        int rounds, double radius = 0.0) {
  Mesh current = mesh;
  for (int r = 0; r < rounds; ++r) {
    std::vector<int> marked;
    for (int t = 0; t < current.n_tets(); ++t) {
      bool mark = false;
      for (const Vec3& c : centers) {
        if (current.tet_contains(t, c, 1e-9)) {
          mark = true;
          break;
        }
        if (radius > 0.0) {
          const Tet& T = current.tet(t);
          for (int i = 0; i < 4 && !mark; ++i)
            if ((current.vertex(T.v[static_cast<size_t>(i)]) - c).norm() <= radius) mark = true;
          if (mark) break;
        }
      }
      if (mark) marked.push_back(t);
    }
    if (marked.empty()) break;
    current = bisect(current, marked);
  }
  return current;
}

/// Legacy ASCII VTK unstructured-grid export; optionally attaches one
/// point-data scalar field.
inline void write_vtk(const Mesh& mesh, const std::string& path,
                      const std::string& scalar_name = "",
                      const std::vector<double>* scalars = nullptr) {
  std::ofstream os(path);
  if (!os) throw IoError("write_vtk: cannot open " + path);
  os << "# vtk DataFile Version 3.0\n";
  os << "ksflow mesh\n";
  os << "ASCII\n";
  os << "DATASET UNSTRUCTURED_GRID\n";
  os << "POINTS " << mesh.n_vertices() << " double\n";
  os.precision(17);
  for (int v = 0; v < mesh.n_vertices(); ++v) {
    const Vec3& p = mesh.vertex(v);
    os << p[0] << " " << p[1] << " " << p[2] << "\n";
  }
  os << "CELLS " << mesh.n_tets() << " " << mesh.n_tets() * 5 << "\n";
  for (int t = 0; t < mesh.n_tets(); ++t) {
    const Tet& T = mesh.tet(t);
    os << "4 " << T.v[0] << " " << T.v[1] << " " << T.v[2] << " " << T.v[3]
       << "\n";
  }
  os << "CELL_TYPES " << mesh.n_tets() << "\n";
  for (int t = 0; t < mesh.n_tets(); ++t) os << "10\n";
  if (scalars != nullptr) {
    if (static_cast<int>(scalars->size()) != mesh.n_vertices())
      throw DimensionError("write_vtk: scalar field size mismatch");
    os << "POINT_DATA " << mesh.n_vertices() << "\n";
    os << "SCALARS " << scalar_name << " double 1\n";
    os << "LOOKUP_TABLE default\n";
    for (double s : *scalars) os << s << "\n";
  }
  if (!os) throw IoError("write_vtk: write failed for " + path);
}

}  // namespace ksflow

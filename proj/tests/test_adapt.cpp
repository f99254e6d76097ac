#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <random>

#include "ksflow/adapt.hpp"
#include "ksflow/flow.hpp"

using namespace ksflow;

namespace {

Eigen::VectorXd nodal_field(const Mesh& m, double (*f)(const Vec3&)) {
  Eigen::VectorXd out(m.n_vertices());
  for (int v = 0; v < m.n_vertices(); ++v) out[v] = f(m.vertex(v));
  return out;
}

}  // namespace

TEST_CASE("recovered gradient reproduces affine fields", "[adapt]") {
  Mesh m = build_box_mesh(Vec3(-1, -1, -1), Vec3(1, 1, 1), 3);
  m = bisect(m, {0, 7, 23});
  Eigen::VectorXd rho = nodal_field(
      m, [](const Vec3& p) { return 2.0 + 0.5 * p[0] - 1.5 * p[1] + p[2]; });
  Eigen::MatrixX3d R = recover_gradient(m, rho);
  for (int v = 0; v < m.n_vertices(); ++v) {
    CHECK(R(v, 0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(R(v, 1) == Catch::Approx(-1.5).margin(1e-12));
    CHECK(R(v, 2) == Catch::Approx(1.0).margin(1e-12));
  }

  Eigen::VectorXd zero = Eigen::VectorXd::Zero(m.n_vertices());
  CHECK(recover_gradient(m, zero).norm() == 0.0);
}

TEST_CASE("recovered gradient of a quadratic is O(h) accurate", "[adapt]") {
  // rho = x^2 has gradient (2x, 0, 0). On symmetric uniform patches the
  // volume-weighted recovery is superconvergent (exact); on locally
  // refined, asymmetric patches the error stays bounded by C h.
  Mesh m = build_box_mesh(Vec3(-1, -1, -1), Vec3(1, 1, 1), 2);
  m = bisect(m, {0, 3, 11, 19, 27});
  m = bisect(m, {2, 5, 13, 40});
  for (int round = 0; round < 3; ++round) {
    Eigen::VectorXd rho =
        nodal_field(m, [](const Vec3& p) { return p[0] * p[0]; });
    Eigen::MatrixX3d R = recover_gradient(m, rho);
    ElementSizeField sizes = element_sizes(m);
    double worst = 0.0;
    for (int v = 0; v < m.n_vertices(); ++v) {
      if (m.is_boundary(v)) continue;
      Vec3 exact(2.0 * m.vertex(v)[0], 0.0, 0.0);
      worst = std::max(worst, (R.row(v).transpose() - exact).norm());
    }
    // |f''| = 2, so C = 1 is a generous O(h) bound.
    CHECK(worst <= sizes.max_h);
    std::vector<int> all(static_cast<size_t>(m.n_tets()));
    for (int t = 0; t < m.n_tets(); ++t) all[static_cast<size_t>(t)] = t;
    m = bisect(m, all);
  }
}

TEST_CASE("indicator vanishes on affine densities in both modes", "[adapt]") {
  Mesh m = build_box_mesh(Vec3(0, 0, 0), Vec3(2, 2, 2), 3);
  m = bisect(m, {1, 4, 9, 16});
  Eigen::VectorXd rho = nodal_field(
      m, [](const Vec3& p) { return 1.0 + p[0] + 2.0 * p[1] - 0.5 * p[2]; });
  for (IndicatorMode mode : {IndicatorMode::Literal, IndicatorMode::ZZ}) {
    IndicatorField eta = indicator(m, rho, mode);
    CHECK(eta.eta.lpNorm<Eigen::Infinity>() <= 1e-20);
    CHECK(eta.total <= 1e-18);
  }
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(m.n_vertices());
  CHECK(indicator(m, zero).total == 0.0);
}

TEST_CASE("indicator totals are consistent and nonnegative", "[adapt]") {
  Mesh m = build_box_mesh(Vec3(-2, -2, -2), Vec3(2, 2, 2), 3);
  Eigen::VectorXd rho =
      nodal_field(m, [](const Vec3& p) { return std::exp(-p.squaredNorm()); });
  for (IndicatorMode mode : {IndicatorMode::Literal, IndicatorMode::ZZ}) {
    IndicatorField eta = indicator(m, rho, mode);
    CHECK(eta.eta.minCoeff() >= 0.0);
    CHECK(eta.total == Catch::Approx(eta.eta.sum()).epsilon(1e-13));
    CHECK(eta.total > 0.0);
  }
}

TEST_CASE("indicator concentrates at a density cusp", "[adapt]") {
  // Surrogate for a converged He density: exp(-2 Z |x|) has a cusp at the
  // origin; the largest indicator must sit within two local diameters.
  Mesh base = build_box_mesh(Vec3(-20, -20, -20), Vec3(20, 20, 20), 4);
  Mesh m = refine_near(base, {Vec3(0, 0, 0)}, 6, 2.0);
  Eigen::VectorXd rho =
      nodal_field(m, [](const Vec3& p) { return std::exp(-4.0 * p.norm()); });
  IndicatorField eta = indicator(m, rho, IndicatorMode::Literal);
  int best = 0;
  eta.eta.maxCoeff(&best);
  double h = m.longest_edge(best);
  CHECK(m.centroid(best).norm() <= 2.0 * h);
}

TEST_CASE("uniform refinement shrinks the indicator of a smooth field",
          "[adapt]") {
  // The h_tau scaling makes the literal indicator decay once the recovered
  // Jacobian resolves the field's curvature; warm up past the
  // under-resolved regime, then require monotone decrease.
  Mesh m = build_box_mesh(Vec3(-2, -2, -2), Vec3(2, 2, 2), 2);
  auto rho_of = [](const Mesh& mm) {
    Eigen::VectorXd r(mm.n_vertices());
    for (int v = 0; v < mm.n_vertices(); ++v)
      r[v] = std::exp(-0.5 * mm.vertex(v).squaredNorm());
    return r;
  };
  auto refine_all = [](Mesh& mm) {
    std::vector<int> all(static_cast<size_t>(mm.n_tets()));
    for (int t = 0; t < mm.n_tets(); ++t) all[static_cast<size_t>(t)] = t;
    mm = bisect(mm, all);
  };
  for (int warm = 0; warm < 6; ++warm) refine_all(m);

  double prev_lit = -1.0, prev_zz = -1.0;
  for (int level = 0; level < 4; ++level) {
    Eigen::VectorXd rho = rho_of(m);
    double lit = indicator(m, rho, IndicatorMode::Literal).total;
    double zz = indicator(m, rho, IndicatorMode::ZZ).total;
    if (prev_lit >= 0.0) CHECK(lit <= prev_lit);
    if (prev_zz >= 0.0) CHECK(zz <= prev_zz);
    prev_lit = lit;
    prev_zz = zz;
    if (level < 3) refine_all(m);
  }
}

TEST_CASE("doerfler marking basics", "[adapt]") {
  IndicatorField eta;
  eta.eta = Eigen::VectorXd::Constant(10, 3.0);
  eta.total = eta.eta.sum();
  MarkSet ms = mark(eta, 0.5);
  CHECK(ms.marked.size() == 5);  // ceil(10/2) equal elements

  eta.eta = Eigen::VectorXd(3);
  eta.eta << 8.0, 1.0, 1.0;
  eta.total = 10.0;
  ms = mark(eta, 0.5);
  REQUIRE(ms.marked.size() == 1);
  CHECK(ms.marked[0] == 0);

  eta.eta = Eigen::VectorXd::Zero(4);
  eta.total = 0.0;
  CHECK(mark(eta, 0.5).marked.empty());

  CHECK_THROWS_AS(mark(eta, 0.0), DomainError);
  CHECK_THROWS_AS(mark(eta, 1.0), DomainError);
}

TEST_CASE("doerfler marking is minimal on random fields", "[adapt]") {
  std::mt19937 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + static_cast<int>(u(rng) * 40);
    IndicatorField eta;
    eta.eta = Eigen::VectorXd(n);
    for (int i = 0; i < n; ++i) eta.eta[i] = std::pow(u(rng), 3);
    eta.total = eta.eta.sum();
    double theta = 0.7;
    MarkSet ms = mark(eta, theta);

    double sum = 0.0;
    double smallest = std::numeric_limits<double>::max();
    for (int t : ms.marked) {
      sum += eta.eta[t];
      smallest = std::min(smallest, eta.eta[t]);
    }
    CHECK(sum >= theta * eta.total - 1e-12 * eta.total);
    // Dropping the least-eta marked element must break the bound.
    if (!ms.marked.empty())
      CHECK(sum - smallest < theta * eta.total);
  }
}

TEST_CASE("indicator csv export", "[adapt]") {
  Mesh m = build_box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 1), 1);
  Eigen::VectorXd rho =
      nodal_field(m, [](const Vec3& p) { return p.squaredNorm(); });
  IndicatorField eta = indicator(m, rho);
  write_indicator_csv(m, eta, "indicator_test.csv");
  std::ifstream is("indicator_test.csv");
  REQUIRE(is.good());
  std::string header;
  std::getline(is, header);
  CHECK(header == "tet,cx,cy,cz,eta");
  int rows = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == m.n_tets());
}

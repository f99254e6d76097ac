#pragma once

#include <array>
#include <vector>

#include "ksflow/errors.hpp"

namespace ksflow {

/// Barycentric quadrature rule on the reference tetrahedron. Weights sum
/// to one; an integral is approximated as volume * sum_q w_q f(x_q).
struct QuadratureRule {
  int degree = 0;
  std::vector<std::array<double, 4>> points;
  std::vector<double> weights;

  /// Rules exact for polynomials up to the requested degree
  /// (available: 1, 2, 4, 5).
  static const QuadratureRule& of_degree(int d);
};

namespace detail {

inline QuadratureRule make_rule_deg1() {
  QuadratureRule r;
  r.degree = 1;
  r.points = {{0.25, 0.25, 0.25, 0.25}};
  r.weights = {1.0};
  return r;
}

inline QuadratureRule make_rule_deg2() {
  QuadratureRule r;
  r.degree = 2;
  const double a = 0.1381966011250105;   // (5 - sqrt(5)) / 20
  const double b = 0.5854101966249685;   // (5 + 3 sqrt(5)) / 20
  for (int i = 0; i < 4; ++i) {
    std::array<double, 4> p = {a, a, a, a};
    p[static_cast<size_t>(i)] = b;
    r.points.push_back(p);
    r.weights.push_back(0.25);
  }
  return r;
}

// Keast 11-point rule, weights rescaled to sum to one (the centroid weight
// is negative).
inline QuadratureRule make_rule_deg4() {
  QuadratureRule r;
  r.degree = 4;
  r.points.push_back({0.25, 0.25, 0.25, 0.25});
  r.weights.push_back(-74.0 / 5625.0 * 6.0);

  const double g = 1.0 / 14.0;
  const double G = 11.0 / 14.0;
  for (int i = 0; i < 4; ++i) {
    std::array<double, 4> p = {g, g, g, g};
    p[static_cast<size_t>(i)] = G;
    r.points.push_back(p);
    r.weights.push_back(343.0 / 45000.0 * 6.0);
  }

  const double a = 0.3994035761667992;
  const double b = 0.1005964238332008;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      std::array<double, 4> p = {b, b, b, b};
      p[static_cast<size_t>(i)] = a;
      p[static_cast<size_t>(j)] = a;
      r.points.push_back(p);
      r.weights.push_back(56.0 / 2250.0 * 6.0);
    }
  return r;
}

// 14-point degree-5 rule with all-positive weights.
inline QuadratureRule make_rule_deg5() {
  QuadratureRule r;
  r.degree = 5;
  const double a1 = 0.3108859192633005;
  const double w1 = 0.1126879257180159;
  const double a2 = 0.0927352503108912;
  const double w2 = 0.0734930431163619;
  const double b = 0.0455037041256497;
  const double c = 0.5 - b;
  const double w3 = 0.0425460207770812;
  for (const auto& [a, w] : {std::pair{a1, w1}, std::pair{a2, w2}}) {
    for (int i = 0; i < 4; ++i) {
      std::array<double, 4> p = {a, a, a, a};
      p[static_cast<size_t>(i)] = 1.0 - 3.0 * a;
      r.points.push_back(p);
      r.weights.push_back(w);
    }
  }
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      std::array<double, 4> p = {c, c, c, c};
      p[static_cast<size_t>(i)] = b;
      p[static_cast<size_t>(j)] = b;
      r.points.push_back(p);
      r.weights.push_back(w3);
    }
  return r;
}

}  // namespace detail

inline const QuadratureRule& QuadratureRule::of_degree(int d) {
  static const QuadratureRule r1 = detail::make_rule_deg1();
  static const QuadratureRule r2 = detail::make_rule_deg2();
  static const QuadratureRule r4 = detail::make_rule_deg4();
  static const QuadratureRule r5 = detail::make_rule_deg5();
  if (d <= 1) return r1;
  if (d <= 2) return r2;
  if (d <= 4) return r4;
  if (d <= 5) return r5;
  throw ConfigError("QuadratureRule: no rule of degree " + std::to_string(d));
}

}  // namespace ksflow

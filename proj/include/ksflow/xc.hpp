#pragma once

#include <cmath>

#include "ksflow/errors.hpp"

namespace ksflow {

/// Exchange-correlation data at one density value: energy density per
/// electron and the potential d(rho eps)/drho.
struct XcEval {
  double eps = 0.0;
  double v = 0.0;
};

/// Unpolarized LDA: Dirac exchange plus the Perdew-Zunger 1981
/// parameterization of the Ceperley-Alder correlation energy.
inline XcEval xc_lda(double rho) {
  if (rho < 0.0) throw DomainError("xc_lda: negative density");
  XcEval out;
  if (rho == 0.0) return out;

  // Exchange: eps_x = -(3/4)(3/pi)^(1/3) rho^(1/3), v_x = (4/3) eps_x.
  const double cx = -0.75 * std::cbrt(3.0 / M_PI);
  double ex = cx * std::cbrt(rho);
  double vx = 4.0 / 3.0 * ex;

  // Correlation in terms of rs = (3/(4 pi rho))^(1/3).
  const double rs = std::cbrt(3.0 / (4.0 * M_PI * rho));
  double ec, vc;
  if (rs >= 1.0) {
    const double gamma = -0.1423;
    const double beta1 = 1.0529;
    const double beta2 = 0.3334;
    double srs = std::sqrt(rs);
    double den = 1.0 + beta1 * srs + beta2 * rs;
    ec = gamma / den;
    vc = ec * (1.0 + 7.0 / 6.0 * beta1 * srs + 4.0 / 3.0 * beta2 * rs) / den;
  } else {
    const double A = 0.0311;
    const double B = -0.048;
    const double C = 0.0020;
    const double D = -0.0116;
    double lrs = std::log(rs);
    ec = A * lrs + B + C * rs * lrs + D * rs;
    vc = A * lrs + (B - A / 3.0) + 2.0 / 3.0 * C * rs * lrs +
         (2.0 * D - C) / 3.0 * rs;
  }

  out.eps = ex + ec;
  out.v = vx + vc;
  return out;
}

/// Energy density per electron only (for integrating E_xc).
inline double xc_lda_eps(double rho) { return xc_lda(rho).eps; }

}  // namespace ksflow

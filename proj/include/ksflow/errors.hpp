#pragma once

#include <stdexcept>
#include <string>

namespace ksflow {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Degenerate box domain (hi <= lo along some axis).
class InvalidDomainError : public Error {
 public:
  using Error::Error;
};

/// Bisection closure recursion exceeded its depth bound; indicates a broken
/// refinement-edge assignment on the input mesh.
class RefinementFailureError : public Error {
 public:
  using Error::Error;
};

/// Nodal transfer requested between meshes that are not ancestor/descendant.
class LineageError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite weight encountered during weighted-mass assembly.
class AssemblyError : public Error {
 public:
  using Error::Error;
};

/// Iterative SPD solve hit its iteration cap before reaching the requested
/// relative residual.
class SolverStagnationError : public Error {
 public:
  SolverStagnationError(const std::string& what, double achieved, int iters)
      : Error(what), achieved_residual(achieved), iterations(iters) {}
  double achieved_residual;
  int iterations;
};

/// The 2N x 2N reduced system of the Cayley step is numerically singular.
class StepFailureError : public Error {
 public:
  StepFailureError(const std::string& what, double cond)
      : Error(what), condition(cond) {}
  double condition;
};

/// Time step underflowed after repeated halvings.
class FlowStalledError : public Error {
 public:
  FlowStalledError(const std::string& what, double dt_, double residual)
      : Error(what), dt(dt_), last_residual(residual) {}
  double dt;
  double last_residual;
};

/// Gram matrix of an orbital set is numerically rank deficient.
class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& what, double min_eig)
      : Error(what), min_eigenvalue(min_eig) {}
  double min_eigenvalue;
};

/// Invalid argument outside a function's mathematical domain (e.g. rho < 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ksflow

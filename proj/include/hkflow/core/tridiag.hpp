#pragma once

#include <cstddef>
#include <vector>

#include "hkflow/core/error.hpp"

namespace hkflow {

/// Banded matrix with one sub- and one super-diagonal. For the periodic
/// variant lower[0] couples row 0 to the last column and upper[n-1] couples
/// the last row to column 0.
struct Tridiagonal {
  std::vector<double> lower, diag, upper;

  explicit Tridiagonal(std::size_t n = 0) : lower(n, 0.0), diag(n, 0.0), upper(n, 0.0) {}
  std::size_t size() const { return diag.size(); }

  std::vector<double> apply(const std::vector<double>& x, bool periodic) const {
    const std::size_t n = size();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = diag[i] * x[i];
      if (i > 0) acc += lower[i] * x[i - 1];
      else if (periodic) acc += lower[0] * x[n - 1];
      if (i + 1 < n) acc += upper[i] * x[i + 1];
      else if (periodic) acc += upper[n - 1] * x[0];
      y[i] = acc;
    }
    return y;
  }
};

/// Thomas algorithm; lower[0] and upper[n-1] are ignored.
inline std::vector<double> solve_tridiagonal(const Tridiagonal& a, std::vector<double> rhs) {
  const std::size_t n = a.size();
  require(n > 0 && rhs.size() == n, ErrorKind::InvalidArgument, "tridiagonal solve: size mismatch");
  std::vector<double> c(n, 0.0);
  double denom = a.diag[0];
  require(denom != 0.0, ErrorKind::InvalidArgument, "tridiagonal solve: zero pivot");
  c[0] = n > 1 ? a.upper[0] / denom : 0.0;
  rhs[0] /= denom;
  for (std::size_t i = 1; i < n; ++i) {
    denom = a.diag[i] - a.lower[i] * c[i - 1];
    require(denom != 0.0, ErrorKind::InvalidArgument, "tridiagonal solve: zero pivot");
    c[i] = i + 1 < n ? a.upper[i] / denom : 0.0;
    rhs[i] = (rhs[i] - a.lower[i] * rhs[i - 1]) / denom;
  }
  for (std::size_t i = n - 1; i-- > 0;) rhs[i] -= c[i] * rhs[i + 1];
  return rhs;
}

/// Cyclic system via Sherman-Morrison on top of the Thomas solve.
inline std::vector<double> solve_periodic_tridiagonal(const Tridiagonal& a, const std::vector<double>& rhs) {
  const std::size_t n = a.size();
  require(n >= 3, ErrorKind::InvalidArgument, "periodic tridiagonal solve needs n >= 3");
  const double alpha = a.upper[n - 1];  // row n-1, column 0
  const double beta = a.lower[0];       // row 0, column n-1
  const double gamma = -a.diag[0];
  Tridiagonal b = a;
  b.diag[0] -= gamma;
  b.diag[n - 1] -= alpha * beta / gamma;
  auto x = solve_tridiagonal(b, rhs);
  std::vector<double> u(n, 0.0);
  u[0] = gamma;
  u[n - 1] = alpha;
  auto z = solve_tridiagonal(b, u);
  const double fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
  for (std::size_t i = 0; i < n; ++i) x[i] -= fact * z[i];
  return x;
}

}  // namespace hkflow

#pragma once

// Fourier machinery on uniform periodic grids, plus the even/odd reflections
// that turn cell-centred samples on (0, pi) into smooth 2*pi-periodic data.

#include <complex>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace hkflow::spectral {

using cplx = std::complex<double>;

inline Eigen::FFT<double>& fft_engine() {
  thread_local Eigen::FFT<double> engine;
  return engine;
}

inline std::vector<cplx> forward(std::span<const double> v) {
  std::vector<cplx> in(v.begin(), v.end());
  std::vector<cplx> out;
  fft_engine().fwd(out, in);
  return out;
}

inline std::vector<double> inverse_real(const std::vector<cplx>& c) {
  std::vector<cplx> out;
  fft_engine().inv(out, c);
  std::vector<double> r(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) r[i] = out[i].real();
  return r;
}

/// Signed integer wavenumber of FFT slot k for an M-point transform.
inline double wavenumber(std::size_t k, std::size_t m) {
  const auto km = static_cast<long>(k);
  const auto mm = static_cast<long>(m);
  return static_cast<double>(2 * km < mm ? km : km - mm);
}

/// d^order/dx^order of a P-periodic function sampled at M equispaced points.
/// The Nyquist mode is dropped for odd orders.
inline std::vector<double> derivative(std::span<const double> v, double period, int order) {
  const std::size_t m = v.size();
  auto c = forward(v);
  const double scale = 2.0 * std::numbers::pi / period;
  for (std::size_t k = 0; k < m; ++k) {
    const bool nyquist = (2 * k == m);
    double kk = scale * (nyquist ? static_cast<double>(m / 2) : wavenumber(k, m));
    if (nyquist && order % 2 == 1) {
      c[k] = 0.0;
      continue;
    }
    cplx factor = 1.0;
    for (int o = 0; o < order; ++o) factor *= cplx(0.0, kk);
    c[k] *= factor;
  }
  return inverse_real(c);
}

/// Multiplies every Fourier mode by exp(-diffusivity * k^2 * tau): the exact
/// heat propagator on a periodic line.
inline std::vector<double> heat_propagate(std::span<const double> v, double period, double diffusivity_tau) {
  const std::size_t m = v.size();
  auto c = forward(v);
  const double scale = 2.0 * std::numbers::pi / period;
  for (std::size_t k = 0; k < m; ++k) {
    const bool nyquist = (2 * k == m);
    const double kk = scale * (nyquist ? static_cast<double>(m / 2) : wavenumber(k, m));
    c[k] *= std::exp(-kk * kk * diffusivity_tau);
  }
  return inverse_real(c);
}

enum class Parity { Even, Odd };

/// Reflects cell-centred samples on (0, pi) to a 2N-point periodic sequence.
inline std::vector<double> reflect(std::span<const double> v, Parity parity) {
  const std::size_t n = v.size();
  std::vector<double> w(2 * n);
  const double sign = parity == Parity::Even ? 1.0 : -1.0;
  for (std::size_t j = 0; j < n; ++j) {
    w[j] = v[j];
    w[2 * n - 1 - j] = sign * v[j];
  }
  return w;
}

/// Derivative of a function on (0, pi) with the given parity about both ends,
/// sampled at x_i = (i + 1/2) pi / N. The derivative has the opposite parity.
inline std::vector<double> zonal_derivative(std::span<const double> v, Parity parity, int order = 1) {
  const auto ext = reflect(v, parity);
  auto d = derivative(ext, 2.0 * std::numbers::pi, order);
  d.resize(v.size());
  return d;
}

/// Evaluates the reflected trigonometric interpolant at an arbitrary x.
inline double zonal_interpolate(std::span<const double> v, Parity parity, double x) {
  const auto ext = reflect(v, parity);
  const std::size_t m = ext.size();
  const auto c = forward(ext);
  const double h = 2.0 * std::numbers::pi / static_cast<double>(m);
  const double x0 = 0.5 * h;
  double acc = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const bool nyquist = (2 * k == m);
    const double kk = wavenumber(k, m);
    if (nyquist) {
      acc += (c[k] * std::cos(static_cast<double>(m / 2) * (x - x0))).real();
      continue;
    }
    acc += (c[k] * std::exp(cplx(0.0, kk * (x - x0)))).real();
  }
  return acc / static_cast<double>(m);
}

/// Values of the reflected interpolant at the N+1 cell faces x = i pi / N.
inline std::vector<double> zonal_at_faces(std::span<const double> v, Parity parity) {
  const std::size_t n = v.size();
  const auto ext = reflect(v, parity);
  const std::size_t m = ext.size();
  auto c = forward(ext);
  const double h = std::numbers::pi / static_cast<double>(n);
  for (std::size_t k = 0; k < m; ++k) {
    if (2 * k == m) {
      c[k] = 0.0;
      continue;
    }
    c[k] *= std::exp(cplx(0.0, -wavenumber(k, m) * 0.5 * h));
  }
  auto full = inverse_real(c);
  std::vector<double> faces(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(n + 1));
  if (parity == Parity::Odd) {
    faces.front() = 0.0;
    faces.back() = 0.0;
  }
  return faces;
}

/// Antiderivative F(x) = int_0^x f of an even-reflected function, evaluated at
/// the N+1 faces x = i pi / N.
inline std::vector<double> zonal_face_antiderivative(std::span<const double> v) {
  const std::size_t n = v.size();
  const auto ext = reflect(v, Parity::Even);
  const std::size_t m = ext.size();
  const auto c = forward(ext);
  const double h = std::numbers::pi / static_cast<double>(n);
  const double x0 = 0.5 * h;
  std::vector<cplx> d(m);
  double constant = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double kk = wavenumber(k, m);
    if (k == 0 || 2 * k == m) continue;
    const cplx coef = c[k] / cplx(0.0, kk);
    d[k] = coef * std::exp(cplx(0.0, -kk * x0));
    constant -= (coef * std::exp(cplx(0.0, -kk * x0))).real();
  }
  std::vector<cplx> out;
  fft_engine().inv(out, d);
  std::vector<double> faces(n + 1);
  const double mean = c[0].real() / static_cast<double>(m);
  for (std::size_t i = 0; i <= n; ++i) {
    const double x = static_cast<double>(i) * h;
    const double osc = i < m ? out[i].real() : 0.0;
    faces[i] = mean * x + osc + constant / static_cast<double>(m);
  }
  return faces;
}

/// Antiderivative F(x) = int_0^x f of an even-reflected function at the cell
/// centres x_i = (i + 1/2) pi / N.
inline std::vector<double> zonal_cell_antiderivative(std::span<const double> v) {
  const std::size_t n = v.size();
  const auto ext = reflect(v, Parity::Even);
  const std::size_t m = ext.size();
  const auto c = forward(ext);
  const double h = std::numbers::pi / static_cast<double>(n);
  const double x0 = 0.5 * h;
  std::vector<cplx> d(m);
  double constant = 0.0;
  for (std::size_t k = 1; k < m; ++k) {
    if (2 * k == m) continue;
    const double kk = wavenumber(k, m);
    d[k] = c[k] / cplx(0.0, kk);
    constant -= (d[k] * std::exp(cplx(0.0, -kk * x0))).real();
  }
  std::vector<cplx> out;
  fft_engine().inv(out, d);
  std::vector<double> cells(n);
  const double mean = c[0].real() / static_cast<double>(m);
  for (std::size_t i = 0; i < n; ++i)
    cells[i] = mean * (x0 + static_cast<double>(i) * h) + out[i].real() + constant / static_cast<double>(m);
  return cells;
}

/// Antiderivative int_0^x f for an even-reflected f at a single point.
inline double zonal_antiderivative(std::span<const double> v, double x) {
  const auto ext = reflect(v, Parity::Even);
  const std::size_t m = ext.size();
  const auto c = forward(ext);
  const double h = 2.0 * std::numbers::pi / static_cast<double>(m);
  const double x0 = 0.5 * h;
  double acc = c[0].real() * x;
  for (std::size_t k = 1; k < m; ++k) {
    if (2 * k == m) continue;
    const double kk = wavenumber(k, m);
    const cplx coef = c[k] / cplx(0.0, kk);
    acc += (coef * (std::exp(cplx(0.0, kk * (x - x0))) - std::exp(cplx(0.0, -kk * x0)))).real();
  }
  return acc / static_cast<double>(m);
}

/// Cell-centred grid x_i = (i + 1/2) pi / N.
inline std::vector<double> zonal_grid(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = (static_cast<double>(i) + 0.5) * std::numbers::pi / static_cast<double>(n);
  return x;
}

}  // namespace hkflow::spectral

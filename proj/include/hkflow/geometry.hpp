#pragma once

// Model closed manifolds (flat 3-torus, round sphere, rotationally symmetric
// warped sphere), their time-dependent metrics, and the discrete differential
// operators used everywhere else.
//
// Grids:
//   FlatTorus     N^3 vertex grid, x_a = j L_a / N, index i0 + N (i1 + N i2).
//   Round/Warped  N cells in the polar coordinate x in (0, pi), centres
//                 x_i = (i + 1/2) pi / N. Fields are zonal (functions of x only),
//                 and the metric is g = phi(x)^2 dx^2 + psi(x)^2 g_{S^{n-1}}.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "hkflow/core/error.hpp"
#include "hkflow/core/spectral.hpp"

namespace hkflow {

enum class ModelKind { FlatTorus, RoundSphere, WarpedSphere };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::FlatTorus: return "FlatTorus";
    case ModelKind::RoundSphere: return "RoundSphere";
    case ModelKind::WarpedSphere: return "WarpedSphere";
  }
  return "?";
}

/// Area of the unit (n-1)-sphere.
inline double unit_sphere_area(int n) {
  return 2.0 * std::pow(std::numbers::pi, 0.5 * n) / std::tgamma(0.5 * n);
}

struct ManifoldModel {
  ModelKind kind = ModelKind::FlatTorus;
  int n = 3;
  std::array<double, 3> periods{};  // FlatTorus
  double radius = 0.0;              // RoundSphere
  double length = 0.0;              // WarpedSphere arc length pole to pole
  std::vector<double> profile;      // WarpedSphere: w(s_i), s_i cell centres of [0, length]
  std::size_t resolution = 0;
  double pole_tolerance = 1e-4;

  static ManifoldModel flat_torus(std::array<double, 3> periods, std::size_t resolution) {
    ManifoldModel m;
    m.kind = ModelKind::FlatTorus;
    m.periods = periods;
    m.resolution = resolution;
    m.validate();
    return m;
  }

  static ManifoldModel round_sphere(double radius, std::size_t resolution, int n = 3) {
    ManifoldModel m;
    m.kind = ModelKind::RoundSphere;
    m.n = n;
    m.radius = radius;
    m.resolution = resolution;
    m.validate();
    return m;
  }

  static ManifoldModel warped_sphere(std::vector<double> profile, double length, int n = 3) {
    ManifoldModel m;
    m.kind = ModelKind::WarpedSphere;
    m.n = n;
    m.length = length;
    m.resolution = profile.size();
    m.profile = std::move(profile);
    m.validate();
    return m;
  }

  static ManifoldModel warped_sphere(const std::function<double(double)>& w, double length, std::size_t resolution,
                                     int n = 3) {
    std::vector<double> prof(resolution);
    const auto x = spectral::zonal_grid(resolution);
    for (std::size_t i = 0; i < resolution; ++i) prof[i] = w(x[i] * length / std::numbers::pi);
    return warped_sphere(std::move(prof), length, n);
  }

  bool zonal() const { return kind != ModelKind::FlatTorus; }

  std::size_t size() const {
    return kind == ModelKind::FlatTorus ? resolution * resolution * resolution : resolution;
  }

  /// Grid spacing in the model's coordinate (per axis for the torus).
  double spacing(int axis = 0) const {
    if (kind == ModelKind::FlatTorus) return periods[static_cast<std::size_t>(axis)] / static_cast<double>(resolution);
    return std::numbers::pi / static_cast<double>(resolution);
  }

  /// Same geometry at another resolution. Warped profiles are resampled
  /// through their trigonometric interpolant.
  ManifoldModel with_resolution(std::size_t res) const {
    ManifoldModel m = *this;
    m.resolution = res;
    if (kind == ModelKind::WarpedSphere && res != profile.size()) {
      const auto x = spectral::zonal_grid(res);
      m.profile.resize(res);
      for (std::size_t i = 0; i < res; ++i) m.profile[i] = spectral::zonal_interpolate(profile, spectral::Parity::Odd, x[i]);
    }
    return m;
  }

  void validate() const {
    require(n >= 3, ErrorKind::InvalidArgument, "manifold dimension must be at least 3");
    switch (kind) {
      case ModelKind::FlatTorus:
        require(n == 3, ErrorKind::InvalidArgument, "flat torus models are three-dimensional");
        require(resolution >= 4, ErrorKind::InvalidArgument, "torus resolution must be at least 4");
        for (double p : periods) require(p > 0.0, ErrorKind::InvalidArgument, "torus periods must be positive");
        break;
      case ModelKind::RoundSphere:
        require(radius > 0.0, ErrorKind::InvalidArgument, "sphere radius must be positive");
        require(resolution >= 4, ErrorKind::InvalidArgument, "sphere resolution must be at least 4");
        break;
      case ModelKind::WarpedSphere: {
        require(length > 0.0, ErrorKind::InvalidArgument, "warped sphere length must be positive");
        require(profile.size() >= 4, ErrorKind::InvalidArgument, "warped profile needs at least 4 samples");
        for (double w : profile) require(w > 0.0, ErrorKind::NonPositiveMetric, "warping function must be positive inside");
        // w'(0) = 1 and w'(L) = -1: psi(x) = w(x L / pi) so dw/ds = psi_x pi / L.
        const auto dpsi = spectral::zonal_derivative(profile, spectral::Parity::Odd);
        const double d0 = spectral::zonal_interpolate(dpsi, spectral::Parity::Even, 0.0) * std::numbers::pi / length;
        const double d1 =
            spectral::zonal_interpolate(dpsi, spectral::Parity::Even, std::numbers::pi) * std::numbers::pi / length;
        require(std::abs(d0 - 1.0) < pole_tolerance && std::abs(d1 + 1.0) < pole_tolerance, ErrorKind::PoleRegularity,
                "warped profile does not close smoothly at the poles (w'(0)=" + std::to_string(d0) +
                    ", w'(L)=" + std::to_string(d1) + ")");
        break;
      }
    }
  }
};

using ModelPtr = std::shared_ptr<const ManifoldModel>;

inline ModelPtr make_model(ManifoldModel m) { return std::make_shared<const ManifoldModel>(std::move(m)); }

/// A point of the model. Torus points use c[0..2] as coordinates; sphere
/// points are unit vectors in R^4 whose polar angle from (1,0,0,0) is the
/// zonal coordinate x.
struct Point {
  std::array<double, 4> c{};

  static Point torus(double x, double y, double z) { return Point{{x, y, z, 0.0}}; }
  static Point polar(double theta) { return Point{{std::cos(theta), std::sin(theta), 0.0, 0.0}}; }
  static Point north_pole() { return Point{{1.0, 0.0, 0.0, 0.0}}; }
  static Point south_pole() { return Point{{-1.0, 0.0, 0.0, 0.0}}; }

  double polar_angle() const { return std::acos(std::clamp(c[0], -1.0, 1.0)); }
};

enum class Representation { Grid, Spectral };

/// Real samples on the model grid. Spectral fields are differentiated with
/// Fourier/reflection machinery; grid fields with second-order stencils.
struct ScalarField {
  std::vector<double> values;
  Representation rep = Representation::Spectral;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }

  static ScalarField constant(const ManifoldModel& m, double c, Representation rep = Representation::Spectral) {
    return ScalarField{std::vector<double>(m.size(), c), rep};
  }
};

inline std::vector<double> torus_axis_coords(const ManifoldModel& m, int axis) {
  std::vector<double> x(m.resolution);
  for (std::size_t j = 0; j < m.resolution; ++j) x[j] = static_cast<double>(j) * m.spacing(axis);
  return x;
}

inline Point grid_point(const ManifoldModel& m, std::size_t idx) {
  if (m.kind == ModelKind::FlatTorus) {
    const std::size_t n = m.resolution;
    const std::size_t i0 = idx % n, i1 = (idx / n) % n, i2 = idx / (n * n);
    return Point::torus(static_cast<double>(i0) * m.spacing(0), static_cast<double>(i1) * m.spacing(1),
                        static_cast<double>(i2) * m.spacing(2));
  }
  return Point::polar((static_cast<double>(idx) + 0.5) * std::numbers::pi / static_cast<double>(m.resolution));
}

inline ScalarField sample(const ManifoldModel& m, const std::function<double(const Point&)>& f,
                          Representation rep = Representation::Spectral) {
  ScalarField out{std::vector<double>(m.size()), rep};
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = f(grid_point(m, i));
  return out;
}

/// The metric at one flow time.
///   FlatTorus    g = scale^2 * flat
///   RoundSphere  round metric of radius model.radius * scale
///   WarpedSphere g = phi^2 dx^2 + psi^2 g_{S^{n-1}}
struct MetricState {
  ModelPtr model;
  double time = 0.0;
  double scale = 1.0;
  std::vector<double> phi, psi;

  static MetricState initial(ModelPtr model) {
    MetricState s;
    s.model = model;
    if (model->kind == ModelKind::WarpedSphere) {
      s.phi.assign(model->resolution, model->length / std::numbers::pi);
      s.psi = model->profile;
    }
    s.validate();
    return s;
  }

  double radius() const { return model->radius * scale; }

  void validate() const {
    require(model != nullptr, ErrorKind::InvalidArgument, "metric state without a model");
    require(scale > 0.0 && std::isfinite(scale), ErrorKind::NonPositiveMetric, "metric scale factor must be positive");
    if (model->kind == ModelKind::WarpedSphere) {
      require(phi.size() == model->resolution && psi.size() == model->resolution, ErrorKind::ResolutionMismatch,
              "warped metric coefficients do not match the model resolution");
      for (std::size_t i = 0; i < phi.size(); ++i)
        require(phi[i] > 0.0 && psi[i] > 0.0, ErrorKind::NonPositiveMetric, "metric coefficients must be positive");
    }
  }
};

/// phi, psi on the zonal grid for either sphere kind.
struct ZonalMetric {
  std::vector<double> phi, psi;
};

inline ZonalMetric zonal_metric(const MetricState& s) {
  const auto& m = *s.model;
  require(m.zonal(), ErrorKind::InvalidArgument, "zonal metric requested for a torus");
  if (m.kind == ModelKind::WarpedSphere) return {s.phi, s.psi};
  const double r = s.radius();
  const auto x = spectral::zonal_grid(m.resolution);
  ZonalMetric z{std::vector<double>(m.resolution, r), std::vector<double>(m.resolution)};
  for (std::size_t i = 0; i < x.size(); ++i) z.psi[i] = r * std::sin(x[i]);
  return z;
}

namespace detail {

inline void check_field(const MetricState& s, const ScalarField& f) {
  require(f.size() == s.model->size(), ErrorKind::ResolutionMismatch,
          "field has " + std::to_string(f.size()) + " samples, model expects " + std::to_string(s.model->size()));
}

/// Applies op to every axis-aligned line of a torus field.
template <class Op>
std::vector<double> torus_lines(const std::vector<double>& v, std::size_t n, int axis, Op&& op) {
  std::vector<double> out(v.size());
  std::vector<double> line(n);
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? n : n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t base;
      if (axis == 0) base = n * (a + n * b);
      else if (axis == 1) base = a + n * n * b;
      else base = a + n * b;
      for (std::size_t k = 0; k < n; ++k) line[k] = v[base + k * stride];
      const std::vector<double> res = op(line);
      for (std::size_t k = 0; k < n; ++k) out[base + k * stride] = res[k];
    }
  }
  return out;
}

inline std::vector<double> torus_axis_derivative(const ManifoldModel& m, const std::vector<double>& v, int axis,
                                                 int order, Representation rep) {
  const double L = m.periods[static_cast<std::size_t>(axis)];
  const double h = m.spacing(axis);
  const std::size_t n = m.resolution;
  return torus_lines(v, n, axis, [&](const std::vector<double>& line) {
    if (rep == Representation::Spectral) return spectral::derivative(line, L, order);
    std::vector<double> d(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double up = line[(k + 1) % n], dn = line[(k + n - 1) % n];
      d[k] = order == 1 ? (up - dn) / (2.0 * h) : (up - 2.0 * line[k] + dn) / (h * h);
    }
    return d;
  });
}

/// Second-order central derivative of a zonal field with even/odd ghost cells.
inline std::vector<double> zonal_fd_derivative(const std::vector<double>& v, spectral::Parity parity) {
  const std::size_t n = v.size();
  const double h = std::numbers::pi / static_cast<double>(n);
  const double sgn = parity == spectral::Parity::Even ? 1.0 : -1.0;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dn = i == 0 ? sgn * v[0] : v[i - 1];
    const double up = i + 1 == n ? sgn * v[n - 1] : v[i + 1];
    d[i] = (up - dn) / (2.0 * h);
  }
  return d;
}

}  // namespace detail

/// d/dx of a zonal field (x the polar coordinate), by the field's representation.
inline std::vector<double> zonal_dx(const ScalarField& f, spectral::Parity parity = spectral::Parity::Even) {
  if (f.rep == Representation::Spectral) return spectral::zonal_derivative(f.values, parity);
  return detail::zonal_fd_derivative(f.values, parity);
}

/// Finite-volume cell volumes (exact integrals of the volume density over
/// each cell); these are the weights of the second-order zonal operators.
inline std::vector<double> cell_volumes(const MetricState& s) {
  const auto& m = *s.model;
  if (m.kind == ModelKind::FlatTorus) {
    const double w = std::pow(s.scale, 3) * m.periods[0] * m.periods[1] * m.periods[2] / static_cast<double>(m.size());
    return std::vector<double>(m.size(), w);
  }
  const auto z = zonal_metric(s);
  std::vector<double> dens(m.resolution);
  for (std::size_t i = 0; i < dens.size(); ++i) dens[i] = z.phi[i] * std::pow(z.psi[i], m.n - 1);
  const auto F = spectral::zonal_face_antiderivative(dens);
  const double area = unit_sphere_area(m.n);
  std::vector<double> v(m.resolution);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = area * (F[i + 1] - F[i]);
  return v;
}

/// Quadrature weights for dV_{g(t)} on the grid. Spectral fields use the
/// midpoint rule (spectrally accurate on reflected data); grid fields use the
/// finite-volume cell volumes.
inline std::vector<double> volume_measure(const MetricState& s, Representation rep = Representation::Spectral) {
  s.validate();
  const auto& m = *s.model;
  if (m.kind == ModelKind::FlatTorus || rep == Representation::Grid) return cell_volumes(s);
  const auto z = zonal_metric(s);
  const double h = m.spacing();
  const double area = unit_sphere_area(m.n);
  std::vector<double> w(m.resolution);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = area * z.phi[i] * std::pow(z.psi[i], m.n - 1) * h;
  return w;
}

inline double total_volume(const MetricState& s) {
  const auto w = volume_measure(s);
  double v = 0.0;
  for (double x : w) v += x;
  return v;
}

inline double integrate(const std::vector<double>& weights, const std::vector<double>& f) {
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += weights[i] * f[i];
  return acc;
}

/// Second-order finite-volume zonal Laplacian coefficients: face
/// conductances kappa_{i+1/2} (N+1 of them, zero at the poles) and cell volumes.
struct ZonalStencil {
  std::vector<double> kappa;
  std::vector<double> volume;
};

inline ZonalStencil zonal_stencil(const MetricState& s) {
  const auto& m = *s.model;
  const auto z = zonal_metric(s);
  const auto phi_f = spectral::zonal_at_faces(z.phi, spectral::Parity::Even);
  const auto psi_f = spectral::zonal_at_faces(z.psi, spectral::Parity::Odd);
  const double h = m.spacing();
  const double area = unit_sphere_area(m.n);
  ZonalStencil st;
  st.kappa.resize(m.resolution + 1);
  for (std::size_t f = 0; f <= m.resolution; ++f)
    st.kappa[f] = area * std::pow(std::max(psi_f[f], 0.0), m.n - 1) / (phi_f[f] * h);
  st.kappa.front() = 0.0;
  st.kappa.back() = 0.0;
  st.volume = cell_volumes(s);
  return st;
}

/// Delta_{g(t)} applied to a field.
inline ScalarField laplace_beltrami(const MetricState& s, const ScalarField& f) {
  s.validate();
  detail::check_field(s, f);
  const auto& m = *s.model;
  ScalarField out{std::vector<double>(f.size(), 0.0), f.rep};
  if (m.kind == ModelKind::FlatTorus) {
    const double inv = 1.0 / (s.scale * s.scale);
    for (int a = 0; a < 3; ++a) {
      const auto d2 = detail::torus_axis_derivative(m, f.values, a, 2, f.rep);
      for (std::size_t i = 0; i < f.size(); ++i) out.values[i] += inv * d2[i];
    }
    return out;
  }
  if (f.rep == Representation::Grid) {
    const auto st = zonal_stencil(s);
    const std::size_t n = m.resolution;
    for (std::size_t i = 0; i < n; ++i) {
      const double up = i + 1 < n ? st.kappa[i + 1] * (f.values[i + 1] - f.values[i]) : 0.0;
      const double dn = i > 0 ? st.kappa[i] * (f.values[i] - f.values[i - 1]) : 0.0;
      out.values[i] = (up - dn) / st.volume[i];
    }
    return out;
  }
  // Delta u = phi^{-1} psi^{1-n} d/dx (psi^{n-1} phi^{-1} u_x)
  const auto z = zonal_metric(s);
  const auto ux = spectral::zonal_derivative(f.values, spectral::Parity::Even);
  const auto uxx = spectral::zonal_derivative(ux, spectral::Parity::Odd);
  const auto phix = spectral::zonal_derivative(z.phi, spectral::Parity::Even);
  const auto psix = spectral::zonal_derivative(z.psi, spectral::Parity::Odd);
  const double nm1 = m.n - 1;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double p2 = z.phi[i] * z.phi[i];
    out.values[i] = uxx[i] / p2 + (nm1 * psix[i] / z.psi[i] - phix[i] / z.phi[i]) * ux[i] / p2;
  }
  return out;
}

/// |grad f|^2_{g(t)} pointwise.
inline ScalarField gradient_norm_sq(const MetricState& s, const ScalarField& f) {
  detail::check_field(s, f);
  const auto& m = *s.model;
  ScalarField out{std::vector<double>(f.size(), 0.0), f.rep};
  if (m.kind == ModelKind::FlatTorus) {
    const double inv = 1.0 / (s.scale * s.scale);
    for (int a = 0; a < 3; ++a) {
      const auto d = detail::torus_axis_derivative(m, f.values, a, 1, f.rep);
      for (std::size_t i = 0; i < f.size(); ++i) out.values[i] += inv * d[i] * d[i];
    }
    return out;
  }
  const auto z = zonal_metric(s);
  const auto ux = zonal_dx(f);
  for (std::size_t i = 0; i < f.size(); ++i) out.values[i] = ux[i] * ux[i] / (z.phi[i] * z.phi[i]);
  return out;
}

/// <grad a, grad b>_{g(t)} pointwise.
inline ScalarField gradient_dot(const MetricState& s, const ScalarField& a, const ScalarField& b) {
  detail::check_field(s, a);
  detail::check_field(s, b);
  const auto& m = *s.model;
  ScalarField out{std::vector<double>(a.size(), 0.0), a.rep};
  if (m.kind == ModelKind::FlatTorus) {
    const double inv = 1.0 / (s.scale * s.scale);
    for (int ax = 0; ax < 3; ++ax) {
      const auto da = detail::torus_axis_derivative(m, a.values, ax, 1, a.rep);
      const auto db = detail::torus_axis_derivative(m, b.values, ax, 1, b.rep);
      for (std::size_t i = 0; i < a.size(); ++i) out.values[i] += inv * da[i] * db[i];
    }
    return out;
  }
  const auto z = zonal_metric(s);
  const auto ax = zonal_dx(a);
  const auto bx = zonal_dx(b);
  for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = ax[i] * bx[i] / (z.phi[i] * z.phi[i]);
  return out;
}

/// Curvature data of a rotationally symmetric metric in the orthonormal
/// frame (e_s, e_theta...): Rc = diag(radial, tangential, ..., tangential).
struct WarpedCurvature {
  std::vector<double> ric_radial, ric_tangential, scalar;
  std::vector<double> psi_s;  // d psi / ds
};

inline WarpedCurvature warped_curvature(const MetricState& s) {
  const auto& m = *s.model;
  const auto z = zonal_metric(s);
  const std::size_t n = m.resolution;
  const auto psix = spectral::zonal_derivative(z.psi, spectral::Parity::Odd);
  std::vector<double> psis(n);
  for (std::size_t i = 0; i < n; ++i) psis[i] = psix[i] / z.phi[i];
  const auto psisx = spectral::zonal_derivative(psis, spectral::Parity::Even);
  WarpedCurvature c;
  c.ric_radial.resize(n);
  c.ric_tangential.resize(n);
  c.scalar.resize(n);
  c.psi_s = psis;
  const double nm1 = m.n - 1, nm2 = m.n - 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double psiss_over_psi = psisx[i] / (z.phi[i] * z.psi[i]);
    const double q = (1.0 - psis[i] * psis[i]) / (z.psi[i] * z.psi[i]);
    c.ric_radial[i] = -nm1 * psiss_over_psi;
    c.ric_tangential[i] = -psiss_over_psi + nm2 * q;
    c.scalar[i] = c.ric_radial[i] + nm1 * c.ric_tangential[i];
  }
  return c;
}

/// Checks d psi/ds = +1 at x = 0 and -1 at x = pi.
inline void check_pole_regularity(const MetricState& s, double tol) {
  const auto z = zonal_metric(s);
  const auto psix = spectral::zonal_derivative(z.psi, spectral::Parity::Odd);
  std::vector<double> psis(psix.size());
  for (std::size_t i = 0; i < psis.size(); ++i) psis[i] = psix[i] / z.phi[i];
  const double a = spectral::zonal_interpolate(psis, spectral::Parity::Even, 0.0);
  const double b = spectral::zonal_interpolate(psis, spectral::Parity::Even, std::numbers::pi);
  require(std::abs(a - 1.0) < tol && std::abs(b + 1.0) < tol, ErrorKind::PoleRegularity,
          "metric is not smooth at the poles (psi_s = " + std::to_string(a) + ", " + std::to_string(b) + ")");
}

/// Scalar curvature R_{g(t)}.
inline ScalarField scalar_curvature(const MetricState& s) {
  s.validate();
  const auto& m = *s.model;
  switch (m.kind) {
    case ModelKind::FlatTorus: return ScalarField::constant(m, 0.0);
    case ModelKind::RoundSphere: {
      const double r = s.radius();
      return ScalarField::constant(m, m.n * (m.n - 1) / (r * r));
    }
    case ModelKind::WarpedSphere: {
      check_pole_regularity(s, m.pole_tolerance);
      return ScalarField{warped_curvature(s).scalar, Representation::Spectral};
    }
  }
  return {};
}

/// Geodesic distance d_{g(t)}(y, x). Torus: minimum over lattice translates;
/// round sphere: radius times central angle; warped sphere: arc length from a
/// pole (y must be a pole).
inline double distance(const MetricState& s, const Point& y, const Point& x) {
  const auto& m = *s.model;
  switch (m.kind) {
    case ModelKind::FlatTorus: {
      double acc = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double L = m.periods[a];
        double d = std::fmod(x.c[a] - y.c[a], L);
        if (d > 0.5 * L) d -= L;
        if (d < -0.5 * L) d += L;
        acc += d * d;
      }
      return s.scale * std::sqrt(acc);
    }
    case ModelKind::RoundSphere: {
      double dot = 0.0;
      for (std::size_t a = 0; a < 4; ++a) dot += x.c[a] * y.c[a];
      return s.radius() * std::acos(std::clamp(dot, -1.0, 1.0));
    }
    case ModelKind::WarpedSphere: {
      const bool north = std::abs(y.c[0] - 1.0) < 1e-12;
      const bool south = std::abs(y.c[0] + 1.0) < 1e-12;
      require(north || south, ErrorKind::UnsupportedPoints,
              "warped-sphere distances are only available from a pole");
      const double xp = x.polar_angle();
      const double from_north = spectral::zonal_antiderivative(s.phi, xp);
      if (north) return from_north;
      return spectral::zonal_antiderivative(s.phi, std::numbers::pi) - from_north;
    }
  }
  return 0.0;
}

/// d_{g(t0)}(y, .) sampled on the grid together with its exact coordinate
/// gradient magnitude (|grad d| in the flat/coordinate sense: scale(t0) for the
/// torus, phi(t0) for zonal models).
struct DistanceField {
  ScalarField values;
  Point source;
  double time = 0.0;
  ModelPtr model;
  std::vector<double> coordinate_gradient;
};

inline DistanceField distance_field(const MetricState& s, const Point& y) {
  const auto& m = *s.model;
  DistanceField d;
  d.source = y;
  d.time = s.time;
  d.model = s.model;
  d.values = ScalarField{std::vector<double>(m.size()), Representation::Grid};
  if (m.kind == ModelKind::FlatTorus) {
    for (std::size_t i = 0; i < m.size(); ++i) d.values.values[i] = distance(s, y, grid_point(m, i));
    d.coordinate_gradient.assign(m.size(), s.scale);
    return d;
  }
  const bool north = std::abs(y.c[0] - 1.0) < 1e-12;
  const bool south = std::abs(y.c[0] + 1.0) < 1e-12;
  require(north || south, ErrorKind::UnsupportedPoints, "zonal distance fields need a pole as source");
  const auto z = zonal_metric(s);
  const auto x = spectral::zonal_grid(m.resolution);
  if (m.kind == ModelKind::RoundSphere) {
    for (std::size_t i = 0; i < x.size(); ++i) d.values.values[i] = s.radius() * (north ? x[i] : std::numbers::pi - x[i]);
  } else {
    const double total = spectral::zonal_antiderivative(z.phi, std::numbers::pi);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double a = spectral::zonal_antiderivative(z.phi, x[i]);
      d.values.values[i] = north ? a : total - a;
    }
  }
  d.coordinate_gradient = z.phi;
  return d;
}

/// Points at least `band` grid cells away from the source and from its cut
/// locus (antipodal planes on the torus, the opposite pole on spheres).
inline std::vector<bool> regular_mask(const ManifoldModel& m, const Point& y, int band) {
  std::vector<bool> ok(m.size(), true);
  if (m.kind == ModelKind::FlatTorus) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Point p = grid_point(m, i);
      double r2 = 0.0;
      bool near_cut = false;
      for (std::size_t a = 0; a < 3; ++a) {
        const double L = m.periods[a], h = m.spacing(static_cast<int>(a));
        double d = std::fmod(p.c[a] - y.c[a], L);
        if (d > 0.5 * L) d -= L;
        if (d < -0.5 * L) d += L;
        r2 += d * d;
        if (std::abs(0.5 * L - std::abs(d)) < band * h - 1e-12) near_cut = true;
      }
      const double h = std::min({m.spacing(0), m.spacing(1), m.spacing(2)});
      if (near_cut || std::sqrt(r2) < band * h - 1e-12) ok[i] = false;
    }
    return ok;
  }
  const auto b = static_cast<std::size_t>(std::max(band, 0));
  for (std::size_t i = 0; i < m.size(); ++i)
    if (i < b || i + b >= m.size()) ok[i] = false;
  return ok;
}

/// |grad d_{g(t0)}(y, .)|_{g(lambda)} pointwise.
inline ScalarField cross_metric_gradient_norm(const DistanceField& d, const MetricState& lambda_state) {
  const auto& m = *lambda_state.model;
  const auto& dm = *d.model;
  require(m.kind == dm.kind && m.size() == dm.size(), ErrorKind::MismatchedModels,
          "distance field and metric state live on different models");
  ScalarField out{std::vector<double>(m.size()), Representation::Grid};
  if (m.kind == ModelKind::FlatTorus) {
    for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = d.coordinate_gradient[i] / lambda_state.scale;
    return out;
  }
  const auto z = zonal_metric(lambda_state);
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = d.coordinate_gradient[i] / z.phi[i];
  return out;
}

}  // namespace hkflow

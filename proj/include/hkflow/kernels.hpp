#pragma once

// Fundamental solutions of (d/dt - Delta_{g(t)}) and of the weighted operator
// (d/dt - L_t), L_t = phi^{-1} Delta phi with phi = exp(alpha psi), along a flow
// trajectory; analytic oracles; weighted and conjugate evolutions of smooth data.
//
// Slices on the torus live on the full N^3 vertex grid. Sphere slices are zonal
// about the source: the grid coordinate is the polar angle measured from y.
// Torus weights depend on the first coordinate only and sphere weights on the
// polar angle from the source pole, so every weighted problem separates.

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include "json.hpp"

#include "hkflow/core/tridiag.hpp"
#include "hkflow/flows.hpp"

namespace hkflow {

enum class SolverKind { Spectral, FiniteDifference, Oracle };
enum class OperatorKind { Plain, Weighted };

/// Auto conjugates time-independent weights (v = exp(alpha psi) u solves the
/// plain equation) and evolves the expanded operator otherwise.
enum class WeightedRoute { Auto, Conjugation, Expanded };

inline std::string to_string(SolverKind k) {
  switch (k) {
    case SolverKind::Spectral: return "spectral";
    case SolverKind::FiniteDifference: return "finiteDifference";
    case SolverKind::Oracle: return "oracle";
  }
  return "?";
}

struct SolverConfig {
  SolverKind solver = SolverKind::Spectral;
  std::size_t resolution = 0;       // 0 selects the trajectory model's resolution
  double delta = 0.0;               // finite differences: Gaussian start at s + delta; 0 selects 4 h^2
  WeightedRoute route = WeightedRoute::Auto;
  std::size_t axis_oversample = 4;  // torus spectral factors are solved on a finer line
  double dt_factor = 0.25;          // finite differences: dt = dt_factor * (h * min scale)^2
  std::size_t min_steps = 64;
  double tail_tol = 1e-13;          // oracle truncation tolerance (relative)
  double solver_tol = 1e-8;         // positivity tolerance
};

/// psi as a function of one coordinate: the first torus coordinate, or the
/// polar angle from the source pole on spheres.
struct WeightSpec {
  double alpha = 0.0;
  std::function<double(double, double)> psi;  // (coordinate, time)
  bool time_dependent = false;
  bool lipschitz_certified = false;
  double certified_gradient = std::numeric_limits<double>::infinity();
  double grid_tol = 1e-9;
  std::string description = "none";

  static WeightSpec none() {
    WeightSpec w;
    w.psi = [](double, double) { return 0.0; };
    w.lipschitz_certified = true;
    w.certified_gradient = 0.0;
    return w;
  }

  /// psi = slope * (L / 2pi) sin(2pi (x - y1) / L): smooth, |psi'| <= slope.
  static WeightSpec torus_sine(double alpha, double period, double y1, double slope) {
    WeightSpec w;
    w.alpha = alpha;
    w.psi = [=](double x, double) {
      return slope * period / (2 * std::numbers::pi) * std::sin(2 * std::numbers::pi * (x - y1) / period);
    };
    std::ostringstream os;
    os << "sine(slope=" << slope << ")";
    w.description = os.str();
    return w;
  }

  /// psi = softmin(sqrt(z^2 + w^2) - w, cap) with z the wrapped offset x - y1:
  /// the distance along the first axis, smoothed at the source and clamped at cap.
  static WeightSpec torus_clamp(double alpha, double period, double y1, double cap, double width) {
    WeightSpec w;
    w.alpha = alpha;
    w.psi = [=](double x, double) {
      double z = std::fmod(x - y1, period);
      if (z > 0.5 * period) z -= period;
      if (z < -0.5 * period) z += period;
      const double a = std::sqrt(z * z + width * width) - width;
      const double m = std::min(a, cap);
      return m - width * std::log(std::exp(-(a - m) / width) + std::exp(-(cap - m) / width));
    };
    std::ostringstream os;
    os << "clamp(cap=" << cap << ", width=" << width << ")";
    w.description = os.str();
    return w;
  }

  /// psi = profile(x) for x the polar angle from the source pole.
  static WeightSpec zonal(double alpha, std::function<double(double)> profile, std::string description) {
    WeightSpec w;
    w.alpha = alpha;
    w.psi = [profile = std::move(profile)](double x, double) { return profile(x); };
    w.description = std::move(description);
    return w;
  }
};

struct KernelSlice {
  ModelPtr model;
  Point source;
  double s = 0.0, t = 0.0;
  ScalarField values;
  OperatorKind op = OperatorKind::Plain;
  double alpha = 0.0;
  std::string weight_description = "none";
  SolverKind solver = SolverKind::Spectral;
  double delta = 0.0;
  double error_estimate = 0.0;
  double tail_bound = 0.0;
  double min_value = 0.0;
  bool positive = true;
  std::size_t steps = 0;

  double max() const { return *std::max_element(values.values.begin(), values.values.end()); }
};

namespace detail {

inline void check_times(const FlowTrajectory& traj, double s, double t) {
  require(t > s, ErrorKind::InvalidArgument, "kernel evaluation needs t > s");
  require(s >= traj.start() - 1e-14 && t <= traj.end() + 1e-14, ErrorKind::RangeError,
          "kernel times [" + std::to_string(s) + ", " + std::to_string(t) + "] outside the trajectory range");
}

inline bool is_pole(const Point& y) { return std::abs(std::abs(y.c[0]) - 1.0) < 1e-12; }

/// Grid model for kernel slices at the configured resolution.
inline ModelPtr kernel_model(const FlowTrajectory& traj, const SolverConfig& cfg) {
  const std::size_t n = cfg.resolution ? cfg.resolution : traj.model->resolution;
  if (n == traj.model->resolution) return traj.model;
  require(traj.model->kind != ModelKind::WarpedSphere, ErrorKind::ResolutionMismatch,
          "warped-sphere kernels run at the trajectory resolution");
  return make_model(traj.model->with_resolution(n));
}

/// Metric of the trajectory at time lambda on the kernel grid.
inline MetricState state_on(const FlowTrajectory& traj, const ModelPtr& grid, double lambda) {
  MetricState s = traj.state_at(lambda);
  if (grid != traj.model) {
    s.model = grid;
    s.phi.clear();
    s.psi.clear();
  }
  return s;
}

inline bool scale_only(const FlowTrajectory& traj) { return traj.model->kind != ModelKind::WarpedSphere; }

/// int_s^t scale(lambda)^{-2} d lambda for scale-only trajectories.
inline double inverse_square_scale_integral(const FlowTrajectory& traj, double s, double t) {
  if (t <= s) return 0.0;
  if (!traj.exact) {
    // Piecewise-linear scale between stored samples; integrate each piece.
    auto f = [&](double l) {
      const double a = traj.state_at(l).scale;
      return 1.0 / (a * a);
    };
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, s, t, 10, 1e-13);
  }
  const double a0 = traj.exact(s).scale, a1 = traj.exact(t).scale;
  if (traj.scale_rate && traj.scale_rate(s) == 0.0 && traj.scale_rate(t) == 0.0 && a0 == a1) return (t - s) / (a0 * a0);
  auto f = [&](double l) {
    const double a = traj.exact(l).scale;
    return 1.0 / (a * a);
  };
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, s, t, 12, 1e-13);
}

inline bool static_scale(const FlowTrajectory& traj, double s, double t) {
  if (!scale_only(traj)) return false;
  if (traj.scale_rate) {
    // Closed-form paths: static iff the rate vanishes at both ends and the scale matches.
    return traj.scale_rate(s) == 0.0 && traj.scale_rate(t) == 0.0 &&
           traj.state_at(s).scale == traj.state_at(t).scale;
  }
  return traj.state_at(s).scale == traj.state_at(t).scale;
}

inline double wrap(double z, double L) {
  z = std::fmod(z, L);
  if (z > 0.5 * L) z -= L;
  if (z < -0.5 * L) z += L;
  return z;
}

/// Applies a per-line map along one axis of an N^3 field.
template <class Op>
void for_each_line(std::vector<double>& v, std::size_t n, int axis, Op&& op) {
  std::vector<double> line(n);
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? n : n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = axis == 0 ? n * (a + n * b) : (axis == 1 ? a + n * n * b : a + n * b);
      for (std::size_t k = 0; k < n; ++k) line[k] = v[base + k * stride];
      op(line);
      for (std::size_t k = 0; k < n; ++k) v[base + k * stride] = line[k];
    }
}

inline std::vector<double> outer3(const std::array<std::vector<double>, 3>& f) {
  const std::size_t n = f[0].size();
  std::vector<double> v(n * n * n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j) {
      const double fjk = f[1][j] * f[2][k];
      for (std::size_t i = 0; i < n; ++i) v[i + n * (j + n * k)] = f[0][i] * fjk;
    }
  return v;
}

/// Dense matrix of a linear map on R^n, probed with unit vectors.
inline Eigen::MatrixXd probe_matrix(std::size_t n, const std::function<std::vector<double>(const std::vector<double>&)>& f) {
  Eigen::MatrixXd A(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const auto col = f(e);
    for (std::size_t i = 0; i < n; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    e[j] = 0.0;
  }
  return A;
}

inline std::vector<double> apply_matrix(const Eigen::MatrixXd& A, const std::vector<double>& x) {
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::VectorXd y = A * xv;
  return std::vector<double>(y.data(), y.data() + y.size());
}

inline double resolve_delta(const SolverConfig& cfg, double h_phys, double s, double t) {
  const double d = cfg.delta > 0.0 ? cfg.delta : 4.0 * h_phys * h_phys;
  return std::min(d, 0.5 * (t - s));
}

inline void finish(KernelSlice& k) {
  k.min_value = *std::min_element(k.values.values.begin(), k.values.values.end());
  k.positive = k.min_value >= -10.0 * 1e-8 * std::max(1.0, k.max());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Weight certification

/// Grid Lipschitz constant of psi_t in g(t) at every stored time (and at the
/// endpoints of every stored interval for closed-form paths).
inline double weight_gradient_bound(const WeightSpec& w, const FlowTrajectory& traj, std::size_t resolution = 0) {
  const auto& m = *traj.model;
  const std::size_t n = 4 * (resolution ? resolution : m.resolution);
  double worst = 0.0;
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const double t = traj.times[k];
    const MetricState st = traj.states[k];
    if (m.kind == ModelKind::FlatTorus) {
      const double L = m.periods[0], h = L / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double x = static_cast<double>(j) * h;
        worst = std::max(worst, std::abs(w.psi(x + h, t) - w.psi(x, t)) / (h * st.scale));
      }
      continue;
    }
    // Zonal: arc length between neighbouring samples from the spectral phi.
    const auto z = zonal_metric(st);
    const double h = std::numbers::pi / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double x0 = static_cast<double>(j) * h, x1 = x0 + h;
      const double ds = spectral::zonal_antiderivative(z.phi, x1) - spectral::zonal_antiderivative(z.phi, x0);
      worst = std::max(worst, std::abs(w.psi(x1, t) - w.psi(x0, t)) / ds);
    }
    if (!w.time_dependent && m.kind == ModelKind::RoundSphere) {
      // Only the minimal radius matters for a fixed profile on a round sphere.
      const double rmin = traj.state_at(traj.end()).radius();
      worst = std::max(worst, worst * st.radius() / rmin);
      break;
    }
  }
  return worst;
}

inline WeightSpec certify(WeightSpec w, const FlowTrajectory& traj, std::size_t resolution = 0) {
  require(static_cast<bool>(w.psi), ErrorKind::InvalidArgument, "weight without a psi function");
  w.certified_gradient = weight_gradient_bound(w, traj, resolution);
  w.lipschitz_certified = w.certified_gradient <= 1.0 + w.grid_tol;
  return w;
}

// ---------------------------------------------------------------------------
// Oracles

/// Periodic heat kernel of u_t = u_xx on a line of period L at offset z and
/// diffusion time tau, with a bound on the truncated tail.
struct ThetaValue {
  double value = 0.0;
  double tail = 0.0;
};

inline ThetaValue theta_kernel(double z, double tau, double L, double tail_tol = 1e-13) {
  require(tau > 0.0, ErrorKind::InvalidArgument, "theta kernel needs positive time");
  z = detail::wrap(z, L);
  ThetaValue r;
  if (tau < L * L / (4.0 * std::numbers::pi)) {
    const double pref = 1.0 / std::sqrt(4.0 * std::numbers::pi * tau);
    double acc = std::exp(-z * z / (4 * tau));
    int k = 1;
    for (;; ++k) {
      const double a = std::exp(-(z + k * L) * (z + k * L) / (4 * tau));
      const double b = std::exp(-(z - k * L) * (z - k * L) / (4 * tau));
      acc += a + b;
      if (std::exp(-std::pow((k + 0.5) * L, 2) / (4 * tau)) < tail_tol * acc) break;
    }
    const double q = std::exp(-(k + 0.5) * L * L / (2 * tau));
    r.value = pref * acc;
    r.tail = pref * 2.0 * std::exp(-std::pow((k + 0.5) * L, 2) / (4 * tau)) / (1.0 - q);
    return r;
  }
  const double w = 2 * std::numbers::pi / L;
  double acc = 1.0;
  int k = 1;
  for (;; ++k) {
    const double e = std::exp(-w * w * k * k * tau);
    acc += 2.0 * e * std::cos(w * k * z);
    if (e < tail_tol) break;
  }
  const double q = std::exp(-w * w * tau * (2 * k + 3));
  r.value = acc / L;
  r.tail = 2.0 / L * std::exp(-w * w * (k + 1) * (k + 1) * tau) / (1.0 - q);
  return r;
}

/// Theta-function kernel of the static flat torus with metric scale^2 * flat.
inline KernelSlice oracle_torus_kernel(const std::array<double, 3>& periods, const Point& y, double s, double t,
                                       std::size_t resolution, double tail_tol = 1e-13, double scale = 1.0) {
  require(t > s, ErrorKind::InvalidArgument, "kernel evaluation needs t > s");
  auto model = make_model(ManifoldModel::flat_torus(periods, resolution));
  const double tau = (t - s) / (scale * scale);
  std::array<std::vector<double>, 3> f;
  double tail = 0.0;
  double prod_max = 1.0;
  for (std::size_t a = 0; a < 3; ++a) {
    f[a].resize(resolution);
    double amax = 0.0, atail = 0.0;
    for (std::size_t j = 0; j < resolution; ++j) {
      const auto th = theta_kernel(static_cast<double>(j) * model->spacing(static_cast<int>(a)) - y.c[a], tau, periods[a],
                                   tail_tol);
      f[a][j] = th.value;
      amax = std::max(amax, th.value);
      atail = std::max(atail, th.tail);
    }
    tail = tail * (amax + atail) + prod_max * atail;
    prod_max *= amax;
  }
  KernelSlice k;
  k.model = model;
  k.source = y;
  k.s = s;
  k.t = t;
  k.solver = SolverKind::Oracle;
  k.values = ScalarField{detail::outer3(f), Representation::Spectral};
  const double vol_factor = 1.0 / std::pow(scale, 3);
  for (double& v : k.values.values) v *= vol_factor;
  k.tail_bound = tail * vol_factor;
  detail::finish(k);
  return k;
}

/// Radius path of a round 3-sphere: r(l)^2 = r0^2 - rate * (l - t0) (rate 0: static).
struct RadiusPath {
  double r0 = 1.0;
  double t0 = 0.0;
  double rate = 4.0;

  double radius(double l) const { return std::sqrt(r0 * r0 - rate * (l - t0)); }
  double extinction() const { return rate > 0 ? t0 + r0 * r0 / rate : std::numeric_limits<double>::infinity(); }
  /// int_s^t r(l)^{-2} dl in closed form.
  double inverse_square_integral(double s, double t) const {
    if (rate == 0.0) return (t - s) / (r0 * r0);
    return std::log(radius(s) * radius(s) / (radius(t) * radius(t))) / rate;
  }
};

/// Zonal harmonic U_l(cos theta) = sin((l+1) theta) / sin(theta) on S^3.
inline double zonal_harmonic(int l, double theta) {
  const double s = std::sin(theta);
  if (std::abs(s) < 1e-8) {
    const double sign = std::cos(theta) > 0 ? 1.0 : ((l % 2) ? -1.0 : 1.0);
    return sign * (l + 1);
  }
  return std::sin((l + 1) * theta) / s;
}

/// H(theta) = Vol(s)^{-1} sum_l (l+1) U_l(cos theta) exp(-l(l+2) I) with I the
/// integral of r^{-2} over [s, t]; truncated once the remaining tail is below
/// tail_tol relative to the leading term.
struct SphereModeSum {
  double volume_s = 0.0;
  double exponent = 0.0;
  int degree = 0;
  double tail = 0.0;

  SphereModeSum(double vol_s, double I, double tail_tol) : volume_s(vol_s), exponent(I) {
    require(I > 0.0, ErrorKind::InvalidArgument, "mode sum needs positive diffusion time");
    // Terms are bounded by (l+1)^2 exp(-l(l+2) I); stop when the geometric tail is small.
    int l = 1;
    for (;; ++l) {
      const double term = (l + 1.0) * (l + 1.0) * std::exp(-l * (l + 2.0) * I);
      const double ratio = std::exp(-(2.0 * l + 3.0) * I) * std::pow((l + 2.0) / (l + 1.0), 2);
      if (ratio < 1.0 && term * ratio / (1.0 - ratio) < tail_tol) {
        tail = term * ratio / (1.0 - ratio) / vol_s;
        break;
      }
      require(l < 2000000, ErrorKind::SolverBudget, "mode sum did not converge");
    }
    degree = l;
  }

  double operator()(double theta) const {
    double acc = 0.0;
    for (int l = 0; l <= degree; ++l) acc += (l + 1.0) * zonal_harmonic(l, theta) * std::exp(-l * (l + 2.0) * exponent);
    return acc / volume_s;
  }
};

/// Mode-sum kernel of the round 3-sphere along a radius path, sampled on the
/// zonal grid about y.
inline KernelSlice oracle_sphere_kernel(const RadiusPath& path, const Point& y, double s, double t, std::size_t resolution,
                                        double tail_tol = 1e-13) {
  require(t > s, ErrorKind::InvalidArgument, "kernel evaluation needs t > s");
  require(t < path.extinction(), ErrorKind::RangeError, "radius vanishes inside [s, t]");
  const double rs = path.radius(s);
  const double vol = 2 * std::numbers::pi * std::numbers::pi * rs * rs * rs;
  const SphereModeSum H(vol, path.inverse_square_integral(s, t), tail_tol);
  KernelSlice k;
  k.model = make_model(ManifoldModel::round_sphere(path.r0, resolution));
  k.source = y;
  k.s = s;
  k.t = t;
  k.solver = SolverKind::Oracle;
  k.values = ScalarField{std::vector<double>(resolution), Representation::Spectral};
  const auto x = spectral::zonal_grid(resolution);
  for (std::size_t i = 0; i < resolution; ++i) k.values[i] = H(x[i]);
  k.tail_bound = H.tail;
  detail::finish(k);
  return k;
}

/// Radius path of a closed-form round-sphere trajectory.
inline RadiusPath radius_path(const FlowTrajectory& traj) {
  require(traj.model->kind == ModelKind::RoundSphere && static_cast<bool>(traj.exact), ErrorKind::InvalidArgument,
          "radius paths exist for closed-form round-sphere trajectories");
  RadiusPath p;
  p.t0 = traj.start();
  p.r0 = traj.exact(p.t0).radius();
  const double r1 = traj.exact(traj.end()).radius();
  p.rate = (p.r0 * p.r0 - r1 * r1) / (traj.end() - p.t0);
  if (std::abs(p.rate) < 1e-14) p.rate = 0.0;
  return p;
}

// ---------------------------------------------------------------------------
// Torus solvers

namespace detail {

/// Spectral collocation of a^{-2}-free weighted 1-D operator
/// u'' + 2 alpha psi' u' + (alpha^2 psi'^2 + alpha psi'') u on a periodic line.
inline Eigen::MatrixXd periodic_weighted_operator(const std::vector<double>& psi, double L, double alpha) {
  const std::size_t n = psi.size();
  const auto dpsi = spectral::derivative(psi, L, 1);
  const auto d2psi = spectral::derivative(psi, L, 2);
  return probe_matrix(n, [&](const std::vector<double>& u) {
    const auto du = spectral::derivative(u, L, 1);
    const auto d2u = spectral::derivative(u, L, 2);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = d2u[i] + 2 * alpha * dpsi[i] * du[i] + (alpha * alpha * dpsi[i] * dpsi[i] + alpha * d2psi[i]) * u[i];
    return out;
  });
}

/// Periodic line Gaussian in flat coordinate with physical variance 2 delta,
/// normalised to unit mass for the line element a * dx.
inline std::vector<double> line_gaussian(std::size_t n, double L, double y, double a, double delta) {
  std::vector<double> g(n);
  const double h = L / static_cast<double>(n);
  double mass = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double z = wrap(static_cast<double>(j) * h - y, L);
    g[j] = std::exp(-a * a * z * z / (4 * delta));
    mass += g[j] * a * h;
  }
  for (double& v : g) v /= mass;
  return g;
}

/// Band-limited delta at y with unit mass for the line element a * dx:
/// (1 / aL) sum_{|k| <= n/2} exp(i k w (x - y)), the Nyquist pair halved.
inline std::vector<double> line_band_limited_delta(std::size_t n, double L, double y, double a) {
  std::vector<double> u(n);
  const double h = L / static_cast<double>(n), w = 2 * std::numbers::pi / L;
  const std::size_t half = n / 2;
  for (std::size_t j = 0; j < n; ++j) {
    const double z = static_cast<double>(j) * h - y;
    double acc = 1.0;
    for (std::size_t k = 1; k < half; ++k) acc += 2.0 * std::cos(w * static_cast<double>(k) * z);
    if (n % 2 == 0) acc += std::cos(w * static_cast<double>(half) * z);
    u[j] = acc / (a * L);
  }
  return u;
}

/// Crank-Nicolson steps for a periodic 1-D operator with time-dependent
/// coefficients c(l) [u'' + 2 alpha psi' u' + (alpha^2 psi'^2 + alpha psi'') u].
inline std::vector<double> line_fd_evolve(std::vector<double> u, double L, double l0, double l1, std::size_t steps,
                                          const std::function<double(double)>& coef, const WeightSpec* w, int rannacher = 2) {
  const std::size_t n = u.size();
  const double h = L / static_cast<double>(n);
  auto op = [&](double l) {
    Tridiagonal A(n);
    const double c = coef(l);
    std::vector<double> psi(n, 0.0);
    if (w && w->alpha != 0.0)
      for (std::size_t j = 0; j < n; ++j) psi[j] = w->psi(static_cast<double>(j) * h, l);
    const double alpha = w ? w->alpha : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p1 = (psi[(j + 1) % n] - psi[(j + n - 1) % n]) / (2 * h);
      const double p2 = (psi[(j + 1) % n] - 2 * psi[j] + psi[(j + n - 1) % n]) / (h * h);
      A.lower[j] = c * (1.0 / (h * h) - alpha * p1 / h);
      A.upper[j] = c * (1.0 / (h * h) + alpha * p1 / h);
      A.diag[j] = c * (-2.0 / (h * h) + alpha * alpha * p1 * p1 + alpha * p2);
    }
    return A;
  };
  auto step = [&](double la, double lb, double theta) {
    const double dt = lb - la;
    Tridiagonal Aa = op(la), Ab = op(lb);
    std::vector<double> rhs = u;
    if (theta < 1.0) {
      const auto Au = Aa.apply(u, true);
      for (std::size_t j = 0; j < n; ++j) rhs[j] += (1 - theta) * dt * Au[j];
    }
    Tridiagonal M(n);
    for (std::size_t j = 0; j < n; ++j) {
      M.lower[j] = -theta * dt * Ab.lower[j];
      M.upper[j] = -theta * dt * Ab.upper[j];
      M.diag[j] = 1.0 - theta * dt * Ab.diag[j];
    }
    u = solve_periodic_tridiagonal(M, rhs);
  };
  const double dt = (l1 - l0) / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double la = l0 + dt * static_cast<double>(k), lb = k + 1 == steps ? l1 : la + dt;
    if (static_cast<int>(k) < rannacher) {
      const double lm = 0.5 * (la + lb);
      step(la, lm, 1.0);
      step(lm, lb, 1.0);
    } else {
      step(la, lb, 0.5);
    }
  }
  return u;
}

/// One torus axis factor of the plain (w == nullptr) or weighted kernel.
struct AxisFactor {
  std::vector<double> values;
  double error = 0.0;
  std::size_t steps = 0;
};

inline AxisFactor torus_axis_factor(const FlowTrajectory& traj, int axis, const Point& y, double s, double t,
                                    std::size_t n, const SolverConfig& cfg, const WeightSpec* w, double& delta_out) {
  const double L = traj.model->periods[static_cast<std::size_t>(axis)];
  const double as = traj.state_at(s).scale;
  const bool weighted = w && w->alpha != 0.0;
  AxisFactor out;
  if (cfg.solver == SolverKind::FiniteDifference) {
    const double h = L / static_cast<double>(n);
    const double delta = resolve_delta(cfg, as * h, s, t);
    delta_out = delta;
    double amin = std::numeric_limits<double>::infinity();
    for (double l : {s, 0.5 * (s + t), t}) amin = std::min(amin, traj.state_at(l).scale);
    const double dt = cfg.dt_factor * std::pow(amin * h, 2);
    const std::size_t steps = std::max(cfg.min_steps, static_cast<std::size_t>(std::ceil((t - s - delta) / dt)));
    auto coef = [&](double l) {
      const double a = traj.state_at(l).scale;
      return 1.0 / (a * a);
    };
    auto g = line_gaussian(n, L, y.c[axis], as, delta);
    if (weighted) {
      // Small-time form of the weighted kernel: the Gaussian times exp(-alpha (psi(x) - psi(y))).
      const double py = w->psi(y.c[axis], s);
      for (std::size_t j = 0; j < n; ++j) g[j] *= std::exp(-w->alpha * (w->psi(static_cast<double>(j) * h, s) - py));
    }
    out.values = line_fd_evolve(g, L, s + delta, t, steps, coef, weighted ? w : nullptr);
    out.steps = steps;
    return out;
  }
  // Spectral: exact propagation on an oversampled line, subsampled to the slice grid.
  const std::size_t over = std::max<std::size_t>(1, cfg.axis_oversample);
  const std::size_t nf = n * over;
  const double hf = L / static_cast<double>(nf);
  delta_out = 0.0;
  require(!(weighted && w->time_dependent), ErrorKind::InvalidArgument,
          "time-dependent weights need the finite-difference solver");
  const double tau = inverse_square_scale_integral(traj, s, t);
  std::vector<double> u = line_band_limited_delta(nf, L, y.c[axis], as);
  if (weighted) {
    std::vector<double> psi(nf);
    for (std::size_t j = 0; j < nf; ++j) psi[j] = w->psi(static_cast<double>(j) * hf, s);
    u = apply_matrix((tau * periodic_weighted_operator(psi, L, w->alpha)).exp(), u);
  } else {
    u = spectral::heat_propagate(u, L, tau);
  }
  // Modes beyond the band were never represented; bound what they would carry.
  const double kc = std::numbers::pi * static_cast<double>(nf) / L;
  out.error = 2.0 / (as * L) * std::exp(-kc * kc * tau) / (1.0 - std::exp(-kc * 4 * std::numbers::pi / L * tau));
  out.values.resize(n);
  for (std::size_t j = 0; j < n; ++j) out.values[j] = u[j * over];
  return out;
}

inline KernelSlice torus_kernel(const FlowTrajectory& traj, const Point& y, double s, double t, const SolverConfig& cfg,
                                const WeightSpec* w) {
  const auto grid = kernel_model(traj, cfg);
  const std::size_t n = grid->resolution;
  KernelSlice k;
  k.model = grid;
  k.source = y;
  k.s = s;
  k.t = t;
  k.solver = cfg.solver;
  if (cfg.solver == SolverKind::Oracle) {
    require(!w || w->alpha == 0.0, ErrorKind::InvalidArgument, "the torus oracle covers the plain kernel only");
    const double as = traj.state_at(s).scale;
    // Time-dependent scale: the theta function at the accumulated flat diffusion time.
    const double tau = inverse_square_scale_integral(traj, s, t);
    auto o = oracle_torus_kernel(grid->periods, y, 0.0, tau, n, cfg.tail_tol, 1.0);
    for (double& v : o.values.values) v /= as * as * as;
    o.tail_bound /= as * as * as;
    o.model = grid;
    o.s = s;
    o.t = t;
    return o;
  }
  std::array<std::vector<double>, 3> f;
  double err = 0.0, fmax = 1.0;
  for (int a = 0; a < 3; ++a) {
    const auto af = torus_axis_factor(traj, a, y, s, t, n, cfg, a == 0 ? w : nullptr, k.delta);
    f[static_cast<std::size_t>(a)] = af.values;
    err = std::max(err, af.error / std::max(1e-300, *std::max_element(af.values.begin(), af.values.end())));
    fmax *= *std::max_element(af.values.begin(), af.values.end());
    k.steps = std::max(k.steps, af.steps);
  }
  k.values = ScalarField{outer3(f), cfg.solver == SolverKind::Spectral ? Representation::Spectral : Representation::Grid};
  k.error_estimate = 3.0 * err * fmax;
  finish(k);
  return k;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Zonal solvers

namespace detail {

/// Geometry of the zonal finite-volume scheme at one time.
struct ZonalFrame {
  std::vector<double> kappa;   // N+1 face conductances
  std::vector<double> volume;  // N cell volumes
  std::vector<double> phi;     // cell-centre phi
  std::vector<double> drift;   // cell-centre gauge field v
  std::vector<double> face_flux;  // omega * phi * psi^{n-1} * v at faces
};

inline ZonalFrame zonal_frame(const FlowTrajectory& traj, const ModelPtr& grid, double l) {
  const MetricState st = state_on(traj, grid, l);
  const auto sten = zonal_stencil(st);
  ZonalFrame f;
  f.kappa = sten.kappa;
  f.volume = sten.volume;
  f.phi = zonal_metric(st).phi;
  const std::size_t n = grid->resolution;
  f.drift = traj.has_drift() ? traj.drift_at(l) : std::vector<double>(n, 0.0);
  f.face_flux.assign(n + 1, 0.0);
  if (traj.has_drift()) {
    const auto z = zonal_metric(st);
    const auto vf = spectral::zonal_at_faces(f.drift, spectral::Parity::Odd);
    const auto pf = spectral::zonal_at_faces(z.phi, spectral::Parity::Even);
    const auto sf = spectral::zonal_at_faces(z.psi, spectral::Parity::Odd);
    const double area = unit_sphere_area(grid->n);
    for (std::size_t j = 1; j < n; ++j) f.face_flux[j] = area * pf[j] * std::pow(sf[j], grid->n - 1) * vf[j];
  }
  return f;
}

/// Forward operator (Delta + v d/dx + weighted terms) on the zonal grid.
inline Tridiagonal zonal_forward_operator(const ZonalFrame& f, const WeightSpec* w, double l) {
  const std::size_t n = f.volume.size();
  const double h = std::numbers::pi / static_cast<double>(n);
  Tridiagonal A(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double up = f.kappa[i + 1] / f.volume[i], dn = f.kappa[i] / f.volume[i];
    A.upper[i] = up;
    A.lower[i] = dn;
    A.diag[i] = -(up + dn);
    const double b = f.drift[i] / (2 * h);
    A.upper[i] += b;
    A.lower[i] -= b;
  }
  if (w && w->alpha != 0.0) {
    const double a = w->alpha;
    std::vector<double> psi(n);
    const auto x = spectral::zonal_grid(n);
    for (std::size_t i = 0; i < n; ++i) psi[i] = w->psi(x[i], l);
    for (std::size_t i = 0; i < n; ++i) {
      const double pm = i == 0 ? psi[0] : psi[i - 1];
      const double pp = i + 1 == n ? psi[n - 1] : psi[i + 1];
      const double psi_s = (pp - pm) / (2 * h * f.phi[i]);
      const double lap = (f.kappa[i + 1] * (pp - psi[i]) - f.kappa[i] * (psi[i] - pm)) / f.volume[i];
      const double b = 2 * a * psi_s / (2 * h * f.phi[i]);
      A.upper[i] += b;
      A.lower[i] -= b;
      A.diag[i] += a * a * psi_s * psi_s + a * lap;
    }
  }
  // Even ghost cells: the value beyond a pole equals the pole cell value.
  A.diag[0] += A.lower[0];
  A.lower[0] = 0.0;
  A.diag[n - 1] += A.upper[n - 1];
  A.upper[n - 1] = 0.0;
  return A;
}

/// Conjugate operator in mass form: d w / d sigma = M w, w_i = V_i u_i.
inline Tridiagonal zonal_conjugate_mass_operator(const ZonalFrame& f) {
  const std::size_t n = f.volume.size();
  Tridiagonal M(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double V = f.volume[i];
    // Diffusive fluxes.
    M.diag[i] = -(f.kappa[i + 1] + f.kappa[i]) / V;
    if (i + 1 < n) M.upper[i] = f.kappa[i + 1] / f.volume[i + 1];
    if (i > 0) M.lower[i] = f.kappa[i] / f.volume[i - 1];
    // Advective fluxes F_f = v A_f (u_left + u_right) / 2 leave through the upper face.
    if (i + 1 < n) {
      M.diag[i] -= 0.5 * f.face_flux[i + 1] / V;
      M.upper[i] -= 0.5 * f.face_flux[i + 1] / f.volume[i + 1];
    }
    if (i > 0) {
      M.diag[i] += 0.5 * f.face_flux[i] / V;
      M.lower[i] += 0.5 * f.face_flux[i] / f.volume[i - 1];
    }
  }
  return M;
}

inline void theta_step(std::vector<double>& u, const Tridiagonal& Aa, const Tridiagonal& Ab, double dt, double theta) {
  const std::size_t n = u.size();
  std::vector<double> rhs = u;
  if (theta < 1.0) {
    const auto Au = Aa.apply(u, false);
    for (std::size_t i = 0; i < n; ++i) rhs[i] += (1 - theta) * dt * Au[i];
  }
  Tridiagonal M(n);
  for (std::size_t i = 0; i < n; ++i) {
    M.lower[i] = -theta * dt * Ab.lower[i];
    M.upper[i] = -theta * dt * Ab.upper[i];
    M.diag[i] = 1.0 - theta * dt * Ab.diag[i];
  }
  u = solve_tridiagonal(M, rhs);
}

/// Number of finite-difference steps on [l0, l1] for spacing h.
inline std::size_t zonal_steps(const FlowTrajectory& traj, const ModelPtr& grid, double l0, double l1,
                               const SolverConfig& cfg) {
  double pmin = std::numeric_limits<double>::infinity();
  for (double l : {l0, 0.5 * (l0 + l1), l1}) {
    const auto z = zonal_metric(state_on(traj, grid, l));
    pmin = std::min(pmin, *std::min_element(z.phi.begin(), z.phi.end()));
  }
  const double h = grid->spacing();
  const double dt = cfg.dt_factor * std::pow(pmin * h, 2);
  return std::max(cfg.min_steps, static_cast<std::size_t>(std::ceil((l1 - l0) / dt)));
}

/// Uniform step nodes from l0 to l1 (either direction) with every sample
/// time strictly between them inserted as an extra node.
inline std::vector<double> step_nodes(double l0, double l1, std::size_t steps, const std::vector<double>* samples) {
  std::vector<double> nodes;
  for (std::size_t k = 0; k <= steps; ++k)
    nodes.push_back(k == steps ? l1 : l0 + (l1 - l0) * static_cast<double>(k) / static_cast<double>(steps));
  const double lo = std::min(l0, l1), hi = std::max(l0, l1), eps = 1e-12 * std::max(1.0, hi - lo);
  if (samples)
    for (double t : *samples)
      if (t > lo + eps && t < hi - eps) nodes.push_back(t);
  if (l1 > l0) std::sort(nodes.begin(), nodes.end());
  else std::sort(nodes.begin(), nodes.end(), std::greater<>());
  nodes.erase(std::unique(nodes.begin(), nodes.end(), [eps](double x, double y) { return std::abs(x - y) <= eps; }),
              nodes.end());
  return nodes;
}

/// Crank-Nicolson with two implicit Euler half steps at the start, for
/// d/dl y = M(l) y along the nodes. `op` builds M at a time; `visit` sees y at
/// every node.
template <class Op, class Visit>
void rannacher_march(std::vector<double>& y, const std::vector<double>& nodes, Op&& op, Visit&& visit) {
  visit(nodes.front(), y);
  Tridiagonal Ma = op(nodes.front());
  for (std::size_t k = 0; k + 1 < nodes.size(); ++k) {
    const double la = nodes[k], lb = nodes[k + 1];
    const double dt = std::abs(lb - la);
    Tridiagonal Mb = op(lb);
    if (k < 2) {
      const double lm = 0.5 * (la + lb);
      const Tridiagonal Mm = op(lm);
      theta_step(y, Mm, Mm, 0.5 * dt, 1.0);
      theta_step(y, Mb, Mb, 0.5 * dt, 1.0);
    } else {
      theta_step(y, Ma, Mb, dt, 0.5);
    }
    Ma = std::move(Mb);
    visit(lb, y);
  }
}

inline void visit_samples(const std::vector<double>* samples, std::size_t& next, double l, bool ascending,
                          const std::function<void(double, const std::vector<double>&)>& obs,
                          const std::vector<double>& u) {
  if (!(samples && obs)) return;
  const double eps = 1e-12 * std::max(1.0, std::abs(l));
  while (next < samples->size() && (ascending ? (*samples)[next] <= l + eps : (*samples)[next] >= l - eps))
    obs((*samples)[next++], u);
}

/// Forward march of u_t = A(l) u on [l0, l1]; samples ascending.
inline std::vector<double> zonal_fd_forward(const FlowTrajectory& traj, const ModelPtr& grid, std::vector<double> u,
                                            double l0, double l1, std::size_t steps, const WeightSpec* w,
                                            const std::vector<double>* samples = nullptr,
                                            const std::function<void(double, const std::vector<double>&)>& obs = {}) {
  std::size_t next = 0;
  rannacher_march(
      u, step_nodes(l0, l1, steps, samples),
      [&](double l) { return zonal_forward_operator(zonal_frame(traj, grid, l), w, l); },
      [&](double l, const std::vector<double>& y) { visit_samples(samples, next, l, true, obs, y); });
  return u;
}

/// Backward (conjugate) march in mass form from l1 down to l0; samples descending.
inline std::vector<double> zonal_fd_conjugate(const FlowTrajectory& traj, const ModelPtr& grid, std::vector<double> u,
                                              double l1, double l0, std::size_t steps,
                                              const std::vector<double>* samples = nullptr,
                                              const std::function<void(double, const std::vector<double>&)>& obs = {}) {
  const std::size_t n = u.size();
  std::vector<double> volume = zonal_frame(traj, grid, l1).volume;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = volume[i] * u[i];
  std::size_t next = 0;
  std::vector<double> uu(n);
  rannacher_march(
      w, step_nodes(l1, l0, steps, samples),
      [&](double l) { return zonal_conjugate_mass_operator(zonal_frame(traj, grid, l)); },
      [&](double l, const std::vector<double>& y) {
        volume = zonal_frame(traj, grid, l).volume;
        for (std::size_t i = 0; i < n; ++i) uu[i] = y[i] / volume[i];
        visit_samples(samples, next, l, false, obs, uu);
      });
  return uu;
}

/// Leading short-time kernel about a pole at time s: the Gaussian of physical
/// variance 2 delta times Theta^{-1/2}, Theta = (psi / d)^{n-1} the polar volume
/// density, normalised to unit mass in the given volume weights.
inline std::vector<double> zonal_gaussian(const MetricState& st, double delta, const std::vector<double>& weights,
                                          bool south = false) {
  const std::size_t n = st.model->resolution;
  const auto z = zonal_metric(st);
  const auto F = spectral::zonal_cell_antiderivative(z.phi);
  const double total = spectral::zonal_antiderivative(z.phi, std::numbers::pi);
  const int dim = st.model->n;
  std::vector<double> g(n);
  double mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = south ? total - F[i] : F[i];
    const double e = std::exp(-d * d / (4 * delta));
    g[i] = e > 0.0 ? e * std::pow(d / z.psi[i], 0.5 * (dim - 1)) : 0.0;
    mass += g[i] * weights[i];
  }
  for (double& v : g) v /= mass;
  return g;
}

/// Projection coefficients onto U_0..U_{N-1} on the unit-radius zonal grid:
/// f = sum_l c_l U_l, c_l = <f, U_l> / Vol (midpoint rule, exact for the band).
inline std::vector<double> zonal_modes(const std::vector<double>& f) {
  const std::size_t n = f.size();
  const auto x = spectral::zonal_grid(n);
  const double h = std::numbers::pi / static_cast<double>(n);
  std::vector<double> c(n, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += f[i] * std::sin(x[i]) * std::sin((l + 1.0) * x[i]);
    c[l] = acc * h * 2.0 / std::numbers::pi;  // 4 pi h sum / (2 pi^2)
  }
  return c;
}

inline std::vector<double> zonal_synthesis(const std::vector<double>& c, std::size_t n) {
  const auto x = spectral::zonal_grid(n);
  std::vector<double> f(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < c.size(); ++l) f[i] += c[l] * zonal_harmonic(static_cast<int>(l), x[i]);
  return f;
}

/// Heat propagation on the round sphere by exp(-l(l+2) I) per zonal mode.
inline std::vector<double> sphere_mode_propagate(const std::vector<double>& f, double I) {
  auto c = zonal_modes(f);
  for (std::size_t l = 0; l < c.size(); ++l) c[l] *= std::exp(-static_cast<double>(l) * (l + 2.0) * I);
  return zonal_synthesis(c, f.size());
}

/// Unit-sphere collocation of Delta_1 + 2 alpha psi_x d/dx + alpha^2 psi_x^2 + alpha Delta_1 psi.
inline Eigen::MatrixXd sphere_weighted_operator(std::size_t n, const WeightSpec& w, double l) {
  auto unit = make_model(ManifoldModel::round_sphere(1.0, n));
  const MetricState st = MetricState::initial(unit);
  const auto x = spectral::zonal_grid(n);
  ScalarField psi{std::vector<double>(n), Representation::Spectral};
  for (std::size_t i = 0; i < n; ++i) psi[i] = w.psi(x[i], l);
  const auto psix = spectral::zonal_derivative(psi.values, spectral::Parity::Even);
  const auto lap_psi = laplace_beltrami(st, psi);
  const double a = w.alpha;
  return probe_matrix(n, [&](const std::vector<double>& u) {
    const ScalarField uf{u, Representation::Spectral};
    const auto lap = laplace_beltrami(st, uf);
    const auto ux = spectral::zonal_derivative(u, spectral::Parity::Even);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = lap[i] + 2 * a * psix[i] * ux[i] + (a * a * psix[i] * psix[i] + a * lap_psi[i]) * u[i];
    return out;
  });
}

inline KernelSlice zonal_kernel(const FlowTrajectory& traj, const Point& y, double s, double t, const SolverConfig& cfg,
                                const WeightSpec* w) {
  const auto& m = *traj.model;
  if (m.kind == ModelKind::WarpedSphere)
    require(is_pole(y), ErrorKind::UnsupportedPoints, "warped-sphere kernels need a pole as source");
  const auto grid = kernel_model(traj, cfg);
  const std::size_t n = grid->resolution;
  const bool weighted = w && w->alpha != 0.0;
  KernelSlice k;
  k.model = grid;
  k.source = y;
  k.s = s;
  k.t = t;
  k.solver = cfg.solver;
  const MetricState st_s = state_on(traj, grid, s);
  const double h_phys = zonal_metric(st_s).phi.front() * grid->spacing();

  if (cfg.solver == SolverKind::Oracle) {
    require(m.kind == ModelKind::RoundSphere && !weighted, ErrorKind::InvalidArgument,
            "the sphere oracle covers the plain kernel of a round sphere");
    auto o = oracle_sphere_kernel(radius_path(traj), y, s, t, n, cfg.tail_tol);
    o.model = grid;
    return o;
  }

  if (cfg.solver == SolverKind::Spectral) {
    require(m.kind == ModelKind::RoundSphere, ErrorKind::InvalidArgument,
            "spectral zonal kernels need a round sphere; use the finite-difference solver on warped spheres");
    require(!(weighted && w->time_dependent), ErrorKind::InvalidArgument,
            "time-dependent weights need the finite-difference solver");
    // Band-limited delta at the pole, evolved by the collocation operator.
    const double base = grid->radius;
    const double rs = st_s.radius();
    const double vol = 2 * std::numbers::pi * std::numbers::pi * rs * rs * rs;
    std::vector<double> c(n);
    for (std::size_t l = 0; l < n; ++l) c[l] = (l + 1.0) / vol;
    const double I = inverse_square_scale_integral(traj, s, t) / (base * base);
    const auto A = sphere_weighted_operator(n, weighted ? *w : WeightSpec::none(), s);
    const auto u = apply_matrix((I * A).exp(), zonal_synthesis(c, n));
    const double nn = static_cast<double>(n);
    k.error_estimate = (nn + 1) * (nn + 1) * std::exp(-nn * (nn + 2) * I) / vol /
                       std::max(1e-300, 1.0 - std::exp(-(2 * nn + 3) * I));
    k.values = ScalarField{u, Representation::Spectral};
    finish(k);
    return k;
  }

  k.delta = resolve_delta(cfg, h_phys, s, t);
  auto g = zonal_gaussian(st_s, k.delta, volume_measure(st_s, Representation::Grid));
  if (weighted) {
    const auto x = spectral::zonal_grid(n);
    const double py = w->psi(0.0, s);
    for (std::size_t i = 0; i < n; ++i) g[i] *= std::exp(-w->alpha * (w->psi(x[i], s) - py));
  }
  k.steps = zonal_steps(traj, grid, s + k.delta, t, cfg);
  k.values = ScalarField{zonal_fd_forward(traj, grid, g, s + k.delta, t, k.steps, weighted ? w : nullptr),
                         Representation::Grid};
  finish(k);
  return k;
}

inline void require_certified(const WeightSpec& w) {
  require(w.lipschitz_certified, ErrorKind::UncertifiedWeight,
          "weight psi is not certified 1-Lipschitz along the trajectory (grid bound " +
              std::to_string(w.certified_gradient) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public solvers

/// H(., t; y, s) along the trajectory.
inline KernelSlice solve_heat_kernel(const FlowTrajectory& traj, const Point& y, double s, double t,
                                     const SolverConfig& cfg = {}) {
  detail::check_times(traj, s, t);
  if (traj.model->kind == ModelKind::FlatTorus) return detail::torus_kernel(traj, y, s, t, cfg, nullptr);
  return detail::zonal_kernel(traj, y, s, t, cfg, nullptr);
}

/// The weight's coordinate on the slice grid (first coordinate or polar angle).
inline std::vector<double> weight_coordinate(const ManifoldModel& m) {
  std::vector<double> c(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Point p = grid_point(m, i);
    c[i] = m.kind == ModelKind::FlatTorus ? p.c[0] : p.polar_angle();
  }
  return c;
}

inline double weight_source_coordinate(const ManifoldModel& m, const Point& y) {
  return m.kind == ModelKind::FlatTorus ? y.c[0] : 0.0;
}

/// K = exp(-alpha (psi(x) - psi(y))) H for a time-independent weight.
inline KernelSlice conjugate_weighted_kernel(const KernelSlice& H, const WeightSpec& weight) {
  detail::require_certified(weight);
  require(!weight.time_dependent, ErrorKind::InvalidArgument, "conjugation needs a time-independent weight");
  KernelSlice K = H;
  K.op = weight.alpha == 0.0 ? OperatorKind::Plain : OperatorKind::Weighted;
  K.alpha = weight.alpha;
  K.weight_description = weight.description;
  const auto c = weight_coordinate(*H.model);
  const double py = weight.psi(weight_source_coordinate(*H.model, H.source), H.s);
  for (std::size_t i = 0; i < c.size(); ++i) K.values[i] *= std::exp(-weight.alpha * (weight.psi(c[i], H.s) - py));
  double emax = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) emax = std::max(emax, std::exp(-weight.alpha * (weight.psi(c[i], H.s) - py)));
  K.error_estimate = H.error_estimate * emax;
  detail::finish(K);
  return K;
}

/// Fundamental solution of d/dt - L_t, routed per SolverConfig::route.
/// alpha = 0 runs exactly the plain solver.
inline KernelSlice solve_weighted_kernel(const FlowTrajectory& traj, const WeightSpec& weight, const Point& y, double s,
                                         double t, const SolverConfig& cfg = {}) {
  detail::require_certified(weight);
  if (weight.alpha == 0.0) return solve_heat_kernel(traj, y, s, t, cfg);
  detail::check_times(traj, s, t);
  if (cfg.route == WeightedRoute::Conjugation || (cfg.route == WeightedRoute::Auto && !weight.time_dependent))
    return conjugate_weighted_kernel(solve_heat_kernel(traj, y, s, t, cfg), weight);
  KernelSlice k = traj.model->kind == ModelKind::FlatTorus ? detail::torus_kernel(traj, y, s, t, cfg, &weight)
                                                           : detail::zonal_kernel(traj, y, s, t, cfg, &weight);
  k.op = OperatorKind::Weighted;
  k.alpha = weight.alpha;
  k.weight_description = weight.description;
  return k;
}

// ---------------------------------------------------------------------------
// Smooth-data evolutions

using FieldObserver = std::function<void(double, const ScalarField&)>;

/// u(t1) for u_t = L_t u from u(t0) = u0. When sample_times is given the
/// observer sees u at each sample (ascending, inside [t0, t1]).
inline ScalarField evolve_weighted_solution(const FlowTrajectory& traj, const WeightSpec& weight, const ScalarField& u0,
                                            double t0, double t1, const SolverConfig& cfg = {},
                                            const std::vector<double>& sample_times = {},
                                            const FieldObserver& observer = {}) {
  detail::require_certified(weight);
  require(t1 >= t0, ErrorKind::InvalidArgument, "evolution needs t1 >= t0");
  require(t0 >= traj.start() - 1e-14 && t1 <= traj.end() + 1e-14, ErrorKind::RangeError,
          "evolution interval outside the trajectory range");
  const auto& m = *traj.model;
  const auto grid = u0.size() == m.size() ? traj.model : detail::kernel_model(traj, [&] {
    SolverConfig c = cfg;
    c.resolution = m.kind == ModelKind::FlatTorus ? static_cast<std::size_t>(std::llround(std::cbrt(u0.size()))) : u0.size();
    return c;
  }());
  require(u0.size() == grid->size(), ErrorKind::ResolutionMismatch, "initial field does not match the grid");
  for (double v : u0.values) require(v >= -cfg.solver_tol, ErrorKind::InvalidArgument, "initial data must be nonnegative");
  const bool weighted = weight.alpha != 0.0;
  const Representation rep = cfg.solver == SolverKind::FiniteDifference ? Representation::Grid : Representation::Spectral;
  if (weighted && (cfg.route == WeightedRoute::Conjugation || (cfg.route == WeightedRoute::Auto && !weight.time_dependent))) {
    require(!weight.time_dependent, ErrorKind::InvalidArgument, "conjugation needs a time-independent weight");
    const auto c = weight_coordinate(*grid);
    std::vector<double> e(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) e[i] = std::exp(weight.alpha * weight.psi(c[i], t0));
    ScalarField v0 = u0;
    for (std::size_t i = 0; i < e.size(); ++i) v0[i] *= e[i];
    auto back = [&](ScalarField f) {
      for (std::size_t i = 0; i < e.size(); ++i) f[i] /= e[i];
      return f;
    };
    FieldObserver inner;
    if (observer) inner = [&](double l, const ScalarField& f) { observer(l, back(f)); };
    return back(evolve_weighted_solution(traj, WeightSpec::none(), v0, t0, t1, cfg, sample_times, inner));
  }

  std::vector<double> samples = sample_times;
  std::sort(samples.begin(), samples.end());
  std::vector<double> marks{t0};
  for (double s : samples)
    if (s > t0 && s < t1) marks.push_back(s);
  marks.push_back(t1);

  auto notify = [&](double l, const std::vector<double>& u) {
    if (observer) observer(l, ScalarField{u, rep});
  };
  const bool observe = observer && !samples.empty();

  if (m.kind == ModelKind::FlatTorus) {
    const std::size_t n = grid->resolution;
    std::vector<double> u = u0.values;
    std::optional<Eigen::MatrixXd> A0;
    if (cfg.solver != SolverKind::FiniteDifference && weighted) {
      require(!weight.time_dependent, ErrorKind::InvalidArgument, "time-dependent weights need the finite-difference solver");
      std::vector<double> psi(n);
      for (std::size_t j = 0; j < n; ++j) psi[j] = weight.psi(static_cast<double>(j) * grid->spacing(0), t0);
      A0 = detail::periodic_weighted_operator(psi, grid->periods[0], weight.alpha);
    }
    if (observe && samples.front() <= t0 + 1e-15) notify(t0, u);
    for (std::size_t seg = 0; seg + 1 < marks.size(); ++seg) {
      const double la = marks[seg], lb = marks[seg + 1];
      if (lb > la) {
        if (cfg.solver == SolverKind::FiniteDifference) {
          double amin = std::min(traj.state_at(la).scale, traj.state_at(lb).scale);
          const double h = grid->spacing(0);
          const double dt = cfg.dt_factor * std::pow(amin * h, 2);
          const std::size_t steps = std::max<std::size_t>(4, static_cast<std::size_t>(std::ceil((lb - la) / dt)));
          auto coef = [&](double l) {
            const double a = traj.state_at(l).scale;
            return 1.0 / (a * a);
          };
          for (int a = 0; a < 3; ++a)
            detail::for_each_line(u, n, a, [&](std::vector<double>& line) {
              line = detail::line_fd_evolve(line, grid->periods[static_cast<std::size_t>(a)], la, lb, steps, coef,
                                            a == 0 && weighted ? &weight : nullptr, seg == 0 ? 2 : 0);
            });
        } else {
          const double tau = detail::inverse_square_scale_integral(traj, la, lb);
          std::optional<Eigen::MatrixXd> E;
          if (A0) E = (tau * *A0).exp();
          for (int a = 0; a < 3; ++a)
            detail::for_each_line(u, n, a, [&](std::vector<double>& line) {
              if (a == 0 && E) line = detail::apply_matrix(*E, line);
              else line = spectral::heat_propagate(line, grid->periods[static_cast<std::size_t>(a)], tau);
            });
        }
      }
      if (observe && seg + 1 < marks.size() - 1) notify(lb, u);
      if (observe && seg + 1 == marks.size() - 1 && samples.back() >= t1 - 1e-15) notify(lb, u);
    }
    return ScalarField{u, rep};
  }

  // Zonal models.
  if (cfg.solver != SolverKind::FiniteDifference) {
    require(m.kind == ModelKind::RoundSphere, ErrorKind::InvalidArgument,
            "spectral zonal evolution needs a round sphere; use the finite-difference solver");
    require(!(weighted && weight.time_dependent), ErrorKind::InvalidArgument,
            "time-dependent weights need the finite-difference solver");
    const std::size_t n = grid->resolution;
    const double base = grid->radius;
    std::optional<Eigen::MatrixXd> A;
    if (weighted) A = detail::sphere_weighted_operator(n, weight, t0);
    std::vector<double> u = u0.values;
    if (observe && samples.front() <= t0 + 1e-15) notify(t0, u);
    for (std::size_t seg = 0; seg + 1 < marks.size(); ++seg) {
      const double la = marks[seg], lb = marks[seg + 1];
      if (lb > la) {
        const double I = detail::inverse_square_scale_integral(traj, la, lb) / (base * base);
        if (A) u = detail::apply_matrix((I * *A).exp(), u);
        else u = detail::sphere_mode_propagate(u, I);
      }
      if (observe && seg + 1 < marks.size() - 1) notify(lb, u);
      if (observe && seg + 1 == marks.size() - 1 && samples.back() >= t1 - 1e-15) notify(lb, u);
    }
    return ScalarField{u, rep};
  }
  if (t1 == t0) return u0;
  const std::size_t steps = detail::zonal_steps(traj, grid, t0, t1, cfg);
  std::function<void(double, const std::vector<double>&)> obs;
  if (observe) obs = notify;
  return ScalarField{
      detail::zonal_fd_forward(traj, grid, u0.values, t0, t1, steps, weighted ? &weight : nullptr, &samples, obs),
      Representation::Grid};
}

/// Conjugate evolution d/dt u = -Delta u + S u, run from t_hi down to t_lo
/// (the well-posed direction). Mass int u dV_{g(t)} is conserved. Samples are
/// visited in descending order.
inline ScalarField evolve_conjugate_solution(const FlowTrajectory& traj, const ScalarField& u_hi, double t_hi, double t_lo,
                                             const SolverConfig& cfg = {}, const std::vector<double>& sample_times = {},
                                             const FieldObserver& observer = {}) {
  require(t_hi >= t_lo, ErrorKind::InvalidArgument, "conjugate evolution runs from t_hi down to t_lo");
  require(t_lo >= traj.start() - 1e-14 && t_hi <= traj.end() + 1e-14, ErrorKind::RangeError,
          "conjugate interval outside the trajectory range");
  const auto& m = *traj.model;
  require(u_hi.size() == m.size(), ErrorKind::ResolutionMismatch, "final data does not match the trajectory grid");
  std::vector<double> samples = sample_times;
  std::sort(samples.begin(), samples.end(), std::greater<>());
  // Warped models always take the finite-volume path, whose fields live on the grid.
  const bool fd = cfg.solver == SolverKind::FiniteDifference || !detail::scale_only(traj);
  const Representation rep = fd ? Representation::Grid : Representation::Spectral;
  auto notify = [&](double l, const std::vector<double>& u) {
    if (observer) observer(l, ScalarField{u, rep});
  };

  if (cfg.solver != SolverKind::FiniteDifference && detail::scale_only(traj)) {
    // Mass form w = a^3 u evolves by the plain heat equation in the flat time.
    std::vector<double> marks{t_hi};
    for (double s : samples)
      if (s < t_hi && s > t_lo) marks.push_back(s);
    marks.push_back(t_lo);
    std::vector<double> u = u_hi.values;
    const double a_hi = traj.state_at(t_hi).scale;
    std::vector<double> w = u;
    std::size_t si = 0;
    auto emit = [&](double l) {
      const double a = traj.state_at(l).scale;
      std::vector<double> uu(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) uu[i] = w[i] * std::pow(a_hi / a, 3);
      while (si < samples.size() && samples[si] >= l - 1e-12) notify(samples[si++], uu);
      return uu;
    };
    emit(t_hi);
    for (std::size_t seg = 0; seg + 1 < marks.size(); ++seg) {
      const double la = marks[seg], lb = marks[seg + 1];
      if (la > lb) {
        const double tau = detail::inverse_square_scale_integral(traj, lb, la);
        if (m.kind == ModelKind::FlatTorus) {
          for (int a = 0; a < 3; ++a)
            detail::for_each_line(w, m.resolution, a, [&](std::vector<double>& line) {
              line = spectral::heat_propagate(line, m.periods[static_cast<std::size_t>(a)], tau);
            });
        } else {
          w = detail::sphere_mode_propagate(w, tau / (m.radius * m.radius));
        }
      }
      u = emit(lb);
    }
    return ScalarField{u, rep};
  }
  require(m.zonal(), ErrorKind::InvalidArgument, "finite-difference conjugate evolution is implemented for zonal models");
  if (t_hi == t_lo) return u_hi;
  const std::size_t steps = detail::zonal_steps(traj, traj.model, t_lo, t_hi, cfg);
  std::function<void(double, const std::vector<double>&)> obs;
  if (observer && !samples.empty()) obs = notify;
  return ScalarField{detail::zonal_fd_conjugate(traj, traj.model, u_hi.values, t_hi, t_lo, steps, &samples, obs), rep};
}

/// H(x, t; ., lambda) for a pole x: the conjugate kernel, started from a
/// Gaussian about x at t - delta and evolved down to lambda.
inline KernelSlice solve_conjugate_kernel(const FlowTrajectory& traj, const Point& x, double lambda, double t,
                                          const SolverConfig& cfg = {}) {
  detail::check_times(traj, lambda, t);
  require(traj.model->zonal() && detail::is_pole(x), ErrorKind::UnsupportedPoints,
          "conjugate kernels are computed about a pole of a zonal model");
  SolverConfig c = cfg;
  c.solver = SolverKind::FiniteDifference;
  const auto grid = traj.model;
  const std::size_t n = grid->resolution;
  const MetricState st = traj.state_at(t);
  const double h_phys = zonal_metric(st).phi.front() * grid->spacing();
  KernelSlice k;
  k.model = grid;
  k.source = x;
  k.s = lambda;
  k.t = t;
  k.solver = SolverKind::FiniteDifference;
  k.delta = detail::resolve_delta(c, h_phys, lambda, t);
  const MetricState st_d = traj.state_at(t - k.delta);
  const auto g = detail::zonal_gaussian(st_d, k.delta, volume_measure(st_d, Representation::Grid), x.c[0] < 0);
  k.steps = detail::zonal_steps(traj, grid, lambda, t - k.delta, c);
  k.values = ScalarField{detail::zonal_fd_conjugate(traj, grid, g, t - k.delta, lambda, k.steps), Representation::Grid};
  detail::finish(k);
  return k;
}

// ---------------------------------------------------------------------------
// Semigroup checks

namespace detail {

inline std::vector<std::complex<double>> fft3(const std::vector<std::complex<double>>& v, std::size_t n, bool inverse) {
  std::vector<std::complex<double>> out = v;
  std::vector<std::complex<double>> line(n), res;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? n : n * n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = axis == 0 ? n * (a + n * b) : (axis == 1 ? a + n * n * b : a + n * b);
        for (std::size_t k = 0; k < n; ++k) line[k] = out[base + k * stride];
        if (inverse) spectral::fft_engine().inv(res, line);
        else spectral::fft_engine().fwd(res, line);
        for (std::size_t k = 0; k < n; ++k) out[base + k * stride] = res[k];
      }
  }
  return out;
}

}  // namespace detail

/// max_x |H(x,t;y,s) - int H(x,t;z,tau) H(z,tau;y,s) dV_{g(tau)}(z)| / max H.
/// `first` is H(., tau; y, s), `second` is H(., t; y2, tau) for a grid source y2
/// (translation invariance on the torus, rotation invariance on the round
/// sphere supply every other source), `direct` is H(., t; y, s).
inline double semigroup_check(const KernelSlice& first, const KernelSlice& second, const KernelSlice& direct,
                              double volume_scale_tau) {
  const auto& m = *first.model;
  require(second.model->kind == m.kind && direct.model->kind == m.kind && second.model->size() == m.size() &&
              direct.model->size() == m.size(),
          ErrorKind::MismatchedModels, "semigroup chain mixes different grids");
  require(std::abs(first.t - second.s) < 1e-12 && std::abs(first.s - direct.s) < 1e-12 &&
              std::abs(second.t - direct.t) < 1e-12,
          ErrorKind::MismatchedModels, "semigroup chain times do not line up");
  std::vector<double> conv(m.size());
  if (m.kind == ModelKind::FlatTorus) {
    const std::size_t n = m.resolution;
    // Shift the second slice so that its source sits at the origin.
    std::array<std::size_t, 3> off{};
    for (std::size_t a = 0; a < 3; ++a) {
      const double q = second.source.c[a] / m.spacing(static_cast<int>(a));
      require(std::abs(q - std::round(q)) < 1e-9, ErrorKind::InvalidArgument, "second slice source must be a grid point");
      off[a] = static_cast<std::size_t>(std::llround(q)) % n;
    }
    std::vector<std::complex<double>> f(m.size()), g(m.size());
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = i + n * (j + n * k);
          const std::size_t src = (i + off[0]) % n + n * ((j + off[1]) % n + n * ((k + off[2]) % n));
          f[idx] = first.values[idx];
          g[idx] = second.values[src];
        }
    const auto F = detail::fft3(f, n, false), G = detail::fft3(g, n, false);
    std::vector<std::complex<double>> P(m.size());
    for (std::size_t i = 0; i < P.size(); ++i) P[i] = F[i] * G[i];
    const auto c = detail::fft3(P, n, true);
    const double dv = std::pow(volume_scale_tau, 3) * m.spacing(0) * m.spacing(1) * m.spacing(2);
    for (std::size_t i = 0; i < conv.size(); ++i) conv[i] = c[i].real() * dv;
  } else {
    require(m.kind == ModelKind::RoundSphere, ErrorKind::InvalidArgument,
            "use semigroup_check_pole on warped spheres");
    // Zonal products: (f * g)_l = Vol a_l b_l / (l + 1).
    const auto a = detail::zonal_modes(first.values.values);
    const auto b = detail::zonal_modes(second.values.values);
    const double r = m.radius * volume_scale_tau;
    const double vol = 2 * std::numbers::pi * std::numbers::pi * r * r * r;
    std::vector<double> c(a.size());
    for (std::size_t l = 0; l < c.size(); ++l) c[l] = vol * a[l] * b[l] / (l + 1.0);
    conv = detail::zonal_synthesis(c, m.resolution);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < conv.size(); ++i) worst = std::max(worst, std::abs(conv[i] - direct.values[i]));
  return worst / direct.max();
}

/// Semigroup residual at both poles of a zonal model, using the forward solver
/// for H(., tau; N, s) and H(., t; N, s) and the conjugate solver for
/// H(x, t; ., tau) with x a pole.
inline double semigroup_check_pole(const FlowTrajectory& traj, double s, double tau, double t, const SolverConfig& cfg) {
  SolverConfig c = cfg;
  c.solver = SolverKind::FiniteDifference;
  c.resolution = 0;
  const auto H1 = solve_heat_kernel(traj, Point::north_pole(), s, tau, c);
  const auto H = solve_heat_kernel(traj, Point::north_pole(), s, t, c);
  const auto w = volume_measure(traj.state_at(tau), Representation::Grid);
  double worst = 0.0;
  for (const Point& x : {Point::north_pole(), Point::south_pole()}) {
    const auto V = solve_conjugate_kernel(traj, x, tau, t, c);
    double chained = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) chained += V.values[i] * H1.values[i] * w[i];
    const double direct =
        spectral::zonal_interpolate(H.values.values, spectral::Parity::Even, x.c[0] > 0 ? 0.0 : std::numbers::pi);
    worst = std::max(worst, std::abs(chained - direct));
  }
  return worst / H.max();
}

// ---------------------------------------------------------------------------
// Export

inline std::string kernel_to_csv(const KernelSlice& k) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = *k.model;
  if (m.kind == ModelKind::FlatTorus) {
    os << "x1,x2,x3,value\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Point p = grid_point(m, i);
      os << p.c[0] << ',' << p.c[1] << ',' << p.c[2] << ',' << k.values[i] << '\n';
    }
  } else {
    os << "polar_angle,value\n";
    const auto x = spectral::zonal_grid(m.resolution);
    for (std::size_t i = 0; i < m.size(); ++i) os << x[i] << ',' << k.values[i] << '\n';
  }
  return os.str();
}

inline nlohmann::json kernel_to_json(const KernelSlice& k, bool include_values = true) {
  nlohmann::json j{{"model", model_to_json(*k.model)},
                   {"source", k.source.c},
                   {"s", k.s},
                   {"t", k.t},
                   {"operator", k.op == OperatorKind::Plain ? "plain" : "weighted"},
                   {"alpha", k.alpha},
                   {"weight", k.weight_description},
                   {"solver", to_string(k.solver)},
                   {"delta", k.delta},
                   {"resolution", k.model->resolution},
                   {"error_estimate", k.error_estimate},
                   {"tail_bound", k.tail_bound},
                   {"min_value", k.min_value},
                   {"max_value", k.max()},
                   {"positive", k.positive},
                   {"steps", k.steps}};
  if (include_values) j["values"] = k.values.values;
  return j;
}

}  // namespace hkflow

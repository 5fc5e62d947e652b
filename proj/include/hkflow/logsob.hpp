#pragma once

// Log-Sobolev machinery along the flow: the Sobolev-constant estimate of
// (M, g(0)), the constants A, B, gamma-family and C1, C2, C, the functional
// inequality deficits, the Moser iteration schedules and the entropy engine
// (W, W*, mu*, conjugate densities).
//
// Throughout, 0 log 0 = 0 and logarithms of densities are floored at 1e-300.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include "json.hpp"

#include "hkflow/kernels.hpp"

namespace hkflow {

inline constexpr double kDensityFloor = 1e-300;

namespace detail {

inline double xlogx2(double u) {
  // u^2 log u^2 with the continuous extension at 0.
  const double u2 = u * u;
  return u2 > kDensityFloor ? u2 * std::log(u2) : 0.0;
}

inline double lp_norm(const std::vector<double>& w, const std::vector<double>& u, double p) {
  double umax = 0.0;
  for (double x : u) umax = std::max(umax, std::abs(x));
  if (umax == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += w[i] * std::pow(std::abs(u[i]) / umax, p);
  return umax * std::pow(acc, 1.0 / p);
}

inline ScalarField trace_or_curvature(const MetricState& s, const ScalarField* S) {
  if (S) {
    check_field(s, *S);
    return *S;
  }
  return scalar_curvature(s);
}

inline void require_nonnegative(const ScalarField& u, const char* what) {
  for (double x : u.values)
    require(x >= 0.0 && std::isfinite(x), ErrorKind::InvalidArgument, std::string(what) + " must be finite and nonnegative");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Constants

struct LogSobConstants {
  int n = 3;
  double C_S = 0.0;         // value used in A, B (estimate times safety factor)
  double C_S_estimate = 0.0;
  double safety_factor = 1.0;
  double A = 0.0;
  double B = 0.0;           // 4 C_S^-2 Vol^-2/n - min S0, as derived
  double T = 0.0;
  double maxR0minus = 0.0;
  double volume0 = 0.0;
  double minS0 = 0.0;

  /// B as it enters gamma and the iteration bounds. Replacing t by T and
  /// bounding B(t1 - t0) by B T both need B >= 0; raising B only weakens the
  /// log-Sobolev inequality, so a negative B is clamped to zero.
  double B_eff() const { return std::max(B, 0.0); }
};

inline LogSobConstants make_constants(int n, double C_S, double T, double maxR0minus, double volume0, double minS0,
                                      double safety_factor = 1.0) {
  require(n >= 3, ErrorKind::InvalidArgument, "log-Sobolev constants need n >= 3");
  require(C_S > 0.0 && safety_factor >= 1.0, ErrorKind::InvalidArgument,
          "Sobolev constant must be positive and the safety factor at least 1");
  require(volume0 > 0.0 && T > 0.0 && maxR0minus >= 0.0, ErrorKind::InvalidArgument,
          "constants need positive volume and horizon and a nonnegative max R0^-");
  LogSobConstants c;
  c.n = n;
  c.C_S_estimate = C_S;
  c.safety_factor = safety_factor;
  c.C_S = C_S * safety_factor;
  c.T = T;
  c.maxR0minus = maxR0minus;
  c.volume0 = volume0;
  c.minS0 = minS0;
  c.A = 0.5 * n * (2.0 * std::log(c.C_S) + std::log(static_cast<double>(n)) - 1.0);
  c.B = 4.0 / (c.C_S * c.C_S) * std::pow(volume0, -2.0 / n) - minS0;
  return c;
}

// ---------------------------------------------------------------------------
// Sobolev constant estimate

/// Profile of a trial function of one variable s (distance from a pole or
/// from the torus origin, or the first torus coordinate), with derivative.
struct RadialTrial {
  std::string family;
  double parameter = 0.0;
  double support = 0.0;  // f vanishes for s > support
  std::function<double(double)> f, df;
};

/// Volume density of the level sets of s: dV = density(s) ds on [0, extent].
struct RadialMeasure {
  std::string label;
  double extent = 0.0;
  bool periodic = false;  // s is a periodic coordinate of period `extent`
  std::function<double(double)> density;
};

struct SobolevTrialValue {
  double quotient = 0.0;
  double critical_norm = 0.0;
  double l2_norm = 0.0;
  double gradient_norm = 0.0;
};

namespace detail {

/// int_0^R g(s) ds on panels that halve toward s = 0, so profiles
/// concentrated at scales far below R are still resolved.
inline double panel_integral(const std::function<double(double)>& g, double R) {
  using GL = boost::math::quadrature::gauss<double, 20>;
  double acc = 0.0, hi = R;
  for (int level = 0; level < 48; ++level) {
    const double lo = 0.5 * hi;
    acc += GL::integrate(g, lo, hi);
    hi = lo;
  }
  return acc + GL::integrate(g, 0.0, hi);
}

inline std::vector<RadialMeasure> sobolev_measures(const MetricState& s) {
  const auto& m = *s.model;
  const int n = m.n;
  std::vector<RadialMeasure> out;
  if (m.kind == ModelKind::FlatTorus) {
    const double a = s.scale;
    const double r = 0.5 * a * *std::min_element(m.periods.begin(), m.periods.end());
    out.push_back({"ball", r, false, [](double x) { return 4.0 * std::numbers::pi * x * x; }});
    const double cross = a * a * m.periods[1] * m.periods[2];
    out.push_back({"slab", a * m.periods[0], true, [cross](double) { return cross; }});
    return out;
  }
  const double area = unit_sphere_area(n);
  if (m.kind == ModelKind::RoundSphere) {
    const double r = s.radius();
    out.push_back({"cap", std::numbers::pi * r, false,
                   [=](double x) { return area * std::pow(r * std::sin(x / r), n - 1); }});
    return out;
  }
  // Warped: tabulate psi against arc length and interpolate linearly.
  const std::size_t M = 4096;
  std::vector<double> sx(M + 1), ps(M + 1);
  for (std::size_t j = 0; j <= M; ++j) {
    const double x = std::numbers::pi * static_cast<double>(j) / static_cast<double>(M);
    sx[j] = spectral::zonal_antiderivative(s.phi, x);
    ps[j] = j == 0 || j == M ? 0.0 : std::max(spectral::zonal_interpolate(s.psi, spectral::Parity::Odd, x), 0.0);
  }
  const double L = sx.back();
  out.push_back({"cap", L, false, [=](double x) {
                   auto it = std::upper_bound(sx.begin(), sx.end(), x);
                   std::size_t k = it == sx.begin() ? 0 : static_cast<std::size_t>(it - sx.begin()) - 1;
                   k = std::min(k, M - 1);
                   const double w = (x - sx[k]) / (sx[k + 1] - sx[k]);
                   return area * std::pow((1 - w) * ps[k] + w * ps[k + 1], n - 1);
                 }});
  return out;
}

/// Truncated extremal profile (1 + s^2/rho^2)^{-(n-2)/2} minus its value at R.
inline RadialTrial talenti_trial(int n, double rho, double R) {
  const double e = 0.5 * (n - 2);
  const double tail = std::pow(1.0 + R * R / (rho * rho), -e);
  RadialTrial t;
  t.family = "talenti";
  t.parameter = rho / R;
  t.support = R;
  t.f = [=](double s) { return s < R ? std::pow(1.0 + s * s / (rho * rho), -e) - tail : 0.0; };
  t.df = [=](double s) { return s < R ? -2.0 * e * s / (rho * rho) * std::pow(1.0 + s * s / (rho * rho), -e - 1.0) : 0.0; };
  return t;
}

inline RadialTrial polynomial_trial(double R, int k) {
  RadialTrial t;
  t.family = "polynomial" + std::to_string(k);
  t.parameter = R;
  t.support = R;
  t.f = [=](double s) { return s < R ? std::pow(1.0 - s * s / (R * R), k) : 0.0; };
  t.df = [=](double s) { return s < R ? -2.0 * k * s / (R * R) * std::pow(1.0 - s * s / (R * R), k - 1) : 0.0; };
  return t;
}

inline RadialTrial cosine_trial(double c, double extent, bool periodic) {
  const double w = (periodic ? 2.0 : 1.0) * std::numbers::pi / extent;
  RadialTrial t;
  t.family = "cosine";
  t.parameter = c;
  t.support = extent;
  t.f = [=](double s) { return 1.0 + c * std::cos(w * s); };
  t.df = [=](double s) { return -c * w * std::sin(w * s); };
  return t;
}

}  // namespace detail

/// (||u||_{2*} - ||u||_2 / Vol^{1/n}) / ||grad u||_2 for a trial profile.
inline SobolevTrialValue sobolev_quotient(const RadialMeasure& mu, const RadialTrial& trial, int n, double volume) {
  require(trial.support > 0.0 && trial.support <= mu.extent * (1 + 1e-12), ErrorKind::InvalidArgument,
          "trial support exceeds the measure's extent");
  const double crit = 2.0 * n / (n - 2.0);
  const double R = trial.support;
  const double i2 = detail::panel_integral([&](double s) { return trial.f(s) * trial.f(s) * mu.density(s); }, R);
  const double ic = detail::panel_integral([&](double s) { return std::pow(std::abs(trial.f(s)), crit) * mu.density(s); }, R);
  const double ig = detail::panel_integral([&](double s) { return trial.df(s) * trial.df(s) * mu.density(s); }, R);
  require(i2 > 0.0, ErrorKind::DegenerateTrials, "trial function vanishes identically");
  require(ig > 1e-24 * i2 / (mu.extent * mu.extent), ErrorKind::DegenerateTrials,
          "trial function has no gradient; it cannot be normalized to ||grad u||_2 = 1");
  SobolevTrialValue v;
  v.critical_norm = std::pow(ic, 1.0 / crit);
  v.l2_norm = std::sqrt(i2);
  v.gradient_norm = std::sqrt(ig);
  v.quotient = (v.critical_norm - v.l2_norm * std::pow(volume, -1.0 / n)) / v.gradient_norm;
  return v;
}

struct SobolevEstimate {
  double lower_bound = 0.0;  // best quotient found: C_S is at least this
  double safety_factor = 1.5;
  std::string best_family;
  double best_parameter = 0.0;
  std::size_t evaluations = 0;
  std::size_t budget = 0;

  double value() const { return lower_bound * safety_factor; }
};

/// Best quotient over a caller-supplied trial list. Degenerate trials are
/// skipped; a list with no admissible trial is an error.
inline SobolevEstimate sobolev_estimate_over(const MetricState& state0, const RadialMeasure& mu,
                                             const std::vector<RadialTrial>& trials) {
  const double vol = total_volume(state0);
  SobolevEstimate e;
  e.lower_bound = -std::numeric_limits<double>::infinity();
  for (const auto& t : trials) {
    try {
      const auto v = sobolev_quotient(mu, t, state0.model->n, vol);
      ++e.evaluations;
      if (v.quotient > e.lower_bound) {
        e.lower_bound = v.quotient;
        e.best_family = t.family;
        e.best_parameter = t.parameter;
      }
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::DegenerateTrials) throw;
    }
  }
  require(e.evaluations > 0, ErrorKind::DegenerateTrials, "every trial function is degenerate (zero gradient)");
  e.budget = trials.size();
  return e;
}

/// Lower bound on C_S of (M, g(0)) from extremal-type bumps, polynomial bumps
/// and first-mode cosines. Each family is scanned with `trial_budget` points
/// of its log-parameter and its best point refined by golden-section search.
inline SobolevEstimate estimate_sobolev_constant(const MetricState& state0, std::size_t trial_budget = 32,
                                                 double safety_factor = 1.5) {
  state0.validate();
  require(std::abs(state0.time) < 1e-12, ErrorKind::InvalidArgument, "the Sobolev constant is taken on g(0)");
  require(trial_budget >= 4, ErrorKind::InvalidArgument, "Sobolev estimate needs a trial budget of at least 4");
  require(safety_factor >= 1.0, ErrorKind::InvalidArgument, "safety factor must be at least 1");
  const int n = state0.model->n;
  const double vol = total_volume(state0);

  SobolevEstimate best;
  best.safety_factor = safety_factor;
  best.budget = trial_budget;
  best.lower_bound = -std::numeric_limits<double>::infinity();

  const auto measures = detail::sobolev_measures(state0);
  auto consider = [&](const RadialMeasure& mu, const std::function<RadialTrial(double)>& make, double lo, double hi) {
    auto eval = [&](double x) {
      ++best.evaluations;
      try {
        return sobolev_quotient(mu, make(x), n, vol).quotient;
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::DegenerateTrials) throw;
        return -std::numeric_limits<double>::infinity();
      }
    };
    std::vector<double> xs(trial_budget), vs(trial_budget);
    std::size_t arg = 0;
    for (std::size_t k = 0; k < trial_budget; ++k) {
      xs[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(trial_budget - 1);
      vs[k] = eval(xs[k]);
      if (vs[k] > vs[arg]) arg = k;
    }
    if (!std::isfinite(vs[arg])) return;
    double a = xs[arg == 0 ? 0 : arg - 1], b = xs[std::min(arg + 1, trial_budget - 1)];
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - g * (b - a), d = a + g * (b - a);
    double fc = eval(c), fd = eval(d);
    while (b - a > 1e-7 * (hi - lo)) {
      if (fc > fd) {
        b = d, d = c, fd = fc;
        c = b - g * (b - a);
        fc = eval(c);
      } else {
        a = c, c = d, fc = fd;
        d = a + g * (b - a);
        fd = eval(d);
      }
    }
    double xb = xs[arg], vb = vs[arg];
    for (auto [x, v] : {std::pair{a, eval(a)}, std::pair{b, eval(b)}, std::pair{c, fc}, std::pair{d, fd}})
      if (v > vb) xb = x, vb = v;
    if (vb > best.lower_bound) {
      best.lower_bound = vb;
      const auto t = make(xb);
      best.best_family = mu.label + ":" + t.family;
      best.best_parameter = t.parameter;
    }
  };

  for (const auto& mu : measures) {
    const double ext = mu.extent;
    if (!mu.periodic) {
      for (double frac : {1.0, 0.5}) {
        const double R = frac * ext;
        consider(mu, [&, R](double x) { return detail::talenti_trial(n, R * std::exp(x), R); }, std::log(1e-4), 0.0);
      }
      for (int k : {2, 4})
        consider(mu, [&, k](double x) { return detail::polynomial_trial(ext * std::exp(x), k); }, std::log(1e-3), 0.0);
    }
    if (mu.periodic || state0.model->zonal())
      consider(mu, [&](double x) { return detail::cosine_trial(std::exp(x), ext, mu.periodic); }, std::log(1e-2),
               std::log(1e2));
  }
  require(std::isfinite(best.lower_bound), ErrorKind::DegenerateTrials, "every trial function is degenerate");
  return best;
}

/// Constants of (M, g(0)) for a trajectory: C_S from the trial estimate times
/// its safety factor, min S and max S^- of the flow tensor trace at time 0.
inline LogSobConstants constants_for(const FlowTrajectory& traj, const SobolevEstimate& cs, double T = 0.0) {
  const MetricState s0 = traj.states.front();
  const auto S0 = trajectory_trace(traj, 0);
  const double minS = *std::min_element(S0.values.begin(), S0.values.end());
  return make_constants(s0.model->n, cs.lower_bound, T > 0.0 ? T : traj.end(), std::max(-minS, 0.0), total_volume(s0),
                        minS, cs.safety_factor);
}

// ---------------------------------------------------------------------------
// gamma family

namespace detail {

inline void check_gamma_args(double eps, double t, const LogSobConstants& c) {
  require(eps > 0.0 && std::isfinite(eps), ErrorKind::InvalidArgument, "epsilon must be positive");
  require(t >= 0.0 && t <= c.T * (1 + 1e-12), ErrorKind::RangeError, "time outside [0, T]");
}

}  // namespace detail

/// -(n/2) log eps + A + B (t + eps/4).
inline double gamma(double eps, double t, const LogSobConstants& c) {
  detail::check_gamma_args(eps, t, c);
  return -0.5 * c.n * std::log(eps) + c.A + c.B_eff() * (t + 0.25 * eps);
}

/// Constant of the L^p form (p > 1): gamma at eps' = 2 (p-1) eps / p, over p.
inline double gamma_tilde(double eps, double p, double t, const LogSobConstants& c) {
  detail::check_gamma_args(eps, t, c);
  require(p > 1.0, ErrorKind::InvalidArgument, "gamma_tilde needs p > 1");
  return (-0.5 * c.n * std::log(2.0 * (p - 1.0) / p * eps) + c.A + c.B_eff() * (t + (p - 1.0) / (2.0 * p) * eps)) / p;
}

/// Weighted-operator constant for p >= 2.
inline double gamma_hat_high(double eps, double p, double t, double alpha, const LogSobConstants& c) {
  detail::check_gamma_args(eps, t, c);
  require(p >= 2.0, ErrorKind::InvalidArgument, "gamma_hat_high needs p >= 2");
  return (-0.5 * c.n * std::log(eps) + c.A + c.B_eff() * (t + 0.5 * eps)) / p + 0.5 * eps * alpha * alpha * p;
}

/// Weighted-operator constant for 1 < p <= 2.
inline double gamma_hat_low(double eps, double p, double t, double alpha, const LogSobConstants& c) {
  detail::check_gamma_args(eps, t, c);
  require(p > 1.0 && p <= 2.0, ErrorKind::InvalidArgument, "gamma_hat_low needs 1 < p <= 2");
  return (-0.5 * c.n * std::log(2.0 * (p - 1.0) / p * eps) + c.A + c.B_eff() * (t + 0.25 * eps)) / p +
         eps * alpha * alpha * p / (2.0 * (p - 1.0));
}

// ---------------------------------------------------------------------------
// C1, C2, C

/// exp((2B/3 + max R0^-) T + A/2 + n/2).
inline double compute_C1(const LogSobConstants& c) {
  return std::exp((2.0 / 3.0 * c.B_eff() + c.maxR0minus) * c.T + 0.5 * c.A + 0.5 * c.n);
}

/// exp(((1/2 + 1/(32 log 2 - 16)) B + max R0^-) T + A/2 + (n/4) log(2 log 2 - 1) + (n/2)(1 + log 2)).
inline double compute_C2(const LogSobConstants& c) {
  const double ln2 = std::numbers::ln2;
  return std::exp(((0.5 + 1.0 / (32.0 * ln2 - 16.0)) * c.B_eff() + c.maxR0minus) * c.T + 0.5 * c.A +
                  0.25 * c.n * std::log(2.0 * ln2 - 1.0) + 0.5 * c.n * (1.0 + ln2));
}

inline double compute_C(const LogSobConstants& c) { return std::pow(2.0, 0.5 * c.n) * compute_C1(c) * compute_C2(c); }

/// Right-hand factors of the two contraction estimates: C_i dt^{-n/4} e^{2 alpha^2 dt}.
inline double ultra_factor(const LogSobConstants& c, double alpha, double dt) {
  require(dt > 0.0, ErrorKind::InvalidArgument, "time step must be positive");
  return compute_C1(c) * std::pow(dt, -0.25 * c.n) * std::exp(2.0 * alpha * alpha * dt);
}

inline double l1l2_factor(const LogSobConstants& c, double alpha, double dt) {
  require(dt > 0.0, ErrorKind::InvalidArgument, "time step must be positive");
  return compute_C2(c) * std::pow(dt, -0.25 * c.n) * std::exp(2.0 * alpha * alpha * dt);
}

inline nlohmann::json constants_to_json(const LogSobConstants& c) {
  return {{"n", c.n},
          {"C_S", c.C_S},
          {"C_S_estimate", c.C_S_estimate},
          {"safety_factor", c.safety_factor},
          {"A", c.A},
          {"B", c.B},
          {"B_eff", c.B_eff()},
          {"T", c.T},
          {"maxR0minus", c.maxR0minus},
          {"volume0", c.volume0},
          {"minS0", c.minS0},
          {"C1", compute_C1(c)},
          {"C2", compute_C2(c)},
          {"C", compute_C(c)}};
}

// ---------------------------------------------------------------------------
// Deficits

/// RHS - LHS of a functional inequality, with the magnitude of its terms
/// (the scale tolerances are measured against).
struct Deficit {
  double value = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  double scale = 0.0;
  double normalization_residual = 0.0;
};

/// int v^2 log v^2 <= eps int (|grad v|^2 + S v^2 / 4) + gamma(eps, t), after
/// rescaling v to unit L^2 norm. S defaults to the scalar curvature.
inline Deficit logsob_deficit(ScalarField v, double eps, double t, const MetricState& state, const LogSobConstants& c,
                              const ScalarField* S = nullptr) {
  detail::check_field(state, v);
  detail::require_nonnegative(v, "log-Sobolev test function");
  const auto w = volume_measure(state, v.rep);
  double n2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) n2 += w[i] * v[i] * v[i];
  require(n2 > 0.0, ErrorKind::Normalization, "test function has zero L2 norm");
  Deficit d;
  d.normalization_residual = std::abs(n2 - 1.0);
  for (auto& x : v.values) x /= std::sqrt(n2);
  const auto Sf = detail::trace_or_curvature(state, S);
  const auto g2 = gradient_norm_sq(state, v);
  double ent = 0.0, dir = 0.0, curv = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    ent += w[i] * detail::xlogx2(v[i]);
    dir += w[i] * g2[i];
    curv += w[i] * 0.25 * Sf[i] * v[i] * v[i];
  }
  const double gam = gamma(eps, t, c);
  d.lhs = ent;
  d.rhs = eps * (dir + curv) + gam;
  d.value = d.rhs - d.lhs;
  d.scale = std::abs(ent) + eps * (std::abs(dir) + std::abs(curv)) + std::abs(gam);
  return d;
}

enum class LpVariant { Plain, WeightedHigh, WeightedLow };

inline std::string to_string(LpVariant v) {
  switch (v) {
    case LpVariant::Plain: return "plain";
    case LpVariant::WeightedHigh: return "weightedHigh";
    case LpVariant::WeightedLow: return "weightedLow";
  }
  return "?";
}

/// psi_t on the state's grid (first coordinate or polar angle).
inline ScalarField weight_field(const MetricState& state, const WeightSpec& w, Representation rep) {
  const auto coord = weight_coordinate(*state.model);
  ScalarField f{std::vector<double>(coord.size()), rep};
  for (std::size_t i = 0; i < coord.size(); ++i) f[i] = w.psi(coord[i], state.time);
  return f;
}

/// L u = phi^{-1} Delta (phi u), phi = exp(alpha psi_t).
inline ScalarField weighted_operator_apply(const MetricState& state, const WeightSpec& w, const ScalarField& u) {
  const auto psi = weight_field(state, w, u.rep);
  ScalarField pu = u;
  for (std::size_t i = 0; i < u.size(); ++i) pu[i] *= std::exp(w.alpha * psi[i]);
  auto out = laplace_beltrami(state, pu);
  for (std::size_t i = 0; i < u.size(); ++i) out[i] *= std::exp(-w.alpha * psi[i]);
  return out;
}

/// RHS - LHS of the L^p log-Sobolev inequality: with Delta (plain, eps/2
/// in front of int u^{p-1} Delta u) or with the weighted operator L_t.
inline Deficit lp_logsob_deficit(const ScalarField& u, double eps, double p, double t, const MetricState& state,
                                 const LogSobConstants& c, LpVariant variant, const WeightSpec* weight = nullptr,
                                 const ScalarField* S = nullptr) {
  detail::check_field(state, u);
  detail::require_nonnegative(u, "L^p log-Sobolev test function");
  switch (variant) {
    case LpVariant::Plain: require(p > 1.0, ErrorKind::InvalidArgument, "plain variant needs p > 1"); break;
    case LpVariant::WeightedHigh: require(p >= 2.0, ErrorKind::InvalidArgument, "weightedHigh variant needs p >= 2"); break;
    case LpVariant::WeightedLow:
      require(p > 1.0 && p <= 2.0, ErrorKind::InvalidArgument, "weightedLow variant needs 1 < p <= 2");
      break;
  }
  const bool weighted = variant != LpVariant::Plain;
  require(!weighted || weight != nullptr, ErrorKind::InvalidArgument, "weighted variants need a weight");
  if (weighted) detail::require_certified(*weight);
  const auto w = volume_measure(state, u.rep);
  const auto Sf = detail::trace_or_curvature(state, S);
  const auto Lu = weighted ? weighted_operator_apply(state, *weight, u) : laplace_beltrami(state, u);
  const double np = detail::lp_norm(w, u.values, p);
  require(np > 0.0, ErrorKind::Normalization, "test function vanishes");
  double ent = 0.0, op = 0.0, curv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double up = std::pow(u[i], p);
    ent += u[i] > kDensityFloor ? w[i] * up * std::log(u[i]) : 0.0;
    op += w[i] * std::pow(u[i], p - 1.0) * Lu[i];
    curv += w[i] * Sf[i] * up;
  }
  const double npp = std::pow(np, p);
  double gam = 0.0, opc = 0.0;
  switch (variant) {
    case LpVariant::Plain:
      gam = gamma_tilde(eps, p, t, c);
      opc = -0.5 * eps;
      break;
    case LpVariant::WeightedHigh:
      gam = gamma_hat_high(eps, p, t, weight->alpha, c);
      opc = -eps;
      break;
    case LpVariant::WeightedLow:
      gam = gamma_hat_low(eps, p, t, weight->alpha, c);
      opc = -eps;
      break;
  }
  const double cc = (p - 1.0) / (2.0 * p * p) * eps;
  Deficit d;
  d.lhs = ent;
  d.rhs = opc * op + cc * curv + gam * npp + npp * std::log(np);
  d.value = d.rhs - d.lhs;
  d.scale = std::abs(ent) + std::abs(opc * op) + std::abs(cc * curv) + std::abs(gam * npp) + std::abs(npp * std::log(np));
  return d;
}

/// int u^{p-1} Delta u + alpha^2 p' ||u||_p^p - 2 int u^{p-1} L u with
/// p' = p for p >= 2 and p' = p / (p-1) for 1 < p < 2.
inline Deficit davies_deficit(const ScalarField& u, double p, const WeightSpec& weight, const MetricState& state) {
  detail::check_field(state, u);
  detail::require_nonnegative(u, "Davies test function");
  require(p > 1.0, ErrorKind::InvalidArgument, "Davies inequality needs p > 1");
  const auto w = volume_measure(state, u.rep);
  const auto Du = laplace_beltrami(state, u);
  const auto Lu = weighted_operator_apply(state, weight, u);
  double lap = 0.0, lop = 0.0, upp = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double up1 = std::pow(u[i], p - 1.0);
    lap += w[i] * up1 * Du[i];
    lop += w[i] * up1 * Lu[i];
    upp += w[i] * std::pow(u[i], p);
  }
  const double coef = weight.alpha * weight.alpha * (p >= 2.0 ? p : p / (p - 1.0));
  Deficit d;
  d.lhs = 2.0 * lop;
  d.rhs = lap + coef * upp;
  d.value = d.rhs - d.lhs;
  d.scale = std::abs(lap) + std::abs(coef * upp) + 2.0 * std::abs(lop);
  return d;
}

// ---------------------------------------------------------------------------
// Moser iteration schedules

enum class ScheduleKind { Ultra, L1L2 };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::Ultra ? "ultra" : "l1l2"; }

/// eps(q), p(t) and the exponent N(t) of one contraction step on [t0, t1].
/// Ultra runs p from 2 to infinity, L1L2 from 1 to 2.
struct IterationSchedule {
  ScheduleKind kind = ScheduleKind::Ultra;
  double t0 = 0.0, t1 = 0.0;
  double alpha = 0.0;
  LogSobConstants consts;

  double dt() const { return t1 - t0; }
  double p_start() const { return kind == ScheduleKind::Ultra ? 2.0 : 1.0; }
  static double l1l2_c() { return 1.0 / (std::numbers::ln2 - 0.5); }

  double epsilon(double q) const {
    if (kind == ScheduleKind::Ultra) return 8.0 * dt() / (q * q);
    return dt() * l1l2_c() * (q - 1.0) / q;
  }

  /// gamma-hat(eps(q), q, T) / q, with q - 1 supplied separately so the
  /// logarithmic endpoint of the L1L2 integral keeps full precision.
  double integrand(double q, double qm1) const {
    if (kind == ScheduleKind::Ultra) return gamma_hat_high(epsilon(q), q, consts.T, alpha, consts) / q;
    const double eps = dt() * l1l2_c() * qm1 / q;
    const double n = consts.n;
    const double g = (-0.5 * n * std::log(2.0 * qm1 / q * eps) + consts.A + consts.B_eff() * (consts.T + 0.25 * eps)) / q +
                     0.5 * dt() * l1l2_c() * alpha * alpha;
    return g / q;
  }

  double p(double t) const {
    require(t >= t0 - 1e-14 && t <= t1 + 1e-14, ErrorKind::RangeError, "schedule time outside [t0, t1]");
    if (kind == ScheduleKind::Ultra) {
      if (t >= t1) return std::numeric_limits<double>::infinity();
      return 2.0 * std::sqrt(dt() / (t1 - t));
    }
    const double target = std::clamp((t - t0) / dt(), 0.0, 1.0) * (std::numbers::ln2 - 0.5);
    auto g = [](double q) { return std::log(q) + 1.0 / q - 1.0; };
    require(g(1.0) <= target + 1e-15 && g(2.0) >= target - 1e-15, ErrorKind::InversionFailure,
            "l1l2 schedule inversion lost monotonicity");
    if (target <= 0.0) return 1.0;
    if (target >= std::numbers::ln2 - 0.5) return 2.0;
    std::uintmax_t iters = 200;
    auto r = boost::math::tools::toms748_solve([&](double q) { return g(q) - target; }, 1.0, 2.0,
                                               boost::math::tools::eps_tolerance<double>(52), iters);
    require(iters < 200, ErrorKind::InversionFailure, "l1l2 schedule inversion did not converge");
    return 0.5 * (r.first + r.second);
  }

  /// Time at which p(t) = q (the schedule's defining formula).
  double time_of(double q) const {
    if (kind == ScheduleKind::Ultra) return t1 - 4.0 * dt() / (q * q);
    return t0 + (std::log(q) + 1.0 / q - 1.0) / (std::numbers::ln2 - 0.5) * dt();
  }

  double N(double t) const {
    const double pt = p(t);
    const double tail = (std::min(t, t1) - t0) * consts.maxR0minus;
    if (pt <= p_start()) return tail;
    if (kind == ScheduleKind::Ultra) {
      auto f = [&](double q) { return integrand(q, q - 1.0); };
      if (std::isinf(pt)) {
        boost::math::quadrature::exp_sinh<double> es;
        return es.integrate(f, 2.0, std::numeric_limits<double>::infinity()) + tail;
      }
      return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 2.0, pt, 12, 1e-14) + tail;
    }
    // q = 1 + v^2 turns the logarithmic endpoint into a bounded integrand.
    auto f = [&](double v) { return v == 0.0 ? 0.0 : 2.0 * v * integrand(1.0 + v * v, v * v); };
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 0.0, std::sqrt(pt - 1.0), 15, 1e-14) + tail;
  }

  double N_end() const { return N(t1); }
};

inline IterationSchedule iteration_schedule(ScheduleKind kind, double t0, double t1, const LogSobConstants& c,
                                            double alpha = 0.0) {
  require(t1 > t0 && t0 >= 0.0, ErrorKind::InvalidArgument, "schedule needs 0 <= t0 < t1");
  require(t1 <= c.T * (1 + 1e-12), ErrorKind::RangeError, "schedule end beyond the constants' horizon T");
  IterationSchedule s;
  s.kind = kind;
  s.t0 = t0;
  s.t1 = t1;
  s.alpha = alpha;
  s.consts = c;
  return s;
}

struct MoserSample {
  double t = 0.0;
  double p = 0.0;
  double norm = 0.0;  // ||u(t)||_{p(t), g(t)}
  double N = 0.0;
  double tracked = 0.0;  // norm * exp(-N)
};

struct MoserTrack {
  std::vector<MoserSample> samples;
  double worst_increase = 0.0;  // max relative step increase of the tracked quantity

  bool monotone(double tol = 1e-6) const { return worst_increase <= tol; }
};

/// Evolves u0 by u_t = L_t u over the schedule and records
/// ||u||_{p(t), g(t)} e^{-N(t)} at `samples` times. Ultra samples are spaced
/// evenly in log p up to p_max, since p(t) is infinite at t1.
inline MoserTrack track_moser_norm(const FlowTrajectory& traj, const WeightSpec& weight, const ScalarField& u0,
                                   const IterationSchedule& sched, const SolverConfig& cfg = {}, std::size_t samples = 24,
                                   double p_max = 64.0) {
  require(samples >= 2, ErrorKind::InvalidArgument, "Moser tracking needs at least two samples");
  require(weight.alpha == sched.alpha, ErrorKind::InvalidArgument, "weight and schedule disagree on alpha");
  for (double x : u0.values) require(x > 0.0, ErrorKind::InvalidArgument, "Moser tracking needs positive initial data");
  std::vector<double> times(samples);
  for (std::size_t k = 0; k < samples; ++k) {
    const double f = static_cast<double>(k) / static_cast<double>(samples - 1);
    times[k] = sched.kind == ScheduleKind::Ultra ? sched.time_of(2.0 * std::pow(p_max / 2.0, f))
                                                 : sched.t0 + f * sched.dt();
  }
  times.front() = sched.t0;
  MoserTrack track;
  auto record = [&](double t, const ScalarField& u) {
    MoserSample m;
    m.t = t;
    m.p = sched.p(t);
    const auto st = traj.state_at(t);
    m.norm = detail::lp_norm(volume_measure(st, u.rep), u.values, m.p);
    m.N = sched.N(t);
    m.tracked = m.norm * std::exp(-m.N);
    track.samples.push_back(m);
  };
  evolve_weighted_solution(traj, weight, u0, sched.t0, times.back(), cfg, times, record);
  for (std::size_t k = 1; k < track.samples.size(); ++k) {
    const double a = track.samples[k - 1].tracked, b = track.samples[k].tracked;
    track.worst_increase = std::max(track.worst_increase, (b - a) / a);
  }
  return track;
}

// ---------------------------------------------------------------------------
// Entropy engine

/// f, tau and the conjugate density u = (4 pi tau)^{-n/2} e^{-f} at one time.
struct EntropyState {
  double time = 0.0;
  double tau = 0.0;
  ScalarField f;
  ScalarField u;
  double normalization_residual = 0.0;
};

inline double density_mass(const MetricState& s, const ScalarField& u) {
  return integrate(volume_measure(s, u.rep), u.values);
}

/// Builds the state from a density, recovering f by the logarithm.
inline EntropyState entropy_state_from_density(const MetricState& s, ScalarField u, double tau) {
  require(tau > 0.0, ErrorKind::InvalidArgument, "tau must be positive");
  detail::check_field(s, u);
  const int n = s.model->n;
  EntropyState e;
  e.time = s.time;
  e.tau = tau;
  e.normalization_residual = std::abs(density_mass(s, u) - 1.0);
  e.f = ScalarField{std::vector<double>(u.size()), u.rep};
  for (std::size_t i = 0; i < u.size(); ++i) {
    require(u[i] > kDensityFloor, ErrorKind::PositivityFloor, "conjugate density reached the positivity floor");
    e.f[i] = -std::log(u[i]) - 0.5 * n * std::log(4.0 * std::numbers::pi * tau);
  }
  e.u = std::move(u);
  return e;
}

/// Builds the state from f after shifting f by the constant that makes the
/// density integrate to one.
inline EntropyState entropy_state_from_f(const MetricState& s, ScalarField f, double tau) {
  require(tau > 0.0, ErrorKind::InvalidArgument, "tau must be positive");
  detail::check_field(s, f);
  const int n = s.model->n;
  ScalarField u{std::vector<double>(f.size()), f.rep};
  for (std::size_t i = 0; i < f.size(); ++i) u[i] = std::pow(4.0 * std::numbers::pi * tau, -0.5 * n) * std::exp(-f[i]);
  const double m = density_mass(s, u);
  for (auto& x : u.values) x /= m;
  return entropy_state_from_density(s, std::move(u), tau);
}

/// W = int [tau (S + |grad f|^2) + f - n] u dV.
inline double w_entropy(const MetricState& s, const EntropyState& e, const ScalarField* S = nullptr,
                        double tol = 1e-6) {
  detail::check_field(s, e.f);
  require(e.tau > 0.0, ErrorKind::InvalidArgument, "tau must be positive");
  const int n = s.model->n;
  const auto w = volume_measure(s, e.f.rep);
  double mass = 0.0;
  for (std::size_t i = 0; i < e.f.size(); ++i)
    mass += w[i] * std::pow(4.0 * std::numbers::pi * e.tau, -0.5 * n) * std::exp(-e.f[i]);
  require(std::abs(mass - 1.0) < tol, ErrorKind::Normalization,
          "W entropy needs int (4 pi tau)^{-n/2} e^{-f} dV = 1 (residual " + std::to_string(std::abs(mass - 1.0)) + ")");
  const auto Sf = detail::trace_or_curvature(s, S);
  const auto g2 = gradient_norm_sq(s, e.f);
  double W = 0.0;
  for (std::size_t i = 0; i < e.f.size(); ++i) {
    const double u = std::pow(4.0 * std::numbers::pi * e.tau, -0.5 * n) * std::exp(-e.f[i]);
    W += w[i] * (e.tau * (Sf[i] + g2[i]) + e.f[i] - n) * u;
  }
  return W;
}

/// W* = int [tau (4 |grad u|^2 + S u^2) - u^2 log u^2] dV for int u^2 dV = 1.
inline double w_star(const MetricState& s, const ScalarField& u, double tau, const ScalarField* S = nullptr,
                     double tol = 1e-6) {
  detail::check_field(s, u);
  require(tau > 0.0, ErrorKind::InvalidArgument, "tau must be positive");
  const auto w = volume_measure(s, u.rep);
  double n2 = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) n2 += w[i] * u[i] * u[i];
  require(std::abs(n2 - 1.0) < tol, ErrorKind::Normalization,
          "W* needs int u^2 dV = 1 (residual " + std::to_string(std::abs(n2 - 1.0)) + ")");
  const auto Sf = detail::trace_or_curvature(s, S);
  const auto g2 = gradient_norm_sq(s, u);
  double W = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i)
    W += w[i] * (tau * (4.0 * g2[i] + Sf[i] * u[i] * u[i]) - detail::xlogx2(u[i]));
  return W;
}

/// Square root density (4 pi tau)^{-n/4} e^{-f/2} paired with f in W*.
inline ScalarField w_star_partner(const EntropyState& e, int n) {
  ScalarField v = e.f;
  for (auto& x : v.values) x = std::pow(4.0 * std::numbers::pi * e.tau, -0.25 * n) * std::exp(-0.5 * x);
  return v;
}

struct ConjugateRun {
  std::vector<EntropyState> states;  // descending in flow time
  bool truncated = false;
  std::string truncation_reason;
  double worst_mass_error = 0.0;
};

/// Evolves the conjugate density u_t = -Delta u + S u from `final_state` at
/// t* down to t_lo (the well-posed direction), with tau(t) = tau(t*) + t* - t.
/// The run stops at the first sample where the density falls to the floor.
inline ConjugateRun evolve_conjugate_density(const FlowTrajectory& traj, const EntropyState& final_state, double t_lo,
                                             const std::vector<double>& sample_times, const SolverConfig& cfg = {},
                                             double mass_tol = 1e-6) {
  const double t_star = final_state.time;
  // tau grows as the run goes down in time, so tau(t*) > 0 suffices.
  require(final_state.tau > 0.0 && t_lo <= t_star, ErrorKind::InvalidArgument,
          "conjugate run needs tau(t*) > 0 and t_lo <= t*");
  ConjugateRun run;
  std::vector<double> samples = sample_times;
  samples.push_back(t_star);
  samples.push_back(t_lo);
  std::sort(samples.begin(), samples.end(), std::greater<>());
  samples.erase(std::unique(samples.begin(), samples.end(), [](double a, double b) { return std::abs(a - b) < 1e-14; }),
                samples.end());
  for (double s : samples)
    require(s <= t_star + 1e-14 && s >= t_lo - 1e-14, ErrorKind::RangeError, "sample outside [t_lo, t*]");
  auto on_sample = [&](double l, const ScalarField& u) {
    if (run.truncated) return;
    const auto st = traj.state_at(l);
    const double tau = final_state.tau + t_star - l;
    try {
      auto e = entropy_state_from_density(st, u, tau);
      run.worst_mass_error = std::max(run.worst_mass_error, e.normalization_residual);
      run.states.push_back(std::move(e));
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::PositivityFloor) throw;
      run.truncated = true;
      run.truncation_reason = "density reached the positivity floor at t = " + std::to_string(l);
    }
  };
  evolve_conjugate_solution(traj, final_state.u, t_star, t_lo, cfg, samples, on_sample);
  require(run.worst_mass_error < mass_tol, ErrorKind::Normalization,
          "conjugate evolution lost mass: " + std::to_string(run.worst_mass_error));
  return run;
}

struct WMonotonicity {
  std::vector<double> times;   // ascending
  std::vector<double> W;
  std::vector<double> interval_mid;
  std::vector<double> dWdt;    // finite differences per interval
  // 2 tau int |Sc + Hess f - g/2tau|^2 u dV + tau int D(Sc, grad f) u dV, zonal only. This is the
  // rate obtained by differentiating W directly; it agrees with the finite differences on List flow.
  std::vector<double> rhs;
  // The same integrand with 2 tau D(Sc, -grad f) in place of tau D(Sc, grad f). Identical on Ricci
  // flow, where D vanishes; kept so the two forms can be compared on other flows.
  std::vector<double> rhs_alt;
  double min_dWdt = std::numeric_limits<double>::infinity();
  double scale = 1.0;
};

namespace detail {

/// The monotonicity integrand for a zonal configuration, where Hess f has
/// eigenvalues f_ss (radial) and psi_s f_s / psi (tangential).
inline std::pair<double, double> w_rate_integrand(const FlowTrajectory& traj, const EntropyState& e) {
  const auto& m = *traj.model;
  const auto st = traj.state_at(e.time);
  const MetricState ws = m.kind == ModelKind::RoundSphere ? as_warped(st) : st;
  std::optional<ScalarField> aux;
  if (traj.has_aux()) aux = traj.aux_at(e.time);
  const auto T = zonal_tensors(traj.spec, ws, aux ? &*aux : nullptr);
  const auto z = zonal_metric(ws);
  const auto fx = zonal_dx(e.f);
  std::vector<double> fs(fx.size());
  for (std::size_t i = 0; i < fs.size(); ++i) fs[i] = fx[i] / z.phi[i];
  const auto fsx = zonal_dx(ScalarField{fs, e.f.rep}, spectral::Parity::Odd);
  std::vector<double> X(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) X[i] = -fs[i];
  const auto Dm = evaluate_D(traj.spec, traj, e.time, X);
  const auto Dp = evaluate_D(traj.spec, traj, e.time, fs);
  const auto w = volume_measure(st, e.u.rep);
  const int n = m.n;
  double hess = 0.0, dp = 0.0, dm = 0.0;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const double fss = fsx[i] / z.phi[i];
    const double a = T.S_ss[i] + fss - 0.5 / e.tau;
    const double b = T.S_tt[i] + T.psi_s[i] * fs[i] / z.psi[i] - 0.5 / e.tau;
    hess += w[i] * (a * a + (n - 1) * b * b) * e.u[i];
    dp += w[i] * Dp[i] * e.u[i];
    dm += w[i] * Dm[i] * e.u[i];
  }
  return {2.0 * e.tau * hess + e.tau * dp, 2.0 * e.tau * (hess + dm)};
}

}  // namespace detail

/// dW/dt by finite differences along a conjugate run, plus the closed-form
/// rate integrand at every sample on rotationally symmetric models whose
/// trajectory supports the time stencil (NaN where it does not).
inline WMonotonicity check_w_monotonicity(const FlowTrajectory& traj, const std::vector<EntropyState>& seq) {
  require(seq.size() >= 2, ErrorKind::InvalidArgument, "W monotonicity needs at least two entropy states");
  std::vector<const EntropyState*> order;
  for (const auto& e : seq) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->time < b->time; });
  WMonotonicity r;
  for (auto* e : order) {
    const auto st = traj.state_at(e->time);
    const auto S = trajectory_trace_at(traj, e->time);
    r.times.push_back(e->time);
    r.W.push_back(w_entropy(st, *e, &S));
    r.scale = std::max(r.scale, std::abs(r.W.back()));
    std::pair<double, double> q{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    if (traj.model->zonal()) {
      try {
        q = detail::w_rate_integrand(traj, *e);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::StencilRange) throw;
      }
    }
    r.rhs.push_back(q.first);
    r.rhs_alt.push_back(q.second);
  }
  for (std::size_t k = 0; k + 1 < r.times.size(); ++k) {
    const double dt = r.times[k + 1] - r.times[k];
    require(dt > 0.0, ErrorKind::InvalidArgument, "entropy states must have distinct times");
    r.interval_mid.push_back(0.5 * (r.times[k] + r.times[k + 1]));
    r.dWdt.push_back((r.W[k + 1] - r.W[k]) / dt);
    r.min_dWdt = std::min(r.min_dWdt, r.dWdt.back());
  }
  return r;
}

inline std::string entropy_trace_csv(const WMonotonicity& r) {
  std::ostringstream os;
  os.precision(17);
  os << "t,W,rate_integrand,rate_integrand_alt\n";
  for (std::size_t k = 0; k < r.times.size(); ++k) os << r.times[k] << ',' << r.W[k] << ',' << r.rhs[k] << ',' << r.rhs_alt[k] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// mu*

struct MuStarOptions {
  std::size_t iterations = 300;
  std::size_t starts = 4;
  double step = 0.2;  // gradient-flow step in units of the explicit part
  std::uint64_t seed = 1;
};

struct MuStarEstimate {
  double value = std::numeric_limits<double>::infinity();  // upper bound on mu*
  ScalarField best;
  std::vector<double> start_values;
  double gap = 0.0;  // value decrease over the last half of the best start's iterations
  bool stagnated = false;
  std::size_t iterations = 0;
};

/// exp of a random smooth field with `modes` Fourier/cosine modes per axis
/// and coefficients of size `amplitude / k`, on the model grid.
inline ScalarField random_positive_field(const ManifoldModel& m, std::mt19937_64& rng, int modes, double amplitude,
                                         Representation rep = Representation::Spectral) {
  std::normal_distribution<double> N(0.0, 1.0);
  ScalarField f{std::vector<double>(m.size(), 0.0), rep};
  if (m.kind == ModelKind::FlatTorus) {
    for (int a = 0; a < 3; ++a)
      for (int k = 1; k <= modes; ++k) {
        const double c = amplitude * N(rng) / k, s = amplitude * N(rng) / k;
        const double w = 2.0 * std::numbers::pi * k / m.periods[static_cast<std::size_t>(a)];
        for (std::size_t i = 0; i < m.size(); ++i) {
          const double x = grid_point(m, i).c[static_cast<std::size_t>(a)];
          f[i] += c * std::cos(w * x) + s * std::sin(w * x);
        }
      }
    // One mixed mode so the field is not a sum of one-dimensional pieces.
    const double c = amplitude * N(rng) / 2;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto p = grid_point(m, i);
      f[i] += c * std::cos(2 * std::numbers::pi * (p.c[0] / m.periods[0] + p.c[1] / m.periods[1] - p.c[2] / m.periods[2]));
    }
  } else {
    const auto x = spectral::zonal_grid(m.resolution);
    for (int k = 1; k <= modes; ++k) {
      const double c = amplitude * N(rng) / k;
      for (std::size_t i = 0; i < x.size(); ++i) f[i] += c * std::cos(k * x[i]);
    }
  }
  for (auto& v : f.values) v = std::exp(v);
  return f;
}

namespace detail {

inline void normalize_l2(const std::vector<double>& w, std::vector<double>& u) {
  double n2 = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) n2 += w[i] * u[i] * u[i];
  const double s = 1.0 / std::sqrt(n2);
  for (auto& x : u) x *= s;
}

/// (I - c Delta)^{-1} on the optimizer's grid: Fourier on the torus,
/// finite-volume tridiagonal on zonal grids.
inline std::vector<double> resolvent(const MetricState& s, const std::vector<double>& v, double c) {
  const auto& m = *s.model;
  if (m.kind == ModelKind::FlatTorus) {
    const std::size_t n = m.resolution;
    std::vector<std::complex<double>> z(v.begin(), v.end());
    z = fft3(z, n, false);
    for (std::size_t k2 = 0; k2 < n; ++k2)
      for (std::size_t k1 = 0; k1 < n; ++k1)
        for (std::size_t k0 = 0; k0 < n; ++k0) {
          double k2sum = 0.0;
          const std::size_t ks[3] = {k0, k1, k2};
          for (int a = 0; a < 3; ++a) {
            const double w = 2.0 * std::numbers::pi / (m.periods[static_cast<std::size_t>(a)] * s.scale) *
                             spectral::wavenumber(ks[a], n);
            k2sum += w * w;
          }
          z[k0 + n * (k1 + n * k2)] /= 1.0 + c * k2sum;
        }
    z = fft3(z, n, true);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = z[i].real();
    return out;
  }
  const auto st = zonal_stencil(s);
  const std::size_t n = m.resolution;
  Tridiagonal A(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double up = i + 1 < n ? st.kappa[i + 1] : 0.0, dn = st.kappa[i];
    A.diag[i] = 1.0 + c * (up + dn) / st.volume[i];
    if (i + 1 < n) A.upper[i] = -c * up / st.volume[i];
    if (i > 0) A.lower[i] = -c * dn / st.volume[i];
  }
  return solve_tridiagonal(A, v);
}

}  // namespace detail

/// Upper bound on mu*(g, tau) = inf W*(g, u, tau) over int u^2 dV = 1 by a
/// normalized semi-implicit gradient flow of W* from several starts:
/// constant, bumps at the origin or north pole of width ~sqrt(tau), and
/// seeded random fields. Torus fields are spectral, zonal fields use the
/// finite-volume grid.
inline MuStarEstimate mu_star_estimate(const MetricState& s, double tau, const MuStarOptions& opt = {},
                                       const ScalarField* S = nullptr) {
  require(tau > 0.0, ErrorKind::InvalidArgument, "tau must be positive");
  require(opt.starts >= 1 && opt.iterations >= 2, ErrorKind::InvalidArgument, "mu* needs at least one start and two iterations");
  const auto& m = *s.model;
  const Representation rep = m.kind == ModelKind::FlatTorus ? Representation::Spectral : Representation::Grid;
  const auto w = volume_measure(s, rep);
  const auto Sf = detail::trace_or_curvature(s, S);
  std::mt19937_64 rng(opt.seed);

  // Physical distance of each grid point to the origin or north pole.
  std::vector<double> dist(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Point p = grid_point(m, i);
    if (m.kind == ModelKind::FlatTorus) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double z = detail::wrap(p.c[static_cast<std::size_t>(a)], m.periods[static_cast<std::size_t>(a)]) * s.scale;
        d2 += z * z;
      }
      dist[i] = std::sqrt(d2);
    }
  }
  if (m.zonal()) {
    const auto z = zonal_metric(s);
    const auto sx = spectral::zonal_cell_antiderivative(z.phi);
    for (std::size_t i = 0; i < m.size(); ++i) dist[i] = sx[i];
  }

  std::vector<std::vector<double>> starts;
  starts.emplace_back(m.size(), 1.0);
  for (double width : {1.0, 2.0}) {
    std::vector<double> u(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) u[i] = std::exp(-dist[i] * dist[i] / (8.0 * width * width * tau));
    starts.push_back(std::move(u));
  }
  while (starts.size() < opt.starts) starts.push_back(random_positive_field(m, rng, 3, 0.5, rep).values);
  starts.resize(opt.starts);

  auto energy = [&](const std::vector<double>& u) { return w_star(s, ScalarField{u, rep}, tau, &Sf, 1e-8); };
  MuStarEstimate out;
  for (auto& u : starts) {
    detail::normalize_l2(w, u);
    double E = energy(u), dt = opt.step, half_value = E;
    bool stalled = false;
    for (std::size_t it = 0; it < opt.iterations; ++it) {
      std::vector<double> rhs(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) {
        const double lg = u[i] * u[i] > kDensityFloor ? std::log(u[i] * u[i]) : std::log(kDensityFloor);
        rhs[i] = u[i] + dt * (u[i] * lg + u[i] - tau * Sf[i] * u[i]);
      }
      auto next = detail::resolvent(s, rhs, 4.0 * tau * dt);
      for (auto& x : next) x = std::abs(x);
      detail::normalize_l2(w, next);
      const double En = energy(next);
      if (En <= E) {
        u = std::move(next);
        E = En;
        dt = std::min(1.5 * dt, 4.0 * opt.step);
      } else {
        dt *= 0.5;
        if (dt < 1e-10 * opt.step) {
          stalled = true;
          break;
        }
      }
      if (it + 1 == opt.iterations / 2) half_value = E;
      ++out.iterations;
    }
    out.start_values.push_back(E);
    if (E < out.value) {
      out.value = E;
      out.best = ScalarField{u, rep};
      out.gap = std::max(half_value - E, 0.0);
      out.stagnated = stalled;
    }
  }
  return out;
}

struct MuStarCheck {
  double lhs = 0.0;  // mu*(g(0), t* + sigma)
  double rhs = 0.0;  // mu*(g(t*), sigma) + (n/2) log((t* + sigma) / sigma)
  double residual = 0.0;
  double tolerance = 0.0;  // sum of the two optimizer gaps
  bool passed = false;
};

/// mu*(g(0), t*+sigma) <= mu*(g(t*), sigma) + (n/2) log((t*+sigma)/sigma)
/// with both sides estimated from above by matched optimizer budgets.
inline MuStarCheck check_mu_star_monotonicity(const FlowTrajectory& traj, double t_star, double sigma,
                                              const MuStarOptions& opt = {}) {
  require(sigma > 0.0 && t_star >= traj.start() && t_star <= traj.end(), ErrorKind::InvalidArgument,
          "mu* monotonicity needs sigma > 0 and t* inside the trajectory");
  const auto s0 = traj.state_at(traj.start());
  const auto s1 = traj.state_at(t_star);
  const auto S0 = trajectory_trace_at(traj, traj.start());
  const auto S1 = trajectory_trace_at(traj, t_star);
  const auto a = mu_star_estimate(s0, t_star - traj.start() + sigma, opt, &S0);
  const auto b = mu_star_estimate(s1, sigma, opt, &S1);
  MuStarCheck c;
  c.lhs = a.value;
  c.rhs = b.value + 0.5 * traj.model->n * std::log((t_star - traj.start() + sigma) / sigma);
  c.residual = c.rhs - c.lhs;
  c.tolerance = a.gap + b.gap;
  c.passed = c.residual >= -c.tolerance;
  return c;
}

}  // namespace hkflow

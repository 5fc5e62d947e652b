#pragma once

// Ricci flow and List's extended system on the model geometries.
//
// Zonal metrics g = phi^2 dx^2 + psi^2 g_{S^{n-1}} satisfy, in a fixed
// coordinate x,
//   phi_t = -(Sc_ss) phi,   psi_t = psi_ss - (n-2)(1 - psi_s^2)/psi,   u_t = Delta u
// with Sc = Rc - c du (x) du and S = tr Sc (c = 0 and no u for Ricci flow).
// That system is only weakly parabolic, so the integrator works in the gauge
// where phi stays uniform in x: the coordinates are dragged by the pole-fixing
// field V = v(x) d/dx with
//   v_x = Sc_ss - mean_x(Sc_ss),   Lambda_t = -mean_x(Sc_ss) Lambda,
//   psi_t = psi_ss - (n-2)(1 - psi_s^2)/psi + v psi_x,   u_t = Delta u + v u_x.
// Stored states are pullbacks of the flow by the time-dependent diffeomorphism
// generated by V; the trajectory records v so that consumers can convert
// time derivatives at fixed coordinates into derivatives at fixed points
// (d/dt|point = d/dt|coordinate - v d/dx).
//
// Flat tori are fixed points and the round sphere shrinks as
// r^2 = r0^2 - 2(n-1)t; both use closed-form paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "json.hpp"

#include "hkflow/geometry.hpp"

namespace hkflow {

enum class FlowKind { Ricci, List };

inline std::string to_string(FlowKind k) { return k == FlowKind::Ricci ? "Ricci" : "List"; }

struct GeneralizedFlowSpec {
  FlowKind kind = FlowKind::Ricci;
  double coupling = 0.0;
  std::optional<ScalarField> u0;

  static GeneralizedFlowSpec ricci() { return {}; }
  static GeneralizedFlowSpec list(double coupling, ScalarField u0) {
    GeneralizedFlowSpec s{FlowKind::List, coupling, std::move(u0)};
    s.validate();
    return s;
  }

  void validate() const {
    if (kind == FlowKind::Ricci) {
      require(coupling == 0.0 && !u0, ErrorKind::InvalidArgument, "Ricci flow takes no coupling or auxiliary field");
      return;
    }
    require(coupling > 0.0, ErrorKind::InvalidArgument, "List flow coupling must be positive");
    require(u0.has_value(), ErrorKind::InvalidArgument, "List flow needs an initial auxiliary field");
  }
};

struct StepControl {
  double rtol = 1e-9;
  double atol = 1e-11;
  double interp_tol = 1e-6;  // relative error of linear-in-time interpolation
  double dt_initial = 1e-6;
  double dt_min = 1e-13;
  std::size_t max_steps = 500000;
  double blowup_floor = 1e-6;  // minimum admissible metric coefficient
};

struct StepMeta {
  double dt = 0.0;
  double interp_error = 0.0;
  std::size_t rejected = 0;
};

enum class TrajectoryOrigin { ClosedForm, Integrated, Synthetic };

struct FlowTrajectory {
  GeneralizedFlowSpec spec;
  ModelPtr model;
  TrajectoryOrigin origin = TrajectoryOrigin::Integrated;
  std::vector<double> times;
  std::vector<MetricState> states;
  std::vector<ScalarField> aux;  // List only, one per time
  std::vector<std::vector<double>> drift;  // gauge field v per time (integrated zonal paths only)
  std::vector<StepMeta> meta;    // meta[k] describes the step ending at times[k]
  bool truncated = false;
  std::string truncation_reason;
  double blowup_time = std::numeric_limits<double>::infinity();
  double integrator_error = 0.0;  // max local error estimate over accepted steps
  // Closed-form paths: exact metric at any time, and d(scale)/dt for scale-only models.
  std::function<MetricState(double)> exact;
  std::function<double(double)> scale_rate;

  double start() const { return times.front(); }
  double end() const { return times.back(); }
  bool has_aux() const { return !aux.empty(); }

  /// Index k with times[k] <= t < times[k+1] (clamped).
  std::size_t bracket(double t) const {
    require(!times.empty(), ErrorKind::InvalidArgument, "empty trajectory");
    require(t >= times.front() - 1e-14 && t <= times.back() + 1e-14, ErrorKind::RangeError,
            "time " + std::to_string(t) + " outside trajectory range [" + std::to_string(times.front()) + ", " +
                std::to_string(times.back()) + "]");
    auto it = std::upper_bound(times.begin(), times.end(), t);
    std::size_t k = it == times.begin() ? 0 : static_cast<std::size_t>(it - times.begin()) - 1;
    return std::min(k, times.size() >= 2 ? times.size() - 2 : 0);
  }

  MetricState state_at(double t) const {
    if (exact) {
      require(t >= times.front() - 1e-14 && t <= times.back() + 1e-14, ErrorKind::RangeError,
              "time outside trajectory range");
      return exact(t);
    }
    if (times.size() == 1) return states.front();
    const std::size_t k = bracket(t);
    const double w = (t - times[k]) / (times[k + 1] - times[k]);
    MetricState s = states[k];
    s.time = t;
    s.scale = (1 - w) * states[k].scale + w * states[k + 1].scale;
    for (std::size_t i = 0; i < s.phi.size(); ++i) {
      s.phi[i] = (1 - w) * states[k].phi[i] + w * states[k + 1].phi[i];
      s.psi[i] = (1 - w) * states[k].psi[i] + w * states[k + 1].psi[i];
    }
    return s;
  }

  bool has_drift() const { return !drift.empty(); }

  /// Gauge field v at time t (zero when the path has no gauge).
  std::vector<double> drift_at(double t) const {
    if (!has_drift()) return std::vector<double>(model->zonal() ? model->resolution : 0, 0.0);
    if (times.size() == 1) return drift.front();
    const std::size_t k = bracket(t);
    const double w = (t - times[k]) / (times[k + 1] - times[k]);
    std::vector<double> v = drift[k];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1 - w) * drift[k][i] + w * drift[k + 1][i];
    return v;
  }

  ScalarField aux_at(double t) const {
    require(has_aux(), ErrorKind::InvalidArgument, "trajectory carries no auxiliary field");
    if (times.size() == 1) return aux.front();
    const std::size_t k = bracket(t);
    const double w = (t - times[k]) / (times[k + 1] - times[k]);
    ScalarField u = aux[k];
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = (1 - w) * aux[k][i] + w * aux[k + 1][i];
    return u;
  }
};

/// The symmetric tensor Sc of a rotationally symmetric configuration in the
/// orthonormal frame, plus Ricci (needed separately by the D tensor).
struct ZonalTensors {
  std::vector<double> S_ss, S_tt, S;  // radial, tangential components, trace
  std::vector<double> Rc_ss, Rc_tt;
  std::vector<double> psi_s;
  std::vector<double> u_s;  // empty for Ricci flow
};

inline ZonalTensors zonal_tensors(const GeneralizedFlowSpec& spec, const MetricState& s, const ScalarField* u) {
  const auto curv = warped_curvature(s);
  const int n = s.model->n;
  const std::size_t m = s.model->resolution;
  ZonalTensors t;
  t.Rc_ss = curv.ric_radial;
  t.Rc_tt = curv.ric_tangential;
  t.psi_s = curv.psi_s;
  t.S_ss = curv.ric_radial;
  t.S_tt = curv.ric_tangential;
  if (spec.kind == FlowKind::List) {
    require(u != nullptr, ErrorKind::InvalidArgument, "List flow tensors need the auxiliary field");
    const auto z = zonal_metric(s);
    const auto ux = spectral::zonal_derivative(u->values, spectral::Parity::Even);
    t.u_s.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      t.u_s[i] = ux[i] / z.phi[i];
      t.S_ss[i] -= spec.coupling * t.u_s[i] * t.u_s[i];
    }
  }
  t.S.resize(m);
  for (std::size_t i = 0; i < m; ++i) t.S[i] = t.S_ss[i] + (n - 1) * t.S_tt[i];
  return t;
}

/// Trace S of the flow tensor at one time.
inline ScalarField flow_trace(const GeneralizedFlowSpec& spec, const MetricState& s, const ScalarField* u = nullptr) {
  if (s.model->kind != ModelKind::WarpedSphere || spec.kind == FlowKind::Ricci) return scalar_curvature(s);
  return ScalarField{zonal_tensors(spec, s, u).S, Representation::Spectral};
}

inline ScalarField trajectory_trace(const FlowTrajectory& traj, std::size_t k) {
  const ScalarField* u = traj.has_aux() ? &traj.aux[k] : nullptr;
  return flow_trace(traj.spec, traj.states[k], u);
}

inline ScalarField trajectory_trace_at(const FlowTrajectory& traj, double t) {
  if (!traj.has_aux()) return flow_trace(traj.spec, traj.state_at(t));
  const auto u = traj.aux_at(t);
  return flow_trace(traj.spec, traj.state_at(t), &u);
}

/// Warped-model copy of a round-sphere state (profile r sin(s / r)).
inline MetricState as_warped(const MetricState& s) {
  if (s.model->kind == ModelKind::WarpedSphere) return s;
  require(s.model->kind == ModelKind::RoundSphere, ErrorKind::InvalidArgument, "only spheres have a warped form");
  const double r = s.radius();
  auto m = ManifoldModel::warped_sphere([r](double a) { return r * std::sin(a / r); }, std::numbers::pi * r,
                                        s.model->resolution, s.model->n);
  MetricState w = MetricState::initial(make_model(std::move(m)));
  w.time = s.time;
  return w;
}

/// Closed-form path with metric scale a(t); used for the static torus, the
/// shrinking round sphere and synthetic test trajectories.
inline FlowTrajectory scaled_trajectory(ModelPtr model, std::function<double(double)> a,
                                        std::function<double(double)> a_rate, std::vector<double> times,
                                        TrajectoryOrigin origin) {
  require(times.size() >= 1, ErrorKind::InvalidArgument, "trajectory needs at least one time");
  for (std::size_t k = 1; k < times.size(); ++k)
    require(times[k] > times[k - 1], ErrorKind::InvalidArgument, "trajectory times must increase strictly");
  FlowTrajectory traj;
  traj.model = model;
  traj.origin = origin;
  traj.times = times;
  traj.exact = [model, a](double t) {
    MetricState s = MetricState::initial(model);
    s.time = t;
    s.scale = a(t);
    return s;
  };
  traj.scale_rate = std::move(a_rate);
  for (double t : times) traj.states.push_back(traj.exact(t));
  traj.meta.resize(times.size());
  for (std::size_t k = 1; k < times.size(); ++k) traj.meta[k].dt = times[k] - times[k - 1];
  return traj;
}

/// Blow-up time of the round sphere under Ricci flow.
inline double round_sphere_extinction(double r0, int n) { return r0 * r0 / (2.0 * (n - 1)); }

namespace detail {

/// Time samples toward the extinction time T whose linear interpolation of
/// sqrt(T - t) stays within interp_tol.
inline std::vector<double> extinction_samples(double T, double horizon, double interp_tol) {
  const double step = std::min(0.25, 0.9 * std::sqrt(32.0 * interp_tol));
  std::vector<double> ts{0.0};
  const double max_dt = horizon / 256.0;
  while (ts.back() < horizon) {
    const double t = ts.back();
    double next = t + std::min(step * (T - t), max_dt);
    if (next > horizon || horizon - next < 1e-3 * (next - t)) next = horizon;
    ts.push_back(next);
  }
  return ts;
}

/// Pole-fixing gauge field v for a zonal configuration: v_x = Sc_ss - mean(Sc_ss),
/// v(0) = v(pi) = 0. Also returns mean(Sc_ss), the uniform rate -phi_t / phi.
inline std::pair<std::vector<double>, double> gauge_field(const std::vector<double>& sc_ss) {
  double mean = 0.0;
  for (double v : sc_ss) mean += v;
  mean /= static_cast<double>(sc_ss.size());
  std::vector<double> centred(sc_ss.size());
  for (std::size_t i = 0; i < centred.size(); ++i) centred[i] = sc_ss[i] - mean;
  return {spectral::zonal_cell_antiderivative(centred), mean};
}

/// 1 - psi_s^2 with its pole values removed: the smooth closure conditions
/// make it vanish at both poles, and any discrete violation would otherwise
/// be divided by psi ~ x and amplified without bound.
inline std::vector<double> pole_regular_defect(const std::vector<double>& psis) {
  const std::size_t m = psis.size();
  std::vector<double> e(m);
  for (std::size_t i = 0; i < m; ++i) e[i] = 1.0 - psis[i] * psis[i];
  const double e0 = spectral::zonal_interpolate(e, spectral::Parity::Even, 0.0);
  const double e1 = spectral::zonal_interpolate(e, spectral::Parity::Even, std::numbers::pi);
  const auto x = spectral::zonal_grid(m);
  for (std::size_t i = 0; i < m; ++i) e[i] -= 0.5 * (e0 * (1 + std::cos(x[i])) + e1 * (1 - std::cos(x[i])));
  return e;
}

/// Right-hand side of the gauge-fixed zonal system on y = (Lambda, psi, [u]).
class ZonalSystem {
 public:
  ZonalSystem(GeneralizedFlowSpec spec, ModelPtr model) : spec_(std::move(spec)), model_(std::move(model)) {}

  std::vector<double> pack(const MetricState& s, const ScalarField* u) const {
    std::vector<double> y{s.phi.front()};
    y.insert(y.end(), s.psi.begin(), s.psi.end());
    if (u) y.insert(y.end(), u->values.begin(), u->values.end());
    return y;
  }

  MetricState unpack(const std::vector<double>& y, double t) const {
    const std::size_t m = model_->resolution;
    MetricState s;
    s.model = model_;
    s.time = t;
    s.phi.assign(m, y[0]);
    s.psi.assign(y.begin() + 1, y.begin() + 1 + static_cast<std::ptrdiff_t>(m));
    return s;
  }

  ScalarField unpack_aux(const std::vector<double>& y) const {
    const std::size_t m = model_->resolution;
    return ScalarField{std::vector<double>(y.begin() + 1 + static_cast<std::ptrdiff_t>(m), y.end()),
                       Representation::Spectral};
  }

  /// Gauge field of a packed state.
  std::vector<double> drift(const std::vector<double>& y) const {
    std::vector<double> dydt;
    std::vector<double> v;
    eval(y, dydt, &v);
    return v;
  }

  void operator()(const std::vector<double>& y, std::vector<double>& dydt, double) const { eval(y, dydt, nullptr); }

 private:
  void eval(const std::vector<double>& y, std::vector<double>& dydt, std::vector<double>* v_out) const {
    const std::size_t m = model_->resolution;
    const int n = model_->n;
    const double lam = y[0];
    const std::span<const double> psi(y.data() + 1, m);
    dydt.assign(y.size(), 0.0);
    const auto psix = spectral::zonal_derivative(psi, spectral::Parity::Odd);
    std::vector<double> psis(m);
    for (std::size_t i = 0; i < m; ++i) psis[i] = psix[i] / lam;
    const auto psisx = spectral::zonal_derivative(psis, spectral::Parity::Even);
    std::vector<double> sc_ss(m), psiss(m), ux;
    for (std::size_t i = 0; i < m; ++i) {
      psiss[i] = psisx[i] / lam;
      sc_ss[i] = -(n - 1) * psiss[i] / psi[i];
    }
    std::span<const double> u;
    if (spec_.kind == FlowKind::List) {
      u = std::span<const double>(y.data() + 1 + m, m);
      ux = spectral::zonal_derivative(u, spectral::Parity::Even);
      for (std::size_t i = 0; i < m; ++i) sc_ss[i] -= spec_.coupling * (ux[i] / lam) * (ux[i] / lam);
    }
    auto [v, mean] = gauge_field(sc_ss);
    dydt[0] = -mean * lam;
    const auto defect = pole_regular_defect(psis);
    for (std::size_t i = 0; i < m; ++i)
      dydt[1 + i] = psiss[i] - (n - 2) * defect[i] / psi[i] + v[i] * psix[i];
    if (spec_.kind == FlowKind::List) {
      // Delta u = u_ss + (n-1)(psi_s / psi) u_s with u_s = u_x / Lambda.
      const auto uxx = spectral::zonal_derivative(ux, spectral::Parity::Odd);
      for (std::size_t i = 0; i < m; ++i)
        dydt[1 + m + i] = uxx[i] / (lam * lam) + (n - 1) * psis[i] / psi[i] * ux[i] / lam + v[i] * ux[i];
    }
    if (v_out) *v_out = std::move(v);
  }

  GeneralizedFlowSpec spec_;
  ModelPtr model_;
};
}  // namespace detail

/// Integrates the flow from `initial` up to `horizon`. Flat tori and the
/// round sphere under Ricci flow use their closed forms; warped spheres (and
/// List flow on any sphere) use adaptive Dormand-Prince steps on the spectral
/// discretization, storing every accepted step.
inline FlowTrajectory evolve(const GeneralizedFlowSpec& spec, const MetricState& initial, double horizon,
                             const StepControl& ctl = {}) {
  spec.validate();
  initial.validate();
  require(horizon > initial.time, ErrorKind::InvalidArgument, "flow horizon must exceed the initial time");
  require(ctl.interp_tol > 0.0 && ctl.rtol > 0.0, ErrorKind::InvalidArgument, "step tolerances must be positive");
  const auto& model = *initial.model;

  if (model.kind == ModelKind::FlatTorus) {
    require(spec.kind == FlowKind::Ricci, ErrorKind::InvalidArgument,
            "List flow is only supported on rotationally symmetric models");
    const double a0 = initial.scale;
    std::vector<double> ts(65);
    for (std::size_t k = 0; k < ts.size(); ++k)
      ts[k] = initial.time + (horizon - initial.time) * static_cast<double>(k) / static_cast<double>(ts.size() - 1);
    auto traj = scaled_trajectory(initial.model, [a0](double) { return a0; }, [](double) { return 0.0; }, ts,
                                  TrajectoryOrigin::ClosedForm);
    traj.spec = spec;
    return traj;
  }

  if (model.kind == ModelKind::RoundSphere && spec.kind == FlowKind::Ricci) {
    const int n = model.n;
    const double r0 = initial.radius();
    const double t0 = initial.time;
    const double T = t0 + round_sphere_extinction(r0, n);
    const double base = model.radius;
    FlowTrajectory traj;
    double stop = horizon;
    // r(t) < blowup_floor once T - t < floor^2 / (2(n-1)).
    const double last = T - ctl.blowup_floor * ctl.blowup_floor / (2.0 * (n - 1));
    bool cut = false;
    if (stop >= last) {
      stop = t0 + 0.999 * (last - t0);
      cut = true;
    }
    auto ts = detail::extinction_samples(T - t0, stop - t0, ctl.interp_tol);
    for (double& t : ts) t += t0;
    auto radius = [=](double t) { return std::sqrt(std::max(r0 * r0 - 2.0 * (n - 1) * (t - t0), 0.0)); };
    traj = scaled_trajectory(
        initial.model, [=](double t) { return radius(t) / base; },
        [=](double t) { return -(n - 1) / (radius(t) * base); }, ts, TrajectoryOrigin::ClosedForm);
    traj.spec = spec;
    traj.blowup_time = T;
    if (cut) {
      traj.truncated = true;
      traj.truncation_reason = "blow-up: horizon at or beyond extinction time " + std::to_string(T);
    }
    return traj;
  }

  // Integrated zonal path.
  const MetricState w0 = as_warped(initial);
  if (spec.kind == FlowKind::List)
    require(spec.u0->size() == model.resolution, ErrorKind::ResolutionMismatch,
            "auxiliary field does not match the model resolution");
  for (double p : w0.phi)
    require(std::abs(p - w0.phi.front()) <= 1e-12 * w0.phi.front(), ErrorKind::InvalidArgument,
            "integration starts from a metric with uniform phi (arc length proportional to x)");
  detail::ZonalSystem sys(spec, w0.model);
  std::vector<double> y = sys.pack(w0, spec.kind == FlowKind::List ? &*spec.u0 : nullptr);
  std::vector<double> dydt;
  double t = w0.time;
  sys(y, dydt, t);

  FlowTrajectory traj;
  traj.spec = spec;
  traj.model = w0.model;
  traj.origin = TrajectoryOrigin::Integrated;
  traj.times.push_back(t);
  traj.states.push_back(w0);
  if (spec.kind == FlowKind::List) traj.aux.push_back(*spec.u0);
  traj.drift.push_back(sys.drift(y));
  traj.meta.push_back({});

  namespace ode = boost::numeric::odeint;
  using stepper_t = ode::runge_kutta_dopri5<std::vector<double>>;
  auto stepper = ode::make_controlled(ctl.atol, ctl.rtol, stepper_t());
  double dt = ctl.dt_initial;
  std::size_t rejected = 0;
  const std::size_t m = model.resolution;
  for (std::size_t step = 0; t < horizon; ++step) {
    if (step >= ctl.max_steps) {
      traj.truncated = true;
      traj.truncation_reason = "step budget exhausted";
      break;
    }
    dt = std::min(dt, horizon - t);
    if (dt < ctl.dt_min) {
      traj.truncated = true;
      traj.truncation_reason = "step-size underflow at t = " + std::to_string(t);
      break;
    }
    std::vector<double> y_old = y, f_old = dydt;
    double t_try = t, dt_try = dt;
    const auto res = stepper.try_step(std::ref(sys), y, dydt, t_try, dt_try);
    if (res == ode::fail) {
      dt = dt_try;
      ++rejected;
      continue;
    }
    const double taken = t_try - t;
    // Linear interpolation error over the step ~ dt/8 |f_new - f_old|.
    double interp = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double sc = std::max(std::abs(y[i]), 1e-3);
      interp = std::max(interp, 0.125 * taken * std::abs(dydt[i] - f_old[i]) / sc);
    }
    if (interp > ctl.interp_tol) {
      y = std::move(y_old);
      dydt = std::move(f_old);
      dt = 0.5 * taken * std::sqrt(ctl.interp_tol / interp);
      ++rejected;
      continue;
    }
    t = t_try;
    dt = dt_try;
    MetricState s = sys.unpack(y, t);
    double minc = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) minc = std::min({minc, s.phi[i], s.psi[i]});
    bool finite = true;
    for (double v : y) finite = finite && std::isfinite(v);
    if (!finite || minc < ctl.blowup_floor) {
      traj.truncated = true;
      traj.blowup_time = t;
      traj.truncation_reason = "blow-up: metric coefficient below floor at t = " + std::to_string(t);
      break;
    }
    traj.times.push_back(t);
    traj.states.push_back(std::move(s));
    if (spec.kind == FlowKind::List) traj.aux.push_back(sys.unpack_aux(y));
    traj.drift.push_back(sys.drift(y));
    traj.meta.push_back({taken, interp, rejected});
    rejected = 0;
  }
  return traj;
}

/// Profile eccentricity: relative spread of the scalar curvature.
inline double eccentricity(const MetricState& s) {
  const auto R = scalar_curvature(s).values;
  const auto [lo, hi] = std::minmax_element(R.begin(), R.end());
  return (*hi - *lo) / std::max(std::abs(*hi), 1e-300);
}

struct MinSReport {
  std::vector<std::pair<double, double>> samples;
  double worst_decrease = 0.0;
  bool monotone = true;
};

/// min over the grid of S at every stored time. A decrease larger than
/// tol + integrator error marks the report as non-monotone.
inline MinSReport monitor_min_S(const FlowTrajectory& traj, double tol = 1e-6) {
  require(!traj.times.empty(), ErrorKind::InvalidArgument, "empty trajectory");
  MinSReport rep;
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const auto S = trajectory_trace(traj, k).values;
    rep.samples.emplace_back(traj.times[k], *std::min_element(S.begin(), S.end()));
    if (k > 0) {
      const double dec = rep.samples[k - 1].second - rep.samples[k].second;
      rep.worst_decrease = std::max(rep.worst_decrease, dec);
      if (dec > tol + traj.integrator_error) rep.monotone = false;
    }
  }
  return rep;
}

namespace detail {

/// Weights of the three-point derivative at the middle of (t0, t1, t2).
inline std::array<double, 3> centered_weights(double t0, double t1, double t2) {
  const double h1 = t1 - t0, h2 = t2 - t1;
  return {-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))};
}

}  // namespace detail

/// max over interior stored times of |dVol/dt + int S dV| / (int |S| dV + 1).
inline double check_volume_evolution(const FlowTrajectory& traj) {
  require(traj.times.size() >= 3, ErrorKind::InvalidArgument, "volume check needs at least three times");
  std::vector<double> vol(traj.times.size());
  for (std::size_t k = 0; k < vol.size(); ++k) vol[k] = total_volume(traj.states[k]);
  double worst = 0.0;
  for (std::size_t k = 1; k + 1 < vol.size(); ++k) {
    const auto c = detail::centered_weights(traj.times[k - 1], traj.times[k], traj.times[k + 1]);
    const double dv = c[0] * vol[k - 1] + c[1] * vol[k] + c[2] * vol[k + 1];
    const auto w = volume_measure(traj.states[k]);
    const auto S = trajectory_trace(traj, k).values;
    double iS = 0.0, iabs = 0.0;
    for (std::size_t i = 0; i < S.size(); ++i) {
      iS += w[i] * S[i];
      iabs += w[i] * std::abs(S[i]);
    }
    worst = std::max(worst, std::abs(dv + iS) / (iabs + 1.0));
  }
  return worst;
}

/// D(Sc, X) for a radial field X = X^s e_s (orthonormal component), at the
/// stored time nearest to t. dS/dt comes from a three-point difference over
/// neighbouring stored states.
inline ScalarField evaluate_D(const GeneralizedFlowSpec& spec, const FlowTrajectory& traj, double t,
                              const std::vector<double>& X) {
  require(traj.model->zonal(), ErrorKind::InvalidArgument, "D tensor evaluation needs a rotationally symmetric model");
  require(traj.times.size() >= 3, ErrorKind::StencilRange, "trajectory too short for a time-difference stencil");
  const auto it = std::lower_bound(traj.times.begin(), traj.times.end(), t);
  std::size_t k = static_cast<std::size_t>(it - traj.times.begin());
  if (k == traj.times.size() || (k > 0 && t - traj.times[k - 1] < traj.times[k] - t)) k = k == 0 ? 0 : k - 1;
  require(k >= 1 && k + 1 < traj.times.size(), ErrorKind::StencilRange,
          "time " + std::to_string(t) + " too close to the trajectory ends for the difference stencil");
  const std::size_t m = traj.model->resolution;
  require(X.size() == m, ErrorKind::ResolutionMismatch, "vector field samples do not match the grid");

  auto state_k = [&](std::size_t j) {
    MetricState s = traj.states[j];
    return traj.model->kind == ModelKind::RoundSphere ? as_warped(s) : s;
  };
  auto tensors = [&](std::size_t j) {
    const ScalarField* u = traj.has_aux() ? &traj.aux[j] : nullptr;
    return zonal_tensors(spec, state_k(j), u);
  };
  const auto Tm = tensors(k - 1), T0 = tensors(k), Tp = tensors(k + 1);
  const auto c = detail::centered_weights(traj.times[k - 1], traj.times[k], traj.times[k + 1]);
  const MetricState s0 = state_k(k);
  const auto z = zonal_metric(s0);
  const int n = s0.model->n;

  const auto lapS = laplace_beltrami(s0, ScalarField{T0.S, Representation::Spectral});
  const auto Sx = spectral::zonal_derivative(T0.S, spectral::Parity::Even);
  const auto Sssx = spectral::zonal_derivative(T0.S_ss, spectral::Parity::Even);
  ScalarField D{std::vector<double>(m), Representation::Spectral};
  const std::vector<double> v = traj.has_drift() ? traj.drift[k] : std::vector<double>(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    // Time derivative at a fixed point of M, not at a fixed gauge coordinate.
    const double dSdt = c[0] * Tm.S[i] + c[1] * T0.S[i] + c[2] * Tp.S[i] - v[i] * Sx[i];
    const double norm2 = T0.S_ss[i] * T0.S_ss[i] + (n - 1) * T0.S_tt[i] * T0.S_tt[i];
    const double divS = Sssx[i] / z.phi[i] + (n - 1) * (T0.psi_s[i] / z.psi[i]) * (T0.S_ss[i] - T0.S_tt[i]);
    const double dS = Sx[i] / z.phi[i];
    const double x = X[i];
    D[i] = dSdt - lapS[i] - 2.0 * norm2 + 4.0 * divS * x - 2.0 * dS * x + 2.0 * T0.Rc_ss[i] * x * x -
           2.0 * T0.S_ss[i] * x * x;
  }
  return D;
}

// JSON layout: {"model": {...}, "flow": {...}, "origin": str, "times": [...],
// "scale": [...], "phi": [[...]], "psi": [[...]], "aux": [[...]],
// "drift": [[...]], "truncated": bool}. Per-time arrays share the order of "times".
inline nlohmann::json model_to_json(const ManifoldModel& m) {
  nlohmann::json j{{"kind", to_string(m.kind)}, {"n", m.n}, {"resolution", m.resolution}};
  if (m.kind == ModelKind::FlatTorus) j["periods"] = m.periods;
  if (m.kind == ModelKind::RoundSphere) j["radius"] = m.radius;
  if (m.kind == ModelKind::WarpedSphere) {
    j["length"] = m.length;
    j["profile"] = m.profile;
  }
  return j;
}

inline ManifoldModel model_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind");
  const int n = j.value("n", 3);
  const std::size_t res = j.at("resolution");
  if (kind == "FlatTorus") return ManifoldModel::flat_torus(j.at("periods").get<std::array<double, 3>>(), res);
  if (kind == "RoundSphere") return ManifoldModel::round_sphere(j.at("radius"), res, n);
  if (kind == "WarpedSphere")
    return ManifoldModel::warped_sphere(j.at("profile").get<std::vector<double>>(), j.at("length"), n);
  throw Error(ErrorKind::InvalidArgument, "unknown model kind '" + kind + "'");
}

inline nlohmann::json trajectory_to_json(const FlowTrajectory& traj) {
  nlohmann::json j;
  j["model"] = model_to_json(*traj.model);
  j["flow"] = {{"kind", to_string(traj.spec.kind)}, {"coupling", traj.spec.coupling}};
  j["origin"] = traj.origin == TrajectoryOrigin::ClosedForm ? "closed-form"
                : traj.origin == TrajectoryOrigin::Integrated ? "integrated"
                                                               : "synthetic";
  j["times"] = traj.times;
  std::vector<double> scale;
  std::vector<std::vector<double>> phi, psi, aux;
  for (const auto& s : traj.states) {
    scale.push_back(s.scale);
    if (!s.phi.empty()) {
      phi.push_back(s.phi);
      psi.push_back(s.psi);
    }
  }
  for (const auto& u : traj.aux) aux.push_back(u.values);
  j["scale"] = scale;
  if (!phi.empty()) {
    j["phi"] = phi;
    j["psi"] = psi;
  }
  if (!aux.empty()) j["aux"] = aux;
  if (traj.has_drift()) j["drift"] = traj.drift;
  j["truncated"] = traj.truncated;
  if (traj.truncated) j["truncation_reason"] = traj.truncation_reason;
  return j;
}

/// Rebuilds a trajectory from its JSON layout. Closed-form functors are not
/// serialized, so imported trajectories interpolate linearly between samples.
inline FlowTrajectory trajectory_from_json(const nlohmann::json& j) {
  FlowTrajectory traj;
  traj.model = make_model(model_from_json(j.at("model")));
  const std::string kind = j.at("flow").at("kind");
  traj.spec.kind = kind == "List" ? FlowKind::List : FlowKind::Ricci;
  traj.spec.coupling = j.at("flow").value("coupling", 0.0);
  traj.times = j.at("times").get<std::vector<double>>();
  const auto scale = j.at("scale").get<std::vector<double>>();
  require(scale.size() == traj.times.size(), ErrorKind::InvalidArgument, "trajectory JSON: scale/times mismatch");
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    MetricState s;
    s.model = traj.model;
    s.time = traj.times[k];
    s.scale = scale[k];
    if (j.contains("phi")) {
      s.phi = j["phi"][k].get<std::vector<double>>();
      s.psi = j["psi"][k].get<std::vector<double>>();
    }
    s.validate();
    traj.states.push_back(std::move(s));
  }
  if (j.contains("aux"))
    for (const auto& a : j["aux"]) traj.aux.push_back(ScalarField{a.get<std::vector<double>>(), Representation::Spectral});
  if (j.contains("drift")) traj.drift = j["drift"].get<std::vector<std::vector<double>>>();
  if (traj.spec.kind == FlowKind::List && !traj.aux.empty()) traj.spec.u0 = traj.aux.front();
  traj.meta.resize(traj.times.size());
  traj.truncated = j.value("truncated", false);
  traj.truncation_reason = j.value("truncation_reason", std::string{});
  return traj;
}

}  // namespace hkflow

#pragma once

// Distance constants mu and eta of the Gaussian corollaries, and the
// verifiers that hold computed kernels and solutions against every bound's
// right-hand side. Verifiers never throw on a violated inequality; the
// violation is the report.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hkflow/logsob.hpp"

namespace hkflow {

enum class BoundKind { MainLemma, OnDiag, GaussianMu, GaussianEta, Ultra, L1L2 };

inline std::string to_string(BoundKind k) {
  switch (k) {
    case BoundKind::MainLemma: return "mainlemma";
    case BoundKind::OnDiag: return "ondiag";
    case BoundKind::GaussianMu: return "gaussianMu";
    case BoundKind::GaussianEta: return "gaussianEta";
    case BoundKind::Ultra: return "ultra";
    case BoundKind::L1L2: return "l1l2";
  }
  return "?";
}

inline BoundKind bound_kind_from_string(const std::string& s) {
  for (auto k : {BoundKind::MainLemma, BoundKind::OnDiag, BoundKind::GaussianMu, BoundKind::GaussianEta,
                 BoundKind::Ultra, BoundKind::L1L2})
    if (to_string(k) == s) return k;
  throw Error(ErrorKind::Config, "unknown bound kind '" + s + "'");
}

/// Suprema over lambda in [s, t]: stored times plus s and t, then global
/// midpoint refinement until the sup moves by less than rel_tol.
struct SupOptions {
  double rel_tol = 1e-4;
  int max_levels = 10;
  int band = 2;  // grid cells excluded around the source and its cut locus
};

struct EtaOptions {
  SupOptions sup;
  double time_step = 0.0;  // closed-form paths only; 0 selects 1e-6 * max(1, t - s)
};

struct SupResult {
  double value = 0.0;
  double lambda_at = 0.0;
  std::size_t samples = 0;
  int levels = 0;
  bool converged = false;
};

namespace detail {

inline void check_window(const FlowTrajectory& traj, double s, double t) {
  require(t > s, ErrorKind::InvalidArgument, "need s < t");
  require(s >= traj.start() - 1e-14 && t <= traj.end() + 1e-14, ErrorKind::RangeError,
          "[s, t] is not inside the trajectory range");
}

inline std::vector<double> lambda_samples(const FlowTrajectory& traj, double s, double t) {
  std::vector<double> l{s};
  for (double x : traj.times)
    if (x > s + 1e-14 && x < t - 1e-14) l.push_back(x);
  l.push_back(t);
  return l;
}

/// Runs f on every sample; f returns one value per tracked quantity. The
/// result holds the per-quantity sup and, in `best`, the lambda of the largest.
template <class F>
std::vector<double> refine_sup(const FlowTrajectory& traj, double s, double t, const SupOptions& opt, F&& f,
                               SupResult& info) {
  auto lambdas = lambda_samples(traj, s, t);
  std::vector<double> sup;
  auto absorb = [&](double l) {
    const auto v = f(l);
    if (sup.empty()) sup.assign(v.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] > sup[i]) sup[i] = v[i];
    }
    const double top = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
    if (info.samples == 0 || top > info.value) {
      info.value = top;
      info.lambda_at = l;
    }
    ++info.samples;
  };
  for (double l : lambdas) absorb(l);
  for (int level = 1; level <= opt.max_levels; ++level) {
    const auto before = sup;
    std::vector<double> next;
    for (std::size_t k = 0; k + 1 < lambdas.size(); ++k) {
      next.push_back(lambdas[k]);
      const double mid = 0.5 * (lambdas[k] + lambdas[k + 1]);
      absorb(mid);
      next.push_back(mid);
    }
    next.push_back(lambdas.back());
    lambdas = std::move(next);
    info.levels = level;
    double change = 0.0;
    for (std::size_t i = 0; i < sup.size(); ++i)
      change = std::max(change, std::abs(sup[i] - before[i]) / std::max(std::abs(before[i]), 1e-300));
    if (change < opt.rel_tol) {
      info.converged = true;
      break;
    }
  }
  return sup;
}

/// Distances d_{g(lambda)}(., y) on the grid plus the one-sided time
/// derivatives, combined as max(forward, backward).
struct DistanceRate {
  std::vector<double> d;
  std::vector<double> rate;
};

inline std::pair<double, double> rate_steps(const FlowTrajectory& traj, double lambda, double h) {
  if (traj.exact) {
    require(lambda - h >= traj.start() - 1e-14 && lambda + h <= traj.end() + 1e-14, ErrorKind::StencilRange,
            "time stencil around " + std::to_string(lambda) + " leaves the trajectory range");
    return {h, h};
  }
  auto hi = std::upper_bound(traj.times.begin(), traj.times.end(), lambda + 1e-14);
  auto lo = std::lower_bound(traj.times.begin(), traj.times.end(), lambda - 1e-14);
  require(hi != traj.times.end() && lo != traj.times.begin(), ErrorKind::StencilRange,
          "time stencil around " + std::to_string(lambda) + " needs stored times on both sides");
  return {*hi - lambda, lambda - *(lo - 1)};
}

inline DistanceRate distance_rate(const FlowTrajectory& traj, const Point& y, double lambda, double h) {
  const auto [hf, hb] = rate_steps(traj, lambda, h);
  const auto d0 = distance_field(traj.state_at(lambda), y).values.values;
  const auto df = distance_field(traj.state_at(lambda + hf), y).values.values;
  const auto db = distance_field(traj.state_at(lambda - hb), y).values.values;
  DistanceRate r{d0, std::vector<double>(d0.size())};
  for (std::size_t i = 0; i < d0.size(); ++i) r.rate[i] = std::max((df[i] - d0[i]) / hf, (d0[i] - db[i]) / hb);
  return r;
}

inline double point_rate(const FlowTrajectory& traj, const Point& y, const Point& x, double lambda, double h) {
  const auto [hf, hb] = rate_steps(traj, lambda, h);
  const double d0 = distance(traj.state_at(lambda), y, x);
  return std::max((distance(traj.state_at(lambda + hf), y, x) - d0) / hf,
                  (d0 - distance(traj.state_at(lambda - hb), y, x)) / hb);
}

/// For each query radius r: max over grid z with d(z) <= r of max(rate(z), 0).
inline std::vector<double> ball_rate_max(const DistanceRate& dr, const std::vector<double>& radii) {
  std::vector<std::size_t> order(dr.d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dr.d[a] < dr.d[b]; });
  std::vector<double> sorted(order.size()), prefix(order.size());
  double run = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    sorted[k] = dr.d[order[k]];
    run = std::max(run, dr.rate[order[k]]);
    prefix[k] = run;
  }
  std::vector<double> out(radii.size(), 0.0);
  for (std::size_t q = 0; q < radii.size(); ++q) {
    // Closed ball: boundary ties count.
    const double r = radii[q] * (1 + 1e-12) + 1e-14;
    const auto k = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), r) - sorted.begin());
    out[q] = k == 0 ? 0.0 : prefix[k - 1];
  }
  return out;
}

inline double eta_step(const EtaOptions& opt, double s, double t) {
  return opt.time_step > 0.0 ? opt.time_step : 1e-6 * std::max(1.0, t - s);
}

}  // namespace detail

/// mu = sup over lambda in [s, t] and regular grid points of
/// |grad d_{g(t)}(y, .)|_{g(lambda)}.
inline SupResult mu_details(const FlowTrajectory& traj, const Point& y, double s, double t, const SupOptions& opt = {}) {
  detail::check_window(traj, s, t);
  const auto d = distance_field(traj.state_at(t), y);
  const auto mask = regular_mask(*traj.model, y, opt.band);
  require(std::find(mask.begin(), mask.end(), true) != mask.end(), ErrorKind::InvalidArgument,
          "no grid points left after excluding the cut-locus band");
  SupResult info;
  detail::refine_sup(traj, s, t, opt, [&](double l) {
    const auto g = cross_metric_gradient_norm(d, traj.state_at(l));
    double m = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i]) m = std::max(m, g[i]);
    return std::vector<double>{m};
  }, info);
  return info;
}

inline double compute_mu(const FlowTrajectory& traj, const Point& y, double s, double t, const SupOptions& opt = {}) {
  return mu_details(traj, y, s, t, opt).value;
}

/// eta for one x: z ranges over grid points in the closed d_{g(lambda)}-ball
/// of radius d_{g(lambda)}(x, y), plus x itself.
inline SupResult eta_details(const FlowTrajectory& traj, const Point& x, const Point& y, double s, double t,
                             const EtaOptions& opt = {}) {
  detail::check_window(traj, s, t);
  const double h = detail::eta_step(opt, s, t);
  SupResult info;
  detail::refine_sup(traj, s, t, opt.sup, [&](double l) {
    const auto dr = detail::distance_rate(traj, y, l, h);
    const double r = distance(traj.state_at(l), y, x);
    const double v = std::max(detail::ball_rate_max(dr, {r})[0], std::max(detail::point_rate(traj, y, x, l, h), 0.0));
    return std::vector<double>{0.25 * v};
  }, info);
  return info;
}

inline double compute_eta(const FlowTrajectory& traj, const Point& x, const Point& y, double s, double t,
                          const EtaOptions& opt = {}) {
  return eta_details(traj, x, y, s, t, opt).value;
}

/// eta for every grid point x at once.
inline std::vector<double> eta_profile(const FlowTrajectory& traj, const Point& y, double s, double t,
                                       const EtaOptions& opt = {}, SupResult* info_out = nullptr) {
  detail::check_window(traj, s, t);
  const double h = detail::eta_step(opt, s, t);
  SupResult info;
  auto sup = detail::refine_sup(traj, s, t, opt.sup, [&](double l) {
    const auto dr = detail::distance_rate(traj, y, l, h);
    auto v = detail::ball_rate_max(dr, dr.d);
    for (double& e : v) e *= 0.25;
    return v;
  }, info);
  if (info_out) *info_out = info;
  return sup;
}

// ---------------------------------------------------------------------------
// Reports

struct ProfileRow {
  double distance = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
};

struct BoundReport {
  BoundKind kind = BoundKind::MainLemma;
  nlohmann::json params = nlohmann::json::object();
  double lhs = 0.0;
  double rhs = 0.0;
  double margin_ratio = std::numeric_limits<double>::infinity();  // rhs / lhs
  double report_tol = 1e-6;
  bool passed = false;
  nlohmann::json constants = nlohmann::json::object();
  nlohmann::json diagnostics = nlohmann::json::object();
  std::string error;  // set when the verification itself failed to run
  std::vector<ProfileRow> profile;
};

struct BoundOptions {
  SolverConfig solver;
  double report_tol = 1e-6;
  double C_scale = 1.0;        // multiplies C, C1 and C2; 1e-6 is the negative control
  double mu_power = 2.0;       // exponent of mu in the first Gaussian bound
  double min_dt = 1e-4;        // smallest t - s the Gaussian verifiers accept
  double comparison_floor = 1e-10;  // kernel values below floor * max H are not compared
  SupOptions sup;
  EtaOptions eta;
  bool keep_profile = false;
};

namespace detail {

inline void finalize(BoundReport& r) {
  r.margin_ratio = r.lhs > 0.0 ? r.rhs / r.lhs : std::numeric_limits<double>::infinity();
  r.passed = r.error.empty() && r.margin_ratio >= 1.0 - r.report_tol;
}

inline nlohmann::json point_json(const ManifoldModel& m, const Point& p) {
  if (m.kind == ModelKind::FlatTorus) return {p.c[0], p.c[1], p.c[2]};
  return {{"polar_angle", p.polar_angle()}};
}

inline nlohmann::json provenance(const LogSobConstants& c, const BoundOptions& opt) {
  auto j = constants_to_json(c);
  j["C_scale"] = opt.C_scale;
  return j;
}

inline double lp_norm(const MetricState& st, const ScalarField& u, double p) {
  require(u.size() == st.model->size(), ErrorKind::ResolutionMismatch, "field does not match the metric grid");
  const auto w = volume_measure(st, u.rep);
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += w[i] * std::pow(std::abs(u[i]), p);
  return std::pow(acc, 1.0 / p);
}

inline double sup_norm(const ScalarField& u) {
  double m = 0.0;
  for (double v : u.values) m = std::max(m, std::abs(v));
  return m;
}

inline BoundReport base_report(BoundKind kind, const LogSobConstants& c, const BoundOptions& opt) {
  BoundReport r;
  r.kind = kind;
  r.report_tol = opt.report_tol;
  r.constants = provenance(c, opt);
  return r;
}

}  // namespace detail

/// max_x K(x, t; y, s) against C (t-s)^{-n/2} e^{2 alpha^2 (t-s)}.
inline BoundReport verify_mainlemma(const FlowTrajectory& traj, const WeightSpec& weight, const Point& y, double s,
                                    double t, const LogSobConstants& consts, const BoundOptions& opt = {}) {
  detail::check_window(traj, s, t);
  const auto K = solve_weighted_kernel(traj, weight, y, s, t, opt.solver);
  const double dt = t - s;
  auto r = detail::base_report(BoundKind::MainLemma, consts, opt);
  const auto it = std::max_element(K.values.values.begin(), K.values.values.end());
  const auto worst = grid_point(*K.model, static_cast<std::size_t>(it - K.values.values.begin()));
  r.lhs = *it;
  r.rhs = opt.C_scale * compute_C(consts) * std::pow(dt, -0.5 * consts.n) * std::exp(2.0 * weight.alpha * weight.alpha * dt);
  r.params = {{"x", detail::point_json(*K.model, worst)},
              {"y", detail::point_json(*K.model, y)},
              {"s", s},
              {"t", t},
              {"alpha", weight.alpha},
              {"weight", weight.description}};
  r.diagnostics = kernel_to_json(K, false);
  detail::finalize(r);
  return r;
}

/// The alpha = 0 case: max H against C (t-s)^{-n/2}.
inline BoundReport verify_ondiag(const FlowTrajectory& traj, const Point& y, double s, double t,
                                 const LogSobConstants& consts, const BoundOptions& opt = {}) {
  auto r = verify_mainlemma(traj, WeightSpec::none(), y, s, t, consts, opt);
  r.kind = BoundKind::OnDiag;
  return r;
}

enum class GaussianVariant { Mu, Eta };

/// Pointwise H(x, t; y, s) <= RHS(x) over the grid. Mu: C dt^{-n/2}
/// exp(-d^2 / (8 mu^p dt)). Eta: the clamped-distance weight with
/// alpha = -d / (4 dt) composed with the main bound and the factor
/// exp(4 eta |alpha| dt), which equals C dt^{-n/2} exp(-d^2 / (8 dt) + eta d).
/// Points where H is below the comparison floor are counted, not compared.
inline BoundReport verify_gaussian(const FlowTrajectory& traj, const Point& y, double s, double t,
                                   GaussianVariant variant, const LogSobConstants& consts,
                                   const BoundOptions& opt = {}) {
  detail::check_window(traj, s, t);
  const double dt = t - s;
  require(dt >= opt.min_dt, ErrorKind::RangeError,
          "t - s = " + std::to_string(dt) + " is below the configured minimum " + std::to_string(opt.min_dt));
  const auto H = solve_heat_kernel(traj, y, s, t, opt.solver);
  require(H.values.size() == traj.model->size(), ErrorKind::ResolutionMismatch,
          "Gaussian checks need the kernel on the trajectory grid");
  const auto d = distance_field(traj.state_at(t), y).values.values;
  const double C = opt.C_scale * compute_C(consts) * std::pow(dt, -0.5 * consts.n);
  auto r = detail::base_report(variant == GaussianVariant::Mu ? BoundKind::GaussianMu : BoundKind::GaussianEta, consts,
                               opt);

  double mu = 1.0;
  std::vector<double> eta;
  SupResult sup;
  if (variant == GaussianVariant::Mu) {
    sup = mu_details(traj, y, s, t, opt.sup);
    mu = sup.value;
  } else {
    eta = eta_profile(traj, y, s, t, opt.eta, &sup);
  }

  const double floor = std::max(opt.comparison_floor * H.max(), H.tail_bound);
  double worst_ratio = std::numeric_limits<double>::infinity();
  std::size_t worst = 0, compared = 0, below = 0;
  std::vector<double> rhs(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (variant == GaussianVariant::Mu) {
      rhs[i] = C * std::exp(-d[i] * d[i] / (8.0 * std::pow(mu, opt.mu_power) * dt));
    } else {
      const double alpha = -d[i] / (4.0 * dt);
      rhs[i] = C * std::exp(2.0 * alpha * alpha * dt + alpha * d[i] + 4.0 * eta[i] * std::abs(alpha) * dt);
    }
    if (H.values[i] <= floor) {
      ++below;
      continue;
    }
    ++compared;
    const double q = rhs[i] / H.values[i];
    if (q < worst_ratio) {
      worst_ratio = q;
      worst = i;
    }
  }
  r.lhs = H.values[worst];
  r.rhs = rhs[worst];
  const double dw = d[worst];
  const double mu_w = variant == GaussianVariant::Mu ? mu : 1.0;
  r.params = {{"x", detail::point_json(*traj.model, grid_point(*traj.model, worst))},
              {"y", detail::point_json(*traj.model, y)},
              {"s", s},
              {"t", t},
              {"distance", dw},
              {"alpha", -dw / (mu_w * 4.0 * dt)},
              {"weight", variant == GaussianVariant::Mu ? "min(d_t(., y), d_t(x, y)) / mu" : "min(d_l(., y), d_l(x, y))"}};
  if (variant == GaussianVariant::Mu) {
    r.params["mu"] = mu;
    r.params["mu_power"] = opt.mu_power;
  } else {
    r.params["eta"] = eta[worst];
    r.params["eta_max"] = *std::max_element(eta.begin(), eta.end());
  }
  r.diagnostics = kernel_to_json(H, false);
  r.diagnostics["points_compared"] = compared;
  r.diagnostics["points_below_floor"] = below;
  r.diagnostics["comparison_floor"] = floor;
  r.diagnostics["lambda_samples"] = sup.samples;
  r.diagnostics["lambda_levels"] = sup.levels;
  r.diagnostics["lambda_converged"] = sup.converged;
  if (opt.keep_profile) {
    for (std::size_t i = 0; i < d.size(); ++i) r.profile.push_back({d[i], H.values[i], rhs[i]});
    std::sort(r.profile.begin(), r.profile.end(), [](const ProfileRow& a, const ProfileRow& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.lhs < b.lhs);
    });
  }
  if (compared == 0) r.lhs = 0.0;
  detail::finalize(r);
  return r;
}

namespace detail {

inline BoundReport verify_contraction(BoundKind kind, const FlowTrajectory& traj, const WeightSpec& weight, double t0,
                                      double t1, const ScalarField& u0, const LogSobConstants& consts,
                                      const BoundOptions& opt, ScalarField* u1_out) {
  check_window(traj, t0, t1);
  require(u0.size() == traj.model->size(), ErrorKind::ResolutionMismatch, "initial data must live on the trajectory grid");
  const auto u1 = evolve_weighted_solution(traj, weight, u0, t0, t1, opt.solver);
  const auto s0 = traj.state_at(t0), s1 = traj.state_at(t1);
  const double dt = t1 - t0;
  auto r = base_report(kind, consts, opt);
  if (kind == BoundKind::Ultra) {
    r.lhs = sup_norm(u1);
    r.rhs = opt.C_scale * ultra_factor(consts, weight.alpha, dt) * lp_norm(s0, u0, 2.0);
  } else {
    r.lhs = lp_norm(s1, u1, 2.0);
    r.rhs = opt.C_scale * l1l2_factor(consts, weight.alpha, dt) * lp_norm(s0, u0, 1.0);
  }
  r.params = {{"t0", t0}, {"t1", t1}, {"alpha", weight.alpha}, {"weight", weight.description}};
  r.diagnostics = {{"solver", to_string(opt.solver.solver)},
                   {"u0_L1", lp_norm(s0, u0, 1.0)},
                   {"u0_L2", lp_norm(s0, u0, 2.0)},
                   {"u1_L2", lp_norm(s1, u1, 2.0)},
                   {"u1_sup", sup_norm(u1)},
                   {"u1_min", *std::min_element(u1.values.begin(), u1.values.end())}};
  finalize(r);
  if (u1_out) *u1_out = u1;
  return r;
}

}  // namespace detail

/// ||u(t1)||_{inf} against C1 dt^{-n/4} e^{2 alpha^2 dt} ||u(t0)||_{2, g(t0)}.
inline BoundReport verify_ultracontractivity(const FlowTrajectory& traj, const WeightSpec& weight, double t0, double t1,
                                             const ScalarField& u0, const LogSobConstants& consts,
                                             const BoundOptions& opt = {}) {
  return detail::verify_contraction(BoundKind::Ultra, traj, weight, t0, t1, u0, consts, opt, nullptr);
}

/// ||u(t1)||_{2, g(t1)} against C2 dt^{-n/4} e^{2 alpha^2 dt} ||u(t0)||_{1, g(t0)}.
inline BoundReport verify_l1l2(const FlowTrajectory& traj, const WeightSpec& weight, double t0, double t1,
                               const ScalarField& u0, const LogSobConstants& consts, const BoundOptions& opt = {}) {
  return detail::verify_contraction(BoundKind::L1L2, traj, weight, t0, t1, u0, consts, opt, nullptr);
}

/// L1 -> L2 on [s, m] followed by L2 -> Linf on [m, t], m the midpoint. The
/// product of the two factors is the main bound's factor, so the chained
/// inequality ||u(t)||_inf <= C dt^{-n/2} e^{2 alpha^2 dt} ||u(s)||_1 follows.
struct ChainCheck {
  BoundReport first;   // l1l2 on [s, m]
  BoundReport second;  // ultra on [m, t]
  double composed_factor = 0.0;
  double main_factor = 0.0;
  double factor_mismatch = 0.0;  // relative
  double lhs = 0.0;              // ||u(t)||_inf
  double rhs = 0.0;              // main factor times ||u(s)||_1
  bool consistent = false;
};

inline ChainCheck verify_chain(const FlowTrajectory& traj, const WeightSpec& weight, double s, double t,
                               const ScalarField& u0, const LogSobConstants& consts, const BoundOptions& opt = {},
                               double factor_tol = 1e-12) {
  const double m = 0.5 * (s + t), dt = t - s;
  ChainCheck c;
  ScalarField um, ut;
  c.first = detail::verify_contraction(BoundKind::L1L2, traj, weight, s, m, u0, consts, opt, &um);
  c.second = detail::verify_contraction(BoundKind::Ultra, traj, weight, m, t, um, consts, opt, &ut);
  c.composed_factor = opt.C_scale * opt.C_scale * l1l2_factor(consts, weight.alpha, 0.5 * dt) *
                      ultra_factor(consts, weight.alpha, 0.5 * dt);
  c.main_factor = opt.C_scale * opt.C_scale * compute_C(consts) * std::pow(dt, -0.5 * consts.n) *
                  std::exp(2.0 * weight.alpha * weight.alpha * dt);
  c.factor_mismatch = std::abs(c.composed_factor - c.main_factor) / c.main_factor;
  c.lhs = detail::sup_norm(ut);
  c.rhs = c.main_factor * detail::lp_norm(traj.state_at(s), u0, 1.0);
  c.consistent = c.factor_mismatch <= factor_tol && c.first.passed && c.second.passed &&
                 c.lhs <= c.rhs * (1 + opt.report_tol);
  return c;
}

inline nlohmann::json report_to_json(const BoundReport& r) {
  nlohmann::json j{{"boundKind", to_string(r.kind)},
                   {"params", r.params},
                   {"lhs", r.lhs},
                   {"rhs", r.rhs},
                   {"marginRatio", std::isfinite(r.margin_ratio) ? nlohmann::json(r.margin_ratio) : nlohmann::json()},
                   {"reportTol", r.report_tol},
                   {"passed", r.passed},
                   {"constantsProvenance", r.constants},
                   {"solverDiagnostics", r.diagnostics}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

// ---------------------------------------------------------------------------
// Suites

/// One trajectory, one set of constants and the parameter grids. The weight is
/// certified once; each alpha cell copies it with its own alpha.
struct SuiteSpec {
  std::string name;
  FlowTrajectory traj;
  LogSobConstants consts;
  WeightSpec weight = WeightSpec::none();
  std::vector<BoundKind> kinds;
  std::vector<double> alphas;
  std::vector<double> starts;
  std::vector<double> steps;
  std::vector<Point> sources;
  ScalarField initial;  // data for ultra / l1l2
  BoundOptions options;
  std::size_t workers = 1;
};

struct KindSummary {
  std::size_t total = 0, passed = 0, failed = 0, errors = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
};

struct ReportSuite {
  std::vector<BoundReport> reports;
  std::map<std::string, KindSummary> by_kind;
  std::size_t total = 0, passed = 0, failed = 0;
  nlohmann::json constants;

  bool all_passed() const { return failed == 0; }
};

namespace detail {

struct SuiteCell {
  BoundKind kind;
  double alpha = 0.0, s = 0.0, dt = 0.0;
  Point y;
};

inline BoundReport run_cell(const SuiteSpec& spec, const SuiteCell& c) {
  const double t = c.s + c.dt;
  try {
    switch (c.kind) {
      case BoundKind::MainLemma: {
        auto w = spec.weight;
        w.alpha = c.alpha;
        return verify_mainlemma(spec.traj, w, c.y, c.s, t, spec.consts, spec.options);
      }
      case BoundKind::OnDiag: return verify_ondiag(spec.traj, c.y, c.s, t, spec.consts, spec.options);
      case BoundKind::GaussianMu:
        return verify_gaussian(spec.traj, c.y, c.s, t, GaussianVariant::Mu, spec.consts, spec.options);
      case BoundKind::GaussianEta:
        return verify_gaussian(spec.traj, c.y, c.s, t, GaussianVariant::Eta, spec.consts, spec.options);
      case BoundKind::Ultra:
      case BoundKind::L1L2: {
        auto w = spec.weight;
        w.alpha = c.alpha;
        return verify_contraction(c.kind, spec.traj, w, c.s, t, spec.initial, spec.consts, spec.options, nullptr);
      }
    }
  } catch (const std::exception& e) {
    auto r = base_report(c.kind, spec.consts, spec.options);
    r.params = {{"s", c.s}, {"t", t}, {"alpha", c.alpha}};
    r.error = e.what();
    r.margin_ratio = 0.0;
    r.passed = false;
    return r;
  }
  return {};
}

inline std::vector<SuiteCell> suite_cells(const SuiteSpec& spec) {
  std::vector<SuiteCell> cells;
  for (auto kind : spec.kinds) {
    const bool per_alpha = kind == BoundKind::MainLemma || kind == BoundKind::Ultra || kind == BoundKind::L1L2;
    const bool per_source = kind != BoundKind::Ultra && kind != BoundKind::L1L2;
    const std::vector<double> alphas = per_alpha ? spec.alphas : std::vector<double>{0.0};
    const std::vector<Point> sources = per_source ? spec.sources : std::vector<Point>{Point{}};
    if (per_alpha && alphas.empty()) continue;
    for (const auto& y : sources)
      for (double a : alphas)
        for (double s : spec.starts)
          for (double dt : spec.steps) cells.push_back({kind, a, s, dt, y});
  }
  return cells;
}

}  // namespace detail

/// Runs every grid cell (in parallel when workers > 1); reports keep the cell
/// order, so the output does not depend on scheduling. Failures are collected.
inline ReportSuite assemble_report_suite(const SuiteSpec& spec) {
  const auto cells = detail::suite_cells(spec);
  ReportSuite suite;
  suite.reports.resize(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) suite.reports[i] = detail::run_cell(spec, cells[i]);
  };
  const std::size_t nw = std::max<std::size_t>(1, std::min(spec.workers, cells.size()));
  if (nw == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < nw; ++k) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (const auto& r : suite.reports) {
    auto& k = suite.by_kind[to_string(r.kind)];
    ++k.total;
    ++suite.total;
    if (!r.error.empty()) ++k.errors;
    if (r.passed) {
      ++k.passed;
      ++suite.passed;
    } else {
      ++k.failed;
      ++suite.failed;
    }
    k.worst_margin = std::min(k.worst_margin, r.margin_ratio);
  }
  suite.constants = detail::provenance(spec.consts, spec.options);
  return suite;
}

inline nlohmann::json suite_summary_json(const ReportSuite& suite) {
  nlohmann::json kinds = nlohmann::json::object();
  for (const auto& [name, k] : suite.by_kind)
    kinds[name] = {{"total", k.total},
                   {"passed", k.passed},
                   {"failed", k.failed},
                   {"errors", k.errors},
                   {"worstMargin", std::isfinite(k.worst_margin) ? nlohmann::json(k.worst_margin) : nlohmann::json()}};
  return {{"total", suite.total},
          {"passed", suite.passed},
          {"failed", suite.failed},
          {"byKind", kinds},
          {"constantsProvenance", suite.constants}};
}

inline std::string suite_summary_csv(const ReportSuite& suite) {
  std::ostringstream os;
  os.precision(12);
  os << "kind,s,t,alpha,lhs,rhs,margin_ratio,passed,error\n";
  for (const auto& r : suite.reports) {
    auto num = [&](const char* key) -> std::string {
      if (r.params.contains(key)) return r.params[key].dump();
      if (r.params.contains("t0") && std::string(key) == "s") return r.params["t0"].dump();
      if (r.params.contains("t1") && std::string(key) == "t") return r.params["t1"].dump();
      return "";
    };
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << to_string(r.kind) << ',' << num("s") << ',' << num("t") << ',' << num("alpha") << ',' << r.lhs << ','
       << r.rhs << ',' << r.margin_ratio << ',' << (r.passed ? 1 : 0) << ',' << err << '\n';
  }
  return os.str();
}

}  // namespace hkflow

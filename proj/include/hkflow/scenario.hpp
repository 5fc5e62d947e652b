#pragma once

// Scenario configs and the batch runner behind the command-line tool. A
// config is one JSON document; validate_config() checks it completely before
// any compute and names every offending field.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hkflow/bounds.hpp"

namespace hkflow {

using nlohmann::json;

/// 64-bit FNV-1a of the canonical (sorted-key, compact) dump.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_hash(const json& config) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(config.dump());
  return os.str();
}

// ---------------------------------------------------------------------------
// Validation

namespace detail {

class Validator {
 public:
  explicit Validator(const json& root) : root_(root) {}

  const json* section(const std::string& name, bool required) {
    if (!root_.contains(name)) {
      if (required) missing(name);
      return nullptr;
    }
    if (!root_[name].is_object()) {
      bad(name, "must be an object");
      return nullptr;
    }
    return &root_[name];
  }

  void missing(const std::string& path) { errors_.push_back(path + ": required field missing"); }
  void bad(const std::string& path, const std::string& why) { errors_.push_back(path + ": " + why); }

  bool number(const json* sec, const std::string& sec_name, const std::string& key, bool required,
              bool positive = false) {
    const std::string path = sec_name + "." + key;
    if (!sec || !sec->contains(key)) {
      if (required) missing(path);
      return false;
    }
    if (!(*sec)[key].is_number()) {
      bad(path, "must be a number");
      return false;
    }
    if (positive && (*sec)[key].get<double>() <= 0.0) {
      bad(path, "must be positive");
      return false;
    }
    return true;
  }

  bool string_in(const json* sec, const std::string& sec_name, const std::string& key, bool required,
                 const std::vector<std::string>& allowed) {
    const std::string path = sec_name + "." + key;
    if (!sec || !sec->contains(key)) {
      if (required) missing(path);
      return false;
    }
    if (!(*sec)[key].is_string()) {
      bad(path, "must be a string");
      return false;
    }
    const auto v = (*sec)[key].get<std::string>();
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      bad(path, "'" + v + "' is not one of {" + list + "}");
      return false;
    }
    return true;
  }

  bool number_list(const json* sec, const std::string& sec_name, const std::string& key, bool required) {
    const std::string path = sec_name + "." + key;
    if (!sec || !sec->contains(key)) {
      if (required) missing(path);
      return false;
    }
    const auto& v = (*sec)[key];
    if (!v.is_array()) {
      bad(path, "must be an array of numbers");
      return false;
    }
    for (const auto& e : v)
      if (!e.is_number()) {
        bad(path, "must be an array of numbers");
        return false;
      }
    return true;
  }

  const std::vector<std::string>& errors() const { return errors_; }

 private:
  const json& root_;
  std::vector<std::string> errors_;
};

inline const std::vector<std::string> kVerifications{"mainlemma", "ondiag", "gaussianMu", "gaussianEta", "ultra", "l1l2"};

}  // namespace detail

/// All schema problems of a config, one line each; empty when valid.
inline std::vector<std::string> config_diagnostics(const json& cfg) {
  if (!cfg.is_object()) return {"config: must be a JSON object"};
  detail::Validator v(cfg);
  if (!cfg.contains("name")) v.missing("name");
  else if (!cfg["name"].is_string()) v.bad("name", "must be a string");
  if (cfg.contains("seed") && !cfg["seed"].is_number_integer()) v.bad("seed", "must be an integer");

  std::string model;
  if (const auto* g = v.section("geometry", true)) {
    if (v.string_in(g, "geometry", "model", true, {"flat_torus", "round_sphere", "warped_sphere"}))
      model = (*g)["model"];
    v.number(g, "geometry", "resolution", true, true);
    if (g->contains("n") && !(*g)["n"].is_number_integer()) v.bad("geometry.n", "must be an integer");
    if (model == "flat_torus") {
      if (!g->contains("sizes")) v.missing("geometry.sizes");
      else if (!(*g)["sizes"].is_array() || (*g)["sizes"].size() != 3) v.bad("geometry.sizes", "must list three periods");
      if (g->value("n", 3) != 3) v.bad("geometry.n", "the flat torus model is three-dimensional");
    }
    if (model == "round_sphere") v.number(g, "geometry", "radius", true, true);
    if (model == "warped_sphere") {
      v.number(g, "geometry", "length", false, true);
      v.number(g, "geometry", "bump", false);
    }
  }

  if (const auto* f = v.section("flow", true)) {
    const bool list = v.string_in(f, "flow", "kind", true, {"ricci", "list"}) && (*f)["kind"] == "list";
    v.number(f, "flow", "horizon", true, true);
    if (list) {
      v.number(f, "flow", "coupling", true, true);
      v.number(f, "flow", "aux_amplitude", false);
      if (model == "flat_torus") v.bad("flow.kind", "List flow runs on the zonal models only");
    }
    if (f->contains("step")) {
      const auto& st = (*f)["step"];
      if (!st.is_object()) v.bad("flow.step", "must be an object");
      else
        for (const char* k : {"rtol", "atol", "interp_tol", "dt_initial", "dt_min", "max_steps", "blowup_floor"})
          v.number(&st, "flow.step", k, false, true);
    }
  }

  if (const auto* k = v.section("kernel", false)) {
    v.string_in(k, "kernel", "solver", false, {"spectral", "finiteDifference", "oracle"});
    v.string_in(k, "kernel", "route", false, {"auto", "conjugation", "expanded"});
    for (const char* key : {"delta", "tail_tol", "dt_factor"}) v.number(k, "kernel", key, false);
    for (const char* key : {"axis_oversample", "min_steps"}) v.number(k, "kernel", key, false, true);
  }

  if (const auto* c = v.section("constants", false)) {
    v.number(c, "constants", "sobolev_budget", false, true);
    v.number(c, "constants", "safety_factor", false, true);
    if (c->contains("overrides")) {
      const auto& o = (*c)["overrides"];
      if (!o.is_object()) v.bad("constants.overrides", "must be an object");
      else
        for (const auto& [key, val] : o.items()) {
          if (key != "C_S" && key != "T") v.bad("constants.overrides." + key, "only C_S and T can be overridden");
          else if (!val.is_number() || val.get<double>() <= 0.0) v.bad("constants.overrides." + key, "must be positive");
        }
    }
  }

  if (const auto* b = v.section("bounds", false)) {
    std::vector<std::string> kinds;
    if (b->contains("verifications")) {
      if (!(*b)["verifications"].is_array()) v.bad("bounds.verifications", "must be an array of names");
      else
        for (const auto& e : (*b)["verifications"]) {
          if (!e.is_string() ||
              std::find(detail::kVerifications.begin(), detail::kVerifications.end(), e.get<std::string>()) ==
                  detail::kVerifications.end())
            v.bad("bounds.verifications", "unknown verification " + e.dump());
          else kinds.push_back(e);
        }
    }
    auto wants = [&](std::initializer_list<const char*> ks) {
      for (const char* k : ks)
        if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) return true;
      return false;
    };
    const bool any = !kinds.empty();
    v.number_list(b, "bounds", "starts", any);
    v.number_list(b, "bounds", "steps", any);
    v.number_list(b, "bounds", "alphas", wants({"mainlemma", "ultra", "l1l2"}));
    if (wants({"mainlemma", "ondiag", "gaussianMu", "gaussianEta"}) && !b->contains("sources"))
      v.missing("bounds.sources");
    if (b->contains("sources")) {
      if (!(*b)["sources"].is_array()) v.bad("bounds.sources", "must be an array");
      else
        for (const auto& s : (*b)["sources"]) {
          const bool ok = model == "flat_torus" ? (s.is_array() && s.size() == 3)
                                                : (s.is_string() && (s == "north" || s == "south"));
          if (!ok)
            v.bad("bounds.sources", model == "flat_torus" ? "torus sources are [x, y, z] triples"
                                                          : "zonal sources are \"north\" or \"south\"");
        }
    }
    if (wants({"mainlemma", "ultra", "l1l2"})) {
      if (!b->contains("weight")) v.missing("bounds.weight");
      else if (!(*b)["weight"].is_object()) v.bad("bounds.weight", "must be an object");
      else {
        const auto& w = (*b)["weight"];
        const std::vector<std::string> allowed =
            model == "flat_torus" ? std::vector<std::string>{"sine", "clamp"} : std::vector<std::string>{"zonal_sine"};
        v.string_in(&w, "bounds.weight", "kind", true, allowed);
        v.number(&w, "bounds.weight", "slope", false, true);
        for (const char* k : {"phase", "cap", "width"}) v.number(&w, "bounds.weight", k, false);
        if (w.value("kind", "") == "clamp") {
          v.number(&w, "bounds.weight", "cap", true, true);
          v.number(&w, "bounds.weight", "width", true, true);
        }
      }
    }
    if (wants({"ultra", "l1l2"})) {
      if (!b->contains("initial")) v.missing("bounds.initial");
      else if (!(*b)["initial"].is_object()) v.bad("bounds.initial", "must be an object");
      else {
        const auto& i = (*b)["initial"];
        if (v.string_in(&i, "bounds.initial", "kind", true, {"bump", "constant", "random"})) {
          if (i["kind"] == "bump") v.number(&i, "bounds.initial", "width", true, true);
          if (i["kind"] == "constant") v.number(&i, "bounds.initial", "value", true, true);
        }
      }
    }
    for (const char* k : {"report_tol", "mu_power", "min_dt", "comparison_floor", "sup_rel_tol", "eta_time_step",
                          "C_scale"})
      v.number(b, "bounds", k, false);
    for (const char* k : {"sup_max_levels", "band"}) v.number(b, "bounds", k, false);
  }

  if (const auto* e = v.section("entropy", false)) {
    if (e->contains("enabled") && !(*e)["enabled"].is_boolean()) v.bad("entropy.enabled", "must be a boolean");
    if (e->value("enabled", false)) {
      v.number(e, "entropy", "tau", true, true);
      v.number(e, "entropy", "samples", false, true);
      v.number(e, "entropy", "t_star", false);
      v.number(e, "entropy", "t_lo", false);
      if (model == "flat_torus") v.bad("entropy.enabled", "entropy traces run on the zonal models only");
    }
  }

  if (const auto* o = v.section("output", false)) {
    if (o->contains("directory") && !(*o)["directory"].is_string()) v.bad("output.directory", "must be a string");
    if (o->contains("formats")) {
      if (!(*o)["formats"].is_array()) v.bad("output.formats", "must be an array");
      else
        for (const auto& f : (*o)["formats"])
          if (!f.is_string() || (f != "json" && f != "csv")) v.bad("output.formats", "formats are \"json\" and \"csv\"");
    }
  }
  return v.errors();
}

inline void validate_config(const json& cfg) {
  const auto errs = config_diagnostics(cfg);
  if (errs.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw Error(ErrorKind::Config, msg);
}

inline json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Config, "cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Building blocks from a validated config

inline ModelPtr model_from_config(const json& g) {
  const std::string kind = g["model"];
  const auto res = g["resolution"].get<std::size_t>();
  const int n = g.value("n", 3);
  if (kind == "flat_torus") return make_model(ManifoldModel::flat_torus(g["sizes"].get<std::array<double, 3>>(), res));
  if (kind == "round_sphere") return make_model(ManifoldModel::round_sphere(g["radius"], res, n));
  const double L = g.value("length", std::numbers::pi), b = g.value("bump", 0.0);
  // w(s) = (L/pi)(sin x + b sin^3 x), x = pi s / L: smooth and pole-regular.
  return make_model(ManifoldModel::warped_sphere(
      [L, b](double s) {
        const double x = std::numbers::pi * s / L;
        return L / std::numbers::pi * (std::sin(x) + b * std::pow(std::sin(x), 3));
      },
      L, res, n));
}

inline StepControl step_control_from_config(const json& flow) {
  StepControl c;
  if (!flow.contains("step")) return c;
  const auto& s = flow["step"];
  c.rtol = s.value("rtol", c.rtol);
  c.atol = s.value("atol", c.atol);
  c.interp_tol = s.value("interp_tol", c.interp_tol);
  c.dt_initial = s.value("dt_initial", c.dt_initial);
  c.dt_min = s.value("dt_min", c.dt_min);
  c.max_steps = s.value("max_steps", c.max_steps);
  c.blowup_floor = s.value("blowup_floor", c.blowup_floor);
  return c;
}

inline FlowTrajectory trajectory_from_config(const json& cfg) {
  const auto model = model_from_config(cfg["geometry"]);
  const auto& f = cfg["flow"];
  GeneralizedFlowSpec spec = GeneralizedFlowSpec::ricci();
  if (f["kind"] == "list") {
    const auto x = spectral::zonal_grid(model->resolution);
    const double a = f.value("aux_amplitude", 0.4);
    ScalarField u0{std::vector<double>(x.size()), Representation::Spectral};
    for (std::size_t i = 0; i < x.size(); ++i) u0[i] = a * std::cos(x[i]);
    spec = GeneralizedFlowSpec::list(f["coupling"], u0);
  }
  return evolve(spec, MetricState::initial(model), f["horizon"], step_control_from_config(f));
}

inline SolverConfig solver_from_config(const json& cfg) {
  SolverConfig c;
  if (!cfg.contains("kernel")) return c;
  const auto& k = cfg["kernel"];
  const std::string solver = k.value("solver", "spectral");
  c.solver = solver == "oracle" ? SolverKind::Oracle
             : solver == "finiteDifference" ? SolverKind::FiniteDifference
                                            : SolverKind::Spectral;
  const std::string route = k.value("route", "auto");
  c.route = route == "conjugation" ? WeightedRoute::Conjugation
            : route == "expanded"  ? WeightedRoute::Expanded
                                   : WeightedRoute::Auto;
  c.delta = k.value("delta", c.delta);
  c.tail_tol = k.value("tail_tol", c.tail_tol);
  c.dt_factor = k.value("dt_factor", c.dt_factor);
  c.axis_oversample = k.value("axis_oversample", c.axis_oversample);
  c.min_steps = k.value("min_steps", c.min_steps);
  return c;
}

inline LogSobConstants constants_from_config(const json& cfg, const FlowTrajectory& traj, SobolevEstimate* est_out) {
  const json c = cfg.value("constants", json::object());
  const json o = c.value("overrides", json::object());
  SobolevEstimate est;
  const double safety = c.value("safety_factor", 1.5);
  if (o.contains("C_S")) {
    // An override is taken as the value to use; the safety factor is not applied again.
    est.lower_bound = o["C_S"];
    est.safety_factor = 1.0;
    est.best_family = "override";
  } else {
    est = estimate_sobolev_constant(traj.states.front(), c.value("sobolev_budget", std::size_t{32}), safety);
  }
  if (est_out) *est_out = est;
  return constants_for(traj, est, o.value("T", 0.0));
}

inline double min_zonal_phi(const FlowTrajectory& traj) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& s : traj.states) {
    const auto z = zonal_metric(s);
    m = std::min(m, *std::min_element(z.phi.begin(), z.phi.end()));
  }
  return m;
}

inline WeightSpec weight_from_config(const json& w, const FlowTrajectory& traj) {
  const std::string kind = w["kind"];
  const double slope = w.value("slope", 1.0);
  WeightSpec spec;
  if (kind == "sine") {
    spec = WeightSpec::torus_sine(1.0, traj.model->periods[0], w.value("phase", 0.0), slope);
  } else if (kind == "clamp") {
    spec = WeightSpec::torus_clamp(1.0, traj.model->periods[0], w.value("phase", 0.0), w["cap"], w["width"]);
  } else {
    // |psi'| / phi <= slope everywhere on the trajectory.
    const double amp = slope * min_zonal_phi(traj);
    std::ostringstream os;
    os << "zonal_sine(slope=" << slope << ")";
    spec = WeightSpec::zonal(1.0, [amp](double x) { return amp * std::sin(x); }, os.str());
  }
  return certify(spec, traj);
}

inline ScalarField initial_from_config(const json& i, const ManifoldModel& m, std::uint64_t seed) {
  const std::string kind = i["kind"];
  if (kind == "constant") return ScalarField::constant(m, i["value"]);
  if (kind == "random") {
    std::mt19937_64 rng(seed);
    return random_positive_field(m, rng, i.value("modes", 3), i.value("amplitude", 0.5));
  }
  const double w = i["width"];
  if (m.kind == ModelKind::FlatTorus)
    return sample(m, [w](const Point& p) {
      return std::exp(-(3 - std::cos(p.c[0]) - std::cos(p.c[1]) - std::cos(p.c[2])) / (w * w));
    });
  return sample(m, [w](const Point& p) { return std::exp(-(1 - std::cos(p.polar_angle())) / (w * w)); });
}

inline Point source_from_config(const json& s) {
  if (s.is_array()) return Point::torus(s[0], s[1], s[2]);
  return s == "north" ? Point::north_pole() : Point::south_pole();
}

// ---------------------------------------------------------------------------
// Constants table

struct ConstantRow {
  std::string name;
  double value;
  std::string formula;
  std::string role;
};

inline std::vector<ConstantRow> constants_table(const LogSobConstants& c) {
  return {
      {"n", static_cast<double>(c.n), "dimension", "input"},
      {"C_S_estimate", c.C_S_estimate, "max over trial functions of (||u||_{2n/(n-2)} - Vol^{-1/n} ||u||_2) / ||grad u||_2",
       "Sobolev constant of (M, g(0)), lower bound"},
      {"safety_factor", c.safety_factor, "configured", "multiplies the Sobolev estimate"},
      {"C_S", c.C_S, "C_S_estimate * safety_factor", "Sobolev constant used below"},
      {"Vol0", c.volume0, "Vol(M, g(0))", "input"},
      {"minS0", c.minS0, "min S(g(0))", "input"},
      {"maxR0minus", c.maxR0minus, "max(-min R(g(0)), 0)", "input"},
      {"T", c.T, "final time of the trajectory", "input"},
      {"A", c.A, "(n/2)(2 ln C_S + ln n - 1)", "log-Sobolev constant term"},
      {"B", c.B, "4 C_S^-2 Vol0^(-2/n) - minS0", "log-Sobolev linear term"},
      {"B_eff", c.B_eff(), "max(B, 0)", "B as used in every estimate below"},
      {"C1", compute_C1(c), "exp((2 B_eff / 3 + maxR0minus) T + A/2 + n/2)",
       "ultracontractivity estimate: L2 at t0 to Linf at t1"},
      {"C2", compute_C2(c),
       "exp(((1/2 + 1/(32 ln 2 - 16)) B_eff + maxR0minus) T + A/2 + (n/4) ln(2 ln 2 - 1) + (n/2)(1 + ln 2))",
       "contraction estimate: L1 at t0 to L2 at t1"},
      {"C", compute_C(c), "2^(n/2) C1 C2", "weighted kernel bound and both Gaussian bounds"},
  };
}

inline json constants_table_json(const LogSobConstants& c) {
  json rows = json::array();
  for (const auto& r : constants_table(c))
    rows.push_back({{"name", r.name}, {"value", r.value}, {"formula", r.formula}, {"role", r.role}});
  return rows;
}

inline std::string constants_table_text(const LogSobConstants& c) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (const auto& r : constants_table(c))
    os << std::left << std::setw(14) << r.name << std::setw(18) << r.value << r.formula << "\n"
       << std::setw(32) << "" << "[" << r.role << "]\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Runner

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
  std::size_t workers = 1;
};

struct RunResult {
  std::filesystem::path directory;
  std::string config_hash;
  ReportSuite suite;
  std::vector<std::string> warnings;
  bool all_passed() const { return suite.all_passed(); }
};

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p);
  require(out.good(), ErrorKind::Config, "cannot write " + p.string());
  out << content;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace detail

/// Runs a validated config. Artifacts written before a compute failure stay on
/// disk. Everything except metadata.json is a function of config and seed.
inline RunResult run_scenario(json cfg, const RunOptions& opt = {}) {
  validate_config(cfg);
  if (opt.seed) cfg["seed"] = *opt.seed;
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{1});
  const auto start = std::chrono::steady_clock::now();

  RunResult res;
  res.config_hash = config_hash(cfg);
  const json out_cfg = cfg.value("output", json::object());
  std::vector<std::string> formats = out_cfg.value("formats", std::vector<std::string>{"json", "csv"});
  const bool want_json = std::find(formats.begin(), formats.end(), "json") != formats.end();
  const bool want_csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  const std::filesystem::path base = opt.out_dir ? *opt.out_dir : std::filesystem::path(out_cfg.value("directory", "hkflow-out"));
  res.directory = base / cfg["name"].get<std::string>();
  std::filesystem::create_directories(res.directory);
  const auto& dir = res.directory;

  // Flow.
  const auto traj = trajectory_from_config(cfg);
  if (traj.truncated) res.warnings.push_back("trajectory truncated: " + traj.truncation_reason);
  if (want_json) detail::write_file(dir / "trajectory.json", trajectory_to_json(traj).dump() + "\n");
  const auto minS = monitor_min_S(traj);
  if (!minS.monotone) res.warnings.push_back("min S decreased by " + std::to_string(minS.worst_decrease));
  if (want_csv) {
    std::ostringstream os;
    os.precision(17);
    os << "t,min_S\n";
    for (const auto& [t, v] : minS.samples) os << t << ',' << v << '\n';
    detail::write_file(dir / "min_s.csv", os.str());
  }

  // Constants.
  SobolevEstimate est;
  const auto consts = constants_from_config(cfg, traj, &est);
  json cj{{"config_hash", res.config_hash},
          {"constants", constants_to_json(consts)},
          {"table", constants_table_json(consts)},
          {"sobolev", {{"lower_bound", est.lower_bound},
                       {"safety_factor", est.safety_factor},
                       {"best_family", est.best_family},
                       {"best_parameter", est.best_parameter},
                       {"evaluations", est.evaluations}}}};
  if (want_json) detail::write_file(dir / "constants.json", cj.dump(2) + "\n");

  // Bounds.
  SuiteSpec spec;
  spec.name = cfg["name"];
  spec.traj = traj;
  spec.consts = consts;
  spec.workers = std::max<std::size_t>(1, opt.workers);
  spec.options.solver = solver_from_config(cfg);
  json chains = json::array(), distances = json::array();
  if (cfg.contains("bounds")) {
    const auto& b = cfg["bounds"];
    for (const auto& k : b.value("verifications", std::vector<std::string>{})) spec.kinds.push_back(bound_kind_from_string(k));
    spec.alphas = b.value("alphas", std::vector<double>{});
    spec.starts = b.value("starts", std::vector<double>{});
    spec.steps = b.value("steps", std::vector<double>{});
    if (b.contains("sources"))
      for (const auto& s : b["sources"]) spec.sources.push_back(source_from_config(s));
    if (b.contains("weight")) spec.weight = weight_from_config(b["weight"], traj);
    if (b.contains("initial")) spec.initial = initial_from_config(b["initial"], *traj.model, seed);
    auto& o = spec.options;
    o.report_tol = b.value("report_tol", o.report_tol);
    o.mu_power = b.value("mu_power", o.mu_power);
    o.min_dt = b.value("min_dt", o.min_dt);
    o.comparison_floor = b.value("comparison_floor", o.comparison_floor);
    o.C_scale = b.value("C_scale", o.C_scale);
    o.sup.rel_tol = b.value("sup_rel_tol", o.sup.rel_tol);
    o.sup.max_levels = b.value("sup_max_levels", o.sup.max_levels);
    o.sup.band = b.value("band", o.sup.band);
    o.eta.sup = o.sup;
    o.eta.time_step = b.value("eta_time_step", o.eta.time_step);
    o.keep_profile = want_csv;
  }
  res.suite = assemble_report_suite(spec);

  auto has = [&](BoundKind k) { return std::find(spec.kinds.begin(), spec.kinds.end(), k) != spec.kinds.end(); };
  if (has(BoundKind::Ultra) && has(BoundKind::L1L2)) {
    for (double a : spec.alphas)
      for (double s : spec.starts)
        for (double dt : spec.steps) {
          auto w = spec.weight;
          w.alpha = a;
          try {
            const auto c = verify_chain(traj, w, s, s + dt, spec.initial, consts, spec.options);
            chains.push_back({{"alpha", a}, {"s", s}, {"t", s + dt}, {"composedFactor", c.composed_factor},
                              {"mainFactor", c.main_factor}, {"factorMismatch", c.factor_mismatch}, {"lhs", c.lhs},
                              {"rhs", c.rhs}, {"consistent", c.consistent}});
          } catch (const std::exception& e) {
            chains.push_back({{"alpha", a}, {"s", s}, {"t", s + dt}, {"error", e.what()}, {"consistent", false}});
          }
        }
  }
  if (has(BoundKind::GaussianMu) || has(BoundKind::GaussianEta)) {
    for (const auto& y : spec.sources)
      for (double s : spec.starts)
        for (double dt : spec.steps) {
          json row{{"y", detail::point_json(*traj.model, y)}, {"s", s}, {"t", s + dt}};
          try {
            row["mu"] = compute_mu(traj, y, s, s + dt, spec.options.sup);
            const auto eta = eta_profile(traj, y, s, s + dt, spec.options.eta);
            row["eta_max"] = *std::max_element(eta.begin(), eta.end());
          } catch (const std::exception& e) {
            row["error"] = e.what();
          }
          distances.push_back(row);
        }
  }

  json reports = json::array();
  for (const auto& r : res.suite.reports) reports.push_back(report_to_json(r));
  json report{{"config_hash", res.config_hash},
              {"name", cfg["name"]},
              {"seed", seed},
              {"config", cfg},
              {"summary", suite_summary_json(res.suite)},
              {"distanceConstants", distances},
              {"chainChecks", chains},
              {"minS", {{"monotone", minS.monotone}, {"worstDecrease", minS.worst_decrease}}},
              {"reports", reports}};

  if (want_csv) {
    detail::write_file(dir / "summary.csv", suite_summary_csv(res.suite));
    std::ostringstream os;
    os.precision(17);
    os << "report,kind,distance,H,bound\n";
    for (std::size_t i = 0; i < res.suite.reports.size(); ++i)
      for (const auto& row : res.suite.reports[i].profile)
        os << i << ',' << to_string(res.suite.reports[i].kind) << ',' << row.distance << ',' << row.lhs << ','
           << row.rhs << '\n';
    detail::write_file(dir / "profiles.csv", os.str());
    if (!spec.sources.empty() && !spec.starts.empty() && !spec.steps.empty()) {
      try {
        const double s = spec.starts.front();
        const auto H = solve_heat_kernel(traj, spec.sources.front(), s, s + spec.steps.front(), spec.options.solver);
        detail::write_file(dir / "kernel_slice.csv", kernel_to_csv(H));
      } catch (const std::exception& e) {
        res.warnings.push_back(std::string("kernel slice skipped: ") + e.what());
      }
    }
  }

  // Entropy trace.
  if (cfg.contains("entropy") && cfg["entropy"].value("enabled", false)) {
    const auto& e = cfg["entropy"];
    const double t_star = e.value("t_star", traj.end()), t_lo = e.value("t_lo", traj.start());
    const double tau = e["tau"];
    const std::size_t samples = e.value("samples", std::size_t{16});
    const auto st = traj.state_at(t_star);
    const auto d = distance_field(st, Point::north_pole()).values;
    // Warped models evolve by finite volumes, whose fields live on the grid.
    const auto rep = traj.model->kind == ModelKind::WarpedSphere ? Representation::Grid : Representation::Spectral;
    ScalarField f{std::vector<double>(d.size()), rep};
    for (std::size_t i = 0; i < d.size(); ++i) f[i] = d[i] * d[i] / (4.0 * tau);
    std::vector<double> ts;
    for (std::size_t k = 0; k <= samples; ++k) ts.push_back(t_lo + (t_star - t_lo) * static_cast<double>(k) / samples);
    auto fin = entropy_state_from_f(st, f, tau);
    fin.time = t_star;
    const auto run = evolve_conjugate_density(traj, fin, t_lo, ts, spec.options.solver);
    if (run.truncated) res.warnings.push_back("conjugate run truncated: " + run.truncation_reason);
    const auto mono = check_w_monotonicity(traj, run.states);
    const double worst = mono.dWdt.empty() ? 0.0 : *std::min_element(mono.dWdt.begin(), mono.dWdt.end());
    report["entropy"] = {{"tau", tau}, {"t_star", t_star}, {"minRate", worst}, {"massError", run.worst_mass_error}};
    if (want_csv) detail::write_file(dir / "w_trace.csv", entropy_trace_csv(mono));
  }

  if (want_json) detail::write_file(dir / "report.json", report.dump(2) + "\n");
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json meta{{"config_hash", res.config_hash},
            {"timestamp", detail::utc_timestamp()},
            {"elapsed_seconds", elapsed},
            {"workers", spec.workers},
            {"warnings", res.warnings}};
  detail::write_file(dir / "metadata.json", meta.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// Bundled scenarios

inline std::filesystem::path default_scenario_dir() {
  if (const char* env = std::getenv("HKFLOW_SCENARIOS")) return env;
#ifdef HKFLOW_SCENARIO_DIR
  return HKFLOW_SCENARIO_DIR;
#else
  return "scenarios";
#endif
}

struct ScenarioEntry {
  std::string name;
  std::string description;
  std::filesystem::path path;
};

inline std::vector<ScenarioEntry> list_scenarios(const std::filesystem::path& dir = default_scenario_dir()) {
  std::vector<ScenarioEntry> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    try {
      const auto j = load_config(e.path());
      out.push_back({j.value("name", e.path().stem().string()), j.value("description", ""), e.path()});
    } catch (const Error&) {
      out.push_back({e.path().stem().string(), "(unreadable)", e.path()});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

/// A path if it exists, otherwise the bundled scenario of that name.
inline std::filesystem::path resolve_config(const std::string& arg) {
  if (std::filesystem::exists(arg)) return arg;
  for (const auto& s : list_scenarios())
    if (s.name == arg) return s.path;
  throw Error(ErrorKind::Config, "no config file or bundled scenario named '" + arg + "'");
}

}  // namespace hkflow

// hkflow: batch front end for scenario runs.
//
// Exit codes: 0 success, 1 usage error, 2 invalid config, 3 bound violations
// with --strict, 4 compute failure.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hkflow/scenario.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitViolation = 3;
constexpr int kExitCompute = 4;

int do_run(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out_dir,
           std::size_t workers, bool strict) {
  hkflow::json cfg;
  try {
    cfg = hkflow::load_config(hkflow::resolve_config(config));
    hkflow::validate_config(cfg);
  } catch (const hkflow::Error& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  }
  hkflow::RunOptions opt;
  opt.seed = seed;
  if (!out_dir.empty()) opt.out_dir = out_dir;
  opt.workers = workers;
  try {
    const auto res = hkflow::run_scenario(cfg, opt);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << cfg["name"].get<std::string>() << ": " << res.suite.passed << "/" << res.suite.total
              << " bound checks passed (config " << res.config_hash << ")\n";
    for (const auto& [kind, k] : res.suite.by_kind)
      std::cout << "  " << kind << ": " << k.passed << "/" << k.total << ", worst margin " << k.worst_margin << "\n";
    std::cout << "artifacts in " << res.directory.string() << "\n";
    if (!res.all_passed()) {
      std::cerr << res.suite.failed << " bound check(s) failed" << (strict ? "" : " (use --strict to fail the run)")
                << "\n";
      if (strict) return kExitViolation;
    }
    return 0;
  } catch (const hkflow::Error& e) {
    std::cerr << "compute failure: " << e.what() << "\n";
    return e.kind() == hkflow::ErrorKind::Config ? kExitConfig : kExitCompute;
  } catch (const std::exception& e) {
    std::cerr << "compute failure: " << e.what() << "\n";
    return kExitCompute;
  }
}

int do_describe(const std::vector<std::string>& inputs, const std::string& config, bool as_json) {
  try {
    hkflow::LogSobConstants c;
    if (!config.empty()) {
      const auto cfg = hkflow::load_config(hkflow::resolve_config(config));
      hkflow::validate_config(cfg);
      c = hkflow::constants_from_config(cfg, hkflow::trajectory_from_config(cfg), nullptr);
    } else {
      std::map<std::string, double> v{{"n", 3},         {"C_S", 1.0},  {"T", 1.0},     {"maxR0minus", 0.0},
                                      {"volume0", 1.0}, {"minS0", 0.0}, {"safety", 1.0}};
      std::optional<double> A, B;
      for (const auto& kv : inputs) {
        const auto eq = kv.find('=');
        hkflow::require(eq != std::string::npos, hkflow::ErrorKind::Config, "inputs are key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        double val = 0.0;
        try {
          val = std::stod(kv.substr(eq + 1));
        } catch (const std::exception&) {
          throw hkflow::Error(hkflow::ErrorKind::Config, "input '" + kv + "' has no numeric value");
        }
        if (key == "A") A = val;
        else if (key == "B") B = val;
        else if (v.count(key)) v[key] = val;
        else throw hkflow::Error(hkflow::ErrorKind::Config, "unknown input '" + key + "'");
      }
      c = hkflow::make_constants(static_cast<int>(v["n"]), v["C_S"], v["T"], v["maxR0minus"], v["volume0"], v["minS0"],
                                 v["safety"]);
      // Direct A / B inputs replace the values derived from C_S.
      if (A) c.A = *A;
      if (B) c.B = *B;
    }
    if (as_json) std::cout << hkflow::constants_table_json(c).dump(2) << "\n";
    else std::cout << hkflow::constants_table_text(c);
    return 0;
  } catch (const hkflow::Error& e) {
    std::cerr << e.what() << "\n";
    return e.kind() == hkflow::ErrorKind::Config ? kExitConfig : kExitCompute;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heat-kernel bounds along geometric flows"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t workers = 1;
  bool strict = false;
  app.add_option("--seed", seed, "seed for all random trial data (overrides the config)");
  app.add_option("--out-dir", out_dir, "output directory (overrides output.directory)");
  app.add_option("--workers", workers, "worker threads for the report suite")->check(CLI::PositiveNumber);
  app.add_flag("--strict", strict, "exit non-zero on any bound violation");

  auto* run = app.add_subcommand("run", "run a scenario config (path or bundled name)");
  std::string config;
  run->add_option("config", config, "config file or bundled scenario name")->required();

  auto* list = app.add_subcommand("list-scenarios", "list bundled scenarios");

  auto* describe = app.add_subcommand("describe-constants", "print the constants table with formulas");
  std::vector<std::string> inputs;
  std::string describe_config;
  bool as_json = false;
  describe->add_option("--inputs", inputs,
                       "key=value inputs: n, C_S, safety, T, maxR0minus, volume0, minS0, and optionally A, B");
  describe->add_option("--config", describe_config, "derive the inputs from a scenario instead");
  describe->add_flag("--json", as_json, "print JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (run->parsed()) return do_run(config, seed, out_dir, workers, strict);
  if (list->parsed()) {
    for (const auto& s : hkflow::list_scenarios()) std::cout << s.name << "\t" << s.description << "\n";
    return 0;
  }
  if (describe->parsed()) return do_describe(inputs, describe_config, as_json);
  return 1;
}

// Command-line front end: simulate, detect, calibrate, reproduce-figures,
// validate. Exit status 0 on success, 1 on invalid input, 2 on runtime
// failure.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "crdw/runner.hpp"

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  bool no_attack = false;
  std::optional<int> threads;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Override the scenario seed");
  cmd->add_option("--steps", o.steps, "Override n_steps");
  cmd->add_flag("--no-attack", o.no_attack, "Drop the attack (unattacked run)");
  cmd->add_option("--threads", o.threads, "Worker threads for window evaluation (0 = all cores)");
}

crdw::Scenario load(const std::string& path, const Overrides& o) {
  crdw::Scenario s = crdw::load_scenario(path);
  if (o.seed) s.seed = *o.seed;
  if (o.steps) s.n_steps = *o.steps;
  if (o.no_attack) s.attack.reset();
  if (o.threads) s.detector.threads = *o.threads;
  crdw::resolve_scenario(s);
  return s;
}

std::filesystem::path output_path(const std::string& given, const crdw::Scenario& s, const char* suffix) {
  if (!given.empty()) return given;
  return crdw::default_output_dir() / (s.name + suffix);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Covariance-robust dynamic watermarking: simulation and detection"};
  app.require_subcommand(1);

  Overrides o;
  std::string scenario_path, out_path, outdir, fixed_path, varying_path, resolved_path;
  std::optional<double> threshold;
  std::optional<long> ell, n_windows, burn_in;
  std::optional<double> a;
  std::optional<std::uint64_t> cal_seed;
  std::uint64_t fig_seed = 7;
  bool dump = false;

  auto* sim = app.add_subcommand("simulate", "Write the trajectory CSV of a scenario");
  sim->add_option("scenario,--scenario", scenario_path, "Scenario file")->required();
  sim->add_option("--out", out_path, "Output CSV (default: $CRDW_OUTDIR/<name>_trajectory.csv)");
  add_overrides(sim, o);

  auto* det = app.add_subcommand("detect", "Write the statistic trace CSV of a scenario");
  det->add_option("scenario,--scenario", scenario_path, "Scenario file")->required();
  det->add_option("--out", out_path, "Output CSV (default: $CRDW_OUTDIR/<name>_trace.csv)");
  det->add_option("--threshold", threshold, "Fixed threshold, skipping calibration");
  det->add_option("--resolved", resolved_path, "Also write the resolved configuration here");
  add_overrides(det, o);

  auto* cal = app.add_subcommand("calibrate", "Print the calibrated threshold");
  cal->add_option("scenario,--scenario", scenario_path, "Scenario file")->required();
  cal->add_option("--ell", ell, "Window length");
  cal->add_option("--windows", n_windows, "Number of disjoint windows");
  cal->add_option("-a,--false-alarm", a, "Target false-alarm rate");
  cal->add_option("--burn-in", burn_in, "Steps discarded before the first window");
  cal->add_option("--cal-seed", cal_seed, "Seed of the calibration run");
  cal->add_option("--threads", o.threads, "Worker threads (0 = all cores)");

  auto* fig = app.add_subcommand("reproduce-figures", "Run the four benchmark experiments and write CSV pairs");
  fig->add_option("--seed", fig_seed, "Seed shared by every run")->capture_default_str();
  fig->add_option("--outdir", outdir, "Output directory (default: $CRDW_OUTDIR or .)");
  fig->add_option("--fixed", fixed_path, "Fixed-covariance scenario (default: bundled)");
  fig->add_option("--varying", varying_path, "Drifting-covariance scenario (default: bundled)");
  fig->add_option("--threads", o.threads, "Worker threads (0 = all cores)");

  auto* val = app.add_subcommand("validate", "Load a scenario and check every invariant");
  val->add_option("scenario,--scenario", scenario_path, "Scenario file")->required();
  val->add_flag("--dump", dump, "Print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    if (*sim) {
      const crdw::Scenario s = load(scenario_path, o);
      const auto records = crdw::simulate(s.model, s.attack, s.schedule, s.n_steps, s.seed);
      const auto path = output_path(out_path, s, "_trajectory.csv");
      std::ofstream out(path, std::ios::binary);
      if (!out) throw crdw::Error(crdw::ErrorCode::kIoError, "cannot write " + path.string());
      crdw::write_trajectory_csv(out, records);
      std::cout << path.string() << '\n';
    } else if (*det) {
      crdw::Scenario s = load(scenario_path, o);
      if (threshold) s.detector.nu = *threshold;
      const auto path = output_path(out_path, s, "_trace.csv");
      if (!resolved_path.empty()) {
        std::ofstream cfg(resolved_path, std::ios::binary);
        if (!cfg) throw crdw::Error(crdw::ErrorCode::kIoError, "cannot write " + resolved_path);
        cfg << crdw::dump_resolved(s);
      }
      const auto rows = crdw::run_experiment(s, path);
      long rejected = 0;
      for (const auto& r : rows) rejected += r.reject ? 1 : 0;
      std::cout << path.string() << ": " << rows.size() << " windows, " << rejected << " rejected\n";
    } else if (*cal) {
      crdw::Scenario s = load(scenario_path, o);
      crdw::CalibrationSpec& c = s.calibration;
      if (ell) c.ell = *ell;
      if (n_windows) c.n_windows = *n_windows;
      if (a) c.a = *a;
      if (burn_in) c.burn_in = *burn_in;
      if (cal_seed) c.seed = *cal_seed;
      crdw::resolve_scenario(s);
      std::cout << crdw::format_double(crdw::calibrate_threshold(s)) << '\n';
    } else if (*fig) {
      const auto dir = crdw::bundled_scenario_dir();
      crdw::Scenario fixed = load(fixed_path.empty() ? (dir / "vehicle_fixed.toml").string() : fixed_path, o);
      crdw::Scenario varying = load(varying_path.empty() ? (dir / "vehicle_varying.toml").string() : varying_path, o);
      const auto target = outdir.empty() ? crdw::default_output_dir() : std::filesystem::path(outdir);
      for (const auto& run : crdw::reproduce_figures(fixed, varying, fig_seed, target)) {
        std::cout << run.label << ' ' << run.unattacked_csv.string() << ' ' << run.attacked_csv.string() << '\n';
      }
    } else if (*val) {
      const crdw::Scenario s = crdw::load_scenario(scenario_path);
      if (dump) {
        std::cout << crdw::dump_resolved(s);
      } else {
        std::cout << "ok: " << s.name << " (k' = " << s.kprime << ", xi = " << crdw::format_double(s.xi)
                  << ", epsilon = " << crdw::format_double(s.epsilon) << ")\n";
      }
    }
  } catch (const crdw::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool bad_input = e.code() == crdw::ErrorCode::kParseError || e.code() == crdw::ErrorCode::kValidationError;
    return bad_input ? kExitInvalid : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}

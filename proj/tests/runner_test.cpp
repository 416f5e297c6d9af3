#include "crdw/runner.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "crdw/benchmark.hpp"
#include "test_support.hpp"

namespace crdw {
namespace {

using testing::code_of;

namespace fs = std::filesystem;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string bundled_text(const char* file) { return read_file(bundled_scenario_dir() / file); }

// Replaces the first line starting with `key =` inside the given text.
std::string with_line(std::string text, const std::string& key, const std::string& replacement) {
  const std::regex re("(^|\\n)" + key + " = [^\\n]*");
  return std::regex_replace(text, re, "$1" + replacement, std::regex_constants::format_first_only);
}

// Replaces a multi-line `key = [ ... ]` matrix block.
std::string replace_block(const std::string& text, const std::string& key, const std::string& replacement) {
  return std::regex_replace(text, std::regex("\\n" + key + " = \\[[^=]*?\\n\\]"), "\n" + replacement,
                            std::regex_constants::format_first_only);
}

std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("crdw_runner_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Short runs keep these tests fast.
Scenario short_fixed(long n_steps = 260) {
  Scenario s = load_scenario(bundled_scenario_dir() / "vehicle_fixed.toml");
  s.n_steps = n_steps;
  s.detector.nu = 20.0;
  s.detector.stride = 7;
  resolve_scenario(s);
  return s;
}

TEST(LoadScenario, BundledFixedMatchesBenchmark) {
  const Scenario s = load_scenario(bundled_scenario_dir() / "vehicle_fixed.toml");
  EXPECT_EQ(s.model.sigma_w(), 1e-8 * Matrix::Identity(5, 5));
  EXPECT_EQ(s.model.sigma_e(), 0.5 * Matrix::Identity(2, 2));
  EXPECT_LE((s.model.A() - vehicle::A()).norm(), 1e-15);
  EXPECT_LE((s.model.B() - vehicle::B()).norm(), 1e-15);
  EXPECT_LE((s.model.K() - vehicle::lqr_K()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((s.model.L() - vehicle::lqr_L()).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_TRUE(s.attack.has_value());
  EXPECT_EQ(s.attack->alpha, -1.0);
  EXPECT_EQ(s.attack->sigma_s, 1e-8 * Matrix::Identity(3, 3));
  EXPECT_EQ(s.kprime, 1);
  EXPECT_EQ(s.xi, 0.0);
  EXPECT_EQ(s.epsilon, 0.0);
  EXPECT_EQ(s.detector.kind, StatisticKind::kCrdw);
  EXPECT_LE((s.schedule.at(500) - vehicle::true_sigma_z_fixed()).norm(), 1e-15 * vehicle::true_sigma_z_fixed().norm());
  ASSERT_EQ(s.polytope.num_vertices(), 4);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_LE((s.polytope.vertices()[k] - vehicle::polytope_vertices()[k]).norm(),
              1e-15 * vehicle::polytope_vertices()[k].norm());
  }
}

TEST(LoadScenario, BundledVaryingMatchesBenchmark) {
  const Scenario s = load_scenario(bundled_scenario_dir() / "vehicle_varying.toml");
  const auto frames = vehicle::varying_keyframes();
  ASSERT_EQ(s.schedule.keyframes().size(), frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    EXPECT_EQ(s.schedule.keyframes()[i].step, frames[i].step);
    EXPECT_LE((s.schedule.keyframes()[i].cov - frames[i].cov).norm(), 1e-15 * frames[i].cov.norm());
  }
  EXPECT_EQ(s.xi, vehicle::kDeclaredXi);
  EXPECT_EQ(s.detector.kind, StatisticKind::kCrdwStar);
  EXPECT_NEAR(s.epsilon, 0.0031103114365077355, 1e-9 * s.epsilon);
}

TEST(LoadScenario, UnstableGainIsAValidationError) {
  // A has eigenvalue 1, so K = 0 leaves A+BK marginally unstable.
  const std::string text = replace_block(bundled_text("vehicle_fixed.toml"), "K",
                                         "K = [[0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]]");
  EXPECT_EQ(code_of([&] { parse_scenario(text, "k.toml"); }), ErrorCode::kValidationError);
  const std::string msg = error_message([&] { parse_scenario(text, "k.toml"); });
  EXPECT_NE(msg.find("NotSchurStable"), std::string::npos) << msg;
}

TEST(LoadScenario, DwWithoutAssumedCovarianceIsRejected) {
  std::string text = bundled_text("vehicle_fixed.toml");
  text = with_line(text, "kind", "kind = \"DW\"");
  text = with_line(text, "form", "form = \"objective\"");
  text = std::regex_replace(text, std::regex("\\nassumed_sigma_z = [^\\n]*"), "");
  const std::string msg = error_message([&] { parse_scenario(text); });
  EXPECT_NE(msg.find("ValidationError"), std::string::npos);
  EXPECT_NE(msg.find("assumed_sigma_z"), std::string::npos) << msg;
}

TEST(LoadScenario, DriftRobustKindNeedsDriftBound) {
  const std::string text = with_line(bundled_text("vehicle_fixed.toml"), "kind", "kind = \"CRDW*\"");
  const std::string msg = error_message([&] { parse_scenario(text); });
  EXPECT_NE(msg.find("drift bound"), std::string::npos) << msg;
  const std::string declared = std::regex_replace(text, std::regex("\\nsigma_z = "), "\ndeclared_xi = 1e-6\nsigma_z = ");
  EXPECT_GT(parse_scenario(declared).epsilon, 0.0);
}

TEST(LoadScenario, RatioFormIsOnlyForRobustKinds) {
  const std::string text = with_line(bundled_text("vehicle_fixed.toml"), "kind", "kind = \"DW\"");
  EXPECT_EQ(code_of([&] { parse_scenario(text); }), ErrorCode::kValidationError);
  const Scenario s = parse_scenario(with_line(text, "form", "form = \"objective\""));
  EXPECT_EQ(s.detector.form, StatisticForm::kObjective);
}

TEST(LoadScenario, ParseErrorsCarryLocation) {
  std::string msg = error_message([] { parse_scenario("seed = 1\nn_steps = [1,\n", "broken.toml"); });
  EXPECT_NE(msg.find("ParseError"), std::string::npos);
  EXPECT_NE(msg.find("broken.toml:"), std::string::npos) << msg;

  const std::string typo = std::regex_replace(bundled_text("vehicle_fixed.toml"), std::regex("\\nstride = "), "\nstrid = ");
  msg = error_message([&] { parse_scenario(typo, "typo.toml"); });
  EXPECT_NE(msg.find("detector.strid"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unknown key"), std::string::npos) << msg;

  const std::string wrong_type = with_line(bundled_text("vehicle_fixed.toml"), "ell", "ell = \"long\"");
  msg = error_message([&] { parse_scenario(wrong_type, "t.toml"); });
  EXPECT_NE(msg.find("t.toml:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("detector.ell"), std::string::npos) << msg;

  const std::string ragged = with_line(bundled_text("vehicle_fixed.toml"), "sigma_e", "sigma_e = [[0.5, 0.0], [0.5]]");
  msg = error_message([&] { parse_scenario(ragged, "r.toml"); });
  EXPECT_NE(msg.find("model.sigma_e"), std::string::npos) << msg;
}

TEST(LoadScenario, MissingFileIsAnIoError) {
  EXPECT_EQ(code_of([] { load_scenario("/nonexistent/nowhere.toml"); }), ErrorCode::kIoError);
}

TEST(LoadScenario, LqrWeightsSynthesizeGains) {
  std::string text = bundled_text("vehicle_fixed.toml");
  // Drop the explicit K and L blocks and ask for synthesis instead.
  text = replace_block(text, "K", "");
  text = replace_block(text, "L", "");
  text = std::regex_replace(text, std::regex("\\n# Sensor replacement"),
                            "\n[model.lqr]\n"
                            "Q = [[1.0,0.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0,0.0],[0.0,0.0,1.0,0.0,0.0],"
                            "[0.0,0.0,0.0,1.0,0.0],[0.0,0.0,0.0,0.0,1.0]]\n"
                            "R = [[1.0,0.0],[0.0,1.0]]\n"
                            "Q_obs = [[1.0,0.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0,0.0],[0.0,0.0,1.0,0.0,0.0],"
                            "[0.0,0.0,0.0,1.0,0.0],[0.0,0.0,0.0,0.0,1.0]]\n"
                            "R_obs = [[1.0,0.0,0.0],[0.0,1.0,0.0],[0.0,0.0,1.0]]\n\n# Sensor replacement");
  const Scenario s = parse_scenario(text);
  EXPECT_LE((s.model.K() - vehicle::lqr_K()).norm(), 1e-12);
  EXPECT_LE((s.model.L() - vehicle::lqr_L()).norm(), 1e-12);
  ASSERT_TRUE(s.lqr.has_value());
  EXPECT_NE(dump_resolved(s).find("[derived.lqr]"), std::string::npos);
}

TEST(LoadScenario, ZeroLengthRunIsRejected) {
  const std::string text = with_line(bundled_text("vehicle_fixed.toml"), "n_steps", "n_steps = 0");
  EXPECT_EQ(code_of([&] { parse_scenario(text); }), ErrorCode::kValidationError);
  Scenario s = short_fixed();
  s.n_steps = 0;
  EXPECT_THROW(run_experiment(s), Error);
  s.n_steps = 100;
  EXPECT_EQ(code_of([&] { run_experiment(s); }), ErrorCode::kValidationError);
}

TEST(LoadScenario, MixtureWeightsAndSchedulesAreChecked) {
  std::string text = bundled_text("vehicle_fixed.toml");
  text = with_line(text, "sigma_z", "theta = [0.5, 0.5, 0.0]");
  EXPECT_EQ(code_of([&] { parse_scenario(text); }), ErrorCode::kValidationError);
  text = with_line(text, "theta", "theta = [0.25, 0.25, 0.25, 0.25]");
  const Scenario s = parse_scenario(text);
  EXPECT_LE((s.schedule.at(0) - s.polytope.sigma_z(Theta::barycenter(4))).norm(), 1e-20);
  // Both sigma_z and theta given.
  const std::string both = std::regex_replace(text, std::regex("\\ntheta = "), "\nsigma_z = [[1.0]]\ntheta = ");
  EXPECT_EQ(code_of([&] { parse_scenario(both); }), ErrorCode::kParseError);
}

TEST(ResolvedConfig, RoundTripsToIdenticalTraces) {
  const Scenario s = short_fixed();
  const std::string dump = dump_resolved(s);
  const Scenario back = parse_scenario(dump, "resolved.toml");
  EXPECT_EQ(dump_resolved(back), dump);
  EXPECT_EQ(back.model.K(), s.model.K());
  EXPECT_EQ(back.model.L(), s.model.L());
  const auto a = run_experiment(s), b = run_experiment(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].statistic, b[i].statistic);
    EXPECT_EQ(a[i].objective, b[i].objective);
    EXPECT_EQ(a[i].theta, b[i].theta);
    EXPECT_EQ(a[i].reject, b[i].reject);
  }
}

TEST(ResolvedConfig, VaryingScheduleRoundTrips) {
  const Scenario s = load_scenario(bundled_scenario_dir() / "vehicle_varying.toml");
  const Scenario back = parse_scenario(dump_resolved(s));
  EXPECT_EQ(back.epsilon, s.epsilon);
  EXPECT_EQ(back.xi, s.xi);
  for (long n : {0L, 125L, 249L, 333L, 700L, 1000L}) EXPECT_EQ(back.schedule.at(n), s.schedule.at(n));
}

TEST(WindowPlan, SlidingAndCumulative) {
  DetectorConfig d;
  d.ell = 10;
  d.stride = 3;
  auto plan = window_plan(d, 1, 30);
  // Starts 1, 4, ..., 19: last window ends at step 29.
  ASSERT_EQ(plan.size(), 7u);
  EXPECT_EQ(plan.front(), std::make_pair(1L, 10L));
  EXPECT_EQ(plan.back(), std::make_pair(19L, 10L));
  d.window = WindowMode::kCumulative;
  plan = window_plan(d, 1, 30);
  ASSERT_EQ(plan.size(), 7u);
  EXPECT_EQ(plan.front(), std::make_pair(1L, 10L));
  EXPECT_EQ(plan.back(), std::make_pair(1L, 28L));
}

TEST(RunExperiment, DeterministicAndThreadIndependent) {
  Scenario s = short_fixed();
  s.detector.threads = 1;
  const auto a = run_experiment(s);
  s.detector.threads = 3;
  const auto b = run_experiment(s);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].statistic, b[i].statistic);
    EXPECT_EQ(a[i].step, b[i].step);
  }
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_GT(a[i].step, a[i - 1].step);
}

TEST(RunExperiment, RatioIsObjectiveMinusUnconstrainedMinimum) {
  Scenario s = short_fixed();
  const auto records = simulate(s.model, s.attack, s.schedule, s.n_steps, s.seed);
  const auto rows = evaluate_trace(s, records, 0.0);
  for (const TraceRow& r : rows) {
    const WindowStat w = accumulate_window(records, r.window_start, r.ell);
    EXPECT_NEAR(r.statistic, r.objective - wishart_nll_min(w), 1e-9 * std::abs(r.objective));
    // Relaxed minimum never beats the unconstrained one.
    EXPECT_GE(r.statistic, -1e-8 * std::abs(r.objective));
  }
}

TEST(RunExperiment, DwTraceMatchesDirectStatistic) {
  Scenario s = short_fixed();
  s.detector.kind = StatisticKind::kDw;
  s.detector.form = StatisticForm::kObjective;
  resolve_scenario(s);
  const auto records = simulate(s.model, s.attack, s.schedule, s.n_steps, s.seed);
  const auto rows = evaluate_trace(s, records, 0.0);
  const Matrix sz = *s.detector.assumed_sigma_z;
  const Matrix sd = steady_state_sigma_delta(s.model, sz);
  for (const TraceRow& r : rows) {
    const double direct =
        dw_statistic(accumulate_window(records, r.window_start, r.ell), s.model.C(), sd, sz, s.model.sigma_e());
    EXPECT_EQ(r.statistic, direct);
    EXPECT_EQ(r.theta.size(), 0);
  }
}

TEST(Csv, SchemaAndFullPrecision) {
  const Scenario s = short_fixed();
  const auto rows = run_experiment(s);
  std::ostringstream os;
  write_trace_csv(os, s, rows);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header,
            "step,statistic,decision,threshold,window_start,ell,objective,status,theta_1,theta_2,theta_3,theta_4,"
            "solve_seconds");
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 13u) << line;
    EXPECT_EQ(std::stol(cells[0]), rows[count].step);
    EXPECT_EQ(std::strtod(cells[1].c_str(), nullptr), rows[count].statistic);
    EXPECT_EQ(cells[2], rows[count].reject ? "1" : "0");
    ++count;
  }
  EXPECT_EQ(count, rows.size());

  Scenario dw = s;
  dw.detector.kind = StatisticKind::kDw;
  dw.detector.form = StatisticForm::kObjective;
  resolve_scenario(dw);
  const auto cols = trace_columns(dw);
  EXPECT_EQ(cols, (std::vector<std::string>{"step", "statistic", "decision", "threshold", "window_start", "ell",
                                            "objective", "solve_seconds"}));
}

TEST(Csv, FormatDoubleRoundTrips) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-2.5), "-2.5");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  RngStream rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.standard_normal() * std::pow(10.0, 20.0 * (rng.uniform() - 0.5));
    EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  }
}

TEST(Csv, TrajectoryColumns) {
  const Scenario s = short_fixed(20);
  std::ostringstream os;
  write_trajectory_csv(os, simulate(s.model, s.attack, s.schedule, 20, 1));
  std::istringstream in(os.str());
  std::string header, first, third;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, third);
  std::getline(in, third);
  EXPECT_EQ(header, "step,y_1,y_2,y_3,residual_1,residual_2,residual_3,u_1,u_2,watermark_lagged_1,watermark_lagged_2");
  // No lagged watermark before step k'+1.
  EXPECT_EQ(first.substr(first.size() - 2), ",,");
  EXPECT_NE(third.substr(third.size() - 2), ",,");
}

TEST(Calibrate, QuantileAndDeterminism) {
  const Scenario s = short_fixed();
  const Theta ref = Theta::barycenter(4);
  const auto stats = null_statistics(s, ref, 60, 50, 100, 3);
  EXPECT_EQ(calibrate_threshold(s, ref, 60, 50, 0.5, 100, 3), empirical_quantile(stats, 0.5));
  EXPECT_EQ(calibrate_threshold(s, ref, 60, 50, 0.05, 100, 3), calibrate_threshold(s, ref, 60, 50, 0.05, 100, 3));
  EXPECT_THROW(calibrate_threshold(s, ref, 60, 49, 0.05), Error);
  EXPECT_THROW(calibrate_threshold(s, ref, 60, 50, 1.0), Error);
}

// A fresh unattacked run at the calibration point rejects at close to the
// nominal rate: equal-tailed exact binomial interval for 500 draws at 0.05.
TEST(Calibrate, FreshRunRejectsAtNominalRate) {
  const Scenario s = short_fixed();
  const Theta ref = Theta::barycenter(4);
  const double nu = calibrate_threshold(s, ref, 200, 500, 0.05, 100, 1);
  const auto fresh = null_statistics(s, ref, 200, 500, 100, 2);
  const long k = std::count_if(fresh.begin(), fresh.end(), [&](double x) { return x > nu; });
  EXPECT_GE(k, 16);
  EXPECT_LE(k, 35);
}

TEST(Figures, WritesFourPairs) {
  Scenario fixed = short_fixed(300);
  Scenario varying = load_scenario(bundled_scenario_dir() / "vehicle_varying.toml");
  varying.n_steps = 300;
  varying.detector.nu = 20.0;
  varying.detector.stride = 10;
  resolve_scenario(varying);
  const fs::path dir = scratch_dir("figures");
  const auto runs = reproduce_figures(fixed, varying, 7, dir);
  ASSERT_EQ(runs.size(), 4u);
  for (const FigureRun& r : runs) {
    ASSERT_TRUE(fs::exists(r.unattacked_csv)) << r.label;
    ASSERT_TRUE(fs::exists(r.attacked_csv)) << r.label;
    EXPECT_TRUE(fs::exists(dir / (r.label + ".resolved.toml")));
    const std::string u = read_file(r.unattacked_csv), a = read_file(r.attacked_csv);
    EXPECT_EQ(u.substr(0, u.find('\n')), a.substr(0, a.find('\n')));
    EXPECT_EQ(std::count(u.begin(), u.end(), '\n'), std::count(a.begin(), a.end(), '\n'));
    EXPECT_NE(u, a);
  }
  EXPECT_EQ(runs[0].label, "fixed_dw");
  EXPECT_EQ(runs[3].label, "varying_crdw_star");
}

TEST(Environment, OutputDirectoryFromEnvironment) {
  ::setenv("CRDW_OUTDIR", "/tmp/somewhere", 1);
  EXPECT_EQ(default_output_dir(), fs::path("/tmp/somewhere"));
  ::unsetenv("CRDW_OUTDIR");
  EXPECT_EQ(default_output_dir(), fs::current_path());
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CRDW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  const fs::path fixed = bundled_scenario_dir() / "vehicle_fixed.toml";
  std::ofstream(dir / "bad.toml") << "seed = 1\n[model]\nA = [[2.0]]\n";
  std::ofstream(dir / "broken.toml") << "seed = [\n";

  EXPECT_EQ(run_cli("validate " + fixed.string()), 0);
  EXPECT_EQ(run_cli("validate " + (dir / "bad.toml").string()), 1);
  EXPECT_EQ(run_cli("validate " + (dir / "broken.toml").string()), 1);
  EXPECT_EQ(run_cli("validate " + (dir / "missing.toml").string()), 2);
  EXPECT_EQ(run_cli("no-such-command"), 1);

  const fs::path trace = dir / "trace.csv";
  EXPECT_EQ(run_cli("detect --scenario " + fixed.string() + " --steps 200 --threshold 20 --out " + trace.string() +
                    " --resolved " + (dir / "resolved.toml").string()),
            0);
  ASSERT_TRUE(fs::exists(trace));
  EXPECT_EQ(read_file(trace).substr(0, 25), "step,statistic,decision,t");
  EXPECT_EQ(run_cli("validate " + (dir / "resolved.toml").string()), 0);

  const fs::path traj = dir / "traj.csv";
  EXPECT_EQ(run_cli("simulate " + fixed.string() + " --steps 50 --out " + traj.string()), 0);
  EXPECT_TRUE(fs::exists(traj));
  // Window longer than the run.
  EXPECT_EQ(run_cli("detect --scenario " + fixed.string() + " --steps 50 --threshold 1 --out " + trace.string()), 1);
}

}  // namespace
}  // namespace crdw

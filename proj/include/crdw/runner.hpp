#pragma once

// Scenario files, experiment orchestration, threshold calibration and CSV
// traces.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crdw/crdw_solver.hpp"
#include "crdw/detect.hpp"
#include "crdw/plant.hpp"
#include "crdw/schedule.hpp"
#include "crdw/uncertainty.hpp"

namespace crdw {

enum class StatisticKind { kDw, kCrdw, kCrdwStar };

/// kObjective reports the minimized likelihood itself. kRatio subtracts the
/// unconstrained minimum over V, which leaves a likelihood ratio whose null
/// distribution does not depend on the noise level.
enum class StatisticForm { kObjective, kRatio };

/// Sliding windows cover steps s+1 .. s+ℓ for s advancing by the stride.
/// Cumulative windows all start at the first ψ step and grow by the stride.
enum class WindowMode { kSliding, kCumulative };

std::string_view to_string(StatisticKind kind);
std::string_view to_string(StatisticForm form);
std::string_view to_string(WindowMode mode);
std::string_view to_string(EpsilonNorm norm);

struct CalibrationSpec {
  std::optional<Vector> theta_ref;  // barycenter when absent
  std::optional<long> ell;          // detector ℓ when absent
  long n_windows = 500;
  double a = 0.05;
  long burn_in = 100;
  std::uint64_t seed = 1;
};

struct DetectorConfig {
  StatisticKind kind = StatisticKind::kCrdw;
  StatisticForm form = StatisticForm::kRatio;
  WindowMode window = WindowMode::kSliding;
  long ell = 100;
  long stride = 1;
  /// Fixed threshold; when absent, ν comes from the calibration spec.
  std::optional<double> nu;
  std::optional<Matrix> assumed_sigma_z;  // DW only
  EpsilonNorm epsilon_norm = EpsilonNorm::kLyapunovWeighted;
  SolverOptions solver;
  /// Worker threads for per-window evaluation; 0 picks the hardware count.
  int threads = 0;
};

/// How the gains were specified, kept so the resolved dump can record it.
struct LqrWeights {
  Matrix Q, R, Q_obs, R_obs;
};

struct Scenario {
  std::string name;
  SystemModel model;
  std::optional<AttackSpec> attack;
  NoisePolytope polytope;
  CovarianceSchedule schedule;
  /// Set when the measurement covariance was given as a polytope mixture.
  std::optional<Vector> true_theta;
  DetectorConfig detector;
  CalibrationSpec calibration;
  std::uint64_t seed = 1;
  long n_steps = 1000;
  std::optional<LqrWeights> lqr;

  // Derived at load.
  int kprime = 1;
  double xi = 0.0;
  double epsilon = 0.0;
};

Scenario parse_scenario(std::string_view text, const std::string& source = "<string>");
Scenario load_scenario(const std::filesystem::path& path);

/// Resolved configuration in the input format: explicit gains, explicit
/// noise, explicit detector settings, and the derived quantities under
/// [derived] (ignored on load).
std::string dump_resolved(const Scenario& scenario);

/// Cross-field checks; throws ValidationError naming the violated invariant.
void validate_scenario(const Scenario& scenario);

/// Validates and recomputes the derived fields (k', ξ, ε). Call after
/// editing a loaded scenario.
void resolve_scenario(Scenario& scenario);

struct TraceRow {
  long step = 0;  // last step of the window
  double statistic = 0.0;
  bool reject = false;
  double threshold = 0.0;
  long window_start = 0;  // window covers window_start+1 .. step
  long ell = 0;
  /// Minimized likelihood before any ratio normalization.
  double objective = 0.0;
  /// Optimal mixture for CRDW kinds; empty for DW.
  Vector theta;
  SolverStatus status = SolverStatus::kOptimal;
  double solve_seconds = 0.0;
};

/// Statistic of one window under the scenario's detector settings.
struct WindowEvaluation {
  double statistic = 0.0;
  double objective = 0.0;
  Vector theta;
  SolverStatus status = SolverStatus::kOptimal;
};

/// Reusable evaluator; construction resolves the CRDW problem or the DW
/// nominal covariances once.
class StatisticEvaluator {
 public:
  explicit StatisticEvaluator(const Scenario& scenario);
  WindowEvaluation operator()(const WindowStat& window) const;

 private:
  StatisticKind kind_;
  StatisticForm form_;
  SolverOptions solver_;
  CrdwProblem problem_;
  Matrix C_, sigma_delta_, sigma_z_, sigma_e_;
};

/// (start, ℓ) of every window in a run of n_steps records with ψ from
/// step kprime+1 on.
std::vector<std::pair<long, long>> window_plan(const DetectorConfig& detector, int kprime,
                                               long n_steps);

/// Evaluates the statistic on every window of `records`.
std::vector<TraceRow> evaluate_trace(const Scenario& scenario,
                                     const std::vector<StepRecord>& records, double nu);

/// Threshold in effect: the configured ν, or the calibrated one.
double resolve_threshold(const Scenario& scenario);

/// Simulates (attacked iff the scenario carries an attack), evaluates every
/// window and, when `csv_path` is given, writes the trace.
std::vector<TraceRow> run_experiment(const Scenario& scenario,
                                     const std::optional<std::filesystem::path>& csv_path = std::nullopt);

/// Statistic values over n_windows disjoint windows of an unattacked run at
/// Σ_Z(θ), after a burn-in.
std::vector<double> null_statistics(const Scenario& scenario, const Theta& theta, long ell,
                                    long n_windows, long burn_in, std::uint64_t seed);

/// Empirical (1-a)-quantile of null_statistics at θ_ref.
double calibrate_threshold(const Scenario& scenario, const Theta& theta_ref, long ell,
                           long n_windows, double a, long burn_in = 100, std::uint64_t seed = 1);
double calibrate_threshold(const Scenario& scenario);

std::vector<std::string> trace_columns(const Scenario& scenario);
void write_trace_csv(std::ostream& out, const Scenario& scenario, const std::vector<TraceRow>& rows);
void write_trace_csv(const std::filesystem::path& path, const Scenario& scenario,
                     const std::vector<TraceRow>& rows);

/// Trajectory CSV: step, y, residual, u, lagged watermark.
void write_trajectory_csv(std::ostream& out, const std::vector<StepRecord>& records);

/// Full-precision, locale-independent rendering.
std::string format_double(double v);

struct FigureRun {
  std::string label;
  std::filesystem::path unattacked_csv;
  std::filesystem::path attacked_csv;
};

/// Runs both statistic kinds on both scenarios, each unattacked and
/// attacked with the given seed, and writes one CSV pair per combination.
std::vector<FigureRun> reproduce_figures(const Scenario& fixed, const Scenario& varying,
                                         std::uint64_t seed, const std::filesystem::path& outdir);

/// Directory of the bundled scenario files.
std::filesystem::path bundled_scenario_dir();
/// Output directory default: $CRDW_OUTDIR or the working directory.
std::filesystem::path default_output_dir();

}  // namespace crdw

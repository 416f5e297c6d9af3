#include "crdw/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#ifndef CRDW_SCENARIO_DIR
#define CRDW_SCENARIO_DIR "scenarios"
#endif

namespace crdw {

std::string_view to_string(StatisticKind kind) {
  switch (kind) {
    case StatisticKind::kDw: return "DW";
    case StatisticKind::kCrdw: return "CRDW";
    case StatisticKind::kCrdwStar: return "CRDW*";
  }
  return "?";
}

std::string_view to_string(StatisticForm form) {
  return form == StatisticForm::kRatio ? "ratio" : "objective";
}

std::string_view to_string(WindowMode mode) {
  return mode == WindowMode::kCumulative ? "cumulative" : "sliding";
}

std::string_view to_string(EpsilonNorm norm) {
  return norm == EpsilonNorm::kTwoNorm ? "two" : "lyapunov-weighted";
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

// ---------------------------------------------------------------------------
// Reading

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const toml::node* node, const std::string& field, const std::string& msg) const {
    std::ostringstream os;
    os << source_;
    if (node != nullptr && node->source().begin) {
      os << ':' << node->source().begin.line << ':' << node->source().begin.column;
    }
    os << ": " << field << ": " << msg;
    throw Error(ErrorCode::kParseError, os.str());
  }

  void check_keys(const toml::table& t, const std::string& path,
                  std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, node] : t) {
      if (std::find(allowed.begin(), allowed.end(), key.str()) == allowed.end()) {
        fail(&node, join(path, key.str()), "unknown key");
      }
    }
  }

  const toml::table* table(const toml::table& t, std::string_view key, const std::string& path,
                           bool required) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) {
      if (required) fail(&t, join(path, key), "missing table");
      return nullptr;
    }
    if (!n->is_table()) fail(n, join(path, key), "expected a table");
    return n->as_table();
  }

  std::optional<double> number(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    return as_number(*n, join(path, key));
  }

  double number_or(const toml::table& t, std::string_view key, const std::string& path, double dflt) const {
    return number(t, key, path).value_or(dflt);
  }

  std::optional<long> integer(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_integer()) fail(n, join(path, key), "expected an integer");
    return static_cast<long>(n->as_integer()->get());
  }

  std::optional<std::string> string(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_string()) fail(n, join(path, key), "expected a string");
    return n->as_string()->get();
  }

  std::optional<bool> boolean(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_boolean()) fail(n, join(path, key), "expected true or false");
    return n->as_boolean()->get();
  }

  Matrix matrix(const toml::node& n, const std::string& field) const {
    const toml::array* rows = n.as_array();
    if (rows == nullptr || rows->empty()) fail(&n, field, "expected a nonempty array of rows");
    Eigen::Index cols = -1;
    Matrix M;
    for (std::size_t i = 0; i < rows->size(); ++i) {
      const toml::array* row = (*rows)[i].as_array();
      if (row == nullptr || row->empty()) fail(&(*rows)[i], field, "each row must be a nonempty array");
      if (cols < 0) {
        cols = static_cast<Eigen::Index>(row->size());
        M.resize(static_cast<Eigen::Index>(rows->size()), cols);
      } else if (static_cast<Eigen::Index>(row->size()) != cols) {
        fail(&(*rows)[i], field, "rows have different lengths");
      }
      for (std::size_t j = 0; j < row->size(); ++j) {
        M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = as_number((*row)[j], field);
      }
    }
    return M;
  }

  std::optional<Matrix> matrix(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    return matrix(*n, join(path, key));
  }

  Matrix required_matrix(const toml::table& t, std::string_view key, const std::string& path) const {
    auto M = matrix(t, key, path);
    if (!M) fail(&t, join(path, key), "missing");
    return *M;
  }

  std::optional<Vector> vector(const toml::table& t, std::string_view key, const std::string& path) const {
    const toml::node* n = t.get(key);
    if (n == nullptr) return std::nullopt;
    const toml::array* a = n->as_array();
    if (a == nullptr || a->empty()) fail(n, join(path, key), "expected a nonempty array of numbers");
    Vector v(static_cast<Eigen::Index>(a->size()));
    for (std::size_t i = 0; i < a->size(); ++i) {
      v(static_cast<Eigen::Index>(i)) = as_number((*a)[i], join(path, key));
    }
    return v;
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

 private:
  double as_number(const toml::node& n, const std::string& field) const {
    if (n.is_floating_point()) return n.as_floating_point()->get();
    if (n.is_integer()) return static_cast<double>(n.as_integer()->get());
    fail(&n, field, "expected a number");
  }

  std::string source_;
};

[[noreturn]] void invalid(const std::string& msg) { throw Error(ErrorCode::kValidationError, msg); }

// Library errors raised while assembling a scenario become validation
// errors that keep the original code name in the message.
template <typename F>
auto validating(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParseError || e.code() == ErrorCode::kValidationError) throw;
    invalid(what + ": " + e.what());
  }
}

StatisticKind parse_kind(const Reader& r, const toml::table& t, const std::string& v) {
  if (v == "DW") return StatisticKind::kDw;
  if (v == "CRDW") return StatisticKind::kCrdw;
  if (v == "CRDW*") return StatisticKind::kCrdwStar;
  r.fail(t.get("kind"), "detector.kind", "expected \"DW\", \"CRDW\" or \"CRDW*\"");
}

}  // namespace

// ---------------------------------------------------------------------------
// Scenario

void validate_scenario(const Scenario& s) {
  const DetectorConfig& d = s.detector;
  const Eigen::Index m = s.model.output_dim();
  const Eigen::Index n = s.polytope.psi_dim();
  if (s.n_steps < 1) invalid("n_steps must be at least 1");
  if (s.polytope.output_dim() != m) invalid("noise.vertices must be m×m with m the output dimension");
  if (s.schedule.dim() != m) invalid("measurement covariance must be m×m with m the output dimension");
  if (s.true_theta && s.true_theta->size() != s.polytope.num_vertices()) {
    invalid("noise.theta must have one weight per vertex");
  }
  if (d.ell <= n) invalid("detector.ell must exceed the ψ dimension so the scatter matrix is invertible");
  if (d.stride < 1) invalid("detector.stride must be at least 1");
  if (d.threads < 0) invalid("detector.threads must be nonnegative");
  if (d.kind == StatisticKind::kDw) {
    if (!d.assumed_sigma_z) invalid("DW statistic requires detector.assumed_sigma_z");
    if (d.form == StatisticForm::kRatio) invalid("the ratio form is defined only for CRDW kinds");
  }
  if (d.assumed_sigma_z) {
    if (d.assumed_sigma_z->rows() != m || d.assumed_sigma_z->cols() != m) {
      invalid("detector.assumed_sigma_z must be m×m");
    }
    if (!is_positive_definite(*d.assumed_sigma_z)) invalid("detector.assumed_sigma_z must be positive definite");
  }
  if (d.kind == StatisticKind::kCrdwStar && !(s.schedule.xi() > 0.0)) {
    invalid("CRDW* requires a positive drift bound: declare noise.declared_xi or give a drifting schedule");
  }
  if (d.nu && std::isnan(*d.nu)) invalid("detector.threshold is NaN");
  if (!(d.solver.gap_tol > 0.0) || !(d.solver.barrier_growth > 1.0) || d.solver.max_newton_iterations < 1) {
    invalid("detector.solver needs gap_tol > 0, barrier_growth > 1, max_newton_iterations ≥ 1");
  }
  const CalibrationSpec& c = s.calibration;
  if (!(c.a > 0.0 && c.a < 1.0)) invalid("calibration.a must lie in (0, 1)");
  if (c.n_windows < 50) invalid("calibration.n_windows must be at least 50");
  if (c.ell && *c.ell <= n) invalid("calibration.ell must exceed the ψ dimension");
  if (c.burn_in < s.kprime) invalid("calibration.burn_in must be at least k'");
  if (c.theta_ref && c.theta_ref->size() != s.polytope.num_vertices()) {
    invalid("calibration.theta_ref must have one weight per vertex");
  }
  if (c.theta_ref) validating("calibration.theta_ref", [&] { return Theta(*c.theta_ref); });
  if (s.true_theta) validating("noise.theta", [&] { return Theta(*s.true_theta); });
  if (s.attack) validating("attack", [&] { s.attack->validate(s.model); return 0; });
}

void resolve_scenario(Scenario& s) {
  s.kprime = validating("model", [&] { return compute_kprime(s.model); });
  validate_scenario(s);
  s.xi = s.schedule.xi();
  s.epsilon = 0.0;
  if (s.detector.kind == StatisticKind::kCrdwStar) {
    s.epsilon = validating("epsilon", [&] { return epsilon_bound(s.xi, s.model, s.detector.epsilon_norm); });
  }
}

Scenario parse_scenario(std::string_view text, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ':' << e.source().begin.line << ':' << e.source().begin.column << ": "
       << e.description();
    throw Error(ErrorCode::kParseError, os.str());
  }
  const Reader r(source);
  r.check_keys(root, "", {"name", "seed", "n_steps", "model", "attack", "noise", "detector", "calibration", "derived"});

  const std::string name = r.string(root, "name", "").value_or("scenario");
  const long seed = r.integer(root, "seed", "").value_or(1);
  if (seed < 0) r.fail(root.get("seed"), "seed", "must be nonnegative");
  const long n_steps = r.integer(root, "n_steps", "").value_or(1000);

  // Model.
  const toml::table& mt = *r.table(root, "model", "", true);
  r.check_keys(mt, "model", {"A", "B", "C", "K", "L", "sigma_w", "sigma_e", "lqr"});
  const Matrix A = r.required_matrix(mt, "A", "model");
  const Matrix B = r.required_matrix(mt, "B", "model");
  const Matrix C = r.required_matrix(mt, "C", "model");
  const Matrix sigma_w = r.required_matrix(mt, "sigma_w", "model");
  const Matrix sigma_e = r.required_matrix(mt, "sigma_e", "model");
  auto K = r.matrix(mt, "K", "model");
  auto L = r.matrix(mt, "L", "model");
  std::optional<LqrWeights> lqr;
  if (const toml::table* lt = r.table(mt, "lqr", "model", false)) {
    if (K || L) r.fail(lt, "model.lqr", "give either explicit K and L or LQR weights, not both");
    r.check_keys(*lt, "model.lqr", {"Q", "R", "Q_obs", "R_obs"});
    lqr = LqrWeights{r.required_matrix(*lt, "Q", "model.lqr"), r.required_matrix(*lt, "R", "model.lqr"),
                     r.required_matrix(*lt, "Q_obs", "model.lqr"), r.required_matrix(*lt, "R_obs", "model.lqr")};
    validating("model.lqr", [&] {
      K = dlqr_gain(A, B, lqr->Q, lqr->R);
      L = dlqe_gain(A, C, lqr->Q_obs, lqr->R_obs);
      return 0;
    });
  }
  if (!K || !L) r.fail(&mt, "model", "needs K and L, or a [model.lqr] table");
  SystemModel model = validating("model", [&] { return SystemModel(A, B, C, *K, *L, sigma_w, sigma_e); });

  // Attack.
  std::optional<AttackSpec> attack;
  if (const toml::table* at = r.table(root, "attack", "", false)) {
    r.check_keys(*at, "attack", {"enabled", "alpha", "sigma_o", "sigma_s", "eta0"});
    if (r.boolean(*at, "enabled", "attack").value_or(true)) {
      const Eigen::Index p = model.state_dim();
      AttackSpec spec;
      spec.alpha = r.number_or(*at, "alpha", "attack", -1.0);
      spec.sigma_o = r.matrix(*at, "sigma_o", "attack").value_or(Matrix::Zero(p, p));
      spec.sigma_s = r.matrix(*at, "sigma_s", "attack").value_or(Matrix::Zero(model.output_dim(), model.output_dim()));
      spec.eta0 = r.vector(*at, "eta0", "attack").value_or(Vector::Zero(p));
      attack = spec;
    }
  }

  // Noise.
  const toml::table& nt = *r.table(root, "noise", "", true);
  r.check_keys(nt, "noise", {"vertices", "sigma_z", "theta", "keyframes", "declared_xi"});
  const toml::node* vn = nt.get("vertices");
  if (vn == nullptr || !vn->is_array() || vn->as_array()->empty()) {
    r.fail(vn != nullptr ? vn : &nt, "noise.vertices", "expected a nonempty array of matrices");
  }
  std::vector<Matrix> vertices;
  for (const toml::node& v : *vn->as_array()) vertices.push_back(r.matrix(v, "noise.vertices"));
  NoisePolytope polytope = validating("noise.vertices", [&] { return build_polytope(vertices, model); });

  const double declared_xi = r.number_or(nt, "declared_xi", "noise", 0.0);
  const int given = (nt.contains("sigma_z") ? 1 : 0) + (nt.contains("theta") ? 1 : 0) +
                    (nt.contains("keyframes") ? 1 : 0);
  if (given != 1) r.fail(&nt, "noise", "give exactly one of sigma_z, theta or keyframes");
  std::optional<Vector> true_theta = r.vector(nt, "theta", "noise");
  CovarianceSchedule schedule;
  if (auto sz = r.matrix(nt, "sigma_z", "noise")) {
    schedule = validating("noise.sigma_z", [&] { return CovarianceSchedule({Keyframe{0, *sz}}, declared_xi); });
  } else if (true_theta) {
    schedule = validating("noise.theta", [&] {
      if (true_theta->size() != polytope.num_vertices()) {
        throw Error(ErrorCode::kInvalidArgument, "one weight per vertex required");
      }
      return CovarianceSchedule({Keyframe{0, polytope.sigma_z(Theta(*true_theta))}}, declared_xi);
    });
  } else {
    const toml::node* kn = nt.get("keyframes");
    const toml::array* ka = kn->as_array();
    if (ka == nullptr || ka->empty()) r.fail(kn, "noise.keyframes", "expected an array of {step, cov} tables");
    std::vector<Keyframe> frames;
    for (const toml::node& f : *ka) {
      const toml::table* ft = f.as_table();
      if (ft == nullptr) r.fail(&f, "noise.keyframes", "each keyframe must be a table");
      r.check_keys(*ft, "noise.keyframes", {"step", "cov"});
      const auto st = r.integer(*ft, "step", "noise.keyframes");
      if (!st) r.fail(ft, "noise.keyframes.step", "missing");
      frames.push_back(Keyframe{*st, r.required_matrix(*ft, "cov", "noise.keyframes")});
    }
    schedule = validating("noise.keyframes", [&] { return schedule_from_keyframes(frames, declared_xi); });
  }

  // Detector.
  DetectorConfig det;
  if (const toml::table* dt = r.table(root, "detector", "", false)) {
    r.check_keys(*dt, "detector", {"kind", "form", "window", "ell", "stride", "threshold", "assumed_sigma_z",
                                   "epsilon_norm", "threads", "solver"});
    if (auto k = r.string(*dt, "kind", "detector")) det.kind = parse_kind(r, *dt, *k);
    det.form = det.kind == StatisticKind::kDw ? StatisticForm::kObjective : StatisticForm::kRatio;
    if (auto f = r.string(*dt, "form", "detector")) {
      if (*f == "ratio") det.form = StatisticForm::kRatio;
      else if (*f == "objective") det.form = StatisticForm::kObjective;
      else r.fail(dt->get("form"), "detector.form", "expected \"ratio\" or \"objective\"");
    }
    if (auto w = r.string(*dt, "window", "detector")) {
      if (*w == "sliding") det.window = WindowMode::kSliding;
      else if (*w == "cumulative") det.window = WindowMode::kCumulative;
      else r.fail(dt->get("window"), "detector.window", "expected \"sliding\" or \"cumulative\"");
    }
    det.ell = r.integer(*dt, "ell", "detector").value_or(det.ell);
    det.stride = r.integer(*dt, "stride", "detector").value_or(det.stride);
    if (const toml::node* tn = dt->get("threshold")) {
      if (tn->is_string()) {
        if (tn->as_string()->get() != "calibrate") r.fail(tn, "detector.threshold", "expected a number or \"calibrate\"");
      } else {
        det.nu = r.number(*dt, "threshold", "detector");
      }
    }
    det.assumed_sigma_z = r.matrix(*dt, "assumed_sigma_z", "detector");
    if (auto e = r.string(*dt, "epsilon_norm", "detector")) {
      if (*e == "two") det.epsilon_norm = EpsilonNorm::kTwoNorm;
      else if (*e == "lyapunov-weighted") det.epsilon_norm = EpsilonNorm::kLyapunovWeighted;
      else r.fail(dt->get("epsilon_norm"), "detector.epsilon_norm", "expected \"two\" or \"lyapunov-weighted\"");
    }
    det.threads = static_cast<int>(r.integer(*dt, "threads", "detector").value_or(0));
    if (const toml::table* st = r.table(*dt, "solver", "detector", false)) {
      r.check_keys(*st, "detector.solver", {"gap_tol", "barrier_growth", "max_newton_iterations"});
      det.solver.gap_tol = r.number_or(*st, "gap_tol", "detector.solver", det.solver.gap_tol);
      det.solver.barrier_growth = r.number_or(*st, "barrier_growth", "detector.solver", det.solver.barrier_growth);
      det.solver.max_newton_iterations = static_cast<int>(
          r.integer(*st, "max_newton_iterations", "detector.solver").value_or(det.solver.max_newton_iterations));
    }
  }

  CalibrationSpec cal;
  if (const toml::table* ct = r.table(root, "calibration", "", false)) {
    r.check_keys(*ct, "calibration", {"theta_ref", "ell", "n_windows", "a", "burn_in", "seed"});
    cal.theta_ref = r.vector(*ct, "theta_ref", "calibration");
    cal.ell = r.integer(*ct, "ell", "calibration");
    cal.n_windows = r.integer(*ct, "n_windows", "calibration").value_or(cal.n_windows);
    cal.a = r.number_or(*ct, "a", "calibration", cal.a);
    cal.burn_in = r.integer(*ct, "burn_in", "calibration").value_or(cal.burn_in);
    const long cs = r.integer(*ct, "seed", "calibration").value_or(1);
    if (cs < 0) r.fail(ct->get("seed"), "calibration.seed", "must be nonnegative");
    cal.seed = static_cast<std::uint64_t>(cs);
  }

  Scenario s{
      .name = name,
      .model = std::move(model),
      .attack = std::move(attack),
      .polytope = std::move(polytope),
      .schedule = std::move(schedule),
      .true_theta = std::move(true_theta),
      .detector = std::move(det),
      .calibration = std::move(cal),
      .seed = static_cast<std::uint64_t>(seed),
      .n_steps = n_steps,
      .lqr = std::move(lqr),
  };
  resolve_scenario(s);
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str(), path.string());
}

namespace {

toml::array to_toml(const Matrix& M) {
  toml::array rows;
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    toml::array row;
    for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

toml::array to_toml(const Vector& v) {
  toml::array a;
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

}  // namespace

std::string dump_resolved(const Scenario& s) {
  toml::table root;
  root.insert("name", s.name);
  root.insert("seed", static_cast<std::int64_t>(s.seed));
  root.insert("n_steps", static_cast<std::int64_t>(s.n_steps));

  const SystemModel& m = s.model;
  root.insert("model", toml::table{{"A", to_toml(m.A())},
                                   {"B", to_toml(m.B())},
                                   {"C", to_toml(m.C())},
                                   {"K", to_toml(m.K())},
                                   {"L", to_toml(m.L())},
                                   {"sigma_w", to_toml(m.sigma_w())},
                                   {"sigma_e", to_toml(m.sigma_e())}});
  if (s.attack) {
    root.insert("attack", toml::table{{"enabled", true},
                                      {"alpha", s.attack->alpha},
                                      {"sigma_o", to_toml(s.attack->sigma_o)},
                                      {"sigma_s", to_toml(s.attack->sigma_s)},
                                      {"eta0", to_toml(s.attack->eta0)}});
  }

  toml::table noise;
  toml::array vertices;
  for (const Matrix& v : s.polytope.vertices()) vertices.push_back(to_toml(v));
  noise.insert("vertices", std::move(vertices));
  noise.insert("declared_xi", s.schedule.declared_xi());
  if (s.true_theta) {
    noise.insert("theta", to_toml(*s.true_theta));
  } else if (s.schedule.keyframes().size() == 1) {
    noise.insert("sigma_z", to_toml(s.schedule.keyframes().front().cov));
  } else {
    toml::array frames;
    for (const Keyframe& k : s.schedule.keyframes()) {
      frames.push_back(toml::table{{"step", static_cast<std::int64_t>(k.step)}, {"cov", to_toml(k.cov)}});
    }
    noise.insert("keyframes", std::move(frames));
  }
  root.insert("noise", std::move(noise));

  const DetectorConfig& d = s.detector;
  toml::table det{{"kind", std::string(to_string(d.kind))},
                  {"form", std::string(to_string(d.form))},
                  {"window", std::string(to_string(d.window))},
                  {"ell", static_cast<std::int64_t>(d.ell)},
                  {"stride", static_cast<std::int64_t>(d.stride)},
                  {"epsilon_norm", std::string(to_string(d.epsilon_norm))},
                  {"threads", static_cast<std::int64_t>(d.threads)},
                  {"solver", toml::table{{"gap_tol", d.solver.gap_tol},
                                         {"barrier_growth", d.solver.barrier_growth},
                                         {"max_newton_iterations",
                                          static_cast<std::int64_t>(d.solver.max_newton_iterations)}}}};
  if (d.nu) {
    det.insert("threshold", *d.nu);
  } else {
    det.insert("threshold", "calibrate");
  }
  if (d.assumed_sigma_z) det.insert("assumed_sigma_z", to_toml(*d.assumed_sigma_z));
  root.insert("detector", std::move(det));

  const CalibrationSpec& c = s.calibration;
  toml::table cal{{"n_windows", static_cast<std::int64_t>(c.n_windows)},
                  {"a", c.a},
                  {"burn_in", static_cast<std::int64_t>(c.burn_in)},
                  {"seed", static_cast<std::int64_t>(c.seed)},
                  {"ell", static_cast<std::int64_t>(c.ell.value_or(d.ell))},
                  {"theta_ref", to_toml(c.theta_ref.value_or(
                                    Theta::barycenter(s.polytope.num_vertices()).weights()))}};
  root.insert("calibration", std::move(cal));

  toml::table derived{{"kprime", static_cast<std::int64_t>(s.kprime)},
                      {"xi", s.xi},
                      {"realized_xi", s.schedule.realized_xi()},
                      {"epsilon", s.epsilon},
                      {"closed_loop_spectral_radius", spectral_radius(m.closed_loop())},
                      {"observer_spectral_radius", spectral_radius(m.observer_dynamics())}};
  toml::array sigma_bar;
  for (const Matrix& v : s.polytope.sigma_bar()) sigma_bar.push_back(to_toml(v));
  derived.insert("sigma_bar", std::move(sigma_bar));
  if (s.lqr) {
    derived.insert("lqr", toml::table{{"Q", to_toml(s.lqr->Q)},
                                      {"R", to_toml(s.lqr->R)},
                                      {"Q_obs", to_toml(s.lqr->Q_obs)},
                                      {"R_obs", to_toml(s.lqr->R_obs)}});
  }
  root.insert("derived", std::move(derived));

  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << root << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation

StatisticEvaluator::StatisticEvaluator(const Scenario& s)
    : kind_(s.detector.kind), form_(s.detector.form), solver_(s.detector.solver) {
  if (kind_ == StatisticKind::kDw) {
    C_ = s.model.C();
    sigma_z_ = *s.detector.assumed_sigma_z;
    sigma_delta_ = steady_state_sigma_delta(s.model, sigma_z_);
    sigma_e_ = s.model.sigma_e();
  } else {
    problem_ = make_crdw_problem(s.polytope, kind_ == StatisticKind::kCrdwStar ? s.epsilon : 0.0);
  }
}

WindowEvaluation StatisticEvaluator::operator()(const WindowStat& window) const {
  WindowEvaluation out;
  if (kind_ == StatisticKind::kDw) {
    out.objective = dw_statistic(window, C_, sigma_delta_, sigma_z_, sigma_e_);
  } else {
    const SolverResult r = solve_crdw(window, problem_, solver_);
    out.objective = r.objective;
    out.theta = r.theta_opt.weights();
    out.status = r.status;
  }
  out.statistic = form_ == StatisticForm::kRatio ? out.objective - wishart_nll_min(window) : out.objective;
  return out;
}

namespace {

// Runs f(i) for i in [0, n) on a small pool; results land by index, so the
// output does not depend on the thread count.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& f) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          f(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<std::pair<long, long>> window_plan(const DetectorConfig& d, int kprime, long n_steps) {
  std::vector<std::pair<long, long>> plan;
  const long last = n_steps - 1;
  if (d.window == WindowMode::kSliding) {
    for (long s = kprime; s + d.ell <= last; s += d.stride) plan.emplace_back(s, d.ell);
  } else {
    for (long e = kprime + d.ell; e <= last; e += d.stride) plan.emplace_back(kprime, e - kprime);
  }
  return plan;
}

std::vector<TraceRow> evaluate_trace(const Scenario& s, const std::vector<StepRecord>& records, double nu) {
  const auto plan = window_plan(s.detector, s.kprime, static_cast<long>(records.size()));
  if (plan.empty()) throw Error(ErrorCode::kInsufficientData, "no complete window in the run");
  const StatisticEvaluator eval(s);
  std::vector<TraceRow> rows(plan.size());
  parallel_for(plan.size(), s.detector.threads, [&](std::size_t i) {
    const auto [start, ell] = plan[i];
    const auto t0 = std::chrono::steady_clock::now();
    const WindowEvaluation e = eval(accumulate_window(records, start, ell));
    const auto t1 = std::chrono::steady_clock::now();
    const DetectionResult dec = decide(e.statistic, nu);
    rows[i] = TraceRow{start + ell, e.statistic, dec.reject, nu, start, ell, e.objective, e.theta, e.status,
                       std::chrono::duration<double>(t1 - t0).count()};
  });
  return rows;
}

std::vector<double> null_statistics(const Scenario& s, const Theta& theta, long ell, long n_windows,
                                    long burn_in, std::uint64_t seed) {
  if (n_windows < 1) throw Error(ErrorCode::kInvalidArgument, "n_windows must be positive");
  if (burn_in < s.kprime) throw Error(ErrorCode::kInvalidArgument, "burn_in must be at least k'");
  const auto sched = CovarianceSchedule::constant(s.polytope.sigma_z(theta));
  const auto records = simulate(s.model, std::nullopt, sched, burn_in + ell * n_windows + 1, seed);
  const StatisticEvaluator eval(s);
  std::vector<double> out(static_cast<std::size_t>(n_windows));
  parallel_for(out.size(), s.detector.threads, [&](std::size_t i) {
    out[i] = eval(accumulate_window(records, burn_in + static_cast<long>(i) * ell, ell)).statistic;
  });
  return out;
}

double calibrate_threshold(const Scenario& s, const Theta& theta_ref, long ell, long n_windows, double a,
                           long burn_in, std::uint64_t seed) {
  if (!(a > 0.0 && a < 1.0)) throw Error(ErrorCode::kInvalidArgument, "a must lie in (0, 1)");
  if (n_windows < 50) throw Error(ErrorCode::kInvalidArgument, "n_windows must be at least 50");
  return empirical_quantile(null_statistics(s, theta_ref, ell, n_windows, burn_in, seed), 1.0 - a);
}

double calibrate_threshold(const Scenario& s) {
  const CalibrationSpec& c = s.calibration;
  const Theta ref = c.theta_ref ? Theta(*c.theta_ref) : Theta::barycenter(s.polytope.num_vertices());
  return calibrate_threshold(s, ref, c.ell.value_or(s.detector.ell), c.n_windows, c.a, c.burn_in, c.seed);
}

double resolve_threshold(const Scenario& s) {
  return s.detector.nu ? *s.detector.nu : calibrate_threshold(s);
}

std::vector<TraceRow> run_experiment(const Scenario& s, const std::optional<std::filesystem::path>& csv_path) {
  if (window_plan(s.detector, s.kprime, s.n_steps).empty()) {
    invalid("n_steps too short for a single window of length detector.ell");
  }
  const auto records = simulate(s.model, s.attack, s.schedule, s.n_steps, s.seed);
  auto rows = evaluate_trace(s, records, resolve_threshold(s));
  if (csv_path) write_trace_csv(*csv_path, s, rows);
  return rows;
}

// ---------------------------------------------------------------------------
// CSV

std::vector<std::string> trace_columns(const Scenario& s) {
  std::vector<std::string> cols = {"step", "statistic", "decision", "threshold", "window_start", "ell", "objective"};
  if (s.detector.kind != StatisticKind::kDw) {
    cols.emplace_back("status");
    for (Eigen::Index k = 0; k < s.polytope.num_vertices(); ++k) cols.push_back("theta_" + std::to_string(k + 1));
  }
  cols.emplace_back("solve_seconds");
  return cols;
}

void write_trace_csv(std::ostream& out, const Scenario& s, const std::vector<TraceRow>& rows) {
  const auto cols = trace_columns(s);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  const bool crdw = s.detector.kind != StatisticKind::kDw;
  for (const TraceRow& r : rows) {
    out << r.step << ',' << format_double(r.statistic) << ',' << (r.reject ? 1 : 0) << ','
        << format_double(r.threshold) << ',' << r.window_start << ',' << r.ell << ',' << format_double(r.objective);
    if (crdw) {
      out << ',' << to_string(r.status);
      for (Eigen::Index k = 0; k < s.polytope.num_vertices(); ++k) {
        out << ',' << (k < r.theta.size() ? format_double(r.theta(k)) : std::string());
      }
    }
    out << ',' << format_double(r.solve_seconds) << '\n';
  }
}

void write_trace_csv(const std::filesystem::path& path, const Scenario& s, const std::vector<TraceRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  write_trace_csv(out, s, rows);
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

void write_trajectory_csv(std::ostream& out, const std::vector<StepRecord>& records) {
  if (records.empty()) return;
  const Eigen::Index m = records.front().y.size();
  const Eigen::Index q = records.front().u.size();
  out << "step";
  for (Eigen::Index i = 0; i < m; ++i) out << ",y_" << i + 1;
  for (Eigen::Index i = 0; i < m; ++i) out << ",residual_" << i + 1;
  for (Eigen::Index i = 0; i < q; ++i) out << ",u_" << i + 1;
  for (Eigen::Index i = 0; i < q; ++i) out << ",watermark_lagged_" << i + 1;
  out << '\n';
  for (const StepRecord& r : records) {
    out << r.step;
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << format_double(r.y(i));
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << format_double(r.residual(i));
    for (Eigen::Index i = 0; i < q; ++i) out << ',' << format_double(r.u(i));
    for (Eigen::Index i = 0; i < q; ++i) {
      out << ',' << (r.watermark_lagged ? format_double((*r.watermark_lagged)(i)) : std::string());
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Figures

std::vector<FigureRun> reproduce_figures(const Scenario& fixed, const Scenario& varying, std::uint64_t seed,
                                         const std::filesystem::path& outdir) {
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + outdir.string() + ": " + ec.message());

  struct Job {
    const Scenario* base;
    StatisticKind kind;
    std::string label;
  };
  const std::vector<Job> jobs = {{&fixed, StatisticKind::kDw, "fixed_dw"},
                                 {&fixed, StatisticKind::kCrdw, "fixed_crdw"},
                                 {&varying, StatisticKind::kDw, "varying_dw"},
                                 {&varying, StatisticKind::kCrdwStar, "varying_crdw_star"}};
  std::vector<FigureRun> out;
  for (const Job& job : jobs) {
    if (!job.base->attack) invalid(job.base->name + ": reproduction needs an [attack] table");
    Scenario s = *job.base;
    s.seed = seed;
    s.detector.kind = job.kind;
    if (job.kind == StatisticKind::kDw) s.detector.form = StatisticForm::kObjective;
    resolve_scenario(s);
    const double nu = resolve_threshold(s);
    s.detector.nu = nu;

    FigureRun run{job.label, outdir / (job.label + "_unattacked.csv"), outdir / (job.label + "_attacked.csv")};
    Scenario un = s;
    un.attack.reset();
    write_trace_csv(run.unattacked_csv, un, run_experiment(un));
    write_trace_csv(run.attacked_csv, s, run_experiment(s));
    std::ofstream cfg(outdir / (job.label + ".resolved.toml"), std::ios::binary);
    cfg << dump_resolved(s);
    out.push_back(std::move(run));
  }
  return out;
}

std::filesystem::path bundled_scenario_dir() {
  if (const char* env = std::getenv("CRDW_SCENARIO_DIR"); env != nullptr && *env != '\0') return env;
  return CRDW_SCENARIO_DIR;
}

std::filesystem::path default_output_dir() {
  if (const char* env = std::getenv("CRDW_OUTDIR"); env != nullptr && *env != '\0') return env;
  return std::filesystem::current_path();
}

}  // namespace crdw

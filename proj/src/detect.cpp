#include "crdw/detect.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace crdw {

WindowStat accumulate_window(std::span<const StepRecord> records, long start, long ell) {
  if (ell < 1) throw Error(ErrorCode::kInvalidArgument, "window length must be positive");
  if (records.empty()) throw Error(ErrorCode::kInsufficientData, "no records");
  const long first_step = records.front().step;
  const long lo = start + 1 - first_step;
  const long hi = start + ell - first_step;
  if (lo < 0 || hi >= static_cast<long>(records.size())) {
    throw Error(ErrorCode::kInsufficientData,
                "records do not cover steps " + std::to_string(start + 1) + ".." +
                    std::to_string(start + ell));
  }
  WindowStat w;
  w.ell = ell;
  w.start_step = start;
  for (long i = lo; i <= hi; ++i) {
    const StepRecord& rec = records[static_cast<std::size_t>(i)];
    if (!rec.psi || rec.step != first_step + i) {
      throw Error(ErrorCode::kInsufficientData, "step " + std::to_string(first_step + i) + " has no psi");
    }
    if (w.S.size() == 0) w.S = Matrix::Zero(rec.psi->size(), rec.psi->size());
    w.S.selfadjointView<Eigen::Lower>().rankUpdate(*rec.psi);
  }
  w.S = w.S.selfadjointView<Eigen::Lower>();
  return w;
}

WindowStat window_from_psi(std::span<const Vector> psi) {
  if (psi.empty()) throw Error(ErrorCode::kInsufficientData, "empty window");
  WindowStat w;
  w.ell = static_cast<long>(psi.size());
  w.S = Matrix::Zero(psi.front().size(), psi.front().size());
  for (const Vector& v : psi) w.S.selfadjointView<Eigen::Lower>().rankUpdate(v);
  w.S = w.S.selfadjointView<Eigen::Lower>();
  return w;
}

double wishart_nll(const WindowStat& window, const Matrix& V) {
  const auto n = static_cast<double>(window.dim());
  const auto ell = static_cast<double>(window.ell);
  return (n + 1.0 - ell) * logdet_chol(window.S) + (V * window.S).trace() -
         ell * logdet_chol(V);
}

double wishart_nll_min(const WindowStat& window) {
  const auto n = static_cast<double>(window.dim());
  const auto ell = static_cast<double>(window.ell);
  return (n + 1.0) * logdet_chol(window.S) + ell * n * (1.0 - std::log(ell));
}

double dw_statistic(const WindowStat& window, const Matrix& C, const Matrix& sigma_delta,
                    const Matrix& sigma_z, const Matrix& sigma_e) {
  const Matrix residual_cov = symmetrize(C * sigma_delta * C.transpose() + sigma_z);
  const Matrix weight = blkdiag(spd_inverse(residual_cov), spd_inverse(sigma_e));
  if (weight.rows() != window.dim()) {
    throw Error(ErrorCode::kInvalidArgument, "assumed covariances do not match the window dimension");
  }
  const auto n = static_cast<double>(window.dim());
  return (n + 1.0 - static_cast<double>(window.ell)) * logdet_chol(window.S) +
         (weight * window.S).trace();
}

DetectionResult decide(double statistic, double nu) {
  return DetectionResult{statistic, nu, statistic > nu};
}

MomentDiagnostics moment_diagnostics(std::span<const StepRecord> records, long burn_in) {
  if (burn_in < 0) throw Error(ErrorCode::kInvalidArgument, "burn_in must be nonnegative");
  if (records.empty() || static_cast<long>(records.size()) < 2 * burn_in) {
    throw Error(ErrorCode::kInsufficientData, "need at least 2·burn_in records");
  }
  MomentDiagnostics out;
  for (const StepRecord& rec : records) {
    if (rec.step < burn_in || !rec.watermark_lagged) continue;
    if (out.count == 0) {
      out.residual_cov = Matrix::Zero(rec.residual.size(), rec.residual.size());
      out.residual_watermark = Matrix::Zero(rec.residual.size(), rec.watermark_lagged->size());
    }
    out.residual_cov += rec.residual * rec.residual.transpose();
    out.residual_watermark += rec.residual * rec.watermark_lagged->transpose();
    ++out.count;
  }
  if (out.count == 0) throw Error(ErrorCode::kInsufficientData, "no post-burn-in records with psi");
  out.residual_cov /= static_cast<double>(out.count);
  out.residual_watermark /= static_cast<double>(out.count);
  return out;
}

double empirical_quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw Error(ErrorCode::kInsufficientData, "quantile of an empty sample");
  if (!(prob >= 0.0 && prob <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "quantile level outside [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = prob * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double auroc(std::span<const double> unattacked, std::span<const double> attacked) {
  if (unattacked.empty() || attacked.empty()) {
    throw Error(ErrorCode::kInsufficientData, "AUROC needs both samples");
  }
  // Rank-sum form with midranks for ties.
  std::vector<std::pair<double, int>> all;
  all.reserve(unattacked.size() + attacked.size());
  for (double v : unattacked) all.emplace_back(v, 0);
  for (double v : attacked) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j + 1 < all.size() && all[j + 1].first == all[i].first) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (all[k].second == 1) rank_sum += midrank;
    }
    i = j + 1;
  }
  const auto na = static_cast<double>(attacked.size());
  const auto nu = static_cast<double>(unattacked.size());
  return (rank_sum - na * (na + 1.0) / 2.0) / (na * nu);
}

}  // namespace crdw

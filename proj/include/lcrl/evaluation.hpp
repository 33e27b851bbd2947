#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/fit.hpp"
#include "lcrl/model.hpp"

namespace lcrl {

struct FitStats {
  double ll = 0.0;
  int k = 0;
  long n = 0;
  double aic = 0.0;
  double bic = 0.0;
};

inline FitStats fit_statistics(double ll, int k, long n) {
  if (n < 1) fail("fit_statistics: observation count must be >= 1");
  if (k < 0) fail("fit_statistics: parameter count must be >= 0");
  FitStats s;
  s.ll = ll;
  s.k = k;
  s.n = n;
  s.aic = 2.0 * k - 2.0 * ll;
  s.bic = k * std::log(static_cast<double>(n)) - 2.0 * ll;
  return s;
}

namespace detail {

// Per-class feature vector used for alignment: the behavioural parameters
// that identify a class, in a fixed order.
inline std::vector<double> class_features(const ClassParams& c, const PanelDataset& tmpl) {
  std::vector<double> f;
  for (int i : tmpl.free_gamma_indices()) f.push_back(c.bias_ds[i]);
  for (int i : tmpl.free_gamma_indices()) f.push_back(c.bias_sp_shift[i]);
  f.push_back(c.sensitivity_ds);
  f.push_back(c.sensitivity_sp);
  f.push_back(c.learning_rate);
  for (int i : tmpl.estimated_q0_indices()) f.push_back(c.initial_q[i]);
  return f;
}

}  // namespace detail

// Mapping of estimated classes onto truth classes: perm[k] is the estimated
// class matched to truth class k. Features are standardized across the pooled
// truth and estimate classes, then all K! assignments are scored by total
// squared distance; ties keep the lexicographically first permutation.
inline std::vector<int> align_classes(const PointParams& truth, const PointParams& estimate,
                                      const PanelDataset& tmpl) {
  const int K = static_cast<int>(truth.classes.size());
  if (static_cast<int>(estimate.classes.size()) != K)
    fail("align_classes: class counts differ");

  std::vector<std::vector<double>> tf(K), ef(K);
  for (int k = 0; k < K; ++k) {
    tf[k] = detail::class_features(truth.classes[k], tmpl);
    ef[k] = detail::class_features(estimate.classes[k], tmpl);
  }
  const int dim = static_cast<int>(tf[0].size());
  for (int a = 0; a < dim; ++a) {
    double mean = 0.0;
    for (int k = 0; k < K; ++k) mean += tf[k][a] + ef[k][a];
    mean /= 2.0 * K;
    double var = 0.0;
    for (int k = 0; k < K; ++k) {
      var += (tf[k][a] - mean) * (tf[k][a] - mean);
      var += (ef[k][a] - mean) * (ef[k][a] - mean);
    }
    const double sd = std::sqrt(var / (2.0 * K));
    for (int k = 0; k < K; ++k) {
      tf[k][a] = sd > 0.0 ? (tf[k][a] - mean) / sd : 0.0;
      ef[k][a] = sd > 0.0 ? (ef[k][a] - mean) / sd : 0.0;
    }
  }

  std::vector<int> perm(K), best(K);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (int k = 0; k < K; ++k)
      for (int a = 0; a < dim; ++a) {
        const double diff = tf[k][a] - ef[perm[k]][a];
        cost += diff * diff;
      }
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

struct RecoveryRow {
  std::string parameter;
  int class_index = 0;  // 0-based
  double bias = 0.0;
  double nrmse = 0.0;
  double correlation = 0.0;
  double r2 = 0.0;
  bool nrmse_defined = true;        // false when the truths have zero range
  bool correlation_defined = true;  // false when either side has zero variance
  bool r2_defined = true;           // false when the truths have zero variance
};

// One reported parameter's truth/estimate pairs across datasets.
struct ParamSeries {
  std::string parameter;
  int class_index = 0;
  std::vector<double> truth;
  std::vector<double> estimate;
};

// Truth/estimate pairs per reported parameter, in summary-row order. Inputs
// must already be class-aligned per dataset.
inline std::vector<ParamSeries> flatten_parameters(const std::vector<PointParams>& truths,
                                                   const std::vector<PointParams>& estimates,
                                                   const PanelDataset& tmpl) {
  if (truths.size() != estimates.size()) fail("flatten_parameters: length mismatch");
  if (truths.empty()) return {};
  const int K = static_cast<int>(truths[0].classes.size());
  const int S = static_cast<int>(truths.size());

  std::vector<ParamSeries> series;
  auto add = [&](const std::string& name, int k, auto&& get) {
    ParamSeries ps;
    ps.parameter = name;
    ps.class_index = k;
    ps.truth.reserve(S);
    ps.estimate.reserve(S);
    for (int s = 0; s < S; ++s) {
      ps.truth.push_back(get(truths[s]));
      ps.estimate.push_back(get(estimates[s]));
    }
    series.push_back(std::move(ps));
  };

  for (int k = 0; k < K; ++k) {
    for (int i : tmpl.free_gamma_indices())
      add("gamma_ds[" + tmpl.alternatives[i].name + "]", k,
          [k, i](const PointParams& p) { return p.classes[k].bias_ds[i]; });
    for (int i : tmpl.free_gamma_indices())
      add("gamma_sp_shift[" + tmpl.alternatives[i].name + "]", k,
          [k, i](const PointParams& p) { return p.classes[k].bias_sp_shift[i]; });
    add("beta_ds", k, [k](const PointParams& p) { return p.classes[k].sensitivity_ds; });
    add("beta_sp", k, [k](const PointParams& p) { return p.classes[k].sensitivity_sp; });
    add("alpha", k, [k](const PointParams& p) { return p.classes[k].learning_rate; });
    for (int i : tmpl.estimated_q0_indices())
      add("q0[" + tmpl.alternatives[i].name + "]", k,
          [k, i](const PointParams& p) { return p.classes[k].initial_q[i]; });
  }
  if (K > 1) {
    const int d = truths[0].eta.covariate_dim();
    for (int j = 0; j + 1 < K; ++j)
      for (int a = 0; a < d; ++a)
        add("eta[" + std::to_string(a) + "]", j,
            [j, a](const PointParams& p) { return p.eta.weights[j][a]; });
  }
  return series;
}

// Bias, NRMSE (RMSE over truth range), product-moment correlation, and R^2
// (1 minus squared error over truth variance) for one series.
inline RecoveryRow score_series(const ParamSeries& ps) {
  const int S = static_cast<int>(ps.truth.size());
  if (S < 2) fail("recovery metrics need at least 2 datasets");
  RecoveryRow row;
  row.parameter = ps.parameter;
  row.class_index = ps.class_index;

  double mean_t = 0.0, mean_e = 0.0;
  for (int s = 0; s < S; ++s) {
    mean_t += ps.truth[s];
    mean_e += ps.estimate[s];
  }
  mean_t /= S;
  mean_e /= S;

  double sq_err = 0.0, var_t = 0.0, var_e = 0.0, cov = 0.0;
  for (int s = 0; s < S; ++s) {
    const double err = ps.estimate[s] - ps.truth[s];
    row.bias += err;
    sq_err += err * err;
    const double dt = ps.truth[s] - mean_t;
    const double de = ps.estimate[s] - mean_e;
    var_t += dt * dt;
    var_e += de * de;
    cov += dt * de;
  }
  row.bias /= S;

  const double range =
      *std::max_element(ps.truth.begin(), ps.truth.end()) -
      *std::min_element(ps.truth.begin(), ps.truth.end());
  row.nrmse_defined = range > 0.0;
  row.nrmse = row.nrmse_defined ? std::sqrt(sq_err / S) / range : 0.0;

  row.correlation_defined = var_t > 0.0 && var_e > 0.0;
  row.correlation = row.correlation_defined ? cov / std::sqrt(var_t * var_e) : 0.0;

  row.r2_defined = var_t > 0.0;
  row.r2 = row.r2_defined ? 1.0 - sq_err / var_t : 0.0;
  return row;
}

inline std::vector<RecoveryRow> recovery_metrics(const std::vector<PointParams>& truths,
                                                 const std::vector<PointParams>& estimates,
                                                 const PanelDataset& tmpl) {
  std::vector<RecoveryRow> rows;
  for (const ParamSeries& ps : flatten_parameters(truths, estimates, tmpl))
    rows.push_back(score_series(ps));
  return rows;
}

}  // namespace lcrl

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/latent_class.hpp"
#include "lcrl/model.hpp"
#include "lcrl/variational.hpp"

namespace lcrl {

struct OptimizerConfig {
  int iterations = 5000;
  int mc_samples = 16;
  int restarts = 5;
  double learning_rate = 0.05;
  double tol = 1e-3;       // smoothed-ELBO improvement threshold, nats
  int patience = 200;      // iterations the smoothed ELBO may stall
  int smooth_window = 50;  // moving-average window for the trace
  double init_sd = 0.1;    // spread of initial means around prior means
  double tail_decay = 0.99;  // iterate-averaging decay; 0 returns the last iterate
  int eval_samples = 256;  // samples for the end-of-restart ELBO comparison
  int summary_samples = 4096;
  int threads = 1;
  bool eta_full_covariance = false;
};

// Variational posterior: coordinate vector plus its layout.
struct VariationalState {
  Layout layout;
  std::vector<double> coords;
};

struct FitDiagnostics {
  std::vector<double> trace;  // per-iteration ELBO estimates, chosen restart
  int iterations = 0;
  std::uint64_t seed = 0;
  int restart_index = 0;
  bool converged = false;
  double best_elbo = 0.0;                // refined estimate for the chosen restart
  std::vector<double> restart_elbos;     // refined estimate per restart
  std::vector<std::string> restart_errors;  // nonempty where a restart diverged
};

struct FitResult {
  VariationalState state;
  FitDiagnostics diagnostics;
};

namespace detail {

struct Adam {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;

  Adam(double lr_, std::size_t dim) : lr(lr_), m(dim, 0.0), v(dim, 0.0) {}

  // Ascent step along the gradient.
  void step(std::vector<double>& x, const std::vector<double>& g) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      x[i] += lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

// Per-respondent choice-share features (per context and alternative), the
// clustering space for the membership initialization.
inline std::vector<std::vector<double>> choice_share_features(const PanelDataset& data) {
  const int n_alt = data.n_alternatives();
  std::vector<std::vector<double>> f(data.respondents.size());
  for (std::size_t n = 0; n < data.respondents.size(); ++n) {
    std::vector<double> x(2 * n_alt, 0.0);
    int count_ds = 0, count_sp = 0;
    for (const Trial& t : data.respondents[n].trials) {
      if (t.context == Context::ds) {
        x[t.chosen - 1] += 1.0;
        ++count_ds;
      } else {
        x[n_alt + t.chosen - 1] += 1.0;
        ++count_sp;
      }
    }
    for (int i = 0; i < n_alt; ++i) {
      if (count_ds > 0) x[i] /= count_ds;
      if (count_sp > 0) x[n_alt + i] /= count_sp;
    }
    f[n] = std::move(x);
  }
  return f;
}

// Lloyd's algorithm, few rounds, deterministic given the rng. Centroids are
// seeded from a shuffled respondent order. Returns cluster per respondent.
inline std::vector<int> kmeans_assign(const std::vector<std::vector<double>>& points, int k,
                                      Rng& rng, int rounds = 20) {
  const int n = static_cast<int>(points.size());
  std::vector<int> assign(n, 0);
  if (k <= 1 || n == 0) return assign;
  const int dim = static_cast<int>(points[0].size());

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform01() * (i + 1));
    std::swap(order[i], order[std::min(j, i)]);
  }
  std::vector<std::vector<double>> centroids;
  for (int c = 0; c < k; ++c) centroids.push_back(points[order[c % n]]);

  for (int round = 0; round < rounds; ++round) {
    bool moved = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double d = 0.0;
        for (int a = 0; a < dim; ++a) {
          const double diff = points[i][a] - centroids[c][a];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) moved = true;
      assign[i] = best;
    }
    for (int c = 0; c < k; ++c) {
      std::vector<double> mean(dim, 0.0);
      int count = 0;
      for (int i = 0; i < n; ++i)
        if (assign[i] == c) {
          for (int a = 0; a < dim; ++a) mean[a] += points[i][a];
          ++count;
        }
      if (count > 0) {
        for (int a = 0; a < dim; ++a) centroids[c][a] = mean[a] / count;
      }
    }
    if (!moved && round > 0) break;
  }
  return assign;
}

}  // namespace detail

// Fresh variational coordinates: means jittered around the prior means,
// scales at init_sd, membership logits from a k-means split of choice shares.
inline std::vector<double> init_state(const PanelDataset& data, const ModelSpec& spec,
                                      const Layout& lay, std::uint64_t seed,
                                      const OptimizerConfig& cfg) {
  std::vector<double> x(lay.total, 0.0);
  Rng rng(seed);
  const double logsd0 = std::log(cfg.init_sd);

  for (int k = 0; k < lay.class_count; ++k)
    for (int l = 0; l < lay.latents_per_class; ++l) {
      double prior_mean = 0.0;
      switch (lay.latent_family(l)) {
        case LatentFamily::gamma_ds:
        case LatentFamily::gamma_sp: prior_mean = spec.priors.gamma.mean; break;
        case LatentFamily::log_beta_ds:
        case LatentFamily::log_beta_sp: prior_mean = spec.priors.log_beta.mean; break;
        case LatentFamily::z_alpha: prior_mean = spec.priors.z_alpha.mean; break;
        case LatentFamily::z_q0: prior_mean = spec.priors.z_q0.mean; break;
      }
      x[lay.mean_index(k, l)] = prior_mean + cfg.init_sd * rng.normal();
      x[lay.logsd_index(k, l)] = logsd0;
    }

  if (lay.class_count > 1 && lay.covariate_dim > 0)
    for (int j = 0; j + 1 < lay.class_count; ++j) {
      for (int a = 0; a < lay.covariate_dim; ++a) {
        x[lay.eta_mean_index(j, a)] = spec.priors.eta.mean + cfg.init_sd * rng.normal();
        x[lay.eta_scale_index(j, a)] = logsd0;
      }
      if (lay.eta_full_covariance)
        for (int a = 1; a < lay.covariate_dim; ++a)
          for (int b = 0; b < a; ++b) x[lay.eta_chol_index(j, a, b)] = 0.0;
    }

  if (lay.class_count > 1) {
    const auto features = detail::choice_share_features(data);
    const auto assign = detail::kmeans_assign(features, lay.class_count, rng);
    const double in_logit = std::log(0.6);
    const double out_logit = std::log(0.4 / std::max(1, lay.class_count - 1));
    for (int n = 0; n < lay.n_respondents; ++n)
      for (int k = 0; k < lay.class_count; ++k)
        x[lay.pi_index(n, k)] = (assign[n] == k) ? in_logit : out_logit;
  }
  return x;
}

inline std::vector<double> moving_average(const std::vector<double>& trace, int window) {
  std::vector<double> out(trace.size(), 0.0);
  double running = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    running += trace[i];
    if (i >= static_cast<std::size_t>(window)) running -= trace[i - window];
    out[i] = running / std::min<std::size_t>(i + 1, window);
  }
  return out;
}

// Stochastic gradient ascent on the ELBO with restarts. Each restart runs
// until the iteration budget or until the smoothed trace stalls; restarts are
// compared on a common higher-sample ELBO estimate of their final state.
inline FitResult fit(const PanelDataset& data, const ModelSpec& spec,
                     const OptimizerConfig& cfg) {
  const auto violations = validate(data, spec);
  if (!violations.empty()) fail("fit: invalid input: " + violations.front());
  if (cfg.restarts < 1) fail("fit: restarts must be >= 1");

  const Layout lay = Layout::make(data, spec, cfg.eta_full_covariance);
  const VariationalOptions vopts{cfg.mc_samples, cfg.eta_full_covariance, cfg.threads};
  const VariationalOptions eval_opts{cfg.eval_samples, cfg.eta_full_covariance, cfg.threads};

  FitResult best;
  best.diagnostics.seed = spec.rng_seed;
  bool have_best = false;

  for (int r = 0; r < cfg.restarts; ++r) {
    const std::uint64_t rs = mix_seed(spec.rng_seed, 0x5245u + r);  // restart stream
    std::vector<double> x = init_state(data, spec, lay, mix_seed(rs, 1), cfg);
    detail::Adam adam(cfg.learning_rate, x.size());
    std::vector<double> grad;
    std::vector<double> trace;
    trace.reserve(cfg.iterations);
    bool converged = false;
    std::string error;

    // Discounted average of the iterates: single Adam iterates wander with
    // the gradient noise, the tail average does not. Tracked as a weighted
    // sum so no initial-point mass leaks in.
    std::vector<double> tail_sum(x.size(), 0.0);
    double tail_weight = 0.0;

    try {
      for (int it = 0; it < cfg.iterations; ++it) {
        const double value =
            elbo_gradient(x, lay, data, spec, vopts, mix_seed(rs, 0x1000u + it), grad);
        trace.push_back(value);
        adam.step(x, grad);
        if (cfg.tail_decay > 0.0) {
          tail_weight = cfg.tail_decay * tail_weight + 1.0;
          for (std::size_t i = 0; i < x.size(); ++i)
            tail_sum[i] = cfg.tail_decay * tail_sum[i] + x[i];
        }
        const int w = cfg.smooth_window, p = cfg.patience;
        if (static_cast<int>(trace.size()) >= w + p) {
          const auto sm = moving_average(trace, w);
          if (sm.back() - sm[sm.size() - 1 - p] < cfg.tol) {
            converged = true;
            break;
          }
        }
      }
      if (cfg.tail_decay > 0.0 && tail_weight > 0.0)
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = tail_sum[i] / tail_weight;
    } catch (const std::exception& e) {
      error = e.what();
    }

    double refined = -std::numeric_limits<double>::infinity();
    if (error.empty()) {
      try {
        refined = elbo(x, lay, data, spec, eval_opts, mix_seed(rs, 2));
      } catch (const std::exception& e) {
        error = e.what();
      }
    }
    best.diagnostics.restart_elbos.push_back(refined);
    best.diagnostics.restart_errors.push_back(error);

    if (error.empty() && (!have_best || refined > best.diagnostics.best_elbo)) {
      have_best = true;
      best.state.layout = lay;
      best.state.coords = std::move(x);
      best.diagnostics.trace = std::move(trace);
      best.diagnostics.iterations = static_cast<int>(best.diagnostics.trace.size());
      best.diagnostics.restart_index = r;
      best.diagnostics.converged = converged;
      best.diagnostics.best_elbo = refined;
    }
  }
  if (!have_best) fail("fit: no restart reached a finite ELBO");
  return best;
}

// ---- posterior reporting ----

struct SummaryRow {
  std::string parameter;
  int class_index = -1;  // 0-based; -1 for rows not tied to a class block
  double mean = 0.0;
  double sd = 0.0;
  double z = 0.0;
  bool point_mass = false;  // sd == 0, z undefined (infinite precision)
};

struct PosteriorSummary {
  std::vector<SummaryRow> rows;
  std::vector<double> class_shares;
};

// Average held membership per class.
inline std::vector<double> class_shares(const VariationalState& state) {
  const Layout& lay = state.layout;
  std::vector<double> shares(lay.class_count, 0.0);
  if (lay.class_count == 1) {
    shares[0] = 1.0;
    return shares;
  }
  std::vector<double> pi(lay.class_count);
  for (int n = 0; n < lay.n_respondents; ++n) {
    softmax(std::span<const double>(state.coords.data() + lay.pi_index(n, 0), lay.class_count),
            pi);
    for (int k = 0; k < lay.class_count; ++k) shares[k] += pi[k];
  }
  for (auto& s : shares) s /= std::max(1, lay.n_respondents);
  return shares;
}

namespace detail {

inline SummaryRow make_row(const std::string& name, int class_index, double mean, double sd) {
  SummaryRow row;
  row.parameter = name;
  row.class_index = class_index;
  row.mean = mean;
  row.sd = sd;
  row.point_mass = sd == 0.0;
  row.z = row.point_mass ? 0.0 : mean / sd;
  return row;
}

// Mean and (population) sd of transform(mu + sd*z) over n normal draws.
template <typename Transform>
void sampled_moments(double mu, double sd, int n, Rng& rng, Transform&& t, double* out_mean,
                     double* out_sd) {
  if (sd == 0.0) {
    *out_mean = t(mu);
    *out_sd = 0.0;
    return;
  }
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = t(mu + sd * rng.normal());
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  *out_mean = mean;
  *out_sd = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
}

// E[sigmoid(mu + sd*Z)] under Z ~ N(0,1), by Simpson quadrature. The grid is
// wide and fine enough that the error is far below reporting precision.
inline double gauss_expect_sigmoid(double mu, double sd) {
  if (sd == 0.0) return sigmoid(mu);
  constexpr int kIntervals = 512;  // even
  constexpr double kHalfWidth = 8.5;
  const double h = 2.0 * kHalfWidth / kIntervals;
  const double inv_sqrt_2pi = 0.3989422804014326779;
  double acc = 0.0;
  for (int i = 0; i <= kIntervals; ++i) {
    const double z = -kHalfWidth + i * h;
    const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    acc += w * sigmoid(mu + sd * z) * inv_sqrt_2pi * std::exp(-0.5 * z * z);
  }
  return acc * h / 3.0;
}

}  // namespace detail

// Posterior means of the natural parameters (deterministic; lognormal means
// in closed form, sigmoid transforms by quadrature). Used as the point at
// which the model log-likelihood is reported.
inline PointParams posterior_point(const VariationalState& state, const PanelDataset& data) {
  const Layout& lay = state.layout;
  const std::vector<double>& x = state.coords;
  PointParams p;
  p.classes.resize(lay.class_count);
  for (int k = 0; k < lay.class_count; ++k) {
    ClassParams c = make_class_params(data);
    for (int l = 0; l < lay.latents_per_class; ++l) {
      const double mu = x[lay.mean_index(k, l)];
      const double sd = std::exp(x[lay.logsd_index(k, l)]);
      int alt = -1;
      switch (lay.latent_family(l, &alt)) {
        case LatentFamily::gamma_ds: c.bias_ds[alt] = mu; break;
        case LatentFamily::gamma_sp: c.bias_sp_shift[alt] = mu; break;
        case LatentFamily::log_beta_ds: c.sensitivity_ds = std::exp(mu + 0.5 * sd * sd); break;
        case LatentFamily::log_beta_sp: c.sensitivity_sp = std::exp(mu + 0.5 * sd * sd); break;
        case LatentFamily::z_alpha:
          c.learning_rate = detail::gauss_expect_sigmoid(mu, sd);
          break;
        case LatentFamily::z_q0: {
          const Q0Mode& q0 = data.alternatives[alt].q0;
          c.initial_q[alt] =
              q0.lower + (q0.upper - q0.lower) * detail::gauss_expect_sigmoid(mu, sd);
          break;
        }
      }
    }
    p.classes[k] = std::move(c);
  }
  if (lay.class_count > 1) {
    p.eta.weights.assign(lay.class_count - 1, std::vector<double>(lay.covariate_dim, 0.0));
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a)
        p.eta.weights[j][a] = x[lay.eta_mean_index(j, a)];
  }
  return p;
}

// Bayes-rule memberships averaged over parameter draws from q, the fully
// Bayesian alternative to evaluating them once at the posterior means.
inline std::vector<std::vector<double>> averaged_memberships(const VariationalState& state,
                                                             const PanelDataset& data,
                                                             int n_samples, std::uint64_t seed,
                                                             bool reset_on_switch = false) {
  const Layout& lay = state.layout;
  const std::vector<double>& x = state.coords;
  const int K = lay.class_count, d = lay.covariate_dim, Lc = lay.latents_per_class;
  const std::size_t N = data.respondents.size();
  std::vector<std::vector<double>> avg(N, std::vector<double>(K, 0.0));

  Rng rng(seed);
  std::vector<double> eps(lay.eps_per_sample());
  PointParams p;
  p.classes.resize(K);
  if (K > 1) p.eta.weights.assign(K - 1, std::vector<double>(d, 0.0));
  for (int s = 0; s < n_samples; ++s) {
    for (auto& e : eps) e = rng.normal();
    for (int k = 0; k < K; ++k)
      p.classes[k] = detail::natural_from_draw(x, lay, data, k, eps.data() + k * Lc);
    for (int j = 0; j + 1 < K; ++j) {
      const double* ej = eps.data() + K * Lc + j * d;
      for (int a = 0; a < d; ++a) {
        double v = x[lay.eta_mean_index(j, a)];
        if (!lay.eta_full_covariance) {
          v += std::exp(x[lay.eta_scale_index(j, a)]) * ej[a];
        } else {
          v += std::exp(x[lay.eta_scale_index(j, a)]) * ej[a];
          for (int b = 0; b < a; ++b) v += x[lay.eta_chol_index(j, a, b)] * ej[b];
        }
        p.eta.weights[j][a] = v;
      }
    }
    for (std::size_t n = 0; n < N; ++n) {
      const auto post =
          posterior_memberships(p, data.respondents[n], data.outcome_polarity, reset_on_switch);
      for (int k = 0; k < K; ++k) avg[n][k] += post[k] / n_samples;
    }
  }
  return avg;
}

// Marginal posterior sd of one membership coefficient.
inline double eta_marginal_sd(const VariationalState& state, int j, int a) {
  const Layout& lay = state.layout;
  if (!lay.eta_full_covariance) return std::exp(state.coords[lay.eta_scale_index(j, a)]);
  double s2 = 0.0;
  const double laa = std::exp(state.coords[lay.eta_scale_index(j, a)]);
  s2 += laa * laa;
  for (int b = 0; b < a; ++b) {
    const double lab = state.coords[lay.eta_chol_index(j, a, b)];
    s2 += lab * lab;
  }
  return std::sqrt(s2);
}

// Posterior mean/sd/z per reported parameter. Normal-family rows are exact;
// transformed rows (alpha, q0, beta) are sampled and pushed through their
// transforms. Deterministic given the seed.
inline PosteriorSummary posterior_summary(const VariationalState& state,
                                          const PanelDataset& data, const ModelSpec& spec,
                                          int n_samples, std::uint64_t seed) {
  const Layout& lay = state.layout;
  const std::vector<double>& x = state.coords;
  Rng rng(mix_seed(seed, 0x53554dULL));
  PosteriorSummary out;
  out.class_shares = class_shares(state);

  for (int k = 0; k < lay.class_count; ++k)
    for (int l = 0; l < lay.latents_per_class; ++l) {
      const double mu = x[lay.mean_index(k, l)];
      const double sd = std::exp(x[lay.logsd_index(k, l)]);
      int alt = -1;
      const LatentFamily fam = lay.latent_family(l, &alt);
      double m = 0.0, s = 0.0;
      std::string name;
      switch (fam) {
        case LatentFamily::gamma_ds:
          name = "gamma_ds[" + data.alternatives[alt].name + "]";
          m = mu;
          s = sd;
          break;
        case LatentFamily::gamma_sp:
          name = "gamma_sp_shift[" + data.alternatives[alt].name + "]";
          m = mu;
          s = sd;
          break;
        case LatentFamily::log_beta_ds:
          name = "beta_ds";
          detail::sampled_moments(mu, sd, n_samples, rng, [](double v) { return std::exp(v); },
                                  &m, &s);
          break;
        case LatentFamily::log_beta_sp:
          name = "beta_sp";
          detail::sampled_moments(mu, sd, n_samples, rng, [](double v) { return std::exp(v); },
                                  &m, &s);
          break;
        case LatentFamily::z_alpha:
          name = "alpha";
          detail::sampled_moments(mu, sd, n_samples, rng, [](double v) { return sigmoid(v); },
                                  &m, &s);
          break;
        case LatentFamily::z_q0: {
          const Q0Mode& q0 = data.alternatives[alt].q0;
          name = "q0[" + data.alternatives[alt].name + "]";
          detail::sampled_moments(
              mu, sd, n_samples, rng,
              [&](double v) { return q0.lower + (q0.upper - q0.lower) * sigmoid(v); }, &m, &s);
          break;
        }
      }
      out.rows.push_back(detail::make_row(name, k, m, s));
    }

  if (lay.class_count > 1)
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a) {
        const std::string cov = a < static_cast<int>(spec.covariate_names.size())
                                    ? spec.covariate_names[a]
                                    : std::to_string(a);
        out.rows.push_back(detail::make_row("eta[" + cov + "]", j,
                                            x[lay.eta_mean_index(j, a)],
                                            eta_marginal_sd(state, j, a)));
      }
  return out;
}

// Reporting order: classes sorted by descending share (ties by original
// index). Returns the permutation; perm[new_position] = old_class.
inline std::vector<int> canonical_class_order(const std::vector<double>& shares) {
  std::vector<int> perm(shares.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int a, int b) { return shares[a] > shares[b]; });
  return perm;
}

// Point parameters re-labeled under a class permutation. Membership weights
// are re-expressed against the new reference class (the one that lands last)
// so membership probabilities are unchanged.
inline PointParams apply_class_permutation(const PointParams& p, const std::vector<int>& perm) {
  const int K = static_cast<int>(p.classes.size());
  PointParams out;
  out.classes.resize(K);
  for (int k = 0; k < K; ++k) out.classes[k] = p.classes[perm[k]];
  if (K > 1) {
    const int d = p.eta.covariate_dim();
    // Row for old class c (rows exist for c < K-1; the old reference is 0).
    auto old_row = [&](int c) {
      return c + 1 < K ? p.eta.weights[c] : std::vector<double>(d, 0.0);
    };
    const std::vector<double> ref = old_row(perm[K - 1]);
    out.eta.weights.assign(K - 1, std::vector<double>(d, 0.0));
    for (int j = 0; j + 1 < K; ++j) {
      const std::vector<double> row = old_row(perm[j]);
      for (int a = 0; a < d; ++a) out.eta.weights[j][a] = row[a] - ref[a];
    }
  }
  return out;
}

}  // namespace lcrl

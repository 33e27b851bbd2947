#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/latent_class.hpp"
#include "lcrl/model.hpp"
#include "lcrl/rl.hpp"

namespace lcrl {

// Families of per-class latents, in their block order.
enum class LatentFamily { gamma_ds, gamma_sp, log_beta_ds, log_beta_sp, z_alpha, z_q0 };

// Flat coordinate layout of the variational parameter vector.
//
//   [ membership logits: N x K ]            (only when K > 1)
//   [ eta blocks: (K-1) x eta_block ]       (only when K > 1 and covariates exist)
//   [ class blocks: K x class_block ]
//
// Each eta block holds d means followed by either d log-sds (diagonal family)
// or d log-diagonal entries plus the strict lower triangle of a Cholesky
// factor (full covariance). Each class block interleaves (mean, log-sd) pairs
// for the per-class latents in a fixed order: free biases in DS, free bias
// shifts in SP, the two log sensitivities, the learning-rate logit, and the
// bounded initial-expectation logits.
struct Layout {
  int n_respondents = 0;
  int class_count = 1;
  int covariate_dim = 0;
  int n_alternatives = 0;
  std::vector<int> free_gamma;    // alternative indices with a free bias
  std::vector<int> estimated_q0;  // alternative indices with estimated initial q
  bool eta_full_covariance = false;

  int latents_per_class = 0;
  int pi_offset = 0;
  int eta_offset = 0;
  int eta_block = 0;
  int class_offset = 0;
  int class_block = 0;
  int total = 0;
  std::vector<std::string> labels;

  int pi_index(int n, int k) const { return pi_offset + n * class_count + k; }
  int eta_index(int j) const { return eta_offset + j * eta_block; }
  int eta_mean_index(int j, int a) const { return eta_index(j) + a; }
  int eta_scale_index(int j, int a) const { return eta_index(j) + covariate_dim + a; }
  int eta_chol_index(int j, int a, int b) const {
    return eta_index(j) + 2 * covariate_dim + a * (a - 1) / 2 + b;
  }
  int class_index(int k) const { return class_offset + k * class_block; }
  int mean_index(int k, int l) const { return class_index(k) + 2 * l; }
  int logsd_index(int k, int l) const { return mean_index(k, l) + 1; }

  // Family and alternative index of the l-th per-class latent.
  LatentFamily latent_family(int l, int* alt = nullptr) const {
    const int g = static_cast<int>(free_gamma.size());
    if (l < g) {
      if (alt) *alt = free_gamma[l];
      return LatentFamily::gamma_ds;
    }
    if (l < 2 * g) {
      if (alt) *alt = free_gamma[l - g];
      return LatentFamily::gamma_sp;
    }
    if (l == 2 * g) return LatentFamily::log_beta_ds;
    if (l == 2 * g + 1) return LatentFamily::log_beta_sp;
    if (l == 2 * g + 2) return LatentFamily::z_alpha;
    if (alt) *alt = estimated_q0[l - (2 * g + 3)];
    return LatentFamily::z_q0;
  }

  int eps_per_sample() const {
    int n = class_count * latents_per_class;
    if (class_count > 1) n += (class_count - 1) * covariate_dim;
    return n;
  }

  static Layout make(const PanelDataset& data, const ModelSpec& spec,
                     bool eta_full_covariance = false) {
    Layout lay;
    lay.n_respondents = static_cast<int>(data.respondents.size());
    lay.class_count = spec.class_count;
    lay.covariate_dim = static_cast<int>(spec.covariate_names.size());
    lay.n_alternatives = data.n_alternatives();
    lay.free_gamma = data.free_gamma_indices();
    lay.estimated_q0 = data.estimated_q0_indices();
    lay.eta_full_covariance = eta_full_covariance;

    const int g = static_cast<int>(lay.free_gamma.size());
    const int f = static_cast<int>(lay.estimated_q0.size());
    const int d = lay.covariate_dim;
    lay.latents_per_class = 2 * g + 3 + f;
    lay.class_block = 2 * lay.latents_per_class;

    lay.pi_offset = 0;
    const int pi_size = lay.class_count > 1 ? lay.n_respondents * lay.class_count : 0;
    lay.eta_offset = pi_size;
    lay.eta_block =
        d > 0 ? (eta_full_covariance ? 2 * d + d * (d - 1) / 2 : 2 * d) : 0;
    const int eta_size = lay.class_count > 1 ? (lay.class_count - 1) * lay.eta_block : 0;
    lay.class_offset = lay.eta_offset + eta_size;
    lay.total = lay.class_offset + lay.class_count * lay.class_block;

    lay.labels.resize(lay.total);
    if (lay.class_count > 1) {
      for (int n = 0; n < lay.n_respondents; ++n)
        for (int k = 0; k < lay.class_count; ++k)
          lay.labels[lay.pi_index(n, k)] =
              "pi[" + std::to_string(n) + "][" + std::to_string(k) + "]";
      for (int j = 0; j + 1 < lay.class_count; ++j) {
        for (int a = 0; a < d; ++a) {
          lay.labels[lay.eta_mean_index(j, a)] =
              "eta[" + std::to_string(j) + "].mu[" + std::to_string(a) + "]";
          lay.labels[lay.eta_scale_index(j, a)] =
              "eta[" + std::to_string(j) +
              (eta_full_covariance ? "].chol_logdiag[" : "].logsd[") + std::to_string(a) + "]";
        }
        if (eta_full_covariance)
          for (int a = 1; a < d; ++a)
            for (int b = 0; b < a; ++b)
              lay.labels[lay.eta_chol_index(j, a, b)] = "eta[" + std::to_string(j) + "].chol[" +
                                                        std::to_string(a) + "][" +
                                                        std::to_string(b) + "]";
      }
    }
    for (int k = 0; k < lay.class_count; ++k)
      for (int l = 0; l < lay.latents_per_class; ++l) {
        int alt = -1;
        std::string base = "class[" + std::to_string(k) + "].";
        switch (lay.latent_family(l, &alt)) {
          case LatentFamily::gamma_ds: base += "gamma_ds[" + std::to_string(alt) + "]"; break;
          case LatentFamily::gamma_sp: base += "gamma_sp[" + std::to_string(alt) + "]"; break;
          case LatentFamily::log_beta_ds: base += "log_beta_ds"; break;
          case LatentFamily::log_beta_sp: base += "log_beta_sp"; break;
          case LatentFamily::z_alpha: base += "z_alpha"; break;
          case LatentFamily::z_q0: base += "z_q0[" + std::to_string(alt) + "]"; break;
        }
        lay.labels[lay.mean_index(k, l)] = base + ".mu";
        lay.labels[lay.logsd_index(k, l)] = base + ".logsd";
      }
    return lay;
  }
};

struct VariationalOptions {
  int mc_samples = 16;
  bool eta_full_covariance = false;
  int threads = 1;
};

struct KlBreakdown {
  double gamma = 0.0;
  double eta = 0.0;
  double z_alpha = 0.0;
  double z_q0 = 0.0;
  double log_beta = 0.0;
  double total() const { return gamma + eta + z_alpha + z_q0 + log_beta; }
};

// Constraint transforms for the bounded latents: the learning rate lives on
// a plain sigmoid, the estimated initial expectations on a sigmoid scaled to
// their design interval. Inverses are used to seed means from natural-space
// guesses.
inline double transform_alpha(double z) { return sigmoid(z); }
inline double inverse_transform_alpha(double alpha) { return logit(alpha); }
inline double transform_q0(double z, double a, double b) { return a + (b - a) * sigmoid(z); }
inline double inverse_transform_q0(double q, double a, double b) {
  return logit((q - a) / (b - a));
}

namespace detail {

// KL(N(mu, sd^2) || prior) for one coordinate, with derivatives.
inline double normal_kl(double mu, double logsd, const NormalPrior& pr, double* dmu,
                        double* dlogsd) {
  const double sd = std::exp(logsd);
  const double s0sq = pr.sd * pr.sd;
  const double dm = mu - pr.mean;
  if (dmu) *dmu = dm / s0sq;
  if (dlogsd) *dlogsd = sd * sd / s0sq - 1.0;
  // analytically >= 0; clamp the ~1e-16 rounding dip at q == prior
  return std::max(0.0, std::log(pr.sd) - logsd + (sd * sd + dm * dm) / (2.0 * s0sq) - 0.5);
}

// Divergence of every variational factor from its prior. When grad is given,
// the derivative of the total is ADDED into it (callers negate as needed).
inline KlBreakdown accumulate_kl(const std::vector<double>& x, const Layout& lay,
                                 const PriorSpec& priors, std::vector<double>* grad) {
  KlBreakdown kl;
  for (int k = 0; k < lay.class_count; ++k)
    for (int l = 0; l < lay.latents_per_class; ++l) {
      const NormalPrior* pr = nullptr;
      double* slot = nullptr;
      switch (lay.latent_family(l)) {
        case LatentFamily::gamma_ds:
        case LatentFamily::gamma_sp: pr = &priors.gamma; slot = &kl.gamma; break;
        case LatentFamily::log_beta_ds:
        case LatentFamily::log_beta_sp: pr = &priors.log_beta; slot = &kl.log_beta; break;
        case LatentFamily::z_alpha: pr = &priors.z_alpha; slot = &kl.z_alpha; break;
        case LatentFamily::z_q0: pr = &priors.z_q0; slot = &kl.z_q0; break;
      }
      const int im = lay.mean_index(k, l), is = lay.logsd_index(k, l);
      double dmu = 0.0, dlogsd = 0.0;
      *slot += normal_kl(x[im], x[is], *pr, grad ? &dmu : nullptr, grad ? &dlogsd : nullptr);
      if (grad) {
        (*grad)[im] += dmu;
        (*grad)[is] += dlogsd;
      }
    }

  if (lay.class_count > 1 && lay.covariate_dim > 0) {
    const int d = lay.covariate_dim;
    const NormalPrior& pr = priors.eta;
    const double s0sq = pr.sd * pr.sd;
    for (int j = 0; j + 1 < lay.class_count; ++j) {
      if (!lay.eta_full_covariance) {
        for (int a = 0; a < d; ++a) {
          const int im = lay.eta_mean_index(j, a), is = lay.eta_scale_index(j, a);
          double dmu = 0.0, dlogsd = 0.0;
          kl.eta +=
              normal_kl(x[im], x[is], pr, grad ? &dmu : nullptr, grad ? &dlogsd : nullptr);
          if (grad) {
            (*grad)[im] += dmu;
            (*grad)[is] += dlogsd;
          }
        }
      } else {
        // q(eta_j) = N(mu, L L') against the spherical prior.
        double fro = 0.0, quad = 0.0, logdet_half = 0.0;
        for (int a = 0; a < d; ++a) {
          const double laa = std::exp(x[lay.eta_scale_index(j, a)]);
          fro += laa * laa;
          logdet_half += x[lay.eta_scale_index(j, a)];
          const double dm = x[lay.eta_mean_index(j, a)] - pr.mean;
          quad += dm * dm;
          for (int b = 0; b < a; ++b) {
            const double lab = x[lay.eta_chol_index(j, a, b)];
            fro += lab * lab;
          }
        }
        // analytically >= 0 per row; clamp the rounding dip at q == prior
        kl.eta += std::max(0.0, 0.5 * ((fro + quad) / s0sq - d) + d * std::log(pr.sd) -
                                    logdet_half);
        if (grad) {
          for (int a = 0; a < d; ++a) {
            const double laa = std::exp(x[lay.eta_scale_index(j, a)]);
            (*grad)[lay.eta_mean_index(j, a)] += (x[lay.eta_mean_index(j, a)] - pr.mean) / s0sq;
            (*grad)[lay.eta_scale_index(j, a)] += laa * laa / s0sq - 1.0;
            for (int b = 0; b < a; ++b)
              (*grad)[lay.eta_chol_index(j, a, b)] += x[lay.eta_chol_index(j, a, b)] / s0sq;
          }
        }
      }
    }
  }
  return kl;
}

struct LoglikScratch {
  std::vector<double> q, dq_da, dq_dq0, u;
};

// Choice log-likelihood of one trial sequence under fixed class parameters,
// with forward-mode sensitivities. Gradient contributions (times `weight`)
// are accumulated into `g`, laid out as
//   [ d/gamma_ds (n_alt) | d/gamma_sp (n_alt) | d/q0 (n_alt) | d/beta_ds | d/beta_sp | d/alpha ].
// Chosen-only updates never mix expectations across alternatives, so a scalar
// sensitivity pair per alternative is exact.
template <bool Grad>
double sequence_loglik_grad(const ClassParams& p, const std::vector<Trial>& trials,
                            Polarity pol, bool reset_on_switch, double weight, double* g,
                            LoglikScratch& sc) {
  const int n = static_cast<int>(p.initial_q.size());
  const double sign = polarity_sign(pol);
  sc.q = p.initial_q;
  sc.u.resize(n);
  if constexpr (Grad) {
    sc.dq_da.assign(n, 0.0);
    sc.dq_dq0.assign(n, 1.0);
  }
  double ll = 0.0;
  bool have_prev = false;
  Context prev = Context::ds;
  for (const Trial& t : trials) {
    if (reset_on_switch && have_prev && t.context != prev) {
      sc.q = p.initial_q;
      if constexpr (Grad) {
        sc.dq_da.assign(n, 0.0);
        sc.dq_dq0.assign(n, 1.0);
      }
    }
    const bool sp = t.context == Context::sp;
    const double beta = sp ? p.sensitivity_sp : p.sensitivity_ds;
    for (int i = 0; i < n; ++i) {
      double gamma = p.bias_ds[i];
      if (sp) gamma += p.bias_sp_shift[i];
      sc.u[i] = gamma + sign * beta * sc.q[i];
    }
    const double lse = log_sum_exp(sc.u);
    const int y = t.chosen - 1;
    ll += sc.u[y] - lse;
    if constexpr (Grad) {
      double d_beta = 0.0, d_alpha = 0.0;
      for (int i = 0; i < n; ++i) {
        const double resid = (i == y ? 1.0 : 0.0) - std::exp(sc.u[i] - lse);
        g[i] += weight * resid;
        if (sp) g[n + i] += weight * resid;
        g[2 * n + i] += weight * resid * sign * beta * sc.dq_dq0[i];
        d_beta += resid * sc.q[i];
        d_alpha += resid * sc.dq_da[i];
      }
      g[3 * n + (sp ? 1 : 0)] += weight * sign * d_beta;
      g[3 * n + 2] += weight * sign * beta * d_alpha;
    }
    const double old = sc.q[y];
    sc.q[y] = old + p.learning_rate * (t.feedback - old);
    if constexpr (Grad) {
      sc.dq_da[y] = sc.dq_da[y] * (1.0 - p.learning_rate) + (t.feedback - old);
      sc.dq_dq0[y] *= 1.0 - p.learning_rate;
    }
    have_prev = true;
    prev = t.context;
  }
  return ll;
}

// Per-class natural parameters implied by one draw of standard normals.
inline ClassParams natural_from_draw(const std::vector<double>& x, const Layout& lay,
                                     const PanelDataset& data, int k, const double* eps) {
  ClassParams p = make_class_params(data);
  for (int l = 0; l < lay.latents_per_class; ++l) {
    const double v =
        x[lay.mean_index(k, l)] + std::exp(x[lay.logsd_index(k, l)]) * eps[l];
    int alt = -1;
    switch (lay.latent_family(l, &alt)) {
      case LatentFamily::gamma_ds: p.bias_ds[alt] = v; break;
      case LatentFamily::gamma_sp: p.bias_sp_shift[alt] = v; break;
      case LatentFamily::log_beta_ds: p.sensitivity_ds = std::exp(v); break;
      case LatentFamily::log_beta_sp: p.sensitivity_sp = std::exp(v); break;
      case LatentFamily::z_alpha: p.learning_rate = transform_alpha(v); break;
      case LatentFamily::z_q0: {
        const Q0Mode& q0 = data.alternatives[alt].q0;
        p.initial_q[alt] = transform_q0(v, q0.lower, q0.upper);
        break;
      }
    }
  }
  return p;
}

template <bool WithGrad>
double evaluate_elbo(const std::vector<double>& x, const Layout& lay, const PanelDataset& data,
                     const ModelSpec& spec, int mc_samples, int threads, std::uint64_t seed,
                     std::vector<double>* grad, KlBreakdown* kl_out) {
  if (static_cast<int>(x.size()) != lay.total) fail("elbo: parameter vector length mismatch");
  if (mc_samples < 1) fail("elbo: mc_samples must be >= 1");
  for (int i = 0; i < lay.total; ++i)
    if (!std::isfinite(x[i]))
      fail("elbo: non-finite variational parameter " + lay.labels[i]);
  const int K = lay.class_count;
  const int N = lay.n_respondents;
  const int d = lay.covariate_dim;
  const int n_alt = lay.n_alternatives;
  const int S = mc_samples;
  const int Lc = lay.latents_per_class;
  const int fg = 3 * n_alt + 3;  // flat natural-gradient block per (sample, class)
  const int eps_n = lay.eps_per_sample();
  const bool has_eta = K > 1 && d > 0;

  if constexpr (WithGrad) grad->assign(lay.total, 0.0);

  // One fixed draw layout: per sample, class latents then eta coordinates.
  Rng rng(seed);
  std::vector<double> eps(static_cast<std::size_t>(S) * eps_n);
  for (auto& e : eps) e = rng.normal();

  // Natural parameters per (sample, class), and eta draws per (sample, class-1).
  std::vector<ClassParams> nat(static_cast<std::size_t>(S) * K);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k)
      nat[s * K + k] =
          natural_from_draw(x, lay, data, k, eps.data() + s * eps_n + k * Lc);

  std::vector<double> eta_draw;  // [s][j][a]
  if (has_eta) {
    // Lower-triangular scale factors are draw-independent; build them once.
    std::vector<double> chol;  // [j][a][b], row-major dense per class
    if (lay.eta_full_covariance) {
      chol.assign(static_cast<std::size_t>(K - 1) * d * d, 0.0);
      for (int j = 0; j + 1 < K; ++j)
        for (int a = 0; a < d; ++a) {
          chol[(j * d + a) * d + a] = std::exp(x[lay.eta_scale_index(j, a)]);
          for (int b = 0; b < a; ++b)
            chol[(j * d + a) * d + b] = x[lay.eta_chol_index(j, a, b)];
        }
    }
    eta_draw.assign(static_cast<std::size_t>(S) * (K - 1) * d, 0.0);
    for (int s = 0; s < S; ++s)
      for (int j = 0; j + 1 < K; ++j) {
        const double* ej = eps.data() + s * eps_n + K * Lc + j * d;
        double* out = eta_draw.data() + (static_cast<std::size_t>(s) * (K - 1) + j) * d;
        for (int a = 0; a < d; ++a) {
          if (!lay.eta_full_covariance) {
            out[a] = x[lay.eta_mean_index(j, a)] +
                     std::exp(x[lay.eta_scale_index(j, a)]) * ej[a];
          } else {
            double v = x[lay.eta_mean_index(j, a)];
            for (int b = 0; b <= a; ++b) v += chol[(j * d + a) * d + b] * ej[b];
            out[a] = v;
          }
        }
      }
  }

  // Per-respondent partial results; reduced later in index order so the
  // result is identical for any thread count.
  std::vector<double> elbo_n(N, 0.0);
  std::vector<double> avg_nk(static_cast<std::size_t>(N) * K, 0.0);
  std::vector<double> natg, etag;
  if constexpr (WithGrad) {
    natg.assign(static_cast<std::size_t>(N) * S * K * fg, 0.0);
    if (has_eta) etag.assign(static_cast<std::size_t>(N) * S * (K - 1) * d, 0.0);
  }

  parallel_chunks(static_cast<std::size_t>(N), threads, [&](std::size_t lo, std::size_t hi) {
    LoglikScratch sc;
    std::vector<double> pi(K), rho(K), logm(K), gk(K);
    for (std::size_t n = lo; n < hi; ++n) {
      const Respondent& r = data.respondents[n];
      if (K > 1) {
        softmax(std::span<const double>(x.data() + lay.pi_index(static_cast<int>(n), 0), K),
                pi);
      } else {
        pi[0] = 1.0;
      }
      double* an = avg_nk.data() + n * K;
      for (int s = 0; s < S; ++s) {
        if (K > 1) {
          if (has_eta) {
            const double* ed =
                eta_draw.data() + (static_cast<std::size_t>(s) * (K - 1)) * d;
            for (int j = 0; j + 1 < K; ++j) {
              double dot = 0.0;
              for (int a = 0; a < d; ++a) dot += ed[j * d + a] * r.covariates[a];
              rho[j] = dot;
            }
          } else {
            for (int j = 0; j + 1 < K; ++j) rho[j] = 0.0;
          }
          rho[K - 1] = 0.0;
          const double lse_m = log_sum_exp(rho);
          for (int k = 0; k < K; ++k) logm[k] = rho[k] - lse_m;
        } else {
          logm[0] = 0.0;
        }
        for (int k = 0; k < K; ++k) {
          double* gslice = nullptr;
          if constexpr (WithGrad)
            gslice = natg.data() + ((n * S + s) * K + k) * fg;
          const double ll = sequence_loglik_grad<WithGrad>(
              nat[s * K + k], r.trials, data.outcome_polarity, spec.reset_q_on_context_switch,
              pi[k] / S, gslice, sc);
          an[k] += (logm[k] + ll) / S;
        }
        if constexpr (WithGrad) {
          if (has_eta) {
            double* eg = etag.data() + (n * S + s) * (K - 1) * d;
            for (int j = 0; j + 1 < K; ++j) {
              const double c = (pi[j] - std::exp(logm[j])) / S;
              for (int a = 0; a < d; ++a) eg[j * d + a] += c * r.covariates[a];
            }
          }
        }
      }
      double mix = 0.0, entropy = 0.0;
      for (int k = 0; k < K; ++k) {
        mix += pi[k] * an[k];
        if (pi[k] > 0.0) entropy -= pi[k] * std::log(pi[k]);
      }
      elbo_n[n] = mix + entropy;
      if constexpr (WithGrad) {
        if (K > 1) {
          // d elbo / d logit_j = pi_j (g_j - sum_k pi_k g_k), g_k = an_k - log pi_k.
          double mean_g = 0.0;
          for (int k = 0; k < K; ++k) {
            gk[k] = pi[k] > 0.0 ? an[k] - std::log(pi[k]) : 0.0;
            mean_g += pi[k] * gk[k];
          }
          for (int k = 0; k < K; ++k)
            (*grad)[lay.pi_index(static_cast<int>(n), k)] = pi[k] * (gk[k] - mean_g);
        }
      }
    }
  });

  double value = 0.0;
  for (int n = 0; n < N; ++n) value += elbo_n[n];

  if constexpr (WithGrad) {
    // Ordered reduction of per-respondent contributions, then one chain-rule
    // pass per (sample, class) from natural parameters to coordinates.
    std::vector<double> gnat(static_cast<std::size_t>(S) * K * fg, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* src = natg.data() + static_cast<std::size_t>(n) * S * K * fg;
      for (std::size_t i = 0; i < gnat.size(); ++i) gnat[i] += src[i];
    }
    std::vector<double> geta;
    if (has_eta) {
      geta.assign(static_cast<std::size_t>(S) * (K - 1) * d, 0.0);
      for (int n = 0; n < N; ++n) {
        const double* src = etag.data() + static_cast<std::size_t>(n) * S * (K - 1) * d;
        for (std::size_t i = 0; i < geta.size(); ++i) geta[i] += src[i];
      }
    }

    for (int s = 0; s < S; ++s)
      for (int k = 0; k < K; ++k) {
        const double* g = gnat.data() + (static_cast<std::size_t>(s) * K + k) * fg;
        const ClassParams& np = nat[s * K + k];
        const double* ek = eps.data() + s * eps_n + k * Lc;
        for (int l = 0; l < Lc; ++l) {
          int alt = -1;
          double gl = 0.0;
          switch (lay.latent_family(l, &alt)) {
            case LatentFamily::gamma_ds: gl = g[alt]; break;
            case LatentFamily::gamma_sp: gl = g[n_alt + alt]; break;
            case LatentFamily::log_beta_ds: gl = g[3 * n_alt] * np.sensitivity_ds; break;
            case LatentFamily::log_beta_sp: gl = g[3 * n_alt + 1] * np.sensitivity_sp; break;
            case LatentFamily::z_alpha:
              gl = g[3 * n_alt + 2] * np.learning_rate * (1.0 - np.learning_rate);
              break;
            case LatentFamily::z_q0: {
              const Q0Mode& q0 = data.alternatives[alt].q0;
              const double sig = (np.initial_q[alt] - q0.lower) / (q0.upper - q0.lower);
              gl = g[2 * n_alt + alt] * (q0.upper - q0.lower) * sig * (1.0 - sig);
              break;
            }
          }
          (*grad)[lay.mean_index(k, l)] += gl;
          (*grad)[lay.logsd_index(k, l)] +=
              gl * ek[l] * std::exp(x[lay.logsd_index(k, l)]);
        }
      }

    if (has_eta)
      for (int s = 0; s < S; ++s)
        for (int j = 0; j + 1 < K; ++j) {
          const double* g = geta.data() + (static_cast<std::size_t>(s) * (K - 1) + j) * d;
          const double* ej = eps.data() + s * eps_n + K * Lc + j * d;
          for (int a = 0; a < d; ++a) {
            (*grad)[lay.eta_mean_index(j, a)] += g[a];
            (*grad)[lay.eta_scale_index(j, a)] +=
                g[a] * ej[a] * std::exp(x[lay.eta_scale_index(j, a)]);
            if (lay.eta_full_covariance)
              for (int b = 0; b < a; ++b) (*grad)[lay.eta_chol_index(j, a, b)] += g[a] * ej[b];
          }
        }
  }

  std::vector<double> kl_grad;
  KlBreakdown kl;
  if constexpr (WithGrad) {
    kl_grad.assign(lay.total, 0.0);
    kl = accumulate_kl(x, lay, spec.priors, &kl_grad);
    for (int i = 0; i < lay.total; ++i) (*grad)[i] -= kl_grad[i];
  } else {
    kl = accumulate_kl(x, lay, spec.priors, nullptr);
  }
  value -= kl.total();
  if (kl_out) *kl_out = kl;

  if (!std::isfinite(value)) fail("elbo: value is not finite");
  if constexpr (WithGrad) {
    for (int i = 0; i < lay.total; ++i)
      if (!std::isfinite((*grad)[i]))
        fail("elbo: non-finite gradient at coordinate " + lay.labels[i]);
  }
  return value;
}

}  // namespace detail

inline double elbo(const std::vector<double>& x, const Layout& lay, const PanelDataset& data,
                   const ModelSpec& spec, const VariationalOptions& opts, std::uint64_t seed,
                   KlBreakdown* kl_out = nullptr) {
  return detail::evaluate_elbo<false>(x, lay, data, spec, opts.mc_samples, opts.threads, seed,
                                      nullptr, kl_out);
}

inline double elbo_gradient(const std::vector<double>& x, const Layout& lay,
                            const PanelDataset& data, const ModelSpec& spec,
                            const VariationalOptions& opts, std::uint64_t seed,
                            std::vector<double>& grad) {
  return detail::evaluate_elbo<true>(x, lay, data, spec, opts.mc_samples, opts.threads, seed,
                                     &grad, nullptr);
}

inline KlBreakdown kl_terms(const std::vector<double>& x, const Layout& lay,
                            const PriorSpec& priors) {
  return detail::accumulate_kl(x, lay, priors, nullptr);
}

// Posterior class memberships held by the variational factors q(s_n).
inline std::vector<std::vector<double>> variational_memberships(const std::vector<double>& x,
                                                                const Layout& lay) {
  std::vector<std::vector<double>> out(lay.n_respondents);
  for (int n = 0; n < lay.n_respondents; ++n) {
    if (lay.class_count == 1) {
      out[n] = {1.0};
    } else {
      out[n] = softmax(std::span<const double>(x.data() + lay.pi_index(n, 0), lay.class_count));
    }
  }
  return out;
}

// Natural-space parameters at the variational means (transforms applied to
// the mean coordinates; no Jensen correction).
inline PointParams natural_point(const std::vector<double>& x, const Layout& lay,
                                 const PanelDataset& data) {
  PointParams p;
  p.classes.resize(lay.class_count);
  for (int k = 0; k < lay.class_count; ++k) {
    std::vector<double> zero(lay.latents_per_class, 0.0);
    p.classes[k] = detail::natural_from_draw(x, lay, data, k, zero.data());
  }
  if (lay.class_count > 1) {
    p.eta.weights.assign(lay.class_count - 1, std::vector<double>(lay.covariate_dim, 0.0));
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a)
        p.eta.weights[j][a] = x[lay.eta_mean_index(j, a)];
  }
  return p;
}

// Writes mean coordinates so that natural_point(x) reproduces the given
// parameters. Scale coordinates are left untouched.
inline void set_means_from_point(std::vector<double>& x, const Layout& lay,
                                 const PanelDataset& data, const PointParams& p) {
  for (int k = 0; k < lay.class_count; ++k) {
    const ClassParams& c = p.classes[k];
    for (int l = 0; l < lay.latents_per_class; ++l) {
      int alt = -1;
      double v = 0.0;
      switch (lay.latent_family(l, &alt)) {
        case LatentFamily::gamma_ds: v = c.bias_ds[alt]; break;
        case LatentFamily::gamma_sp: v = c.bias_sp_shift[alt]; break;
        case LatentFamily::log_beta_ds: v = std::log(c.sensitivity_ds); break;
        case LatentFamily::log_beta_sp: v = std::log(c.sensitivity_sp); break;
        case LatentFamily::z_alpha: v = inverse_transform_alpha(c.learning_rate); break;
        case LatentFamily::z_q0: {
          const Q0Mode& q0 = data.alternatives[alt].q0;
          v = inverse_transform_q0(c.initial_q[alt], q0.lower, q0.upper);
          break;
        }
      }
      x[lay.mean_index(k, l)] = v;
    }
  }
  if (lay.class_count > 1)
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a)
        x[lay.eta_mean_index(j, a)] = p.eta.weights[j][a];
}

}  // namespace lcrl

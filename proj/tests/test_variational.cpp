#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lcrl/variational.hpp"

using namespace lcrl;

namespace {

PanelDataset small_panel(int n_respondents, int n_trials, bool estimated_q0 = true) {
  PanelDataset data;
  data.alternatives.push_back({1, "reliable", Q0Mode::fixed(5.0), false});
  data.alternatives.push_back(
      {2, "unreliable", estimated_q0 ? Q0Mode::estimated(2.0, 7.0) : Q0Mode::fixed(5.0), true});
  data.outcome_polarity = Polarity::cost;
  Rng rng(7);
  for (int n = 0; n < n_respondents; ++n) {
    Respondent r;
    r.id = "r" + std::to_string(n + 1);
    r.covariates = {1.0, rng.uniform01() < 0.5 ? 0.0 : 1.0};
    for (int t = 1; t <= n_trials; ++t) {
      Trial trial;
      trial.index = t;
      trial.context = t <= n_trials / 2 ? Context::ds : Context::sp;
      trial.chosen = rng.uniform01() < 0.5 ? 1 : 2;
      trial.feedback = trial.chosen == 1 ? 5.0 : (rng.uniform01() < 0.6 ? 2.0 : 7.0);
      r.trials.push_back(trial);
    }
    data.respondents.push_back(std::move(r));
  }
  return data;
}

ModelSpec two_cov_spec(int k) {
  ModelSpec spec;
  spec.class_count = k;
  spec.covariate_names = {"const", "x"};
  return spec;
}

const NormalPrior& prior_for(LatentFamily fam, const PriorSpec& pr) {
  switch (fam) {
    case LatentFamily::gamma_ds:
    case LatentFamily::gamma_sp: return pr.gamma;
    case LatentFamily::log_beta_ds:
    case LatentFamily::log_beta_sp: return pr.log_beta;
    case LatentFamily::z_alpha: return pr.z_alpha;
    default: return pr.z_q0;
  }
}

// State with every continuous factor set exactly to its prior and uniform
// class responsibilities.
std::vector<double> prior_state(const Layout& lay, const PriorSpec& pr) {
  std::vector<double> x(lay.total, 0.0);
  for (int k = 0; k < lay.class_count; ++k)
    for (int l = 0; l < lay.latents_per_class; ++l) {
      const NormalPrior& p = prior_for(lay.latent_family(l), pr);
      x[lay.mean_index(k, l)] = p.mean;
      x[lay.logsd_index(k, l)] = std::log(p.sd);
    }
  if (lay.class_count > 1)
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a) {
        x[lay.eta_mean_index(j, a)] = pr.eta.mean;
        x[lay.eta_scale_index(j, a)] = std::log(pr.eta.sd);
        // full-covariance off-diagonals stay 0
      }
  return x;
}

// A generic non-prior state with distinct values everywhere, kept mild so
// likelihoods stay well-scaled.
std::vector<double> wiggled_state(const Layout& lay, const PriorSpec& pr, std::uint64_t seed) {
  std::vector<double> x = prior_state(lay, pr);
  Rng rng(seed);
  for (double& v : x) v += 0.3 * rng.normal();
  // keep variational sds moderate so MC samples stay in sane ranges
  for (int k = 0; k < lay.class_count; ++k)
    for (int l = 0; l < lay.latents_per_class; ++l)
      x[lay.logsd_index(k, l)] = -1.0 + 0.2 * rng.normal();
  if (lay.class_count > 1)
    for (int j = 0; j + 1 < lay.class_count; ++j)
      for (int a = 0; a < lay.covariate_dim; ++a)
        x[lay.eta_scale_index(j, a)] = -1.0 + 0.2 * rng.normal();
  return x;
}

}  // namespace

TEST_CASE("constraint transforms hit their documented midpoints and invert") {
  REQUIRE(transform_alpha(0.0) == 0.5);
  REQUIRE(transform_q0(0.0, 2.0, 7.0) == Catch::Approx(4.5).margin(1e-14));
  REQUIRE(inverse_transform_alpha(transform_alpha(1.7)) == Catch::Approx(1.7).margin(1e-12));
  REQUIRE(inverse_transform_q0(transform_q0(1.7, 2.0, 7.0), 2.0, 7.0) ==
          Catch::Approx(1.7).margin(1e-12));
  // strict monotonicity spot check
  REQUIRE(transform_alpha(-1.0) < transform_alpha(-0.999));
  REQUIRE(transform_q0(0.2, 2.0, 7.0) < transform_q0(0.3, 2.0, 7.0));
}

TEST_CASE("elbo is exactly zero with no data and q at the prior") {
  for (int K : {1, 2}) {
    PanelDataset data = small_panel(0, 0);
    ModelSpec spec = two_cov_spec(K);
    const Layout lay = Layout::make(data, spec);
    const std::vector<double> x = prior_state(lay, spec.priors);
    VariationalOptions opts;
    REQUIRE(elbo(x, lay, data, spec, opts, 123) == 0.0);
  }
}

TEST_CASE("elbo is exactly zero with no data under full-covariance eta") {
  PanelDataset data = small_panel(0, 0);
  ModelSpec spec = two_cov_spec(3);
  const Layout lay = Layout::make(data, spec, true);
  const std::vector<double> x = prior_state(lay, spec.priors);
  VariationalOptions opts;
  opts.eta_full_covariance = true;
  REQUIRE(elbo(x, lay, data, spec, opts, 5) == 0.0);
}

TEST_CASE("near-delta single-class elbo recovers the point log-likelihood") {
  PanelDataset data = small_panel(5, 6);
  ModelSpec spec = two_cov_spec(1);
  const Layout lay = Layout::make(data, spec);

  PointParams p;
  ClassParams c = make_class_params(data);
  c.bias_ds = {0.4, 0.0};
  c.bias_sp_shift = {-0.2, 0.0};
  c.sensitivity_ds = 0.8;
  c.sensitivity_sp = 1.2;
  c.learning_rate = 0.3;
  c.initial_q[1] = 4.0;
  p.classes = {c};

  std::vector<double> x(lay.total, 0.0);
  set_means_from_point(x, lay, data, p);
  for (int l = 0; l < lay.latents_per_class; ++l) x[lay.logsd_index(0, l)] = std::log(1e-4);

  VariationalOptions opts;
  opts.mc_samples = 10000;
  KlBreakdown kl;
  const double e = elbo(x, lay, data, spec, opts, 17, &kl);
  const double ll = mixture_loglik(p, data);
  // E_q[loglik] collapses onto the point value; adding back the closed-form
  // KL should reproduce the mixture log-likelihood up to MC error.
  REQUIRE(e + kl.total() == Catch::Approx(ll).margin(0.01));
}

TEST_CASE("elbo never exceeds the quadrature marginal likelihood on a 1-D model") {
  // Single DS trial with both initial expectations fixed and equal: the
  // sensitivity cancels by softmax shift invariance, the learning rate never
  // acts, and the SP shift is unused, so the likelihood depends only on the
  // free DS bias. The evidence is then a 1-D integral we can trapezoid.
  PanelDataset data;
  data.alternatives.push_back({1, "a", Q0Mode::fixed(5.0), false});
  data.alternatives.push_back({2, "b", Q0Mode::fixed(5.0), true});
  data.outcome_polarity = Polarity::cost;
  Respondent r;
  r.id = "r1";
  r.covariates = {1.0, 0.0};
  r.trials.push_back({1, Context::ds, 1, 5.0});
  data.respondents.push_back(r);

  ModelSpec spec = two_cov_spec(1);
  const Layout lay = Layout::make(data, spec);

  // log evidence = log Int sigmoid(g) Normal(g; prior) dg, with posterior
  // moments from the same grid
  const NormalPrior& pg = spec.priors.gamma;
  const int grid = 20001;
  const double lo = pg.mean - 10.0 * pg.sd, hi = pg.mean + 10.0 * pg.sd;
  const double h = (hi - lo) / (grid - 1);
  double evidence = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < grid; ++i) {
    const double g = lo + i * h;
    const double dens = std::exp(-0.5 * std::pow((g - pg.mean) / pg.sd, 2)) /
                        (pg.sd * std::sqrt(2.0 * M_PI));
    const double w = ((i == 0 || i == grid - 1) ? 0.5 : 1.0) * h * sigmoid(g) * dens;
    evidence += w;
    m1 += w * g;
    m2 += w * g * g;
  }
  const double log_evidence = std::log(evidence);
  const double post_mean = m1 / evidence;
  const double post_sd = std::sqrt(m2 / evidence - post_mean * post_mean);

  VariationalOptions opts;
  opts.mc_samples = 4000;
  for (std::uint64_t s : {1, 2, 3, 4, 5}) {
    std::vector<double> x = wiggled_state(lay, spec.priors, s);
    REQUIRE(elbo(x, lay, data, spec, opts, 1000 + s) <= log_evidence + 0.05);
  }
  // and the bound is demonstrably informative: a moment-matched q(gamma)
  // with the other factors at their priors comes close to it
  std::vector<double> x = prior_state(lay, spec.priors);
  x[lay.mean_index(0, 0)] = post_mean;
  x[lay.logsd_index(0, 0)] = std::log(post_sd);
  const double matched = elbo(x, lay, data, spec, opts, 99);
  REQUIRE(matched <= log_evidence + 0.05);
  REQUIRE(matched >= log_evidence - 0.2);
}

TEST_CASE("kl terms are nonnegative and vanish exactly at the prior") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  std::vector<double> x = prior_state(lay, spec.priors);

  KlBreakdown at_prior = kl_terms(x, lay, spec.priors);
  REQUIRE(at_prior.gamma == 0.0);
  REQUIRE(at_prior.eta == 0.0);
  REQUIRE(at_prior.z_alpha == 0.0);
  REQUIRE(at_prior.z_q0 == 0.0);
  REQUIRE(at_prior.log_beta == 0.0);

  // perturbing one factor moves only that component, and upward
  auto perturbed = [&](int index, double delta) {
    std::vector<double> y = x;
    y[index] += delta;
    return kl_terms(y, lay, spec.priors);
  };
  KlBreakdown g = perturbed(lay.mean_index(0, 0), 0.7);  // free DS bias mean
  REQUIRE(g.gamma > 0.0);
  REQUIRE(g.eta == 0.0);
  REQUIRE(g.z_alpha == 0.0);

  // z_alpha is latent index 2*free_gamma + 2
  const int za = 2 * static_cast<int>(lay.free_gamma.size()) + 2;
  KlBreakdown a = perturbed(lay.logsd_index(0, za), -0.5);
  REQUIRE(a.z_alpha > 0.0);
  REQUIRE(a.gamma == 0.0);

  KlBreakdown e = perturbed(lay.eta_mean_index(0, 1), 0.4);
  REQUIRE(e.eta > 0.0);
  REQUIRE(e.gamma == 0.0);

  KlBreakdown b = perturbed(lay.mean_index(1, za - 1), 0.3);  // log_beta_sp mean
  REQUIRE(b.log_beta > 0.0);

  KlBreakdown q = perturbed(lay.mean_index(1, za + 1), 0.3);  // z_q0 mean
  REQUIRE(q.z_q0 > 0.0);
}

namespace {

// Central finite differences with common random numbers: the elbo is a
// deterministic function of x once the seed is fixed, so its analytic
// gradient must match difference quotients of the same estimator.
void check_gradient(const PanelDataset& data, const ModelSpec& spec, const Layout& lay,
                    std::vector<double> x, const VariationalOptions& opts) {
  const std::uint64_t seed = 4242;
  std::vector<double> g;
  elbo_gradient(x, lay, data, spec, opts, seed, g);
  const double step = 1e-4;
  for (int i = 0; i < lay.total; ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = elbo(x, lay, data, spec, opts, seed);
    x[i] = keep - step;
    const double dn = elbo(x, lay, data, spec, opts, seed);
    x[i] = keep;
    const double fd = (up - dn) / (2.0 * step);
    const double tol = std::max(1e-7, 1e-4 * std::abs(fd));
    INFO("coordinate " << lay.labels[i]);
    REQUIRE_THAT(g[i], Catch::Matchers::WithinAbs(fd, tol));
  }
}

}  // namespace

TEST_CASE("gradient matches finite differences (diagonal eta)") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  VariationalOptions opts;
  opts.mc_samples = 8;
  check_gradient(data, spec, lay, wiggled_state(lay, spec.priors, 11), opts);
}

TEST_CASE("gradient matches finite differences (full-covariance eta)") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec, true);
  VariationalOptions opts;
  opts.mc_samples = 8;
  opts.eta_full_covariance = true;
  std::vector<double> x = wiggled_state(lay, spec.priors, 13);
  // exercise the off-diagonal Cholesky entries too
  x[lay.eta_chol_index(0, 1, 0)] = 0.35;
  check_gradient(data, spec, lay, x, opts);
}

TEST_CASE("gradient matches finite differences with a context-switch reset") {
  PanelDataset data = small_panel(3, 6);
  ModelSpec spec = two_cov_spec(2);
  spec.reset_q_on_context_switch = true;
  const Layout lay = Layout::make(data, spec);
  VariationalOptions opts;
  opts.mc_samples = 8;
  check_gradient(data, spec, lay, wiggled_state(lay, spec.priors, 19), opts);
}

TEST_CASE("gradient matches finite differences for the single-class model") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(1);
  const Layout lay = Layout::make(data, spec);
  VariationalOptions opts;
  opts.mc_samples = 8;
  check_gradient(data, spec, lay, wiggled_state(lay, spec.priors, 23), opts);
}

TEST_CASE("a class nobody occupies only feels its prior pull") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  std::vector<double> x = wiggled_state(lay, spec.priors, 29);
  // responsibilities pinned (numerically) to class 1 for everyone
  for (int n = 0; n < lay.n_respondents; ++n) {
    x[lay.pi_index(n, 0)] = -40.0;
    x[lay.pi_index(n, 1)] = 40.0;
  }
  VariationalOptions opts;
  opts.mc_samples = 16;
  std::vector<double> g;
  elbo_gradient(x, lay, data, spec, opts, 31, g);
  // gradients on the empty class's latents reduce to the closed-form KL part
  for (int l = 0; l < lay.latents_per_class; ++l) {
    const NormalPrior& pr = prior_for(lay.latent_family(l), spec.priors);
    double dmu = 0.0, dlogsd = 0.0;
    detail::normal_kl(x[lay.mean_index(0, l)], x[lay.logsd_index(0, l)], pr, &dmu, &dlogsd);
    INFO("latent " << lay.labels[lay.mean_index(0, l)]);
    REQUIRE_THAT(g[lay.mean_index(0, l)], Catch::Matchers::WithinAbs(-dmu, 1e-10));
    REQUIRE_THAT(g[lay.logsd_index(0, l)], Catch::Matchers::WithinAbs(-dlogsd, 1e-10));
  }
}

TEST_CASE("zero-data gradient vanishes at the prior") {
  PanelDataset data = small_panel(0, 0);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  const std::vector<double> x = prior_state(lay, spec.priors);
  VariationalOptions opts;
  std::vector<double> g;
  elbo_gradient(x, lay, data, spec, opts, 77, g);
  for (int i = 0; i < lay.total; ++i) {
    INFO("coordinate " << lay.labels[i]);
    REQUIRE_THAT(g[i], Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
}

TEST_CASE("non-finite variational parameters are reported by name") {
  PanelDataset data = small_panel(2, 3);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  std::vector<double> x = prior_state(lay, spec.priors);
  const int za = 2 * static_cast<int>(lay.free_gamma.size()) + 2;
  x[lay.mean_index(0, za)] = std::nan("");
  VariationalOptions opts;
  REQUIRE_THROWS_WITH(elbo(x, lay, data, spec, opts, 3),
                      Catch::Matchers::ContainsSubstring("class[0].z_alpha.mu"));
}

TEST_CASE("elbo and gradient are bitwise identical across thread counts") {
  PanelDataset data = small_panel(7, 5);
  ModelSpec spec = two_cov_spec(3);
  const Layout lay = Layout::make(data, spec);
  const std::vector<double> x = wiggled_state(lay, spec.priors, 41);

  VariationalOptions base;
  base.mc_samples = 12;
  base.threads = 1;
  std::vector<double> g1;
  const double e1 = elbo_gradient(x, lay, data, spec, base, 55, g1);
  for (int threads : {2, 3, 8}) {
    VariationalOptions opts = base;
    opts.threads = threads;
    std::vector<double> g;
    const double e = elbo_gradient(x, lay, data, spec, opts, 55, g);
    REQUIRE(e == e1);
    REQUIRE(g == g1);
  }
}

TEST_CASE("exact class enumeration agrees with a sampled-assignment estimator") {
  // Oracle variant: instead of enumerating classes inside the expectation,
  // sample s_n from q(s_n) per Monte-Carlo draw. Both estimate the same
  // ELBO; the enumeration value must sit within the sampler's error bars.
  PanelDataset data = small_panel(2, 3);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  const std::vector<double> x = wiggled_state(lay, spec.priors, 61);
  const int K = lay.class_count, d = lay.covariate_dim, Lc = lay.latents_per_class;

  VariationalOptions opts;
  opts.mc_samples = 8192;
  const double enumerated = elbo(x, lay, data, spec, opts, 303);

  const KlBreakdown kl = kl_terms(x, lay, spec.priors);
  Rng rng(909);
  const int S = 20000;
  double sum = 0.0, sumsq = 0.0;
  std::vector<double> eps(lay.eps_per_sample());
  for (int s = 0; s < S; ++s) {
    for (auto& e : eps) e = rng.normal();
    std::vector<ClassParams> nat(K);
    for (int k = 0; k < K; ++k)
      nat[k] = detail::natural_from_draw(x, lay, data, k, eps.data() + k * Lc);
    MembershipParams eta;
    eta.weights.assign(K - 1, std::vector<double>(d, 0.0));
    for (int j = 0; j + 1 < K; ++j)
      for (int a = 0; a < d; ++a)
        eta.weights[j][a] = x[lay.eta_mean_index(j, a)] +
                            std::exp(x[lay.eta_scale_index(j, a)]) * eps[K * Lc + j * d + a];
    double draw = 0.0;
    for (int n = 0; n < lay.n_respondents; ++n) {
      const Respondent& r = data.respondents[n];
      const auto pi = softmax(std::span<const double>(x.data() + lay.pi_index(n, 0), K));
      const int sn = rng.categorical(pi);
      const auto m = membership_probabilities(eta, r.covariates);
      draw += std::log(m[sn]) +
              sequence_loglik(nat[sn], r.trials, data.outcome_polarity) - std::log(pi[sn]);
    }
    sum += draw;
    sumsq += draw * draw;
  }
  const double mean = sum / S;
  const double se = std::sqrt((sumsq / S - mean * mean) / S);
  REQUIRE(std::abs(enumerated - (mean - kl.total())) < 4.0 * se);
}

TEST_CASE("variational memberships read back the responsibility softmax") {
  PanelDataset data = small_panel(3, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);
  std::vector<double> x = prior_state(lay, spec.priors);
  x[lay.pi_index(1, 0)] = 1.0;
  x[lay.pi_index(1, 1)] = -1.0;
  const auto m = variational_memberships(x, lay);
  REQUIRE(m.size() == 3);
  REQUIRE(m[0][0] == Catch::Approx(0.5).margin(1e-14));
  REQUIRE(m[1][0] == Catch::Approx(sigmoid(2.0)).margin(1e-12));

  // single class: trivially one
  ModelSpec s1 = two_cov_spec(1);
  const Layout l1 = Layout::make(data, s1);
  const auto m1 = variational_memberships(std::vector<double>(l1.total, 0.0), l1);
  REQUIRE(m1[0] == std::vector<double>{1.0});
}

TEST_CASE("natural point and set-means round-trip through the transforms") {
  PanelDataset data = small_panel(2, 4);
  ModelSpec spec = two_cov_spec(2);
  const Layout lay = Layout::make(data, spec);

  PointParams p;
  for (int k = 0; k < 2; ++k) {
    ClassParams c = make_class_params(data);
    c.bias_ds = {0.5 - k, 0.0};
    c.bias_sp_shift = {0.1 * (k + 1), 0.0};
    c.sensitivity_ds = 0.7 + 0.4 * k;
    c.sensitivity_sp = 1.1;
    c.learning_rate = 0.25 + 0.3 * k;
    c.initial_q[1] = 3.0 + k;
    p.classes.push_back(c);
  }
  p.eta.weights = {{0.4, -0.6}};

  std::vector<double> x(lay.total, 0.0);
  set_means_from_point(x, lay, data, p);
  const PointParams back = natural_point(x, lay, data);
  for (int k = 0; k < 2; ++k) {
    REQUIRE(back.classes[k].bias_ds[0] == Catch::Approx(p.classes[k].bias_ds[0]).margin(1e-12));
    REQUIRE(back.classes[k].sensitivity_ds ==
            Catch::Approx(p.classes[k].sensitivity_ds).margin(1e-12));
    REQUIRE(back.classes[k].learning_rate ==
            Catch::Approx(p.classes[k].learning_rate).margin(1e-12));
    REQUIRE(back.classes[k].initial_q[1] ==
            Catch::Approx(p.classes[k].initial_q[1]).margin(1e-12));
  }
  REQUIRE(back.eta.weights[0][1] == Catch::Approx(-0.6).margin(1e-12));
}

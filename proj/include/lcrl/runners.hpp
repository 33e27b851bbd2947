#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lcrl/config.hpp"
#include "lcrl/csv.hpp"
#include "lcrl/evaluation.hpp"
#include "lcrl/fit.hpp"
#include "lcrl/latent_class.hpp"
#include "lcrl/model.hpp"
#include "lcrl/simulate.hpp"
#include "lcrl/variational.hpp"

namespace lcrl {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNonConvergence = 3;

namespace detail {

inline std::string fmt3(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline void write_json_file(const std::string& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

inline void write_text_file(const std::string& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

// The only timestamped artifact; everything else is byte-stable per seed.
inline void write_run_metadata(const RunConfig& cfg, const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  write_json_file(cfg.out_dir + "/run_metadata.json",
                  json{{"command", command},
                       {"timestamp_utc", stamp},
                       {"dataset", cfg.dataset_path},
                       {"out", cfg.out_dir}});
}

inline void prepare_out_dir(const RunConfig& cfg, const std::string& command) {
  std::filesystem::create_directories(cfg.out_dir);
  write_json_file(cfg.out_dir + "/effective_config.json", run_config_to_json(cfg));
  write_run_metadata(cfg, command);
}

// Synthetic template panel per the config's covariate draws. Every model
// covariate must have a draw spec; the constant column defaults to 1.
inline PanelDataset build_template(const RunConfig& cfg, Rng& rng) {
  std::vector<CovariateSpec> draws;
  for (const std::string& name : cfg.model.covariate_names) {
    bool found = false;
    for (const CovariateSpec& cs : cfg.covariate_draws)
      if (cs.name == name) {
        draws.push_back(cs);
        found = true;
      }
    if (!found) {
      if (name == "const") {
        draws.push_back(CovariateSpec{name, CovariateSpec::Kind::constant, 1.0, 0.0});
      } else {
        fail("simulate: no covariate_draws entry for covariate '" + name + "'");
      }
    }
  }
  return make_template_dataset(cfg.alternatives, cfg.polarity, draws, cfg.sim_respondents,
                               cfg.sim_trials_ds, cfg.sim_trials_sp, rng);
}

inline PanelDataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset_path.empty()) fail("paths.dataset is required for this command");
  return read_panel_csv(cfg.dataset_path, cfg.alternatives, cfg.polarity,
                        cfg.model.covariate_names);
}

// Summary in canonical reporting order (classes sorted by descending share).
// Class blocks move wholesale; membership-weight rows are re-expressed
// against the new reference class, whose marginals under the factored
// posterior are exact (difference of independent normals).
inline PosteriorSummary canonical_summary(const VariationalState& state,
                                          const PanelDataset& data, const ModelSpec& spec,
                                          int n_samples, std::uint64_t seed,
                                          std::vector<int>& order_out) {
  PosteriorSummary raw = posterior_summary(state, data, spec, n_samples, seed);
  const Layout& lay = state.layout;
  const int K = lay.class_count;
  order_out = canonical_class_order(raw.class_shares);
  bool identity = true;
  for (int k = 0; k < K; ++k) identity = identity && order_out[k] == k;
  if (identity) return raw;

  PosteriorSummary out;
  out.class_shares.resize(K);
  for (int k = 0; k < K; ++k) out.class_shares[k] = raw.class_shares[order_out[k]];
  const int lc = lay.latents_per_class;
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < lc; ++l) {
      SummaryRow row = raw.rows[order_out[k] * lc + l];
      row.class_index = k;
      out.rows.push_back(std::move(row));
    }
  const int d = lay.covariate_dim;
  auto eta_mu = [&](int c, int a) {
    return c + 1 < K ? state.coords[lay.eta_mean_index(c, a)] : 0.0;
  };
  auto eta_sd = [&](int c, int a) { return c + 1 < K ? eta_marginal_sd(state, c, a) : 0.0; };
  for (int j = 0; j + 1 < K; ++j)
    for (int a = 0; a < d; ++a) {
      const int old_c = order_out[j], ref = order_out[K - 1];
      const double mean = eta_mu(old_c, a) - eta_mu(ref, a);
      const double sd = std::sqrt(eta_sd(old_c, a) * eta_sd(old_c, a) +
                                  eta_sd(ref, a) * eta_sd(ref, a));
      const std::string cov = a < static_cast<int>(spec.covariate_names.size())
                                  ? spec.covariate_names[a]
                                  : std::to_string(a);
      out.rows.push_back(make_row("eta[" + cov + "]", j, mean, sd));
    }
  return out;
}

inline json diagnostics_to_json(const FitDiagnostics& d, const std::vector<int>& class_order) {
  return json{{"elbo_trace", d.trace},
              {"iterations", d.iterations},
              {"seed", d.seed},
              {"restart_index", d.restart_index},
              {"converged", d.converged},
              {"best_elbo", d.best_elbo},
              {"restart_elbos", d.restart_elbos},
              {"restart_errors", d.restart_errors},
              {"class_order", class_order}};
}

struct FitArtifacts {
  FitStats stats;
  bool converged = false;
};

// Everything cli_fit leaves behind, reused per-K by cli_compare.
inline FitArtifacts write_fit_artifacts(const RunConfig& cfg, const std::string& dir,
                                        const PanelDataset& data, const FitResult& result) {
  std::filesystem::create_directories(dir);
  const VariationalState& state = result.state;

  std::vector<int> order;
  const PosteriorSummary summary = canonical_summary(
      state, data, cfg.model, cfg.optimizer.summary_samples, cfg.model.rng_seed, order);
  {
    auto out = open_out(dir + "/posterior_summary.csv");
    write_summary_csv(out, summary);
  }

  // Reported memberships are Bayes-rule posteriors at the posterior means,
  // in the canonical class order (same permutation as the summary).
  const PointParams point = posterior_point(state, data);
  const PointParams canonical_point = apply_class_permutation(point, order);
  std::vector<std::vector<double>> memberships;
  memberships.reserve(data.respondents.size());
  for (const auto& r : data.respondents)
    memberships.push_back(posterior_memberships(canonical_point, r, data.outcome_polarity,
                                                cfg.model.reset_q_on_context_switch));
  {
    auto out = open_out(dir + "/memberships.csv");
    write_memberships_csv(out, data, memberships);
  }

  const double ll = mixture_loglik(point, data, cfg.model.reset_q_on_context_switch);
  const FitStats stats =
      fit_statistics(ll, count_parameters(cfg.model, data), data.total_trials());
  write_json_file(dir + "/fit_stats.json",
                  json{{"ll", stats.ll},
                       {"ll_point", "mixture log-likelihood at posterior means"},
                       {"parameters", stats.k},
                       {"observations", stats.n},
                       {"aic", stats.aic},
                       {"bic", stats.bic},
                       {"elbo", result.diagnostics.best_elbo}});
  write_json_file(dir + "/diagnostics.json", diagnostics_to_json(result.diagnostics, order));

  std::string rpt;
  rpt += "Model fit (K=" + std::to_string(cfg.model.class_count) + ")\n";
  rpt += "Respondents: " + std::to_string(data.respondents.size()) +
         "   Choice observations: " + std::to_string(stats.n) + "\n";
  rpt += "LL (at posterior means): " + fmt3(stats.ll) + "   Parameters: " +
         std::to_string(stats.k) + "   AIC: " + fmt3(stats.aic) + "   BIC: " + fmt3(stats.bic) +
         "\n";
  rpt += "ELBO: " + fmt3(result.diagnostics.best_elbo) +
         "   Converged: " + (result.diagnostics.converged ? "yes" : "no") +
         "   Restart: " + std::to_string(result.diagnostics.restart_index) + "\n";
  const Layout& lay = state.layout;
  for (int k = 0; k < lay.class_count; ++k) {
    rpt += "\nClass " + std::to_string(k + 1) + " (share " +
           fmt3(100.0 * summary.class_shares[k]) + "%)\n";
    for (int l = 0; l < lay.latents_per_class; ++l) {
      const SummaryRow& row = summary.rows[k * lay.latents_per_class + l];
      rpt += "  " + row.parameter + " = " + fmt3(row.mean) + " (z " +
             (row.point_mass ? std::string("inf") : fmt3(row.z)) + ")\n";
    }
  }
  for (std::size_t i = lay.class_count * lay.latents_per_class; i < summary.rows.size(); ++i) {
    const SummaryRow& row = summary.rows[i];
    rpt += "  class " + std::to_string(row.class_index + 1) + " " + row.parameter + " = " +
           fmt3(row.mean) + " (z " + (row.point_mass ? std::string("inf") : fmt3(row.z)) +
           ")\n";
  }
  write_text_file(dir + "/report.txt", rpt);

  return FitArtifacts{stats, result.diagnostics.converged};
}

}  // namespace detail

inline int run_fit(const RunConfig& cfg) {
  PanelDataset data;
  try {
    data = detail::load_dataset(cfg);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  }
  const auto violations = validate(data, cfg.model);
  if (!violations.empty()) {
    for (const auto& v : violations) std::cerr << v << '\n';
    return kExitValidation;
  }
  detail::prepare_out_dir(cfg, "fit");

  FitResult result;
  try {
    result = fit(data, cfg.model, cfg.optimizer);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    detail::write_json_file(cfg.out_dir + "/diagnostics.json",
                            json{{"error", e.what()}, {"seed", cfg.model.rng_seed}});
    return kExitNonConvergence;
  }
  const auto artifacts = detail::write_fit_artifacts(cfg, cfg.out_dir, data, result);
  if (!artifacts.converged) {
    std::cerr << "fit did not converge within the iteration budget\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

inline int run_simulate(const RunConfig& cfg) {
  try {
    if (cfg.feedback.per_alternative.empty())
      fail("simulate: a feedback block is required");
    detail::prepare_out_dir(cfg, "simulate");
    Rng rng(mix_seed(cfg.model.rng_seed, 0x51edULL));
    const PanelDataset tmpl = detail::build_template(cfg, rng);
    const PointParams truth = cfg.sim_truth
                                  ? *cfg.sim_truth
                                  : draw_truth(tmpl, cfg.model, cfg.draw_ranges, rng);
    auto [panel, record] = simulate_dataset(tmpl, cfg.model, truth, cfg.feedback, rng);
    const auto violations = validate(panel, cfg.model);
    if (!violations.empty()) fail("simulate: generated panel invalid: " + violations.front());
    write_panel_csv(cfg.out_dir + "/panel.csv", panel, cfg.model.covariate_names);
    detail::write_json_file(cfg.out_dir + "/truth.json", truth_record_to_json(record));
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}

inline int run_recover(const RunConfig& cfg) {
  PanelDataset tmpl;
  std::vector<std::pair<PanelDataset, TruthRecord>> batch;
  try {
    if (cfg.feedback.per_alternative.empty()) fail("recover: a feedback block is required");
    detail::prepare_out_dir(cfg, "recover");
    Rng rng(mix_seed(cfg.model.rng_seed, 0x51edULL));
    tmpl = detail::build_template(cfg, rng);
    batch = simulate_recovery_batch(tmpl, cfg.model, cfg.draw_ranges, cfg.feedback,
                                    cfg.recover_datasets, mix_seed(cfg.model.rng_seed, 0xBA7C));
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  }

  const int n = static_cast<int>(batch.size());
  std::filesystem::create_directories(cfg.out_dir + "/datasets");
  for (int i = 0; i < n; ++i) {
    write_panel_csv(cfg.out_dir + "/datasets/panel_" + std::to_string(i + 1) + ".csv",
                    batch[i].first, cfg.model.covariate_names);
    detail::write_json_file(cfg.out_dir + "/datasets/truth_" + std::to_string(i + 1) + ".json",
                            truth_record_to_json(batch[i].second));
  }

  // Dataset-parallel fits; each fit runs single-threaded when datasets share
  // the workers.
  struct DatasetOutcome {
    bool success = false;
    std::string error;
    PointParams estimate;  // aligned to the dataset's truth classes
    std::vector<int> permutation;
    double elbo = 0.0;
    bool converged = false;
  };
  std::vector<DatasetOutcome> outcomes(n);
  OptimizerConfig per_fit = cfg.optimizer;
  if (cfg.optimizer.threads > 1 && n > 1) per_fit.threads = 1;

  parallel_for(static_cast<std::size_t>(n), cfg.optimizer.threads, [&](std::size_t i) {
    DatasetOutcome& out = outcomes[i];
    try {
      ModelSpec spec = cfg.model;
      spec.rng_seed = mix_seed(cfg.model.rng_seed, 0xF17ULL + i);
      const FitResult result = fit(batch[i].first, spec, per_fit);
      const PointParams point = posterior_point(result.state, batch[i].first);
      out.permutation = align_classes(batch[i].second.params, point, tmpl);
      out.estimate = apply_class_permutation(point, out.permutation);
      out.elbo = result.diagnostics.best_elbo;
      out.converged = result.diagnostics.converged;
      out.success = true;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });

  std::vector<PointParams> truths, estimates;
  int successes = 0;
  for (int i = 0; i < n; ++i)
    if (outcomes[i].success) {
      ++successes;
      truths.push_back(batch[i].second.params);
      estimates.push_back(outcomes[i].estimate);
    }

  {
    auto out = detail::open_out(cfg.out_dir + "/recovery_datasets.csv");
    out << "dataset,success,converged,elbo,permutation,error\n";
    for (int i = 0; i < n; ++i) {
      const DatasetOutcome& o = outcomes[i];
      std::string perm;
      for (std::size_t k = 0; k < o.permutation.size(); ++k)
        perm += (k ? " " : "") + std::to_string(o.permutation[k]);
      out << i + 1 << ',' << (o.success ? 1 : 0) << ',' << (o.converged ? 1 : 0) << ','
          << (o.success ? g17(o.elbo) : std::string()) << ',' << detail::csv_field(perm) << ','
          << detail::csv_field(o.error) << '\n';
    }
  }

  if (successes >= 2) {
    const auto series = flatten_parameters(truths, estimates, tmpl);
    auto rows = recovery_metrics(truths, estimates, tmpl);
    {
      auto out = detail::open_out(cfg.out_dir + "/recovery_report.csv");
      write_recovery_csv(out, rows);
    }
    {
      auto out = detail::open_out(cfg.out_dir + "/recovery_scatter.csv");
      write_scatter_csv(out, series);
    }
  }

  detail::write_json_file(
      cfg.out_dir + "/recovery_meta.json",
      json{{"datasets", n},
           {"successes", successes},
           {"success_rate", n > 0 ? static_cast<double>(successes) / n : 0.0},
           {"seed", cfg.model.rng_seed},
           {"draw_ranges",
            {{"gamma", detail::prior_to_json(cfg.draw_ranges.gamma)},
             {"beta", std::vector<double>{cfg.draw_ranges.beta_lo, cfg.draw_ranges.beta_hi}},
             {"alpha",
              std::vector<double>{cfg.draw_ranges.alpha_lo, cfg.draw_ranges.alpha_hi}},
             {"eta", detail::prior_to_json(cfg.draw_ranges.eta)}}},
           {"estimate_point", "posterior means"}});

  if (n > 0 && successes < 0.9 * n) {
    std::cerr << "recovery: only " << successes << " of " << n << " datasets fit successfully\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

inline int run_compare(const RunConfig& cfg) {
  PanelDataset data;
  try {
    data = detail::load_dataset(cfg);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  }
  {
    const auto violations = validate(data, cfg.model);
    if (!violations.empty()) {
      for (const auto& v : violations) std::cerr << v << '\n';
      return kExitValidation;
    }
  }
  detail::prepare_out_dir(cfg, "compare");

  std::vector<std::pair<std::string, FitStats>> rows;
  bool all_ok = true;
  for (int k : cfg.compare_class_counts) {
    RunConfig sub = cfg;
    sub.model.class_count = k;
    sub.model.rng_seed = mix_seed(cfg.model.rng_seed, 0xC0DEULL + k);
    const auto violations = validate(data, sub.model);
    if (!violations.empty()) {
      for (const auto& v : violations) std::cerr << v << '\n';
      return kExitValidation;
    }
    const std::string label = k == 1 ? "RL baseline (K=1)" : "LCRL K=" + std::to_string(k);
    try {
      const FitResult result = fit(data, sub.model, sub.optimizer);
      const auto artifacts = detail::write_fit_artifacts(
          sub, cfg.out_dir + "/fit_K" + std::to_string(k), data, result);
      rows.emplace_back(label, artifacts.stats);
      all_ok = all_ok && artifacts.converged;
    } catch (const std::exception& e) {
      std::cerr << label << ": " << e.what() << '\n';
      all_ok = false;
    }
  }

  {
    auto out = detail::open_out(cfg.out_dir + "/comparison.csv");
    write_comparison_csv(out, rows);
  }
  std::string txt = "Model comparison\n";
  txt += "model                 LL        params  AIC       BIC\n";
  for (const auto& [label, s] : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-21s %-9s %-7d %-9s %-9s\n", label.c_str(),
                  detail::fmt3(s.ll).c_str(), s.k, detail::fmt3(s.aic).c_str(),
                  detail::fmt3(s.bic).c_str());
    txt += line;
  }
  detail::write_text_file(cfg.out_dir + "/comparison.txt", txt);
  return all_ok ? kExitOk : kExitNonConvergence;
}

inline int run_trajectory(const RunConfig& cfg) {
  std::vector<Schedule> schedules = cfg.schedules;
  try {
    if (schedules.empty()) {
      // Default to the three standard inspection schedules.
      for (const char* name : {"constant-2", "constant-7", "cycle-2-2-7-7-7"}) {
        Schedule s;
        resolve_builtin_schedule(name, s);
        schedules.push_back(std::move(s));
      }
    }
    if (cfg.trajectory_classes.empty())
      fail("trajectory: a trajectory.classes block with class parameters is required");

    PanelDataset shape;  // alternatives only; enough for parameter validation
    shape.alternatives = cfg.alternatives;
    shape.outcome_polarity = cfg.polarity;
    for (const ClassParams& c : cfg.trajectory_classes) {
      const auto violations = validate_class_params(c, shape);
      if (!violations.empty()) fail("trajectory: " + violations.front());
    }

    int follow = -1;
    if (!cfg.follow_alternative.empty()) {
      for (std::size_t i = 0; i < cfg.alternatives.size(); ++i)
        if (cfg.alternatives[i].name == cfg.follow_alternative) follow = static_cast<int>(i);
      if (follow < 0)
        fail("trajectory: unknown follow alternative '" + cfg.follow_alternative + "'");
    } else {
      const auto est = shape.estimated_q0_indices();
      if (est.size() != 1)
        fail("trajectory: set trajectory.follow; no unique estimated-q0 alternative");
      follow = est[0];
    }

    detail::prepare_out_dir(cfg, "trajectory");
    for (std::size_t k = 0; k < cfg.trajectory_classes.size(); ++k)
      for (const Schedule& sched : schedules)
        for (Context ctx : {Context::ds, Context::sp}) {
          std::string name = sched.name;
          for (char& c : name)
            if (!std::isalnum(static_cast<unsigned char>(c))) c = '-';
          const auto rows = schedule_walk(cfg.trajectory_classes[k], sched, ctx, cfg.polarity,
                                          follow, cfg.trajectory_horizon);
          auto out = detail::open_out(cfg.out_dir + "/trajectory_class" +
                                      std::to_string(k + 1) + "_" + name + "_" +
                                      to_string(ctx) + ".csv");
          write_trajectory_csv(out, rows, ctx, shape);
        }
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace lcrl

#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "lcrl/common.hpp"
#include "lcrl/fit.hpp"
#include "lcrl/model.hpp"
#include "lcrl/simulate.hpp"

namespace lcrl {

using json = nlohmann::ordered_json;  // ordered: stable echo for byte-identical reruns

// Full run configuration: model and optimizer settings plus the per-command
// blocks. One file drives every CLI command; unused blocks are ignored.
struct RunConfig {
  ModelSpec model;
  std::vector<Alternative> alternatives;
  Polarity polarity = Polarity::cost;
  OptimizerConfig optimizer;

  std::string dataset_path;
  std::string out_dir = "out";

  // simulate / recover
  int sim_respondents = 83;
  int sim_trials_ds = 10;
  int sim_trials_sp = 10;
  std::vector<CovariateSpec> covariate_draws;
  std::optional<PointParams> sim_truth;  // explicit truth; absent = draw from ranges
  DrawRanges draw_ranges;
  FeedbackModel feedback;
  int recover_datasets = 20;

  // trajectory
  std::vector<Schedule> schedules;
  int trajectory_horizon = 20;
  std::string follow_alternative;
  std::vector<ClassParams> trajectory_classes;

  // compare
  std::vector<int> compare_class_counts = {1, 2, 3};
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail("config: " + msg);
}

inline NormalPrior prior_from_json(const json& j, const NormalPrior& def) {
  NormalPrior p = def;
  if (j.contains("mean")) p.mean = j.at("mean").get<double>();
  if (j.contains("sd")) p.sd = j.at("sd").get<double>();
  require(p.sd > 0.0, "prior sd must be > 0");
  return p;
}

inline json prior_to_json(const NormalPrior& p) { return json{{"mean", p.mean}, {"sd", p.sd}}; }

inline json class_params_to_json(const ClassParams& c) {
  return json{{"bias_ds", c.bias_ds},     {"bias_sp_shift", c.bias_sp_shift},
              {"beta_ds", c.sensitivity_ds}, {"beta_sp", c.sensitivity_sp},
              {"alpha", c.learning_rate}, {"q0", c.initial_q}};
}

inline ClassParams class_params_from_json(const json& j) {
  ClassParams c;
  c.bias_ds = j.at("bias_ds").get<std::vector<double>>();
  c.bias_sp_shift = j.at("bias_sp_shift").get<std::vector<double>>();
  c.sensitivity_ds = j.at("beta_ds").get<double>();
  c.sensitivity_sp = j.at("beta_sp").get<double>();
  c.learning_rate = j.at("alpha").get<double>();
  c.initial_q = j.at("q0").get<std::vector<double>>();
  return c;
}

}  // namespace detail

inline json point_params_to_json(const PointParams& p) {
  json classes = json::array();
  for (const ClassParams& c : p.classes) classes.push_back(detail::class_params_to_json(c));
  json out{{"classes", classes}};
  if (!p.eta.weights.empty()) out["eta"] = p.eta.weights;
  return out;
}

inline PointParams point_params_from_json(const json& j) {
  PointParams p;
  for (const json& c : j.at("classes")) p.classes.push_back(detail::class_params_from_json(c));
  if (j.contains("eta")) p.eta.weights = j.at("eta").get<std::vector<std::vector<double>>>();
  return p;
}

inline json truth_record_to_json(const TruthRecord& t) {
  json out = point_params_to_json(t.params);
  out["class_of"] = t.class_of;
  return out;
}

inline TruthRecord truth_record_from_json(const json& j) {
  TruthRecord t;
  t.params = point_params_from_json(j);
  if (j.contains("class_of")) t.class_of = j.at("class_of").get<std::vector<int>>();
  return t;
}

inline RunConfig run_config_from_json(const json& root) {
  RunConfig cfg;

  detail::require(root.contains("model"), "missing 'model' block");
  const json& m = root.at("model");
  cfg.model.class_count = m.value("classes", 1);
  detail::require(cfg.model.class_count >= 1, "model.classes must be >= 1");
  cfg.model.covariate_names = m.value("covariates", std::vector<std::string>{"const"});
  cfg.model.rng_seed = m.value("seed", std::uint64_t{1});
  cfg.model.reset_q_on_context_switch = m.value("reset_q_on_context_switch", false);

  const auto polarity = parse_polarity(m.value("outcome_polarity", std::string("cost")));
  detail::require(polarity.has_value(), "model.outcome_polarity must be 'cost' or 'reward'");
  cfg.polarity = *polarity;

  detail::require(m.contains("alternatives") && m.at("alternatives").is_array() &&
                      !m.at("alternatives").empty(),
                  "model.alternatives must be a nonempty array");
  bool any_reference = false;
  int id = 1;
  for (const json& ja : m.at("alternatives")) {
    Alternative a;
    a.id = id++;
    a.name = ja.value("name", "alt" + std::to_string(a.id));
    detail::require(ja.contains("q0_fixed") != ja.contains("q0_range"),
                    "alternative '" + a.name + "' needs exactly one of q0_fixed or q0_range");
    if (ja.contains("q0_fixed")) {
      a.q0 = Q0Mode::fixed(ja.at("q0_fixed").get<double>());
    } else {
      const auto range = ja.at("q0_range").get<std::vector<double>>();
      detail::require(range.size() == 2 && range[0] < range[1],
                      "alternative '" + a.name + "' q0_range must be [lower, upper]");
      a.q0 = Q0Mode::estimated(range[0], range[1]);
    }
    a.gamma_identified = ja.value("reference_bias", false);
    any_reference = any_reference || a.gamma_identified;
    cfg.alternatives.push_back(std::move(a));
  }
  if (!any_reference) cfg.alternatives.back().gamma_identified = true;

  if (m.contains("priors")) {
    const json& pr = m.at("priors");
    PriorSpec defaults;
    if (pr.contains("gamma")) cfg.model.priors.gamma = detail::prior_from_json(pr.at("gamma"), defaults.gamma);
    if (pr.contains("eta")) cfg.model.priors.eta = detail::prior_from_json(pr.at("eta"), defaults.eta);
    if (pr.contains("z_alpha"))
      cfg.model.priors.z_alpha = detail::prior_from_json(pr.at("z_alpha"), defaults.z_alpha);
    if (pr.contains("z_q0"))
      cfg.model.priors.z_q0 = detail::prior_from_json(pr.at("z_q0"), defaults.z_q0);
    if (pr.contains("log_beta"))
      cfg.model.priors.log_beta = detail::prior_from_json(pr.at("log_beta"), defaults.log_beta);
  }

  if (root.contains("optimizer")) {
    const json& o = root.at("optimizer");
    OptimizerConfig& oc = cfg.optimizer;
    oc.iterations = o.value("iterations", oc.iterations);
    oc.mc_samples = o.value("mc_samples", oc.mc_samples);
    oc.restarts = o.value("restarts", oc.restarts);
    oc.learning_rate = o.value("learning_rate", oc.learning_rate);
    oc.tol = o.value("tol", oc.tol);
    oc.patience = o.value("patience", oc.patience);
    oc.smooth_window = o.value("smooth_window", oc.smooth_window);
    oc.init_sd = o.value("init_sd", oc.init_sd);
    oc.tail_decay = o.value("tail_decay", oc.tail_decay);
    oc.eval_samples = o.value("eval_samples", oc.eval_samples);
    oc.summary_samples = o.value("summary_samples", oc.summary_samples);
    oc.eta_full_covariance = o.value("eta_full_covariance", oc.eta_full_covariance);
    detail::require(oc.iterations >= 0, "optimizer.iterations must be >= 0");
    detail::require(oc.mc_samples >= 1, "optimizer.mc_samples must be >= 1");
    detail::require(oc.restarts >= 1, "optimizer.restarts must be >= 1");
    detail::require(oc.tail_decay >= 0.0 && oc.tail_decay < 1.0,
                    "optimizer.tail_decay must be in [0, 1)");
  }

  if (root.contains("paths")) {
    const json& p = root.at("paths");
    cfg.dataset_path = p.value("dataset", std::string());
    cfg.out_dir = p.value("out", cfg.out_dir);
  }

  if (root.contains("simulate")) {
    const json& s = root.at("simulate");
    cfg.sim_respondents = s.value("respondents", cfg.sim_respondents);
    cfg.sim_trials_ds = s.value("trials_ds", cfg.sim_trials_ds);
    cfg.sim_trials_sp = s.value("trials_sp", cfg.sim_trials_sp);
    detail::require(cfg.sim_respondents >= 1, "simulate.respondents must be >= 1");
    detail::require(cfg.sim_trials_ds + cfg.sim_trials_sp >= 1,
                    "simulate: at least one trial per respondent");
    if (s.contains("covariate_draws")) {
      for (const json& jc : s.at("covariate_draws")) {
        CovariateSpec cs;
        cs.name = jc.at("name").get<std::string>();
        const std::string kind = jc.value("kind", std::string("constant"));
        if (kind == "constant") {
          cs.kind = CovariateSpec::Kind::constant;
          cs.a = jc.value("value", 1.0);
        } else if (kind == "bernoulli") {
          cs.kind = CovariateSpec::Kind::bernoulli;
          cs.a = jc.value("p", 0.5);
        } else if (kind == "normal") {
          cs.kind = CovariateSpec::Kind::normal;
          cs.a = jc.value("mean", 0.0);
          cs.b = jc.value("sd", 1.0);
        } else {
          detail::require(false, "covariate draw kind '" + kind + "' unknown");
        }
        cfg.covariate_draws.push_back(std::move(cs));
      }
    }
    if (s.contains("truth")) cfg.sim_truth = point_params_from_json(s.at("truth"));
    if (s.contains("draw_ranges")) {
      const json& r = s.at("draw_ranges");
      if (r.contains("gamma"))
        cfg.draw_ranges.gamma = detail::prior_from_json(r.at("gamma"), cfg.draw_ranges.gamma);
      if (r.contains("eta"))
        cfg.draw_ranges.eta = detail::prior_from_json(r.at("eta"), cfg.draw_ranges.eta);
      if (r.contains("beta")) {
        const auto v = r.at("beta").get<std::vector<double>>();
        detail::require(v.size() == 2 && v[0] < v[1], "draw_ranges.beta must be [lo, hi]");
        cfg.draw_ranges.beta_lo = v[0];
        cfg.draw_ranges.beta_hi = v[1];
      }
      if (r.contains("alpha")) {
        const auto v = r.at("alpha").get<std::vector<double>>();
        detail::require(v.size() == 2 && v[0] < v[1], "draw_ranges.alpha must be [lo, hi]");
        cfg.draw_ranges.alpha_lo = v[0];
        cfg.draw_ranges.alpha_hi = v[1];
      }
    }
    if (s.contains("feedback") && !s.at("feedback").empty()) {
      cfg.feedback.per_alternative.assign(cfg.alternatives.size(), FeedbackSpec{});
      std::vector<bool> seen(cfg.alternatives.size(), false);
      for (const json& jf : s.at("feedback")) {
        const std::string alt_name = jf.at("alternative").get<std::string>();
        int idx = -1;
        for (std::size_t i = 0; i < cfg.alternatives.size(); ++i)
          if (cfg.alternatives[i].name == alt_name) idx = static_cast<int>(i);
        detail::require(idx >= 0, "feedback references unknown alternative '" + alt_name + "'");
        seen[idx] = true;
        const int modes = jf.contains("deterministic") + jf.contains("discrete") +
                          jf.contains("schedule");
        detail::require(modes == 1, "feedback for '" + alt_name +
                                        "' needs exactly one of deterministic/discrete/schedule");
        if (jf.contains("deterministic")) {
          cfg.feedback.per_alternative[idx] =
              FeedbackSpec::deterministic(jf.at("deterministic").get<double>());
        } else if (jf.contains("discrete")) {
          std::vector<std::pair<double, double>> outcomes;
          for (const json& o : jf.at("discrete")) {
            const auto pair = o.get<std::vector<double>>();
            detail::require(pair.size() == 2, "discrete outcomes are [value, probability] pairs");
            outcomes.emplace_back(pair[0], pair[1]);
          }
          cfg.feedback.per_alternative[idx] = FeedbackSpec::discrete(std::move(outcomes));
        } else {
          // Either an explicit value-per-trial array or a builtin schedule
          // name, expanded cyclically to cover the simulated trial count.
          const json& js = jf.at("schedule");
          std::vector<double> values;
          if (js.is_string()) {
            Schedule sched;
            detail::require(resolve_builtin_schedule(js.get<std::string>(), sched),
                            "unknown schedule '" + js.get<std::string>() + "'");
            values.resize(cfg.sim_trials_ds + cfg.sim_trials_sp);
            for (std::size_t t = 0; t < values.size(); ++t)
              values[t] = sched.at(static_cast<int>(t));
          } else {
            values = js.get<std::vector<double>>();
          }
          cfg.feedback.per_alternative[idx] = FeedbackSpec::from_schedule(std::move(values));
        }
      }
      for (std::size_t i = 0; i < seen.size(); ++i)
        detail::require(seen[i], "feedback missing for alternative '" +
                                     cfg.alternatives[i].name + "'");
    }
  }

  if (root.contains("recover")) {
    cfg.recover_datasets = root.at("recover").value("datasets", cfg.recover_datasets);
    detail::require(cfg.recover_datasets >= 0, "recover.datasets must be >= 0");
  }

  if (root.contains("trajectory")) {
    const json& t = root.at("trajectory");
    cfg.trajectory_horizon = t.value("horizon", cfg.trajectory_horizon);
    detail::require(cfg.trajectory_horizon >= 1, "trajectory.horizon must be >= 1");
    cfg.follow_alternative = t.value("follow", std::string());
    if (t.contains("schedules")) {
      for (const json& js : t.at("schedules")) {
        Schedule sched;
        if (js.is_string()) {
          detail::require(resolve_builtin_schedule(js.get<std::string>(), sched),
                          "unknown schedule '" + js.get<std::string>() + "'");
        } else {
          sched.name = js.at("name").get<std::string>();
          sched.values = js.at("values").get<std::vector<double>>();
          sched.repeat = js.value("repeat", true);
          detail::require(!sched.values.empty(),
                          "schedule '" + sched.name + "' needs at least one value");
        }
        cfg.schedules.push_back(std::move(sched));
      }
    }
    if (t.contains("classes"))
      for (const json& jc : t.at("classes"))
        cfg.trajectory_classes.push_back(detail::class_params_from_json(jc));
  }

  if (root.contains("compare")) {
    cfg.compare_class_counts =
        root.at("compare").value("class_counts", cfg.compare_class_counts);
    detail::require(!cfg.compare_class_counts.empty(), "compare.class_counts must be nonempty");
    for (int k : cfg.compare_class_counts)
      detail::require(k >= 1, "compare.class_counts entries must be >= 1");
  }

  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config: " + path);
  json root;
  try {
    root = json::parse(in);
  } catch (const std::exception& e) {
    fail("config: JSON parse error in " + path + ": " + e.what());
  }
  return run_config_from_json(root);
}

// Defaults-resolved echo of the configuration; parsing it back reproduces the
// same RunConfig, so a run can be repeated from its own output directory.
inline json run_config_to_json(const RunConfig& cfg) {
  json alternatives = json::array();
  for (const Alternative& a : cfg.alternatives) {
    json ja{{"name", a.name}};
    if (a.q0.is_estimated())
      ja["q0_range"] = std::vector<double>{a.q0.lower, a.q0.upper};
    else
      ja["q0_fixed"] = a.q0.value;
    ja["reference_bias"] = a.gamma_identified;
    alternatives.push_back(std::move(ja));
  }

  json covariate_draws = json::array();
  for (const CovariateSpec& cs : cfg.covariate_draws) {
    json jc{{"name", cs.name}};
    switch (cs.kind) {
      case CovariateSpec::Kind::constant:
        jc["kind"] = "constant";
        jc["value"] = cs.a;
        break;
      case CovariateSpec::Kind::bernoulli:
        jc["kind"] = "bernoulli";
        jc["p"] = cs.a;
        break;
      case CovariateSpec::Kind::normal:
        jc["kind"] = "normal";
        jc["mean"] = cs.a;
        jc["sd"] = cs.b;
        break;
    }
    covariate_draws.push_back(std::move(jc));
  }

  json feedback = json::array();
  for (std::size_t i = 0; i < cfg.feedback.per_alternative.size(); ++i) {
    const FeedbackSpec& f = cfg.feedback.per_alternative[i];
    json jf{{"alternative", cfg.alternatives[i].name}};
    switch (f.kind) {
      case FeedbackSpec::Kind::deterministic: jf["deterministic"] = f.value; break;
      case FeedbackSpec::Kind::discrete: {
        json outcomes = json::array();
        for (const auto& [v, p] : f.outcomes) outcomes.push_back(std::vector<double>{v, p});
        jf["discrete"] = std::move(outcomes);
        break;
      }
      case FeedbackSpec::Kind::schedule: jf["schedule"] = f.schedule; break;
    }
    feedback.push_back(std::move(jf));
  }

  json schedules = json::array();
  for (const Schedule& s : cfg.schedules)
    schedules.push_back(json{{"name", s.name}, {"values", s.values}, {"repeat", s.repeat}});

  json trajectory_classes = json::array();
  for (const ClassParams& c : cfg.trajectory_classes)
    trajectory_classes.push_back(detail::class_params_to_json(c));

  json root{
      {"model",
       {{"classes", cfg.model.class_count},
        {"covariates", cfg.model.covariate_names},
        {"alternatives", alternatives},
        {"outcome_polarity", to_string(cfg.polarity)},
        {"reset_q_on_context_switch", cfg.model.reset_q_on_context_switch},
        {"seed", cfg.model.rng_seed},
        {"priors",
         {{"gamma", detail::prior_to_json(cfg.model.priors.gamma)},
          {"eta", detail::prior_to_json(cfg.model.priors.eta)},
          {"z_alpha", detail::prior_to_json(cfg.model.priors.z_alpha)},
          {"z_q0", detail::prior_to_json(cfg.model.priors.z_q0)},
          {"log_beta", detail::prior_to_json(cfg.model.priors.log_beta)}}}}},
      {"optimizer",
       {{"iterations", cfg.optimizer.iterations},
        {"mc_samples", cfg.optimizer.mc_samples},
        {"restarts", cfg.optimizer.restarts},
        {"learning_rate", cfg.optimizer.learning_rate},
        {"tol", cfg.optimizer.tol},
        {"patience", cfg.optimizer.patience},
        {"smooth_window", cfg.optimizer.smooth_window},
        {"init_sd", cfg.optimizer.init_sd},
        {"tail_decay", cfg.optimizer.tail_decay},
        {"eval_samples", cfg.optimizer.eval_samples},
        {"summary_samples", cfg.optimizer.summary_samples},
        {"eta_full_covariance", cfg.optimizer.eta_full_covariance}}},
      {"paths", {{"dataset", cfg.dataset_path}, {"out", cfg.out_dir}}},
      {"simulate",
       {{"respondents", cfg.sim_respondents},
        {"trials_ds", cfg.sim_trials_ds},
        {"trials_sp", cfg.sim_trials_sp},
        {"covariate_draws", covariate_draws},
        {"draw_ranges",
         {{"gamma", detail::prior_to_json(cfg.draw_ranges.gamma)},
          {"beta", std::vector<double>{cfg.draw_ranges.beta_lo, cfg.draw_ranges.beta_hi}},
          {"alpha", std::vector<double>{cfg.draw_ranges.alpha_lo, cfg.draw_ranges.alpha_hi}},
          {"eta", detail::prior_to_json(cfg.draw_ranges.eta)}}},
        {"feedback", feedback}}},
      {"recover", {{"datasets", cfg.recover_datasets}}},
      {"trajectory",
       {{"horizon", cfg.trajectory_horizon},
        {"follow", cfg.follow_alternative},
        {"schedules", schedules},
        {"classes", trajectory_classes}}},
      {"compare", {{"class_counts", cfg.compare_class_counts}}}};
  if (cfg.sim_truth) root["simulate"]["truth"] = point_params_to_json(*cfg.sim_truth);
  return root;
}

}  // namespace lcrl

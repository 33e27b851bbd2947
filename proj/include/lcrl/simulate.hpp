#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/latent_class.hpp"
#include "lcrl/model.hpp"
#include "lcrl/rl.hpp"

namespace lcrl {

// Outcome generator for one alternative: a constant, a discrete lottery, or
// a fixed per-trial schedule.
struct FeedbackSpec {
  enum class Kind { deterministic, discrete, schedule };
  Kind kind = Kind::deterministic;
  double value = 0.0;
  std::vector<std::pair<double, double>> outcomes;  // (value, probability)
  std::vector<double> schedule;

  static FeedbackSpec deterministic(double v) {
    FeedbackSpec f;
    f.kind = Kind::deterministic;
    f.value = v;
    return f;
  }
  static FeedbackSpec discrete(std::vector<std::pair<double, double>> o) {
    FeedbackSpec f;
    f.kind = Kind::discrete;
    f.outcomes = std::move(o);
    return f;
  }
  static FeedbackSpec from_schedule(std::vector<double> s) {
    FeedbackSpec f;
    f.kind = Kind::schedule;
    f.schedule = std::move(s);
    return f;
  }
};

struct FeedbackModel {
  std::vector<FeedbackSpec> per_alternative;

  std::vector<std::string> validate(int n_alternatives, int trial_count) const {
    std::vector<std::string> v;
    if (static_cast<int>(per_alternative.size()) != n_alternatives)
      v.push_back("feedback: one spec per alternative required");
    for (std::size_t i = 0; i < per_alternative.size(); ++i) {
      const FeedbackSpec& f = per_alternative[i];
      if (f.kind == FeedbackSpec::Kind::discrete) {
        double sum = 0.0;
        for (const auto& [val, prob] : f.outcomes) {
          if (prob < 0.0)
            v.push_back("feedback: alternative " + std::to_string(i + 1) +
                        " has a negative outcome probability");
          sum += prob;
        }
        if (std::abs(sum - 1.0) > kProbSumTol)
          v.push_back("feedback: alternative " + std::to_string(i + 1) +
                      " outcome probabilities sum to " + g17(sum));
      }
      if (f.kind == FeedbackSpec::Kind::schedule &&
          static_cast<int>(f.schedule.size()) < trial_count)
        v.push_back("feedback: alternative " + std::to_string(i + 1) + " schedule has " +
                    std::to_string(f.schedule.size()) + " entries for " +
                    std::to_string(trial_count) + " trials");
    }
    return v;
  }

  // Outcome for one (alternative, trial). Lotteries consume one uniform via
  // inverse-CDF over the outcomes in listed order.
  double draw(int alt, int trial, Rng& rng) const {
    const FeedbackSpec& f = per_alternative[alt];
    switch (f.kind) {
      case FeedbackSpec::Kind::deterministic: return f.value;
      case FeedbackSpec::Kind::schedule: return f.schedule[trial];
      case FeedbackSpec::Kind::discrete: {
        const double u = rng.uniform01();
        double cum = 0.0;
        for (std::size_t i = 0; i + 1 < f.outcomes.size(); ++i) {
          cum += f.outcomes[i].second;
          if (u < cum) return f.outcomes[i].first;
        }
        return f.outcomes.back().first;
      }
    }
    return f.value;
  }
};

// Everything used to generate a dataset: the exact parameters and the class
// each respondent was assigned to.
struct TruthRecord {
  PointParams params;
  std::vector<int> class_of;  // 0-based class index per respondent
};

// Sampling ranges for synthetic ground-truth parameters. Free biases and
// membership weights are normal; sensitivities and the learning rate are
// uniform; estimated initial expectations are uniform over their bounds.
struct DrawRanges {
  NormalPrior gamma{0.0, 1.0};
  double beta_lo = 0.1;
  double beta_hi = 2.0;
  double alpha_lo = 0.05;
  double alpha_hi = 0.95;
  NormalPrior eta{0.0, 1.0};
};

// One ground-truth parameter set. Draw order is fixed (per class: free DS
// biases, free SP shifts, both sensitivities, learning rate, estimated
// initial expectations; then membership weight rows) so truths are
// reproducible from the seed alone.
inline PointParams draw_truth(const PanelDataset& tmpl, const ModelSpec& spec,
                              const DrawRanges& ranges, Rng& rng) {
  PointParams p;
  p.classes.resize(spec.class_count);
  for (int k = 0; k < spec.class_count; ++k) {
    ClassParams c = make_class_params(tmpl);
    for (int i : tmpl.free_gamma_indices()) c.bias_ds[i] = rng.normal(ranges.gamma.mean, ranges.gamma.sd);
    for (int i : tmpl.free_gamma_indices())
      c.bias_sp_shift[i] = rng.normal(ranges.gamma.mean, ranges.gamma.sd);
    c.sensitivity_ds = rng.uniform(ranges.beta_lo, ranges.beta_hi);
    c.sensitivity_sp = rng.uniform(ranges.beta_lo, ranges.beta_hi);
    c.learning_rate = rng.uniform(ranges.alpha_lo, ranges.alpha_hi);
    for (int i : tmpl.estimated_q0_indices())
      c.initial_q[i] = rng.uniform(tmpl.alternatives[i].q0.lower, tmpl.alternatives[i].q0.upper);
    p.classes[k] = std::move(c);
  }
  if (spec.class_count > 1) {
    const int d = static_cast<int>(spec.covariate_names.size());
    p.eta.weights.assign(spec.class_count - 1, std::vector<double>(d, 0.0));
    for (int j = 0; j + 1 < spec.class_count; ++j)
      for (int a = 0; a < d; ++a) p.eta.weights[j][a] = rng.normal(ranges.eta.mean, ranges.eta.sd);
  }
  return p;
}

// Synthetic panel from known parameters. The template supplies alternatives,
// respondent ids, covariates, and each respondent's context sequence; choices
// and feedback are generated fresh.
inline std::pair<PanelDataset, TruthRecord> simulate_dataset(const PanelDataset& tmpl,
                                                             const ModelSpec& spec,
                                                             const PointParams& truth,
                                                             const FeedbackModel& feedback,
                                                             Rng& rng) {
  int max_trials = 0;
  for (const auto& r : tmpl.respondents)
    max_trials = std::max(max_trials, static_cast<int>(r.trials.size()));
  const auto fb_violations = feedback.validate(tmpl.n_alternatives(), max_trials);
  if (!fb_violations.empty()) fail("simulate: " + fb_violations.front());

  PanelDataset out;
  out.alternatives = tmpl.alternatives;
  out.outcome_polarity = tmpl.outcome_polarity;
  TruthRecord record;
  record.params = truth;
  record.class_of.reserve(tmpl.respondents.size());

  const auto draw_fb = [&feedback](int alt, int trial, Context, Rng& r) {
    return feedback.draw(alt, trial, r);
  };

  for (const auto& resp : tmpl.respondents) {
    std::vector<Context> contexts;
    contexts.reserve(resp.trials.size());
    for (const Trial& t : resp.trials) contexts.push_back(t.context);

    int s = 0;
    if (spec.class_count > 1) {
      const auto m = membership_probabilities(truth.eta, resp.covariates);
      s = rng.categorical(m);
    }
    record.class_of.push_back(s);

    Respondent r;
    r.id = resp.id;
    r.covariates = resp.covariates;
    r.trials = simulate_trajectory(truth.classes[s], contexts, tmpl.outcome_polarity, rng,
                                   draw_fb, spec.reset_q_on_context_switch);
    out.respondents.push_back(std::move(r));
  }
  return {std::move(out), std::move(record)};
}

// Independent (dataset, truth) draws with one derived RNG stream per dataset,
// so any subset can be regenerated from (seed, index).
inline std::vector<std::pair<PanelDataset, TruthRecord>> simulate_recovery_batch(
    const PanelDataset& tmpl, const ModelSpec& spec, const DrawRanges& ranges,
    const FeedbackModel& feedback, int n_datasets, std::uint64_t seed) {
  std::vector<std::pair<PanelDataset, TruthRecord>> out;
  out.reserve(std::max(0, n_datasets));
  for (int i = 0; i < n_datasets; ++i) {
    Rng rng(mix_seed(seed, 0xDA7Au + i));
    const PointParams truth = draw_truth(tmpl, spec, ranges, rng);
    out.push_back(simulate_dataset(tmpl, spec, truth, feedback, rng));
  }
  return out;
}

// How to generate one covariate column for synthetic templates.
struct CovariateSpec {
  std::string name;
  enum class Kind { constant, bernoulli, normal } kind = Kind::constant;
  double a = 1.0;  // constant value, bernoulli p, or normal mean
  double b = 0.0;  // normal sd
};

// Synthetic template panel: ids, covariates, and context sequences only
// (choices/feedback are placeholders for simulate_dataset to overwrite).
// Respondents alternate DS-first and SP-first blocks.
inline PanelDataset make_template_dataset(const std::vector<Alternative>& alternatives,
                                          Polarity polarity,
                                          const std::vector<CovariateSpec>& covariates,
                                          int n_respondents, int trials_ds, int trials_sp,
                                          Rng& rng) {
  PanelDataset data;
  data.alternatives = alternatives;
  data.outcome_polarity = polarity;
  data.respondents.reserve(n_respondents);
  for (int n = 0; n < n_respondents; ++n) {
    Respondent r;
    r.id = "r" + std::to_string(n + 1);
    for (const CovariateSpec& cs : covariates) {
      switch (cs.kind) {
        case CovariateSpec::Kind::constant: r.covariates.push_back(cs.a); break;
        case CovariateSpec::Kind::bernoulli:
          r.covariates.push_back(rng.uniform01() < cs.a ? 1.0 : 0.0);
          break;
        case CovariateSpec::Kind::normal: r.covariates.push_back(rng.normal(cs.a, cs.b)); break;
      }
    }
    const bool ds_first = n % 2 == 0;
    const int first = ds_first ? trials_ds : trials_sp;
    const int total = trials_ds + trials_sp;
    for (int t = 0; t < total; ++t) {
      Trial tr;
      tr.index = t + 1;
      const bool in_first_block = t < first;
      tr.context = in_first_block == ds_first ? Context::ds : Context::sp;
      tr.chosen = 1;
      tr.feedback = 0.0;
      r.trials.push_back(tr);
    }
    data.respondents.push_back(std::move(r));
  }
  return data;
}

// Named feedback schedule for trajectory walks.
struct Schedule {
  std::string name;
  std::vector<double> values;
  bool repeat = true;

  double at(int trial) const {
    if (values.empty()) fail("schedule '" + name + "' has no values");
    if (repeat) return values[trial % values.size()];
    if (trial >= static_cast<int>(values.size()))
      fail("schedule '" + name + "' shorter than requested horizon");
    return values[trial];
  }
};

// Built-in schedules behind the standard model-inspection plots: constant
// low, constant high, and a low-low-high-high-high cycle.
inline bool resolve_builtin_schedule(const std::string& name, Schedule& out) {
  if (name == "constant-2") {
    out = {name, {2.0}, true};
    return true;
  }
  if (name == "constant-7") {
    out = {name, {7.0}, true};
    return true;
  }
  if (name == "cycle-2-2-7-7-7") {
    out = {name, {2.0, 2.0, 7.0, 7.0, 7.0}, true};
    return true;
  }
  return false;
}

// One row of a deterministic forced-feedback walk.
struct TrajectoryRow {
  int trial = 0;  // 1-based
  int alt = 0;    // 0-based
  double q_value = 0.0;
  double choice_prob = 0.0;
};

// Walk one class's expectations while the followed alternative receives the
// schedule's feedback every trial, in a fixed context. Records the Q values
// the trial's decision would see and the implied choice probabilities.
inline std::vector<TrajectoryRow> schedule_walk(const ClassParams& p, const Schedule& sched,
                                                Context ctx, Polarity pol, int follow_alt,
                                                int horizon) {
  std::vector<TrajectoryRow> rows;
  rows.reserve(static_cast<std::size_t>(horizon) * p.initial_q.size());
  std::vector<double> q = p.initial_q;
  for (int t = 0; t < horizon; ++t) {
    const auto probs = choice_probabilities(p, q, ctx, pol);
    for (std::size_t i = 0; i < q.size(); ++i)
      rows.push_back({t + 1, static_cast<int>(i), q[i], probs[i]});
    update_expectation(q, follow_alt, sched.at(t), p.learning_rate);
  }
  return rows;
}

}  // namespace lcrl

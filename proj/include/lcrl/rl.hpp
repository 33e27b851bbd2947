#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/model.hpp"

namespace lcrl {

// Expectation state over alternatives partway through a trial sequence.
struct QState {
  std::vector<double> q;
};

// Per-trial record of the expectations the decision was made with (before the
// feedback update) and the implied choice distribution.
struct TrajectoryStep {
  int trial_index = 0;
  Context context = Context::ds;
  std::vector<double> q_before;
  std::vector<double> choice_probs;
};

struct QTrajectory {
  std::vector<TrajectoryStep> steps;
};

// Chosen-alternative update: move the expectation a fraction alpha toward the
// realized feedback. Unchosen entries are untouched.
inline void update_expectation(std::vector<double>& q, int chosen_index, double feedback,
                               double alpha) {
  q[chosen_index] += alpha * (feedback - q[chosen_index]);
}

inline void context_utilities(const ClassParams& p, const std::vector<double>& q,
                              Context ctx, Polarity pol, std::vector<double>& u) {
  const double sign = polarity_sign(pol);
  const double beta = ctx == Context::ds ? p.sensitivity_ds : p.sensitivity_sp;
  const std::size_t n = q.size();
  u.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double gamma = p.bias_ds[i];
    if (ctx == Context::sp) gamma += p.bias_sp_shift[i];
    u[i] = gamma + sign * beta * q[i];
  }
}

inline std::vector<double> choice_probabilities(const ClassParams& p,
                                                const std::vector<double>& q, Context ctx,
                                                Polarity pol) {
  std::vector<double> u;
  context_utilities(p, q, ctx, pol, u);
  std::vector<double> probs(u.size());
  softmax(u, probs);
  return probs;
}

inline std::vector<double> initial_q(const ClassParams& p) { return p.initial_q; }

// Walk one respondent's trial sequence under fixed class parameters, calling
// visit(trial, q_before, ctx) right before each feedback update. The visitor
// sees the expectations the choice was made with.
template <typename Visitor>
void run_sequence(const ClassParams& p, const std::vector<Trial>& trials, bool reset_on_switch,
                  Visitor&& visit) {
  std::vector<double> q = p.initial_q;
  bool have_prev = false;
  Context prev = Context::ds;
  for (const Trial& t : trials) {
    if (reset_on_switch && have_prev && t.context != prev) q = p.initial_q;
    visit(t, q, t.context);
    update_expectation(q, t.chosen - 1, t.feedback, p.learning_rate);
    have_prev = true;
    prev = t.context;
  }
}

// Log-likelihood of one respondent's observed choices under fixed class
// parameters. Uses the max-shifted log-softmax directly so no probability is
// ever materialized (robust for extreme utilities).
inline double sequence_loglik(const ClassParams& p, const std::vector<Trial>& trials,
                              Polarity pol, bool reset_on_switch = false) {
  double ll = 0.0;
  std::vector<double> u;
  run_sequence(p, trials, reset_on_switch,
               [&](const Trial& t, const std::vector<double>& q, Context ctx) {
                 context_utilities(p, q, ctx, pol, u);
                 ll += u[t.chosen - 1] - log_sum_exp(u);
               });
  return ll;
}

// Same walk but records the full per-trial state for inspection/plotting.
inline QTrajectory sequence_trajectory(const ClassParams& p, const std::vector<Trial>& trials,
                                       Polarity pol, bool reset_on_switch = false) {
  QTrajectory traj;
  traj.steps.reserve(trials.size());
  run_sequence(p, trials, reset_on_switch,
               [&](const Trial& t, const std::vector<double>& q, Context ctx) {
                 TrajectoryStep s;
                 s.trial_index = t.index;
                 s.context = ctx;
                 s.q_before = q;
                 s.choice_probs = choice_probabilities(p, q, ctx, pol);
                 traj.steps.push_back(std::move(s));
               });
  return traj;
}

// Trial sequence with choices and feedback supplied rather than sampled:
// the inspection tool behind expectation/probability plots. Records Q and the
// choice distribution before each update.
inline QTrajectory forced_trajectory(const ClassParams& p, const std::vector<Context>& contexts,
                                     const std::vector<int>& choices_1based,
                                     const std::vector<double>& feedbacks, Polarity pol,
                                     bool reset_on_switch = false) {
  if (contexts.size() != choices_1based.size() || contexts.size() != feedbacks.size())
    fail("forced_trajectory: context/choice/feedback schedules differ in length");
  std::vector<Trial> trials(contexts.size());
  for (std::size_t t = 0; t < contexts.size(); ++t)
    trials[t] = {static_cast<int>(t) + 1, contexts[t], choices_1based[t], feedbacks[t]};
  return sequence_trajectory(p, trials, pol, reset_on_switch);
}

// Generate one respondent's choices forward: sample the choice from the model
// probabilities, then draw feedback for the chosen alternative from the
// supplied generator and apply the learning update. Context sequence is given.
inline std::vector<Trial> simulate_trajectory(
    const ClassParams& p, const std::vector<Context>& contexts, Polarity pol, Rng& rng,
    const std::function<double(int /*alt 0-based*/, int /*trial 0-based*/, Context, Rng&)>&
        draw_feedback,
    bool reset_on_switch = false) {
  std::vector<Trial> trials;
  trials.reserve(contexts.size());
  std::vector<double> q = p.initial_q;
  bool have_prev = false;
  Context prev = Context::ds;
  for (std::size_t t = 0; t < contexts.size(); ++t) {
    const Context ctx = contexts[t];
    if (reset_on_switch && have_prev && ctx != prev) q = p.initial_q;
    const std::vector<double> probs = choice_probabilities(p, q, ctx, pol);
    const int chosen = rng.categorical(probs);
    const double fb = draw_feedback(chosen, static_cast<int>(t), ctx, rng);
    Trial tr;
    tr.index = static_cast<int>(t) + 1;
    tr.context = ctx;
    tr.chosen = chosen + 1;
    tr.feedback = fb;
    trials.push_back(tr);
    update_expectation(q, chosen, fb, p.learning_rate);
    have_prev = true;
    prev = ctx;
  }
  return trials;
}

}  // namespace lcrl

#pragma once

#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/model.hpp"
#include "lcrl/rl.hpp"

namespace lcrl {

// Membership logits for one respondent: X'eta_k for k < K-1 and 0 for the
// reference class (last).
inline std::vector<double> membership_logits(const MembershipParams& eta,
                                             const std::vector<double>& covariates) {
  const int km1 = eta.n_free_classes();
  std::vector<double> logits(km1 + 1, 0.0);
  for (int k = 0; k < km1; ++k) {
    double dot = 0.0;
    for (std::size_t j = 0; j < covariates.size(); ++j) dot += eta.weights[k][j] * covariates[j];
    logits[k] = dot;
  }
  return logits;
}

inline std::vector<double> membership_probabilities(const MembershipParams& eta,
                                                    const std::vector<double>& covariates) {
  return softmax(membership_logits(eta, covariates));
}

// Log-likelihood of one respondent under the mixture: log sum_k m_k L_k,
// computed as log-sum-exp of log m_k + log L_k.
inline double mixture_loglik_respondent(const PointParams& params, const Respondent& r,
                                        Polarity pol, bool reset_on_switch = false) {
  const int K = static_cast<int>(params.classes.size());
  if (K == 1) return sequence_loglik(params.classes[0], r.trials, pol, reset_on_switch);
  const std::vector<double> logits = membership_logits(params.eta, r.covariates);
  const double lz = log_sum_exp(logits);
  std::vector<double> terms(K);
  for (int k = 0; k < K; ++k)
    terms[k] = (logits[k] - lz) + sequence_loglik(params.classes[k], r.trials, pol, reset_on_switch);
  return log_sum_exp(terms);
}

inline double mixture_loglik(const PointParams& params, const PanelDataset& data,
                             bool reset_on_switch = false) {
  double ll = 0.0;
  for (const auto& r : data.respondents)
    ll += mixture_loglik_respondent(params, r, data.outcome_polarity, reset_on_switch);
  return ll;
}

// Posterior class memberships for one respondent given point parameters:
// proportional to prior membership times the class-conditional likelihood.
inline std::vector<double> posterior_memberships(const PointParams& params, const Respondent& r,
                                                 Polarity pol, bool reset_on_switch = false) {
  const int K = static_cast<int>(params.classes.size());
  if (K == 1) return {1.0};
  const std::vector<double> logits = membership_logits(params.eta, r.covariates);
  std::vector<double> terms(K);
  for (int k = 0; k < K; ++k)
    terms[k] = logits[k] + sequence_loglik(params.classes[k], r.trials, pol, reset_on_switch);
  return softmax(terms);
}

}  // namespace lcrl

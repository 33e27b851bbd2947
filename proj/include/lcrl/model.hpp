#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lcrl/common.hpp"

namespace lcrl {

// Experimental context of a trial: physically experienced feedback (ds) or
// hypothetical on-screen feedback (sp).
enum class Context { ds, sp };

inline std::string to_string(Context c) { return c == Context::ds ? "DS" : "SP"; }

inline std::optional<Context> parse_context(const std::string& s) {
  if (s == "DS") return Context::ds;
  if (s == "SP") return Context::sp;
  return std::nullopt;
}

// Whether learned expectations enter utility as a cost (negative sign on the
// sensitivity term) or a reward (positive sign). Dataset-level convention.
enum class Polarity { cost, reward };

inline double polarity_sign(Polarity p) { return p == Polarity::cost ? -1.0 : 1.0; }

inline std::string to_string(Polarity p) { return p == Polarity::cost ? "cost" : "reward"; }

inline std::optional<Polarity> parse_polarity(const std::string& s) {
  if (s == "cost") return Polarity::cost;
  if (s == "reward") return Polarity::reward;
  return std::nullopt;
}

// Initial expectation handling for one alternative: either fixed by the
// experimental design, or estimated on a bounded interval via a scaled
// sigmoid transform.
struct Q0Mode {
  enum class Kind { fixed, estimated };
  Kind kind = Kind::fixed;
  double value = 0.0;  // fixed
  double lower = 0.0;  // estimated
  double upper = 1.0;  // estimated

  static Q0Mode fixed(double v) { return {Kind::fixed, v, 0.0, 0.0}; }
  static Q0Mode estimated(double lo, double hi) { return {Kind::estimated, 0.0, lo, hi}; }
  bool is_estimated() const { return kind == Kind::estimated; }
};

struct Alternative {
  int id = 0;  // 1-based index
  std::string name;
  Q0Mode q0;
  bool gamma_identified = false;  // true: this alternative's bias is pinned to 0
};

struct Trial {
  int index = 0;  // 1-based, consecutive within a respondent
  Context context = Context::ds;
  int chosen = 0;      // alternative id
  double feedback = 0.0;  // realized outcome of the chosen alternative
};

struct Respondent {
  std::string id;
  std::vector<double> covariates;  // leading constant 1 by convention
  std::vector<Trial> trials;
};

struct PanelDataset {
  std::vector<Alternative> alternatives;
  std::vector<Respondent> respondents;
  Polarity outcome_polarity = Polarity::cost;

  int n_alternatives() const { return static_cast<int>(alternatives.size()); }

  long total_trials() const {
    long n = 0;
    for (const auto& r : respondents) n += static_cast<long>(r.trials.size());
    return n;
  }

  // Index (0-based) of the identified-bias alternative, or -1 if absent.
  int identified_index() const {
    for (std::size_t i = 0; i < alternatives.size(); ++i)
      if (alternatives[i].gamma_identified) return static_cast<int>(i);
    return -1;
  }

  std::vector<int> free_gamma_indices() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < alternatives.size(); ++i)
      if (!alternatives[i].gamma_identified) out.push_back(static_cast<int>(i));
    return out;
  }

  std::vector<int> estimated_q0_indices() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < alternatives.size(); ++i)
      if (alternatives[i].q0.is_estimated()) out.push_back(static_cast<int>(i));
    return out;
  }
};

// One latent class's behavioural parameters in natural (constrained) space.
// Vectors run over alternatives; identified bias entries stay exactly 0 and
// fixed initial expectations carry the design value.
struct ClassParams {
  std::vector<double> bias_ds;        // gamma, driving-simulator baseline
  std::vector<double> bias_sp_shift;  // gamma shift applied in SP context
  double sensitivity_ds = 1.0;        // beta, DS context
  double sensitivity_sp = 1.0;        // beta, SP context
  double learning_rate = 0.5;         // alpha in [0,1]
  std::vector<double> initial_q;      // Q at t=0, outcome units
};

// Membership model weights for classes 1..K-1; the last class is the
// zero-fixed reference.
struct MembershipParams {
  std::vector<std::vector<double>> weights;  // (K-1) rows x covariate dim

  int n_free_classes() const { return static_cast<int>(weights.size()); }
  int covariate_dim() const { return weights.empty() ? 0 : static_cast<int>(weights[0].size()); }
};

// Point parameters of a full model: one ClassParams per class plus the
// membership weights (empty for a single class).
struct PointParams {
  std::vector<ClassParams> classes;
  MembershipParams eta;
};

struct NormalPrior {
  double mean = 0.0;
  double sd = 1.0;
};

// Prior hyperparameters per latent family. Bias and membership weights are
// normal; the learning-rate and initial-Q latents are normal before their
// sigmoid transforms; sensitivities are lognormal (normal on the log scale).
struct PriorSpec {
  NormalPrior gamma{0.0, 5.0};
  NormalPrior eta{0.0, 5.0};
  NormalPrior z_alpha{0.0, 1.5};
  NormalPrior z_q0{0.0, 1.5};
  NormalPrior log_beta{0.0, 1.0};
};

struct ModelSpec {
  int class_count = 1;
  std::vector<std::string> covariate_names;
  PriorSpec priors;
  std::uint64_t rng_seed = 1;
  // Carry Q across the context switch by default; reset is exposed for
  // sensitivity analysis.
  bool reset_q_on_context_switch = false;
};

inline std::vector<std::string> validate(const PanelDataset& data, const ModelSpec& spec) {
  std::vector<std::string> v;
  if (spec.class_count < 1) v.push_back("model: class count must be >= 1");
  if (data.alternatives.empty()) v.push_back("dataset: no alternatives declared");
  if (data.respondents.empty()) v.push_back("dataset: at least one respondent required");

  int identified = 0;
  for (std::size_t i = 0; i < data.alternatives.size(); ++i) {
    const auto& a = data.alternatives[i];
    if (a.id != static_cast<int>(i) + 1)
      v.push_back("alternative '" + a.name + "': id " + std::to_string(a.id) +
                  " does not match position " + std::to_string(i + 1));
    if (a.gamma_identified) ++identified;
    if (a.q0.is_estimated() && !(a.q0.lower < a.q0.upper))
      v.push_back("alternative '" + a.name + "': estimated q0 requires lower < upper");
  }
  if (identified != 1)
    v.push_back("alternatives: exactly one must have the identified (zero) bias, found " +
                std::to_string(identified));

  const std::size_t cov_dim = spec.covariate_names.size();
  for (const auto& r : data.respondents) {
    if (r.covariates.size() != cov_dim)
      v.push_back("respondent '" + r.id + "': covariate vector length " +
                  std::to_string(r.covariates.size()) + " != model covariate count " +
                  std::to_string(cov_dim));
    if (spec.class_count > 1 && !r.covariates.empty() && r.covariates[0] != 1.0)
      v.push_back("respondent '" + r.id + "': leading covariate must be the constant 1");
    if (r.trials.empty())
      v.push_back("respondent '" + r.id + "': no trials");
    for (std::size_t t = 0; t < r.trials.size(); ++t) {
      const Trial& tr = r.trials[t];
      if (tr.index != static_cast<int>(t) + 1)
        v.push_back("respondent '" + r.id + "': gap in trial order at position " +
                    std::to_string(t + 1) + " (index " + std::to_string(tr.index) + ")");
      if (tr.chosen < 1 || tr.chosen > data.n_alternatives())
        v.push_back("respondent '" + r.id + "' trial " + std::to_string(tr.index) +
                    ": chosen alternative id " + std::to_string(tr.chosen) + " out of range");
      if (!std::isfinite(tr.feedback))
        v.push_back("respondent '" + r.id + "' trial " + std::to_string(tr.index) +
                    ": feedback is not finite");
    }
  }
  return v;
}

inline std::vector<std::string> validate_class_params(const ClassParams& p,
                                                      const PanelDataset& data) {
  std::vector<std::string> v;
  const std::size_t n_alt = data.alternatives.size();
  if (p.bias_ds.size() != n_alt) v.push_back("class params: bias_ds length mismatch");
  if (p.bias_sp_shift.size() != n_alt) v.push_back("class params: bias_sp_shift length mismatch");
  if (p.initial_q.size() != n_alt) v.push_back("class params: initial_q length mismatch");
  if (!(p.sensitivity_ds > 0.0)) v.push_back("class params: beta_ds must be > 0");
  if (!(p.sensitivity_sp > 0.0)) v.push_back("class params: beta_sp must be > 0");
  if (!(p.learning_rate >= 0.0 && p.learning_rate <= 1.0))
    v.push_back("class params: alpha out of [0,1]");
  for (std::size_t i = 0; i < std::min(n_alt, p.bias_ds.size()); ++i) {
    const auto& a = data.alternatives[i];
    if (a.gamma_identified &&
        (p.bias_ds[i] != 0.0 || (i < p.bias_sp_shift.size() && p.bias_sp_shift[i] != 0.0)))
      v.push_back("class params: identified bias for '" + a.name + "' must be exactly 0");
    if (i < p.initial_q.size()) {
      if (a.q0.is_estimated() &&
          (p.initial_q[i] < a.q0.lower || p.initial_q[i] > a.q0.upper))
        v.push_back("class params: initial q for '" + a.name + "' outside [" +
                    g17(a.q0.lower) + ", " + g17(a.q0.upper) + "]");
      if (!a.q0.is_estimated() && p.initial_q[i] != a.q0.value)
        v.push_back("class params: fixed initial q for '" + a.name + "' must equal " +
                    g17(a.q0.value));
    }
  }
  return v;
}

// Count of point parameters: per class the free biases in both contexts, the
// two sensitivities, the learning rate, and the estimated initial
// expectations; plus the membership weights for K-1 classes.
inline int count_parameters(const ModelSpec& spec, const PanelDataset& data) {
  const int free_gamma = static_cast<int>(data.free_gamma_indices().size());
  const int free_q0 = static_cast<int>(data.estimated_q0_indices().size());
  const int per_class = 2 * free_gamma + 2 + 1 + free_q0;
  const int membership =
      (spec.class_count - 1) * static_cast<int>(spec.covariate_names.size());
  return spec.class_count * per_class + membership;
}

// Default ClassParams skeleton with identified biases zeroed and fixed Q0
// entries filled from the alternative declarations.
inline ClassParams make_class_params(const PanelDataset& data) {
  const std::size_t n = data.alternatives.size();
  ClassParams p;
  p.bias_ds.assign(n, 0.0);
  p.bias_sp_shift.assign(n, 0.0);
  p.initial_q.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& q0 = data.alternatives[i].q0;
    p.initial_q[i] = q0.is_estimated() ? 0.5 * (q0.lower + q0.upper) : q0.value;
  }
  return p;
}

}  // namespace lcrl

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "lcrl/simulate.hpp"

using namespace lcrl;

namespace {

std::vector<Alternative> two_routes() {
  return {{1, "reliable", Q0Mode::fixed(5.0), false},
          {2, "unreliable", Q0Mode::estimated(2.0, 7.0), true}};
}

FeedbackModel route_feedback() {
  FeedbackModel fb;
  fb.per_alternative = {FeedbackSpec::deterministic(5.0),
                        FeedbackSpec::discrete({{2.0, 0.6}, {7.0, 0.4}})};
  return fb;
}

const std::vector<CovariateSpec> kConstOnly{{"const", CovariateSpec::Kind::constant, 1.0, 0.0}};

ModelSpec one_class_spec() {
  ModelSpec spec;
  spec.class_count = 1;
  spec.covariate_names = {"const"};
  return spec;
}

ClassParams flat_params(const PanelDataset& tmpl) {
  ClassParams c = make_class_params(tmpl);
  c.bias_ds = {0.0, 0.0};
  c.bias_sp_shift = {0.0, 0.0};
  c.sensitivity_ds = 1.0;
  c.sensitivity_sp = 1.0;
  c.learning_rate = 0.3;
  c.initial_q[1] = 4.0;
  return c;
}

}  // namespace

TEST_CASE("overwhelming cost sensitivity always picks the cheaper route") {
  Rng rng(1);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 40, 10, 10, rng);
  ModelSpec spec = one_class_spec();

  PointParams truth;
  ClassParams c = flat_params(tmpl);
  c.sensitivity_ds = c.sensitivity_sp = 400.0;  // softmax saturates
  c.learning_rate = 0.0;                        // expectations frozen
  c.initial_q = {5.0, 3.0};                     // route 2 strictly cheaper
  truth.classes = {c};

  auto [data, record] = simulate_dataset(tmpl, spec, truth, route_feedback(), rng);
  for (const auto& r : data.respondents)
    for (const auto& t : r.trials) REQUIRE(t.chosen == 2);
}

TEST_CASE("deterministic feedback equal to the expectation never moves it") {
  Rng rng(2);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 5, 10, 10, rng);
  ModelSpec spec = one_class_spec();

  PointParams truth;
  ClassParams c = flat_params(tmpl);
  c.learning_rate = 0.9;
  c.initial_q = {5.0, 5.0};
  truth.classes = {c};

  FeedbackModel fb;
  fb.per_alternative = {FeedbackSpec::deterministic(5.0), FeedbackSpec::deterministic(5.0)};
  auto [data, record] = simulate_dataset(tmpl, spec, truth, fb, rng);
  // with zero prediction error on both routes the process is a pure coin
  // flip; replaying the choices against the update rule must keep q at 5
  for (const auto& r : data.respondents) {
    const QTrajectory walk =
        sequence_trajectory(truth.classes[0], r.trials, data.outcome_polarity);
    for (const auto& step : walk.steps)
      for (double v : step.q_before) REQUIRE(v == 5.0);
  }
}

TEST_CASE("unreliable-route lottery feedback averages four minutes") {
  Rng rng(3);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 83, 10, 10, rng);
  ModelSpec spec = one_class_spec();
  PointParams truth;
  truth.classes = {flat_params(tmpl)};

  auto [data, record] = simulate_dataset(tmpl, spec, truth, route_feedback(), rng);
  double sum = 0.0;
  int n = 0;
  for (const auto& r : data.respondents)
    for (const auto& t : r.trials)
      if (t.chosen == 2) {
        sum += t.feedback;
        ++n;
      }
  REQUIRE(n > 200);  // flat utilities: roughly half of 1660 trials
  const double mean = sum / n;
  // outcomes are 2 w.p. 0.6 and 7 w.p. 0.4: mean 4, sd sqrt(E[x^2]-16)=2.449
  const double se = 2.449 / std::sqrt(static_cast<double>(n));
  REQUIRE(std::abs(mean - 4.0) <= 3.0 * se);
}

TEST_CASE("frozen expectations: simulated shares match the model probabilities") {
  // one respondent, 10^5 trials, alpha = 0 so probabilities never move
  Rng rng(4);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 1, 50000, 50000, rng);
  ModelSpec spec = one_class_spec();

  PointParams truth;
  ClassParams c = flat_params(tmpl);
  c.bias_ds = {0.4, 0.0};
  c.bias_sp_shift = {0.0, 0.0};
  c.sensitivity_ds = c.sensitivity_sp = 0.6;
  c.learning_rate = 0.0;
  c.initial_q = {5.0, 3.5};
  truth.classes = {c};

  auto [data, record] = simulate_dataset(tmpl, spec, truth, route_feedback(), rng);

  long picks1_ds = 0, n_ds = 0, picks1_sp = 0, n_sp = 0;
  for (const auto& t : data.respondents[0].trials) {
    if (t.context == Context::ds) {
      ++n_ds;
      picks1_ds += t.chosen == 1;
    } else {
      ++n_sp;
      picks1_sp += t.chosen == 1;
    }
  }
  for (Context ctx : {Context::ds, Context::sp}) {
    const auto probs = choice_probabilities(c, c.initial_q, ctx, data.outcome_polarity);
    const double p = probs[0];
    const long n = ctx == Context::ds ? n_ds : n_sp;
    const double share =
        static_cast<double>(ctx == Context::ds ? picks1_ds : picks1_sp) / n;
    const double se = std::sqrt(p * (1.0 - p) / n);
    REQUIRE(std::abs(share - p) <= 3.0 * se);
  }
}

TEST_CASE("class assignments follow the membership model") {
  Rng rng(5);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 4000, 2, 2, rng);
  ModelSpec spec = one_class_spec();
  spec.class_count = 2;

  PointParams truth;
  truth.classes = {flat_params(tmpl), flat_params(tmpl)};
  truth.classes[1].bias_ds[0] = 1.0;
  truth.eta.weights = {{0.8}};  // class 1 share sigmoid(0.8) ~ 0.69

  auto [data, record] = simulate_dataset(tmpl, spec, truth, route_feedback(), rng);
  REQUIRE(record.class_of.size() == 4000);
  long in_first = 0;
  for (int s : record.class_of) in_first += s == 0;
  const double p = sigmoid(0.8);
  const double se = std::sqrt(p * (1.0 - p) / 4000.0);
  REQUIRE(std::abs(in_first / 4000.0 - p) <= 3.0 * se);
}

TEST_CASE("generated datasets validate cleanly") {
  Rng rng(6);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 20, 10, 10, rng);
  ModelSpec spec = one_class_spec();
  spec.class_count = 2;
  DrawRanges ranges;
  for (auto& [data, record] : simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 5, 7))
    REQUIRE(validate(data, spec).empty());
}

TEST_CASE("empty recovery batch is empty") {
  Rng rng(7);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 5, 2, 2, rng);
  ModelSpec spec = one_class_spec();
  DrawRanges ranges;
  REQUIRE(simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 0, 9).empty());
}

TEST_CASE("same seed reproduces the same truths; different seeds do not") {
  Rng rng(8);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 6, 3, 3, rng);
  ModelSpec spec = one_class_spec();
  spec.class_count = 2;
  spec.covariate_names = {"const"};
  DrawRanges ranges;

  const auto a = simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 3, 42);
  const auto b = simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 3, 42);
  const auto c = simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 3, 43);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(a[i].second.params.classes[0].learning_rate ==
            b[i].second.params.classes[0].learning_rate);
    REQUIRE(a[i].second.params.classes[0].bias_ds[0] ==
            b[i].second.params.classes[0].bias_ds[0]);
    REQUIRE(a[i].first.respondents[0].trials[0].chosen ==
            b[i].first.respondents[0].trials[0].chosen);
  }
  REQUIRE(a[0].second.params.classes[0].learning_rate !=
          c[0].second.params.classes[0].learning_rate);
}

TEST_CASE("independent truth draws center where they should") {
  // 100 K=2 datasets give 200 N(0,1) draws of the free DS bias; their mean
  // obeys the CLT bound 3/sqrt(200)
  Rng rng(9);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 2, 2, 2, rng);
  ModelSpec spec = one_class_spec();
  spec.class_count = 2;
  DrawRanges ranges;
  const auto batch = simulate_recovery_batch(tmpl, spec, ranges, route_feedback(), 100, 11);
  double sum = 0.0;
  for (const auto& [data, record] : batch)
    for (const auto& c : record.params.classes) sum += c.bias_ds[0];
  REQUIRE(std::abs(sum / 200.0) <= 3.0 / std::sqrt(200.0));
}

TEST_CASE("a schedule shorter than the panel is rejected") {
  Rng rng(10);
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, kConstOnly, 3, 5, 5, rng);
  ModelSpec spec = one_class_spec();
  PointParams truth;
  truth.classes = {flat_params(tmpl)};

  FeedbackModel fb;
  fb.per_alternative = {FeedbackSpec::deterministic(5.0),
                        FeedbackSpec::from_schedule({2.0, 7.0, 2.0})};  // 3 < 10 trials
  REQUIRE_THROWS_WITH(simulate_dataset(tmpl, spec, truth, fb, rng),
                      Catch::Matchers::ContainsSubstring("schedule has 3 entries"));
}

TEST_CASE("discrete feedback probabilities must sum to one") {
  FeedbackModel fb;
  fb.per_alternative = {FeedbackSpec::deterministic(5.0),
                        FeedbackSpec::discrete({{2.0, 0.6}, {7.0, 0.3}})};
  const auto v = fb.validate(2, 10);
  REQUIRE(v.size() == 1);
  REQUIRE(v[0].find("sum to") != std::string::npos);
}

TEST_CASE("template panels carry the requested structure") {
  Rng rng(11);
  std::vector<CovariateSpec> covs{{"const", CovariateSpec::Kind::constant, 1.0, 0.0},
                                  {"female", CovariateSpec::Kind::bernoulli, 0.49, 0.0}};
  PanelDataset tmpl =
      make_template_dataset(two_routes(), Polarity::cost, covs, 83, 10, 10, rng);
  REQUIRE(tmpl.respondents.size() == 83);
  for (const auto& r : tmpl.respondents) {
    REQUIRE(r.trials.size() == 20);
    REQUIRE(r.covariates.size() == 2);
    REQUIRE(r.covariates[0] == 1.0);
    REQUIRE((r.covariates[1] == 0.0 || r.covariates[1] == 1.0));
    int ds = 0;
    for (const auto& t : r.trials) ds += t.context == Context::ds;
    REQUIRE(ds == 10);
  }
  // respondents alternate DS-first and SP-first blocks
  REQUIRE(tmpl.respondents[0].trials[0].context == Context::ds);
  REQUIRE(tmpl.respondents[1].trials[0].context == Context::sp);
}

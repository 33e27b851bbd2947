#include <catch2/catch_amalgamated.hpp>

#include "lcrl/model.hpp"

using namespace lcrl;

namespace {

// Two alternatives in the shape used throughout: one with a known fixed
// initial expectation, one estimated inside [2,7] whose bias is the
// reference.
PanelDataset two_alt_dataset() {
  PanelDataset data;
  data.alternatives.push_back({1, "reliable", Q0Mode::fixed(5.0), false});
  data.alternatives.push_back({2, "unreliable", Q0Mode::estimated(2.0, 7.0), true});
  data.outcome_polarity = Polarity::cost;
  Respondent r;
  r.id = "r1";
  r.covariates = {1.0};
  for (int t = 1; t <= 4; ++t)
    r.trials.push_back({t, t <= 2 ? Context::ds : Context::sp, 1 + t % 2, 5.0});
  data.respondents.push_back(std::move(r));
  return data;
}

ModelSpec base_spec(int k = 1) {
  ModelSpec spec;
  spec.class_count = k;
  spec.covariate_names = {"const"};
  return spec;
}

}  // namespace

TEST_CASE("well-formed dataset validates cleanly") {
  REQUIRE(validate(two_alt_dataset(), base_spec()).empty());
}

TEST_CASE("gap in trial order is reported") {
  PanelDataset data = two_alt_dataset();
  data.respondents[0].trials[1].index = 3;  // 1,3,... instead of 1,2,...
  const auto v = validate(data, base_spec());
  REQUIRE(v.size() == 1);
  REQUIRE(v[0].find("gap in trial order") != std::string::npos);
}

TEST_CASE("alpha outside [0,1] is reported") {
  PanelDataset data = two_alt_dataset();
  ClassParams p = make_class_params(data);
  p.sensitivity_ds = p.sensitivity_sp = 1.0;
  p.learning_rate = 1.2;
  const auto v = validate_class_params(p, data);
  REQUIRE(v.size() == 1);
  REQUIRE(v[0].find("alpha out of [0,1]") != std::string::npos);
}

TEST_CASE("class params invariants: beta, identified gamma, q0 bounds") {
  PanelDataset data = two_alt_dataset();
  ClassParams p = make_class_params(data);
  p.sensitivity_ds = 1.0;
  p.sensitivity_sp = 1.0;
  p.learning_rate = 0.5;
  REQUIRE(validate_class_params(p, data).empty());

  SECTION("nonpositive sensitivity") {
    p.sensitivity_ds = 0.0;
    REQUIRE_FALSE(validate_class_params(p, data).empty());
  }
  SECTION("identified bias must stay zero") {
    p.bias_ds[1] = 0.3;
    REQUIRE_FALSE(validate_class_params(p, data).empty());
  }
  SECTION("estimated q0 outside bounds") {
    p.initial_q[1] = 9.0;
    REQUIRE_FALSE(validate_class_params(p, data).empty());
  }
  SECTION("fixed q0 must equal the declared value") {
    p.initial_q[0] = 4.0;
    REQUIRE_FALSE(validate_class_params(p, data).empty());
  }
}

TEST_CASE("validate catches structural problems") {
  SECTION("no identified bias") {
    PanelDataset data = two_alt_dataset();
    data.alternatives[1].gamma_identified = false;
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
  SECTION("two identified biases") {
    PanelDataset data = two_alt_dataset();
    data.alternatives[0].gamma_identified = true;
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
  SECTION("estimated q0 with inverted bounds") {
    PanelDataset data = two_alt_dataset();
    data.alternatives[1].q0 = Q0Mode::estimated(7.0, 2.0);
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
  SECTION("chosen id out of range") {
    PanelDataset data = two_alt_dataset();
    data.respondents[0].trials[0].chosen = 3;
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
  SECTION("non-finite feedback") {
    PanelDataset data = two_alt_dataset();
    data.respondents[0].trials[0].feedback = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
  SECTION("covariate length mismatch") {
    PanelDataset data = two_alt_dataset();
    ModelSpec spec = base_spec(2);
    spec.covariate_names = {"const", "female"};
    REQUIRE_FALSE(validate(data, spec).empty());
  }
  SECTION("missing leading constant when classes need covariates") {
    PanelDataset data = two_alt_dataset();
    data.respondents[0].covariates = {0.0};
    REQUIRE_FALSE(validate(data, base_spec(2)).empty());
  }
  SECTION("empty trials") {
    PanelDataset data = two_alt_dataset();
    data.respondents[0].trials.clear();
    REQUIRE_FALSE(validate(data, base_spec()).empty());
  }
}

TEST_CASE("violations name the offending respondent") {
  PanelDataset data = two_alt_dataset();
  data.respondents[0].trials[1].index = 3;
  const auto v = validate(data, base_spec());
  REQUIRE(v[0].find("r1") != std::string::npos);
}

TEST_CASE("parameter count matches the application structure") {
  // 2 alternatives, 1 free bias per context, 1 estimated q0, 6 covariates:
  // per class 2+2+1+1 = 6, plus 6 membership weights per extra class.
  PanelDataset data = two_alt_dataset();
  ModelSpec spec = base_spec();
  spec.covariate_names = {"c1", "c2", "c3", "c4", "c5", "c6"};
  spec.class_count = 1;
  REQUIRE(count_parameters(spec, data) == 6);
  spec.class_count = 2;
  REQUIRE(count_parameters(spec, data) == 18);
  spec.class_count = 3;
  REQUIRE(count_parameters(spec, data) == 30);

  // affine in the class count: consecutive differences are constant
  spec.class_count = 4;
  const int c4 = count_parameters(spec, data);
  REQUIRE(c4 - 30 == 30 - 18);
}

TEST_CASE("make_class_params fills fixed and midpoint initial expectations") {
  PanelDataset data = two_alt_dataset();
  const ClassParams p = make_class_params(data);
  REQUIRE(p.initial_q[0] == 5.0);
  REQUIRE(p.initial_q[1] == 4.5);
  REQUIRE(p.bias_ds == std::vector<double>{0.0, 0.0});
}

TEST_CASE("dataset helpers expose the free-parameter structure") {
  PanelDataset data = two_alt_dataset();
  REQUIRE(data.identified_index() == 1);
  REQUIRE(data.free_gamma_indices() == std::vector<int>{0});
  REQUIRE(data.estimated_q0_indices() == std::vector<int>{1});
  REQUIRE(data.total_trials() == 4);
}

TEST_CASE("context and polarity round-trip through their string forms") {
  REQUIRE(to_string(Context::ds) == std::string("DS"));
  REQUIRE(to_string(Context::sp) == std::string("SP"));
  REQUIRE(parse_context("DS") == Context::ds);
  REQUIRE(parse_context("SP") == Context::sp);
  REQUIRE(polarity_sign(Polarity::cost) == -1.0);
  REQUIRE(polarity_sign(Polarity::reward) == 1.0);
  REQUIRE(parse_polarity("reward") == Polarity::reward);
}

#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/evaluation.hpp"
#include "lcrl/fit.hpp"
#include "lcrl/model.hpp"
#include "lcrl/simulate.hpp"

namespace lcrl {

namespace detail {

// Field quoting per RFC-ish CSV: quote when the value contains a comma,
// quote, or newline; embedded quotes are doubled.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, const std::string& what, std::size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    fail("csv line " + std::to_string(line_no) + ": cannot parse " + what + " from '" + s + "'");
  return v;
}

inline long parse_long(const std::string& s, const std::string& what, std::size_t line_no) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    fail("csv line " + std::to_string(line_no) + ": cannot parse " + what + " from '" + s + "'");
  return v;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // \n endings on every platform
  if (!out) fail("cannot open for writing: " + path);
  return out;
}

}  // namespace detail

// ---- panel data ----

inline void write_panel_csv(std::ostream& out, const PanelDataset& data,
                            const std::vector<std::string>& covariate_names) {
  out << "respondent_id,trial_index,context,chosen_alt,feedback";
  for (const auto& c : covariate_names) out << ',' << detail::csv_field(c);
  out << '\n';
  for (const auto& r : data.respondents)
    for (const Trial& t : r.trials) {
      out << detail::csv_field(r.id) << ',' << t.index << ',' << to_string(t.context) << ','
          << t.chosen << ',' << g17(t.feedback);
      for (double c : r.covariates) out << ',' << g17(c);
      out << '\n';
    }
}

inline void write_panel_csv(const std::string& path, const PanelDataset& data,
                            const std::vector<std::string>& covariate_names) {
  auto out = detail::open_out(path);
  write_panel_csv(out, data, covariate_names);
}

// Panel rows from a CSV stream. Alternatives, polarity, and the covariate
// subset come from the caller (the run configuration); extra columns are
// ignored. Respondents appear in first-appearance order; structural checks
// beyond parsing are left to validate().
inline PanelDataset read_panel_csv(std::istream& in, const std::vector<Alternative>& alternatives,
                                   Polarity polarity,
                                   const std::vector<std::string>& covariate_names) {
  PanelDataset data;
  data.alternatives = alternatives;
  data.outcome_polarity = polarity;

  std::string line;
  if (!std::getline(in, line)) fail("csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> required = {"respondent_id", "trial_index", "context",
                                             "chosen_alt", "feedback"};
  std::map<std::string, int> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = static_cast<int>(i);
  for (const auto& name : required)
    if (!col.count(name)) fail("csv: missing required column '" + name + "'");
  std::vector<int> cov_cols;
  for (const auto& name : covariate_names) {
    if (!col.count(name)) fail("csv: covariate column '" + name + "' not in header");
    cov_cols.push_back(col[name]);
  }

  std::map<std::string, std::size_t> resp_index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() < header.size())
      fail("csv line " + std::to_string(line_no) + ": expected " +
           std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));

    const std::string& id = fields[col["respondent_id"]];
    Trial t;
    t.index =
        static_cast<int>(detail::parse_long(fields[col["trial_index"]], "trial_index", line_no));
    const auto ctx = parse_context(fields[col["context"]]);
    if (!ctx)
      fail("csv line " + std::to_string(line_no) + ": context must be DS or SP, got '" +
           fields[col["context"]] + "'");
    t.context = *ctx;
    const std::string& chosen = fields[col["chosen_alt"]];
    char* end = nullptr;
    const long chosen_id = std::strtol(chosen.c_str(), &end, 10);
    if (end != chosen.c_str() && *end == '\0') {
      t.chosen = static_cast<int>(chosen_id);
    } else {
      t.chosen = 0;
      for (const auto& a : alternatives)
        if (a.name == chosen) t.chosen = a.id;
      if (t.chosen == 0)
        fail("csv line " + std::to_string(line_no) + ": unknown alternative '" + chosen + "'");
    }
    t.feedback = detail::parse_double(fields[col["feedback"]], "feedback", line_no);

    std::vector<double> covs;
    covs.reserve(cov_cols.size());
    for (std::size_t i = 0; i < cov_cols.size(); ++i)
      covs.push_back(detail::parse_double(fields[cov_cols[i]], covariate_names[i], line_no));

    auto it = resp_index.find(id);
    if (it == resp_index.end()) {
      resp_index[id] = data.respondents.size();
      Respondent r;
      r.id = id;
      r.covariates = covs;
      data.respondents.push_back(std::move(r));
      it = resp_index.find(id);
    } else {
      const auto& seen = data.respondents[it->second].covariates;
      for (std::size_t i = 0; i < covs.size(); ++i)
        if (covs[i] != seen[i])
          fail("csv line " + std::to_string(line_no) + ": covariate '" + covariate_names[i] +
               "' changes within respondent '" + id + "'");
    }
    data.respondents[it->second].trials.push_back(t);
  }
  return data;
}

inline PanelDataset read_panel_csv(const std::string& path,
                                   const std::vector<Alternative>& alternatives,
                                   Polarity polarity,
                                   const std::vector<std::string>& covariate_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open dataset: " + path);
  return read_panel_csv(in, alternatives, polarity, covariate_names);
}

// ---- report artifacts ----

inline void write_memberships_csv(std::ostream& out, const PanelDataset& data,
                                  const std::vector<std::vector<double>>& memberships) {
  const int K = memberships.empty() ? 1 : static_cast<int>(memberships[0].size());
  out << "respondent_id";
  for (int k = 1; k <= K; ++k) out << ",pi_" << k;
  out << '\n';
  for (std::size_t n = 0; n < data.respondents.size(); ++n) {
    out << detail::csv_field(data.respondents[n].id);
    for (double p : memberships[n]) out << ',' << g17(p);
    out << '\n';
  }
}

// Summary rows plus one class-share row per class. Classes are written
// 1-based. A point-mass row carries z = "inf" (infinitely precise).
inline void write_summary_csv(std::ostream& out, const PosteriorSummary& summary) {
  out << "parameter,class,mean,sd,z\n";
  for (const SummaryRow& row : summary.rows) {
    out << detail::csv_field(row.parameter) << ',' << row.class_index + 1 << ','
        << g17(row.mean) << ',' << g17(row.sd) << ','
        << (row.point_mass ? std::string("inf") : g17(row.z)) << '\n';
  }
  for (std::size_t k = 0; k < summary.class_shares.size(); ++k)
    out << "class_share," << k + 1 << ',' << g17(summary.class_shares[k]) << ",,\n";
}

inline void write_trajectory_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows,
                                 Context ctx, const PanelDataset& data) {
  out << "trial,context,alt,q_value,choice_prob\n";
  for (const TrajectoryRow& r : rows)
    out << r.trial << ',' << to_string(ctx) << ','
        << detail::csv_field(data.alternatives[r.alt].name) << ',' << g17(r.q_value) << ','
        << g17(r.choice_prob) << '\n';
}

// Undefined metric cells (zero truth range or variance) are written as the
// literal "undef" rather than a number.
inline void write_recovery_csv(std::ostream& out, const std::vector<RecoveryRow>& rows) {
  out << "parameter,class,bias,nrmse,correlation,r2\n";
  for (const RecoveryRow& r : rows) {
    out << detail::csv_field(r.parameter) << ',' << r.class_index + 1 << ',' << g17(r.bias)
        << ',' << (r.nrmse_defined ? g17(r.nrmse) : std::string("undef")) << ','
        << (r.correlation_defined ? g17(r.correlation) : std::string("undef")) << ','
        << (r.r2_defined ? g17(r.r2) : std::string("undef")) << '\n';
  }
}

inline void write_scatter_csv(std::ostream& out, const std::vector<ParamSeries>& series) {
  out << "parameter,class,dataset,truth,estimate\n";
  for (const ParamSeries& ps : series)
    for (std::size_t s = 0; s < ps.truth.size(); ++s)
      out << detail::csv_field(ps.parameter) << ',' << ps.class_index + 1 << ',' << s + 1 << ','
          << g17(ps.truth[s]) << ',' << g17(ps.estimate[s]) << '\n';
}

inline void write_comparison_csv(std::ostream& out,
                                 const std::vector<std::pair<std::string, FitStats>>& rows) {
  out << "model,ll,parameters,observations,aic,bic\n";
  for (const auto& [label, s] : rows)
    out << detail::csv_field(label) << ',' << g17(s.ll) << ',' << s.k << ',' << s.n << ','
        << g17(s.aic) << ',' << g17(s.bic) << '\n';
}

}  // namespace lcrl

#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id = 0;
  std::string title;
  std::function<Outcome()> run;
};

std::vector<Criterion> exact_criteria();
std::vector<Criterion> experiment_criteria();

template <typename... Ts>
std::string cat(const Ts&... xs) {
  std::ostringstream s;
  s.precision(6);
  (s << ... << xs);
  return s.str();
}

/// Timestamped progress line on stderr.
void progress(const std::string& msg);

double mean(const std::vector<double>& x);
double sample_variance(const std::vector<double>& x);

struct WelchResult {
  double t = 0;
  double dof = 0;
  double p_greater = 1;  // one-sided: mean(a) > mean(b)
};
WelchResult welch_greater(const std::vector<double>& a, const std::vector<double>& b);

/// Least-squares slope of log y on log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace acceptance

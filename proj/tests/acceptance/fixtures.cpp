#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "acceptance.hpp"

namespace acceptance {

namespace {
const auto start = std::chrono::steady_clock::now();
}  // namespace

void progress(const std::string& msg) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cerr << "[" << std::fixed << std::setprecision(1) << s << "s] " << msg << std::endl;
  std::cerr.unsetf(std::ios::fixed);
}

double mean(const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); }

double sample_variance(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / double(x.size() - 1);
}

WelchResult welch_greater(const std::vector<double>& a, const std::vector<double>& b) {
  const double va = sample_variance(a) / double(a.size()), vb = sample_variance(b) / double(b.size());
  WelchResult r;
  const double diff = mean(a) - mean(b);
  if (va + vb == 0) {
    r.t = diff > 0 ? INFINITY : diff < 0 ? -INFINITY : 0;
    r.p_greater = diff > 0 ? 0 : diff < 0 ? 1 : 0.5;
    return r;
  }
  r.t = diff / std::sqrt(va + vb);
  r.dof = (va + vb) * (va + vb) /
          (va * va / double(a.size() - 1) + vb * vb / double(b.size() - 1));
  r.p_greater = boost::math::cdf(boost::math::complement(boost::math::students_t(r.dof), r.t));
  return r;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) lx.push_back(std::log(x[i])), ly.push_back(std::log(y[i]));
  const double mx = mean(lx), my = mean(ly);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
  return sxy / sxx;
}

}  // namespace acceptance

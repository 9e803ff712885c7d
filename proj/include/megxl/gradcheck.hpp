#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "megxl/autodiff.hpp"

namespace megxl {

struct GradCheckOptions {
  double h = 1e-3;
  // Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 0;
  // While the estimates at h and h/10 differ by more than stable_tol, move
  // to the smaller step, up to this many times. Stops a step that straddles
  // a kink from dominating.
  int refinements = 0;
  double stable_tol = 1e-4;
};

inline double relative_gap(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

/// Compares reverse-mode gradients of a 64-bit scalar loss with central
/// differences. `loss(true)` must evaluate the loss and run backward into
/// the store's gradients; `loss(false)` only evaluates.
inline double finite_diff_check(ParameterStore<double>& store,
                                const std::function<double(bool)>& loss,
                                const GradCheckOptions& opt = {}) {
  store.zero_grad();
  const double f0 = loss(true);
  if (!std::isfinite(f0)) throw Error("finite_diff_check: non-finite loss");
  std::mt19937_64 rng(opt.seed);
  double worst = 0;
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    const MatrixD analytic = p.grad;
    const Index n = p.value.size();
    std::vector<Index> coords(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    if (opt.samples_per_tensor != 0 && coords.size() > opt.samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.samples_per_tensor);
    }
    for (Index idx : coords) {
      double& x = p.value.data()[idx];
      const double saved = x;
      auto central = [&](double h) {
        x = saved + h;
        const double fp = loss(false);
        x = saved - h;
        const double fm = loss(false);
        x = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_diff_check: non-finite loss");
        return (fp - fm) / (2 * h);
      };
      double h = opt.h;
      double numeric = central(h);
      for (int r = 0; r < opt.refinements; ++r) {
        const double finer = central(h / 10);
        // Differences within the rounding noise of the finer step count as agreement.
        const double noise = 8 * std::numeric_limits<double>::epsilon() * (std::abs(f0) + 1) / (h / 10);
        if (std::abs(numeric - finer) <= opt.stable_tol * (std::abs(numeric) + std::abs(finer)) + noise) break;
        numeric = finer;
        h /= 10;
      }
      worst = std::max(worst, relative_gap(analytic.data()[idx], numeric));
    }
  }
  return worst;
}

/// Plain-function variant: f(x) with analytic gradient g(x).
inline double finite_diff_check(const std::function<double(const Eigen::VectorXd&)>& f,
                                const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad,
                                const Eigen::VectorXd& x, double h = 1e-3) {
  const Eigen::VectorXd analytic = grad(x);
  double worst = 0;
  Eigen::VectorXd probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_diff_check: non-finite f");
    worst = std::max(worst, relative_gap(analytic[i], (fp - fm) / (2 * h)));
  }
  return worst;
}

}  // namespace megxl

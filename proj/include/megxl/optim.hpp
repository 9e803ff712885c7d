#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "megxl/autodiff.hpp"

namespace megxl {

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename Scalar>
struct AdamWState {
  long step = 0;
  Matrix<Scalar> m;
  Matrix<Scalar> v;
  AdamWHyper hyper;
};

/// One decoupled-weight-decay Adam update, in place on `param`.
template <typename Scalar>
void adamw_step(Matrix<Scalar>& param, const Matrix<Scalar>& grad, AdamWState<Scalar>& st) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw Error("adamw_step: shape mismatch");
  if (!grad.allFinite()) throw Error("adamw_step: non-finite gradient");
  if (st.m.size() == 0) {
    st.m.setZero(param.rows(), param.cols());
    st.v.setZero(param.rows(), param.cols());
  }
  const AdamWHyper& h = st.hyper;
  ++st.step;
  st.m = Scalar(h.beta1) * st.m + Scalar(1 - h.beta1) * grad;
  st.v = Scalar(h.beta2) * st.v + Scalar(1 - h.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(h.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(h.beta2, double(st.step));
  const Scalar lr = Scalar(h.lr);
  param -= lr * Scalar(h.weight_decay) * param;
  param.array() -= lr * (st.m.array() / Scalar(bc1)) /
                   ((st.v.array() / Scalar(bc2)).sqrt() + Scalar(h.eps));
}

/// Global L2 norm over every trainable gradient of the store.
template <typename Scalar>
double global_grad_norm(const ParameterStore<Scalar>& store) {
  double sq = 0;
  for (const auto& [_, p] : store)
    if (p.trainable) sq += p.grad.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(ParameterStore<Scalar>& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (norm > max_norm && norm > 0) {
    const Scalar s = Scalar(max_norm / norm);
    for (auto& [_, p] : store)
      if (p.trainable) p.grad *= s;
  }
  return norm;
}

/// Linear warmup from 0 to `base` over `warmup` steps, constant afterwards.
inline double warmup_lr(double base, long step, long warmup) {
  if (warmup <= 0 || step >= warmup) return base;
  return base * double(step) / double(warmup);
}

/// AdamW over a parameter store. Parameters are assigned to learning-rate
/// groups by a name predicate; the first matching group wins.
template <typename Scalar>
class AdamW {
 public:
  struct Group {
    std::function<bool(const std::string&)> matches;
    double lr;
  };

  explicit AdamW(AdamWHyper hyper) : hyper_(hyper) {}

  void add_group(std::function<bool(const std::string&)> matches, double lr) {
    groups_.push_back(Group{std::move(matches), lr});
  }

  /// Applies one update to every trainable parameter with lr scaled by
  /// `lr_scale` (used for warmup).
  void step(ParameterStore<Scalar>& store, double lr_scale = 1.0) {
    for (auto& [name, p] : store) {
      if (!p.trainable) continue;
      auto& st = states_[name];
      st.hyper = hyper_;
      st.hyper.lr = lr_for(name) * lr_scale;
      adamw_step(p.value, p.grad, st);
    }
  }

  double lr_for(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.matches(name)) return g.lr;
    return hyper_.lr;
  }

  std::map<std::string, AdamWState<Scalar>>& states() { return states_; }
  const std::map<std::string, AdamWState<Scalar>>& states() const { return states_; }

 private:
  AdamWHyper hyper_;
  std::vector<Group> groups_;
  std::map<std::string, AdamWState<Scalar>> states_;
};

}  // namespace megxl

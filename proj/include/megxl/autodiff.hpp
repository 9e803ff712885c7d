#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "megxl/kernels.hpp"
#include "megxl/tensor.hpp"

namespace megxl {

template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Named parameters in deterministic (lexicographic) order. Addresses are
/// stable for the lifetime of the store.
template <typename Scalar>
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter<Scalar>>;

  Parameter<Scalar>& add(const std::string& name, Matrix<Scalar> init, bool trainable = true) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw Error("duplicate parameter: " + name);
    it->second.value = std::move(init);
    it->second.trainable = trainable;
    it->second.zero_grad();
    return it->second;
  }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& [name, p] : params_)
      out.add(name, p.value.template cast<Other>(), p.trainable);
    return out;
  }

 private:
  Map params_;
};

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar>& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool needs_grad() const { return tape->needs_grad(id); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
/// them backwards visits every consumer before its inputs.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat&)>;

  Var<Scalar> constant(Mat v) { return record(std::move(v), false, nullptr); }

  Var<Scalar> leaf(Parameter<Scalar>& p) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    if (!p.trainable) return record(p.value, false, nullptr);
    Parameter<Scalar>* target = &p;
    return record(p.value, true, [target](Tape&, const Mat& g) { target->grad += g; });
  }

  Var<Scalar> record(Mat v, bool needs_grad, Backward bw) {
    nodes_.push_back(Node{std::move(v), Mat(), needs_grad, std::move(bw)});
    return Var<Scalar>{this, nodes_.size() - 1};
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every parameter leaf.
  void backward(Var<Scalar> root) {
    if (root.rows() != 1 || root.cols() != 1) throw Error("backward: root must be a scalar");
    if (!nodes_[root.id].needs_grad) return;
    nodes_[root.id].grad = Mat::Ones(1, 1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
      if (!retain_grads_ && i != root.id) n.grad = Mat();
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Keep intermediate gradients after backward (for inspection in tests).
  void retain_grads(bool on) { retain_grads_ = on; }
  /// Gradient of a node after backward; empty when nothing flowed into it.
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool retain_grads_ = false;
};

namespace ops {

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vs) {
  for (const auto& v : vs)
    if (v.needs_grad()) return true;
  return false;
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  Matrix<Scalar> v = a.value() * b.value();
  const bool ng = any_grad({a, b});
  return a.tape->record(std::move(v), ng, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.needs_grad()) t.accumulate(a.id, g * b.value().transpose());
    if (b.needs_grad()) t.accumulate(b.id, a.value().transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("add: shape mismatch");
  Matrix<Scalar> v = a.value() + b.value();
  return a.tape->record(std::move(v), any_grad({a, b}),
                        [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(a.id, g);
                          t.accumulate(b.id, g);
                        });
}

/// Adds a [1, n] row to every row of `a`.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: shape mismatch");
  Matrix<Scalar> v = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(v), any_grad({a, row}),
                        [a, row](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(a.id, g);
                          if (row.needs_grad()) t.accumulate(row.id, g.colwise().sum());
                        });
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  return add_row(matmul(x, w), b);
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> v = a.value() * s;
  return a.tape->record(std::move(v), a.needs_grad(),
                        [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(a.id, g * s); });
}

/// Sum of 1x1 scalars.
template <typename Scalar>
Var<Scalar> sum_scalars(std::span<const Var<Scalar>> xs) {
  if (xs.empty()) throw Error("sum_scalars: empty");
  Scalar total = 0;
  bool ng = false;
  for (const auto& x : xs) {
    total += x.value()(0, 0);
    ng = ng || x.needs_grad();
  }
  std::vector<Var<Scalar>> inputs(xs.begin(), xs.end());
  return xs[0].tape->record(Matrix<Scalar>::Constant(1, 1, total), ng,
                            [inputs](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                              for (const auto& x : inputs) t.accumulate(x.id, g);
                            });
}

template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain) {
  const Matrix<Scalar>& xv = x.value();
  const Index d = xv.cols();
  if (d == 0) throw Error("rms_norm: zero-length last axis");
  Vector<Scalar> inv =
      ((xv.array().square().rowwise().sum() / Scalar(d)) + Scalar(kRmsNormEps)).rsqrt();
  Matrix<Scalar> v = xv.array().colwise() * inv.array();
  v.array().rowwise() *= gain.value().row(0).array();
  return x.tape->record(
      std::move(v), any_grad({x, gain}),
      [x, gain, inv = std::move(inv)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const Matrix<Scalar>& xv = x.value();
        const Index d = xv.cols();
        const Matrix<Scalar> xhat = xv.array().colwise() * inv.array();
        if (gain.needs_grad()) t.accumulate(gain.id, (g.array() * xhat.array()).colwise().sum().matrix());
        if (x.needs_grad()) {
          Matrix<Scalar> gy = g.array().rowwise() * gain.value().row(0).array();
          const Vector<Scalar> dot = (gy.array() * xhat.array()).rowwise().sum();
          Matrix<Scalar> dx = gy - (xhat.array().colwise() * (dot.array() / Scalar(d))).matrix();
          dx.array().colwise() *= inv.array();
          t.accumulate(x.id, dx);
        }
      });
}

template <typename Scalar>
Var<Scalar> selu(Var<Scalar> x) {
  Matrix<Scalar> v = megxl::selu(x.value());
  return x.tape->record(std::move(v), x.needs_grad(), [x](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x.id, (g.array() * x.value().unaryExpr([](Scalar u) {
                                       return selu_derivative(u);
                                     }).array()).matrix());
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> x, Index begin, Index n) {
  if (begin < 0 || begin + n > x.cols()) throw Error("slice_cols: out of range");
  Matrix<Scalar> v = x.value().middleCols(begin, n);
  return x.tape->record(std::move(v), x.needs_grad(),
                        [x, begin, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
                          full.middleCols(begin, n) = g;
                          t.accumulate(x.id, full);
                        });
}

template <typename Scalar>
Var<Scalar> hcat(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows()) throw Error("hcat: row mismatch");
  Matrix<Scalar> v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  return a.tape->record(std::move(v), any_grad({a, b}),
                        [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          if (a.needs_grad()) t.accumulate(a.id, g.leftCols(a.cols()));
                          if (b.needs_grad()) t.accumulate(b.id, g.rightCols(b.cols()));
                        });
}

template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, std::vector<Index> rows) {
  Matrix<Scalar> v(static_cast<Index>(rows.size()), x.cols());
  for (Index i = 0; i < v.rows(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw Error("gather_rows: index out of range");
    v.row(i) = x.value().row(rows[i]);
  }
  return x.tape->record(std::move(v), x.needs_grad(),
                        [x, rows = std::move(rows)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> full = Matrix<Scalar>::Zero(x.rows(), x.cols());
                          for (Index i = 0; i < g.rows(); ++i) full.row(rows[i]) += g.row(i);
                          t.accumulate(x.id, full);
                        });
}

/// Replaces the listed rows of `x` by the [1, d] row `fill`.
template <typename Scalar>
Var<Scalar> replace_rows(Var<Scalar> x, std::vector<Index> rows, Var<Scalar> fill) {
  if (fill.rows() != 1 || fill.cols() != x.cols()) throw Error("replace_rows: shape mismatch");
  Matrix<Scalar> v = x.value();
  for (Index r : rows) {
    if (r < 0 || r >= v.rows()) throw Error("replace_rows: index out of range");
    v.row(r) = fill.value().row(0);
  }
  return x.tape->record(std::move(v), any_grad({x, fill}),
                        [x, fill, rows = std::move(rows)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          if (fill.needs_grad()) {
                            RowVector<Scalar> acc = RowVector<Scalar>::Zero(g.cols());
                            for (Index r : rows) acc += g.row(r);
                            t.accumulate(fill.id, acc);
                          }
                          if (x.needs_grad()) {
                            Matrix<Scalar> gx = g;
                            for (Index r : rows) gx.row(r).setZero();
                            t.accumulate(x.id, gx);
                          }
                        });
}

/// x has rows laid out as blocks of `block` rows; row c*block + t gets
/// `per_block.row(c)` added.
template <typename Scalar>
Var<Scalar> add_block_rows(Var<Scalar> x, Var<Scalar> per_block, Index block) {
  if (per_block.cols() != x.cols() || per_block.rows() * block != x.rows())
    throw Error("add_block_rows: shape mismatch");
  Matrix<Scalar> v = x.value();
  for (Index c = 0; c < per_block.rows(); ++c)
    v.middleRows(c * block, block).rowwise() += per_block.value().row(c);
  return x.tape->record(std::move(v), any_grad({x, per_block}),
                        [x, per_block, block](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(x.id, g);
                          if (per_block.needs_grad()) {
                            Matrix<Scalar> acc(per_block.rows(), g.cols());
                            for (Index c = 0; c < acc.rows(); ++c)
                              acc.row(c) = g.middleRows(c * block, block).colwise().sum();
                            t.accumulate(per_block.id, acc);
                          }
                        });
}

/// Multiplies each row by keep[row] (0 or 1).
template <typename Scalar>
Var<Scalar> mask_rows(Var<Scalar> x, Vector<Scalar> keep) {
  if (keep.size() != x.rows()) throw Error("mask_rows: shape mismatch");
  Matrix<Scalar> v = x.value().array().colwise() * keep.array();
  return x.tape->record(std::move(v), x.needs_grad(),
                        [x, keep = std::move(keep)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          t.accumulate(x.id, (g.array().colwise() * keep.array()).matrix());
                        });
}

/// Mean softmax cross-entropy scaled by `scale`: scale * sum_i -log p_i[target_i].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, std::vector<int> targets, Scalar scale) {
  const Matrix<Scalar>& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) throw Error("cross_entropy: target count mismatch");
  Matrix<Scalar> p(z.rows(), z.cols());
  Scalar total = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    const int y = targets[i];
    if (y < 0 || y >= z.cols()) throw Error("cross_entropy: target out of range");
    const Scalar m = z.row(i).maxCoeff();
    p.row(i) = (z.row(i).array() - m).exp();
    const Scalar s = p.row(i).sum();
    p.row(i) /= s;
    total += -(z(i, y) - m - std::log(s));
  }
  return logits.tape->record(
      Matrix<Scalar>::Constant(1, 1, total * scale), logits.needs_grad(),
      [logits, p = std::move(p), targets = std::move(targets), scale](Tape<Scalar>& t,
                                                                      const Matrix<Scalar>& g) {
        Matrix<Scalar> d = p;
        for (Index i = 0; i < d.rows(); ++i) d(i, targets[i]) -= Scalar(1);
        t.accumulate(logits.id, d * (scale * g(0, 0)));
      });
}

}  // namespace ops
}  // namespace megxl

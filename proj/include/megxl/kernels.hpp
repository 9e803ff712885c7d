#pragma once

#include <concepts>
#include <cmath>
#include <limits>
#include <span>

#include "megxl/tensor.hpp"

namespace megxl {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kRopeBase = 10000.0;

/// Row-wise RMSNorm: y = gain * x / sqrt(mean(x^2) + eps).
template <typename Scalar>
Matrix<Scalar> rms_norm(const Matrix<Scalar>& x, const RowVector<Scalar>& gain,
                        Scalar eps = Scalar(kRmsNormEps)) {
  if (x.cols() == 0) throw Error("rms_norm: zero-length last axis");
  if (gain.size() != x.cols()) throw Error("rms_norm: gain size mismatch");
  const Vector<Scalar> inv =
      ((x.array().square().rowwise().sum() / Scalar(x.cols())) + eps).rsqrt();
  Matrix<Scalar> y = x.array().colwise() * inv.array();
  y.array().rowwise() *= gain.array();
  return y;
}

template <std::floating_point Scalar>
Scalar selu(Scalar x) {
  return x > Scalar(0) ? Scalar(kSeluLambda) * x
                       : Scalar(kSeluLambda * kSeluAlpha) * (std::exp(x) - Scalar(1));
}

template <std::floating_point Scalar>
Scalar selu_derivative(Scalar x) {
  return x > Scalar(0) ? Scalar(kSeluLambda) : Scalar(kSeluLambda * kSeluAlpha) * std::exp(x);
}

template <typename Derived>
auto selu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return selu(v); }).eval();
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
/// Entries equal to -inf get probability zero; a row must keep at least one
/// finite entry.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& z) {
  if (z.cols() == 0) throw Error("softmax_rows: empty rows");
  Matrix<Scalar> p(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const Scalar m = z.row(i).maxCoeff();
    if (!std::isfinite(m)) throw Error("softmax_rows: row without finite logits");
    p.row(i) = (z.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Rotary position embedding applied to the rows of `x` (one row per
/// position). Pairs (2i, 2i+1) rotate by angle pos * base^(-2i/d).
/// `sign = -1` applies the inverse rotation.
template <typename Scalar>
Matrix<Scalar> rope_apply(const Matrix<Scalar>& x, std::span<const int> positions, int sign = 1) {
  const Index d = x.cols();
  if (d % 2 != 0) throw Error("rope_apply: feature dimension must be even");
  if (static_cast<Index>(positions.size()) != x.rows())
    throw Error("rope_apply: one position per row required");
  Matrix<Scalar> y(x.rows(), d);
  for (Index i = 0; i < d / 2; ++i) {
    const double freq = std::pow(kRopeBase, -2.0 * double(i) / double(d));
    for (Index t = 0; t < x.rows(); ++t) {
      const double angle = double(sign) * double(positions[t]) * freq;
      const Scalar c = Scalar(std::cos(angle));
      const Scalar s = Scalar(std::sin(angle));
      const Scalar a = x(t, 2 * i);
      const Scalar b = x(t, 2 * i + 1);
      y(t, 2 * i) = a * c - b * s;
      y(t, 2 * i + 1) = a * s + b * c;
    }
  }
  return y;
}

/// Precomputed cos/sin tables for a contiguous position range [0, n).
template <typename Scalar>
struct RopeTable {
  Matrix<Scalar> cos;  // [n, d/2]
  Matrix<Scalar> sin;

  RopeTable(Index n, Index d) : cos(n, d / 2), sin(n, d / 2) {
    if (d % 2 != 0) throw Error("rope: feature dimension must be even");
    for (Index i = 0; i < d / 2; ++i) {
      const double freq = std::pow(kRopeBase, -2.0 * double(i) / double(d));
      for (Index t = 0; t < n; ++t) {
        cos(t, i) = Scalar(std::cos(double(t) * freq));
        sin(t, i) = Scalar(std::sin(double(t) * freq));
      }
    }
  }

  /// Rotates a [n, d] block in place; sign = -1 rotates backwards.
  template <typename Block>
  void rotate(Block&& x, int sign = 1) const {
    for (Index t = 0; t < x.rows(); ++t) {
      for (Index i = 0; i < cos.cols(); ++i) {
        const Scalar c = cos(t, i);
        const Scalar s = sign > 0 ? sin(t, i) : -sin(t, i);
        const Scalar a = x(t, 2 * i);
        const Scalar b = x(t, 2 * i + 1);
        x(t, 2 * i) = a * c - b * s;
        x(t, 2 * i + 1) = a * s + b * c;
      }
    }
  }
};

}  // namespace megxl

#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "megxl/autodiff.hpp"
#include "megxl/kernels.hpp"

namespace megxl {

/// One captured attention matrix (row-stochastic).
struct AttentionMap {
  int layer = 0;
  int head = 0;
  // Channel for temporal maps, timestep for spatial maps.
  int index = 0;
  MatrixD weights;
};

/// Collects attention matrices during a forward pass when enabled.
struct AttentionCapture {
  bool temporal = true;
  bool spatial = false;
  int current_layer = 0;
  std::vector<AttentionMap> temporal_maps;
  std::vector<AttentionMap> spatial_maps;

  void clear() {
    temporal_maps.clear();
    spatial_maps.clear();
  }
};

namespace detail {

template <typename Scalar>
void softmax_inplace(Matrix<Scalar>& s) {
  for (Index i = 0; i < s.rows(); ++i) {
    const Scalar m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

// dS = P * (dP - rowsum(dP * P))
template <typename Scalar>
Matrix<Scalar> softmax_backward(const Matrix<Scalar>& p, const Matrix<Scalar>& dp) {
  const Vector<Scalar> dot = (dp.array() * p.array()).rowwise().sum();
  return (p.array() * (dp.array().colwise() - dot.array())).matrix();
}

}  // namespace detail

/// Multi-head self-attention along time, independently per channel.
/// q, k, v: [channels*steps, dh] with channel-major rows. RoPE is applied to
/// queries and keys with positions 0..steps-1. Channels not listed in
/// `active` produce zero output.
template <typename Scalar>
Var<Scalar> temporal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index steps, int heads,
                               std::vector<int> active, AttentionCapture* capture = nullptr) {
  const Index dh = q.cols();
  if (dh % heads != 0) throw Error("temporal_attention: dim not divisible by heads");
  const Index hd = dh / heads;
  const Scalar scale = Scalar(1.0 / std::sqrt(double(hd)));
  const RopeTable<Scalar> rope(steps, hd);

  struct Saved {
    Matrix<Scalar> qr, kr;
    std::vector<Matrix<Scalar>> probs;
  };
  auto saved = std::make_shared<Saved>();
  saved->qr = q.value();
  saved->kr = k.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(q.rows(), dh);

  for (int c : active) {
    for (int h = 0; h < heads; ++h) {
      auto qb = saved->qr.block(c * steps, h * hd, steps, hd);
      auto kb = saved->kr.block(c * steps, h * hd, steps, hd);
      rope.rotate(qb);
      rope.rotate(kb);
      Matrix<Scalar> s = (qb * kb.transpose()) * scale;
      detail::softmax_inplace(s);
      out.block(c * steps, h * hd, steps, hd).noalias() =
          s * v.value().block(c * steps, h * hd, steps, hd);
      if (capture && capture->temporal)
        capture->temporal_maps.push_back({capture->current_layer, h, c, s.template cast<double>()});
      saved->probs.push_back(std::move(s));
    }
  }

  const bool ng = ops::any_grad({q, k, v});
  return q.tape->record(
      std::move(out), ng,
      [q, k, v, steps, heads, hd, scale, active = std::move(active), saved,
       rope](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(k.rows(), k.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
        std::size_t n = 0;
        for (int c : active) {
          for (int h = 0; h < heads; ++h, ++n) {
            const Matrix<Scalar>& p = saved->probs[n];
            const auto go = g.block(c * steps, h * hd, steps, hd);
            const auto vb = v.value().block(c * steps, h * hd, steps, hd);
            dv.block(c * steps, h * hd, steps, hd).noalias() = p.transpose() * go;
            const Matrix<Scalar> ds = detail::softmax_backward<Scalar>(p, go * vb.transpose());
            auto dqb = dq.block(c * steps, h * hd, steps, hd);
            auto dkb = dk.block(c * steps, h * hd, steps, hd);
            dqb.noalias() = (ds * saved->kr.block(c * steps, h * hd, steps, hd)) * scale;
            dkb.noalias() = (ds.transpose() * saved->qr.block(c * steps, h * hd, steps, hd)) * scale;
            rope.rotate(dqb, -1);
            rope.rotate(dkb, -1);
          }
        }
        t.accumulate(q.id, dq);
        t.accumulate(k.id, dk);
        t.accumulate(v.id, dv);
      });
}

/// Multi-head self-attention across channels, independently per timestep.
/// Only channels listed in `valid` take part as keys and queries; other
/// channels receive zero output.
template <typename Scalar>
Var<Scalar> spatial_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index steps, int heads,
                              std::vector<int> valid, AttentionCapture* capture = nullptr) {
  if (valid.empty()) throw Error("spatial_attention: timestep with no valid channels");
  const Index dh = q.cols();
  if (dh % heads != 0) throw Error("spatial_attention: dim not divisible by heads");
  const Index hd = dh / heads;
  const Index cv = static_cast<Index>(valid.size());
  const Scalar scale = Scalar(1.0 / std::sqrt(double(hd)));

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(static_cast<std::size_t>(steps * heads));
  Matrix<Scalar> out = Matrix<Scalar>::Zero(q.rows(), dh);
  Matrix<Scalar> qt(cv, dh), kt(cv, dh), vt(cv, dh);
  for (Index s = 0; s < steps; ++s) {
    for (Index i = 0; i < cv; ++i) {
      const Index row = valid[i] * steps + s;
      qt.row(i) = q.value().row(row);
      kt.row(i) = k.value().row(row);
      vt.row(i) = v.value().row(row);
    }
    for (int h = 0; h < heads; ++h) {
      Matrix<Scalar> a = (qt.middleCols(h * hd, hd) * kt.middleCols(h * hd, hd).transpose()) * scale;
      detail::softmax_inplace(a);
      const Matrix<Scalar> o = a * vt.middleCols(h * hd, hd);
      for (Index i = 0; i < cv; ++i) out.block(valid[i] * steps + s, h * hd, 1, hd) = o.row(i);
      if (capture && capture->spatial)
        capture->spatial_maps.push_back(
            {capture->current_layer, h, static_cast<int>(s), a.template cast<double>()});
      probs->push_back(std::move(a));
    }
  }

  const bool ng = ops::any_grad({q, k, v});
  return q.tape->record(
      std::move(out), ng,
      [q, k, v, steps, heads, hd, cv, scale, valid = std::move(valid), probs](
          Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(k.rows(), k.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
        const Index dh = q.cols();
        Matrix<Scalar> qt(cv, dh), kt(cv, dh), vt(cv, dh), gt(cv, dh);
        std::size_t n = 0;
        for (Index s = 0; s < steps; ++s) {
          for (Index i = 0; i < cv; ++i) {
            const Index row = valid[i] * steps + s;
            qt.row(i) = q.value().row(row);
            kt.row(i) = k.value().row(row);
            vt.row(i) = v.value().row(row);
            gt.row(i) = g.row(row);
          }
          for (int h = 0; h < heads; ++h, ++n) {
            const Matrix<Scalar>& a = (*probs)[n];
            const auto go = gt.middleCols(h * hd, hd);
            const Matrix<Scalar> dvt = a.transpose() * go;
            const Matrix<Scalar> ds =
                detail::softmax_backward<Scalar>(a, go * vt.middleCols(h * hd, hd).transpose());
            const Matrix<Scalar> dqt = (ds * kt.middleCols(h * hd, hd)) * scale;
            const Matrix<Scalar> dkt = (ds.transpose() * qt.middleCols(h * hd, hd)) * scale;
            for (Index i = 0; i < cv; ++i) {
              const Index row = valid[i] * steps + s;
              dq.block(row, h * hd, 1, hd) += dqt.row(i);
              dk.block(row, h * hd, 1, hd) += dkt.row(i);
              dv.block(row, h * hd, 1, hd) += dvt.row(i);
            }
          }
        }
        t.accumulate(q.id, dq);
        t.accumulate(k.id, dk);
        t.accumulate(v.id, dv);
      });
}

/// Full (non-factorized) multi-head attention over all rows: the O((CT')^2)
/// baseline used for benchmarking. Forward only.
template <typename Scalar>
Matrix<Scalar> dense_attention(const Matrix<Scalar>& q, const Matrix<Scalar>& k,
                               const Matrix<Scalar>& v, int heads) {
  const Index hd = q.cols() / heads;
  const Scalar scale = Scalar(1.0 / std::sqrt(double(hd)));
  Matrix<Scalar> out(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix<Scalar> s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
    detail::softmax_inplace(s);
    out.middleCols(h * hd, hd).noalias() = s * v.middleCols(h * hd, hd);
  }
  return out;
}

}  // namespace megxl

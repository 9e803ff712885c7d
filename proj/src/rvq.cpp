#include "megxl/rvq.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

namespace megxl {

void RvqCodec::validate() const {
  if (downsample < 1 || levels < 1 || vocab < 1 || d_codebook < 1) throw Error("codec: invalid sizes");
  if (encoder.rows() != downsample || encoder.cols() != d_codebook || decoder.rows() != d_codebook ||
      decoder.cols() != downsample || encoder_bias.size() != d_codebook ||
      decoder_bias.size() != downsample)
    throw Error("codec: frame map shape mismatch");
  if (static_cast<int>(codebooks.size()) != levels) throw Error("codec: codebook count mismatch");
  for (const auto& cb : codebooks) {
    if (cb.rows() != vocab || cb.cols() != d_codebook) throw Error("codec: codebook shape mismatch");
    if (!cb.allFinite()) throw Error("codec: non-finite codebook");
  }
}

MatrixD frames_of(const MatrixF& x, Index channel, int r) {
  const Index n = x.cols() / r;
  MatrixD f(n, r);
  for (Index t = 0; t < n; ++t)
    for (int i = 0; i < r; ++i) f(t, i) = x(channel, t * r + i);
  return f;
}

namespace {

// Index of the nearest row of `cb` for each row of `x`, ties to lower index.
std::vector<int> nearest_rows(const MatrixD& x, const MatrixD& cb, const Eigen::VectorXd& cb_norms) {
  const MatrixD g = x * cb.transpose();
  std::vector<int> idx(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < cb.rows(); ++k) {
      const double d = cb_norms[k] - 2 * g(i, k);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    idx[static_cast<std::size_t>(i)] = best;
  }
  return idx;
}

MatrixD encode_frames(const RvqCodec& c, const MatrixD& frames) {
  return (frames * c.encoder.cast<double>()).rowwise() + c.encoder_bias.cast<double>();
}

MatrixD decode_latents(const RvqCodec& c, const MatrixD& latents) {
  return (latents * c.decoder.cast<double>()).rowwise() + c.decoder_bias.cast<double>();
}

// Sum of selected codebook rows.
MatrixD lookup_latents(const std::vector<MatrixD>& cbs, const std::vector<std::uint16_t>& codes, Index rows) {
  const int q_levels = static_cast<int>(cbs.size());
  MatrixD lat = MatrixD::Zero(rows, cbs.front().cols());
  for (Index i = 0; i < rows; ++i)
    for (int q = 0; q < q_levels; ++q)
      lat.row(i) += cbs[static_cast<std::size_t>(q)].row(codes[static_cast<std::size_t>(i * q_levels + q)]);
  return lat;
}

}  // namespace

std::vector<std::uint16_t> quantize_latents(const RvqCodec& codec, const MatrixD& latents,
                                            MatrixD* residual_norms) {
  const Index n = latents.rows();
  std::vector<std::uint16_t> codes(static_cast<std::size_t>(n * codec.levels));
  MatrixD res = latents;
  if (residual_norms) {
    residual_norms->resize(n, codec.levels + 1);
    residual_norms->col(0) = res.rowwise().norm();
  }
  for (int q = 0; q < codec.levels; ++q) {
    const MatrixD cb = codec.codebooks[static_cast<std::size_t>(q)].cast<double>();
    const Eigen::VectorXd norms = cb.rowwise().squaredNorm();
    const auto idx = nearest_rows(res, cb, norms);
    for (Index i = 0; i < n; ++i) {
      const int k = idx[static_cast<std::size_t>(i)];
      codes[static_cast<std::size_t>(i * codec.levels + q)] = static_cast<std::uint16_t>(k);
      res.row(i) -= cb.row(k);
    }
    if (residual_norms) residual_norms->col(q + 1) = res.rowwise().norm();
  }
  return codes;
}

TokenGrid rvq_encode(const RvqCodec& codec, const MatrixF& x) {
  if (x.cols() < codec.downsample) throw Error("rvq_encode: fewer samples than one frame");
  const Index steps = x.cols() / codec.downsample;
  TokenGrid z(x.rows(), steps, codec.levels, codec.vocab, codec.downsample);
  for (Index c = 0; c < x.rows(); ++c) {
    const MatrixD lat = encode_frames(codec, frames_of(x, c, codec.downsample));
    const auto codes = quantize_latents(codec, lat);
    std::copy(codes.begin(), codes.end(),
              z.codes.begin() + static_cast<std::ptrdiff_t>(c * steps * codec.levels));
  }
  return z;
}

MatrixF rvq_decode(const RvqCodec& codec, const TokenGrid& z) {
  if (z.levels != codec.levels) throw Error("rvq_decode: level count mismatch");
  for (auto code : z.codes)
    if (code >= codec.vocab) throw Error("rvq_decode: code out of range");
  std::vector<MatrixD> cbs;
  for (const auto& cb : codec.codebooks) cbs.push_back(cb.cast<double>());
  const int r = codec.downsample;
  MatrixF out(z.channels, z.steps * r);
  for (Index c = 0; c < z.channels; ++c) {
    std::vector<std::uint16_t> codes(z.codes.begin() + static_cast<std::ptrdiff_t>(c * z.steps * z.levels),
                                     z.codes.begin() + static_cast<std::ptrdiff_t>((c + 1) * z.steps * z.levels));
    const MatrixD frames = decode_latents(codec, lookup_latents(cbs, codes, z.steps));
    for (Index t = 0; t < z.steps; ++t)
      for (int i = 0; i < r; ++i) out(c, t * r + i) = static_cast<float>(frames(t, i));
  }
  return out;
}

MatrixF codebook_features(const RvqCodec& codec, const TokenGrid& z) {
  const int d = codec.d_codebook;
  MatrixF f(z.channels * z.steps, z.levels * d);
  for (Index c = 0; c < z.channels; ++c)
    for (Index t = 0; t < z.steps; ++t)
      for (int q = 0; q < z.levels; ++q)
        f.block(c * z.steps + t, q * d, 1, d) = codec.codebooks[static_cast<std::size_t>(q)].row(z.at(c, t, q));
  return f;
}

double reconstruction_error(const RvqCodec& codec, const MatrixF& x) {
  const MatrixF y = rvq_decode(codec, rvq_encode(codec, x));
  const MatrixD diff = x.leftCols(y.cols()).cast<double>() - y.cast<double>();
  return diff.squaredNorm() / double(diff.size());
}

namespace {

struct KMeansResult {
  MatrixD centroids;
  std::vector<int> assign;
};

KMeansResult kmeans(const MatrixD& x, int k, int iters, std::mt19937_64& rng) {
  const Index n = x.rows();
  std::uniform_int_distribution<Index> pick(0, n - 1);
  KMeansResult km;
  km.centroids.resize(k, x.cols());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (int j = 0; j < k; ++j) km.centroids.row(j) = x.row(order[static_cast<std::size_t>(j % n)]);
  for (int it = 0; it <= iters; ++it) {
    km.assign = nearest_rows(x, km.centroids, km.centroids.rowwise().squaredNorm());
    if (it == iters) break;
    MatrixD sums = MatrixD::Zero(k, x.cols());
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(km.assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(km.assign[static_cast<std::size_t>(i)])];
    }
    for (int j = 0; j < k; ++j)
      km.centroids.row(j) = counts[static_cast<std::size_t>(j)] > 0
                                ? MatrixD(sums.row(j) / double(counts[static_cast<std::size_t>(j)]))
                                : MatrixD(x.row(pick(rng)));
  }
  return km;
}

double frames_mse(const RvqCodec& codec, const MatrixD& frames, const MatrixD& latents) {
  std::vector<MatrixD> cbs;
  for (const auto& cb : codec.codebooks) cbs.push_back(cb.cast<double>());
  const auto codes = quantize_latents(codec, latents);
  const MatrixD rec = decode_latents(codec, lookup_latents(cbs, codes, latents.rows()));
  return (frames - rec).squaredNorm() / double(frames.size());
}

}  // namespace

RvqTrainResult rvq_train(const std::vector<MatrixF>& corpus, const RvqTrainConfig& cfg) {
  const int r = cfg.downsample;
  if (r < 1 || cfg.levels < 1 || cfg.vocab < 1 || cfg.d_codebook < 1) throw Error("rvq_train: invalid sizes");
  Index total = 0;
  for (const auto& x : corpus) total += x.rows() * (x.cols() / r);
  if (total < 10 * Index(cfg.vocab)) throw Error("rvq_train: insufficient data (need >= 10*V frames)");

  std::mt19937_64 rng(cfg.seed);
  MatrixD frames(total, r);
  Index row = 0;
  for (const auto& x : corpus)
    for (Index c = 0; c < x.rows(); ++c) {
      const MatrixD f = frames_of(x, c, r);
      frames.middleRows(row, f.rows()) = f;
      row += f.rows();
    }
  if (static_cast<std::size_t>(total) > cfg.max_frames) {
    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    MatrixD sub(static_cast<Index>(cfg.max_frames), r);
    for (Index i = 0; i < sub.rows(); ++i) sub.row(i) = frames.row(order[static_cast<std::size_t>(i)]);
    frames = std::move(sub);
  }

  RvqTrainResult result;
  RvqCodec& codec = result.codec;
  codec.downsample = r;
  codec.levels = cfg.levels;
  codec.vocab = cfg.vocab;
  codec.d_codebook = cfg.d_codebook;
  const int d = cfg.d_codebook;

  // Frame maps: identity when d == r, otherwise the least-squares optimal
  // linear autoencoder (principal subspace, zero-padded when d > r).
  if (d == r) {
    codec.encoder = MatrixF::Identity(r, d);
    codec.encoder_bias = RowVector<float>::Zero(d);
    codec.decoder = MatrixF::Identity(d, r);
    codec.decoder_bias = RowVector<float>::Zero(r);
  } else {
    const RowVector<double> mean = frames.colwise().mean();
    const MatrixD centered = frames.rowwise() - mean;
    const MatrixD cov = centered.transpose() * centered / double(frames.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::MatrixXd vecs = eig.eigenvectors().rowwise().reverse();  // descending variance
    MatrixD enc = MatrixD::Zero(r, d);
    const int keep = std::min(r, d);
    enc.leftCols(keep) = vecs.leftCols(keep);
    codec.encoder = enc.cast<float>();
    codec.encoder_bias = (-(mean * enc)).cast<float>();
    codec.decoder = enc.transpose().cast<float>();
    codec.decoder_bias = mean.cast<float>();
  }

  const MatrixD latents = encode_frames(codec, frames);
  MatrixD residual = latents;
  // With V >= 2, code 0 of every level is pinned to the zero vector, so a
  // level can always leave the residual unchanged.
  const int pinned = cfg.vocab >= 2 ? 1 : 0;
  for (int q = 0; q < cfg.levels; ++q) {
    const auto km = kmeans(residual, cfg.vocab - pinned, cfg.kmeans_iters, rng);
    MatrixD cb = MatrixD::Zero(cfg.vocab, d);
    cb.bottomRows(cfg.vocab - pinned) = km.centroids;
    const auto idx = nearest_rows(residual, cb, cb.rowwise().squaredNorm());
    for (Index i = 0; i < residual.rows(); ++i) residual.row(i) -= cb.row(idx[static_cast<std::size_t>(i)]);
    codec.codebooks.push_back(cb.cast<float>());
  }
  double mse = frames_mse(codec, frames, latents);
  result.mse_history.push_back(mse);

  // EMA refinement against greedy re-assignment. A step that would raise
  // the training MSE is retried with a smaller move, then rejected.
  std::uniform_int_distribution<Index> pick(0, latents.rows() - 1);
  for (int epoch = 0; epoch < cfg.ema_epochs; ++epoch) {
    // Greedy assignments under the current codebooks, held fixed for the
    // epoch's update.
    std::vector<std::vector<int>> idx;
    {
      MatrixD res = latents;
      for (int q = 0; q < cfg.levels; ++q) {
        const MatrixD cb = codec.codebooks[static_cast<std::size_t>(q)].cast<double>();
        idx.push_back(nearest_rows(res, cb, cb.rowwise().squaredNorm()));
        for (Index i = 0; i < res.rows(); ++i) res.row(i) -= cb.row(idx.back()[static_cast<std::size_t>(i)]);
      }
    }
    double decay = cfg.ema_decay;
    bool accepted = false;
    for (int attempt = 0; attempt < 4 && !accepted; ++attempt) {
      // Each level moves its rows toward the mean of what the other levels
      // leave unexplained; with assignments fixed this cannot raise the error.
      std::vector<MatrixD> cbs;
      for (const auto& cb : codec.codebooks) cbs.push_back(cb.cast<double>());
      MatrixD recon = MatrixD::Zero(latents.rows(), d);
      for (int q = 0; q < cfg.levels; ++q)
        for (Index i = 0; i < recon.rows(); ++i) recon.row(i) += cbs[static_cast<std::size_t>(q)].row(idx[static_cast<std::size_t>(q)][static_cast<std::size_t>(i)]);
      for (int q = 0; q < cfg.levels; ++q) {
        MatrixD& cb = cbs[static_cast<std::size_t>(q)];
        const auto& iq = idx[static_cast<std::size_t>(q)];
        MatrixD sums = MatrixD::Zero(cfg.vocab, d);
        std::vector<Index> cnt(static_cast<std::size_t>(cfg.vocab), 0);
        for (Index i = 0; i < latents.rows(); ++i) {
          const int k = iq[static_cast<std::size_t>(i)];
          sums.row(k) += latents.row(i) - recon.row(i) + cb.row(k);
          ++cnt[static_cast<std::size_t>(k)];
        }
        const MatrixD old = cb;
        for (int k = 0; k < cfg.vocab; ++k) {
          const Index n = cnt[static_cast<std::size_t>(k)];
          if (n > 0 && k >= pinned) cb.row(k) = decay * cb.row(k) + (1 - decay) * sums.row(k) / double(n);
        }
        for (Index i = 0; i < recon.rows(); ++i) {
          const int k = iq[static_cast<std::size_t>(i)];
          recon.row(i) += cb.row(k) - old.row(k);
        }
      }
      // Unused rows are re-seeded from residuals so they can win frames on
      // the next epoch.
      RvqCodec trial = codec;
      for (int q = 0; q < cfg.levels; ++q) {
        std::vector<bool> used(static_cast<std::size_t>(cfg.vocab), false);
        for (int k : idx[static_cast<std::size_t>(q)]) used[static_cast<std::size_t>(k)] = true;
        for (int k = pinned; k < cfg.vocab; ++k)
          if (!used[static_cast<std::size_t>(k)]) {
            const Index i = pick(rng);
            cbs[static_cast<std::size_t>(q)].row(k) = latents.row(i) - recon.row(i) +
                cbs[static_cast<std::size_t>(q)].row(idx[static_cast<std::size_t>(q)][static_cast<std::size_t>(i)]);
          }
        trial.codebooks[static_cast<std::size_t>(q)] = cbs[static_cast<std::size_t>(q)].cast<float>();
      }
      const double trial_mse = frames_mse(trial, frames, latents);
      if (trial_mse <= mse) {
        codec = std::move(trial);
        mse = trial_mse;
        accepted = true;
      } else {
        decay = (1 + decay) / 2;
      }
    }
    result.mse_history.push_back(mse);
  }
  codec.validate();
  return result;
}

}  // namespace megxl

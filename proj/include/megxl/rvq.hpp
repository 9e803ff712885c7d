#pragma once

#include <cstdint>
#include <vector>

#include "megxl/tensor.hpp"

namespace megxl {

/// Discrete codes of shape [C, T', Q], values in [0, V).
struct TokenGrid {
  Index channels = 0;
  Index steps = 0;
  int levels = 0;
  int vocab = 0;
  int downsample = 0;
  std::vector<std::uint16_t> codes;

  TokenGrid() = default;
  TokenGrid(Index c, Index t, int q, int v, int r)
      : channels(c), steps(t), levels(q), vocab(v), downsample(r),
        codes(static_cast<std::size_t>(c * t * q), 0) {}

  std::uint16_t& at(Index c, Index t, int q) {
    return codes[static_cast<std::size_t>((c * steps + t) * levels + q)];
  }
  std::uint16_t at(Index c, Index t, int q) const {
    return codes[static_cast<std::size_t>((c * steps + t) * levels + q)];
  }
  std::size_t token_positions() const { return static_cast<std::size_t>(channels * steps); }
};

/// Per-channel residual vector quantizer over non-overlapping frames of r
/// samples: latent = frame * encoder + encoder_bias, Q greedy residual
/// levels, frame = latent * decoder + decoder_bias.
struct RvqCodec {
  int downsample = 12;
  int levels = 6;
  int vocab = 256;
  int d_codebook = 16;
  MatrixF encoder;           // [r, d]
  RowVector<float> encoder_bias;  // [1, d]
  MatrixF decoder;           // [d, r]
  RowVector<float> decoder_bias;  // [1, r]
  std::vector<MatrixF> codebooks;  // Q x [V, d]

  void validate() const;
};

/// Frames of r samples taken from one channel row ([T'] x r, tail dropped).
MatrixD frames_of(const MatrixF& x, Index channel, int r);

/// Greedy residual quantization of latent rows. Optionally records each
/// level's residual norm per row ([rows, Q+1], column 0 = latent norm).
std::vector<std::uint16_t> quantize_latents(const RvqCodec& codec, const MatrixD& latents,
                                            MatrixD* residual_norms = nullptr);

TokenGrid rvq_encode(const RvqCodec& codec, const MatrixF& x);
MatrixF rvq_decode(const RvqCodec& codec, const TokenGrid& z);

/// Concatenated codebook rows per token position: [C*T', Q*d_codebook].
MatrixF codebook_features(const RvqCodec& codec, const TokenGrid& z);

/// MSE between x (truncated to T'*r samples) and decode(encode(x)).
double reconstruction_error(const RvqCodec& codec, const MatrixF& x);

struct RvqTrainConfig {
  int downsample = 12;
  int levels = 6;
  int vocab = 256;
  int d_codebook = 16;
  int kmeans_iters = 15;
  int ema_epochs = 4;
  double ema_decay = 0.5;
  std::size_t max_frames = 60000;
  std::uint64_t seed = 0;
};

struct RvqTrainResult {
  RvqCodec codec;
  // Reconstruction MSE after initialization, then after each EMA epoch.
  std::vector<double> mse_history;
};

RvqTrainResult rvq_train(const std::vector<MatrixF>& corpus, const RvqTrainConfig& cfg);

}  // namespace megxl

#pragma once

#include <cstdint>
#include <vector>

#include "megxl/model.hpp"
#include "megxl/signal.hpp"

namespace megxl {

/// Seconds per token step for a codec downsample r at sample rate f.
inline double seconds_per_step(int downsample, double sample_rate_hz) { return double(downsample) / sample_rate_hz; }

/// Throws unless every row of `a` is nonnegative and sums to 1 within tol.
void check_row_stochastic(const MatrixD& a, double tol = 1e-5);

/// Mean over query rows of sum_k A[t,k] |t - k|, scaled to seconds.
double mean_attention_distance(const MatrixD& a, double seconds_per_step);

/// Mean over rows of -sum_k A[t,k] log A[t,k] (0 log 0 = 0), in nats.
double attention_entropy(const MatrixD& a);

struct LayerProfile {
  int layer = 0;
  double mad_seconds = 0;
  double mad_stderr = 0;
  double entropy_nats = 0;
  double entropy_stderr = 0;
  std::size_t segments = 0;
};

/// Temporal attention statistics per layer, averaged over heads, channels
/// and queries within each segment; standard errors across segments.
/// Segments are drawn with each seed in `seeds` (n_segments per seed).
std::vector<LayerProfile> layer_attention_profile(const Backbone<float>& bb, const RvqCodec& codec,
                                                  const std::vector<Recording>& filtered, double context_s,
                                                  int n_segments, const std::vector<std::uint64_t>& seeds,
                                                  const SignalConfig& sig);

}  // namespace megxl

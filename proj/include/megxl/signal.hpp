#pragma once

#include <array>
#include <string>
#include <vector>

#include "megxl/sensors.hpp"
#include "megxl/tensor.hpp"

namespace megxl {

struct WordEvent {
  double onset_s = 0;
  int label = 0;
  int stimulus_id = -1;
};

/// Multi-channel recording: data [C, T] at sample_rate_hz, with geometry
/// and word events (sorted by onset, seconds).
struct Recording {
  MatrixF data;
  double sample_rate_hz = 0;
  SensorArray sensors;
  std::vector<WordEvent> events;
  std::string id;

  Index channels() const { return data.rows(); }
  Index samples() const { return data.cols(); }
  double duration_s() const { return double(samples()) / sample_rate_hz; }
  void validate() const;
};

/// Second-order IIR section, a0 normalized to 1: {b0, b1, b2, a1, a2}.
using Biquad = std::array<double, 5>;

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double fs);
std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double fs);

/// |H(f)| of a cascade of sections (single pass).
double sos_gain(const std::vector<Biquad>& sos, double f_hz, double fs);

/// Zero-phase forward-backward filtering with odd-extension padding and
/// steady-state initial conditions.
std::vector<double> sosfiltfilt(const std::vector<Biquad>& sos, const std::vector<double>& x);

Recording bandpass_filter(const Recording& r, double high_pass_hz, double low_pass_hz);

/// Polyphase resampling with a Kaiser-windowed sinc anti-aliasing filter.
std::vector<double> resample_poly(const std::vector<double>& x, int up, int down);
Recording resample(const Recording& r, double target_hz);

/// Quantile with linear interpolation between order statistics.
double quantile_linear(std::vector<double> v, double p);

/// Per contiguous segment and channel: subtract the mean of the first
/// baseline_s, scale by 2 / IQR around the median, clamp to [-clamp, clamp].
/// Trailing partial segments are dropped.
Recording standardize_subsegments(const Recording& r, double seg_s, double baseline_s, double clamp);

struct SignalConfig {
  double high_pass_hz = 0.1;
  double low_pass_hz = 40.0;
  double resample_hz = 50.0;
  double segment_s = 3.0;
  double baseline_s = 0.5;
  double clamp = 5.0;
};

/// Recording-level stages: band-pass then resample.
Recording filter_and_resample(const Recording& r, const SignalConfig& cfg);

/// Slice [start, start+len) samples (events re-based to the slice start
/// and restricted to it).
Recording slice_samples(const Recording& r, Index start, Index len);

}  // namespace megxl

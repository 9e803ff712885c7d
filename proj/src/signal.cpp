#include "megxl/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

namespace megxl {

void Recording::validate() const {
  if (data.rows() <= 0 || data.cols() <= 0) throw Error("recording: empty data");
  if (!(sample_rate_hz > 0)) throw Error("recording: sample rate must be positive");
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].onset_s < 0 || events[i].onset_s >= duration_s())
      throw Error("recording: event onset outside recording");
    if (i > 0 && events[i].onset_s < events[i - 1].onset_s) throw Error("recording: events not sorted");
  }
}

namespace {

using cplx = std::complex<double>;

std::vector<cplx> prototype_poles(int order) {
  std::vector<cplx> poles;
  for (int k = 0; k < order; ++k)
    poles.push_back(std::polar(1.0, std::numbers::pi * double(2 * k + order + 1) / double(2 * order)));
  return poles;
}

std::vector<Biquad> butterworth(int order, double cutoff_hz, double fs, bool highpass) {
  if (order <= 0 || order % 2 != 0) throw Error("butterworth: order must be positive and even");
  if (!(cutoff_hz > 0) || !(cutoff_hz < fs / 2)) throw Error("butterworth: cutoff outside (0, fs/2)");
  const double warped = 2 * fs * std::tan(std::numbers::pi * cutoff_hz / fs);
  const auto proto = prototype_poles(order);
  std::vector<Biquad> sos;
  for (int k = 0; k < order / 2; ++k) {
    const cplx s = highpass ? warped / proto[static_cast<std::size_t>(k)] : warped * proto[static_cast<std::size_t>(k)];
    const cplx z = (2 * fs + s) / (2 * fs - s);
    const double a1 = -2 * z.real();
    const double a2 = std::norm(z);
    if (highpass) {
      const double g = (1 - a1 + a2) / 4;
      sos.push_back({g, -2 * g, g, a1, a2});
    } else {
      const double g = (1 + a1 + a2) / 4;
      sos.push_back({g, 2 * g, g, a1, a2});
    }
  }
  return sos;
}

void sosfilt_inplace(const std::vector<Biquad>& sos, std::vector<double>& x, double x0) {
  // Steady-state initial conditions for a step of height x0.
  double scale = x0;
  for (const auto& s : sos) {
    const double gain = (s[0] + s[1] + s[2]) / (1 + s[3] + s[4]);
    double z1 = scale * (gain - s[0]);
    double z2 = scale * (s[2] - s[4] * gain);
    for (double& v : x) {
      const double y = s[0] * v + z1;
      z1 = s[1] * v - s[3] * y + z2;
      z2 = s[2] * v - s[4] * y;
      v = y;
    }
    scale *= gain;
  }
}

}  // namespace

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double fs) {
  return butterworth(order, cutoff_hz, fs, false);
}

std::vector<Biquad> butterworth_highpass(int order, double cutoff_hz, double fs) {
  return butterworth(order, cutoff_hz, fs, true);
}

double sos_gain(const std::vector<Biquad>& sos, double f_hz, double fs) {
  const cplx zinv = std::polar(1.0, -2 * std::numbers::pi * f_hz / fs);
  double g = 1;
  for (const auto& s : sos) {
    const cplx num = s[0] + s[1] * zinv + s[2] * zinv * zinv;
    const cplx den = 1.0 + s[3] * zinv + s[4] * zinv * zinv;
    g *= std::abs(num / den);
  }
  return g;
}

std::vector<double> sosfiltfilt(const std::vector<Biquad>& sos, const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(3 * (2 * sos.size() + 1), n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2 * x[n - 1] - x[n - 1 - i]);

  sosfilt_inplace(sos, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  sosfilt_inplace(sos, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(pad),
                             ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

Recording bandpass_filter(const Recording& r, double high_pass_hz, double low_pass_hz) {
  const double fs = r.sample_rate_hz;
  if (!(high_pass_hz > 0) || !(high_pass_hz < low_pass_hz) || !(low_pass_hz < fs / 2))
    throw Error("bandpass_filter: require 0 < high_pass < low_pass < fs/2");
  auto sos = butterworth_highpass(4, high_pass_hz, fs);
  const auto lp = butterworth_lowpass(4, low_pass_hz, fs);
  sos.insert(sos.end(), lp.begin(), lp.end());

  Recording out = r;
  std::vector<double> ch(static_cast<std::size_t>(r.samples()));
  for (Index c = 0; c < r.channels(); ++c) {
    for (Index t = 0; t < r.samples(); ++t) ch[static_cast<std::size_t>(t)] = r.data(c, t);
    const auto y = sosfiltfilt(sos, ch);
    for (Index t = 0; t < r.samples(); ++t) out.data(c, t) = static_cast<float>(y[static_cast<std::size_t>(t)]);
  }
  return out;
}

namespace {

double bessel_i0(double x) {
  double sum = 1, term = 1;
  for (int k = 1; k < 60; ++k) {
    term *= (x / (2 * k)) * (x / (2 * k));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// Low-pass FIR at normalized cutoff fc (1 = Nyquist), unit DC gain.
std::vector<double> kaiser_sinc(int half_len, double fc, double beta) {
  const int n = 2 * half_len + 1;
  std::vector<double> h(static_cast<std::size_t>(n));
  const double denom = bessel_i0(beta);
  for (int i = 0; i < n; ++i) {
    const double m = double(i - half_len);
    const double x = fc * m;
    const double sinc = m == 0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    const double ratio = m / double(half_len);
    const double w = bessel_i0(beta * std::sqrt(std::max(0.0, 1 - ratio * ratio))) / denom;
    h[static_cast<std::size_t>(i)] = fc * sinc * w;
  }
  const double s = std::accumulate(h.begin(), h.end(), 0.0);
  for (double& v : h) v /= s;
  return h;
}

}  // namespace

std::vector<double> resample_poly(const std::vector<double>& x, int up, int down) {
  if (up <= 0 || down <= 0) throw Error("resample_poly: factors must be positive");
  const int g = std::gcd(up, down);
  up /= g;
  down /= g;
  const long n_in = static_cast<long>(x.size());
  const long n_out = std::lround(double(n_in) * up / down);
  if (up == 1 && down == 1) return x;
  const int max_rate = std::max(up, down);
  const int half_len = 10 * max_rate;
  std::vector<double> h = kaiser_sinc(half_len, 1.0 / max_rate, 5.0);
  for (double& v : h) v *= up;

  std::vector<double> y(static_cast<std::size_t>(n_out), 0.0);
  for (long m = 0; m < n_out; ++m) {
    // Position of output sample m on the upsampled grid.
    const long center = m * down;
    // Input sample i sits at i*up; taps need |center - i*up| <= half_len.
    const long i_lo = std::max(0L, (center - half_len + up - 1) / up);
    const long i_hi = std::min(n_in - 1, (center + half_len) / up);
    double acc = 0;
    for (long i = i_lo; i <= i_hi; ++i)
      acc += h[static_cast<std::size_t>(half_len + center - i * up)] * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(m)] = acc;
  }
  return y;
}

Recording resample(const Recording& r, double target_hz) {
  if (!(target_hz > 0)) throw Error("resample: target rate must be positive");
  if (target_hz == r.sample_rate_hz) return r;
  // Rates are treated as rationals with millihertz resolution.
  const long src = std::lround(r.sample_rate_hz * 1000);
  const long dst = std::lround(target_hz * 1000);
  const long g = std::gcd(src, dst);
  const int up = static_cast<int>(dst / g);
  const int down = static_cast<int>(src / g);

  Recording out;
  out.sample_rate_hz = target_hz;
  out.sensors = r.sensors;
  out.events = r.events;
  out.id = r.id;
  const Index n_out = static_cast<Index>(std::lround(double(r.samples()) * target_hz / r.sample_rate_hz));
  out.data.resize(r.channels(), n_out);
  std::vector<double> ch(static_cast<std::size_t>(r.samples()));
  for (Index c = 0; c < r.channels(); ++c) {
    for (Index t = 0; t < r.samples(); ++t) ch[static_cast<std::size_t>(t)] = r.data(c, t);
    auto y = resample_poly(ch, up, down);
    y.resize(static_cast<std::size_t>(n_out), 0.0);
    for (Index t = 0; t < n_out; ++t) out.data(c, t) = static_cast<float>(y[static_cast<std::size_t>(t)]);
  }
  return out;
}

double quantile_linear(std::vector<double> v, double p) {
  if (v.empty()) throw Error("quantile: empty input");
  std::sort(v.begin(), v.end());
  const double h = (double(v.size()) - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
}

Recording standardize_subsegments(const Recording& r, double seg_s, double baseline_s, double clamp) {
  if (!(baseline_s < seg_s)) throw Error("standardize: baseline must be shorter than segment");
  const Index seg = static_cast<Index>(std::lround(seg_s * r.sample_rate_hz));
  const Index base = std::max<Index>(1, static_cast<Index>(std::lround(baseline_s * r.sample_rate_hz)));
  const Index n_seg = r.samples() / seg;
  Recording out = r;
  out.data.resize(r.channels(), n_seg * seg);
  std::vector<double> x(static_cast<std::size_t>(seg));
  for (Index s = 0; s < n_seg; ++s) {
    for (Index c = 0; c < r.channels(); ++c) {
      double mean = 0;
      for (Index i = 0; i < seg; ++i) x[static_cast<std::size_t>(i)] = r.data(c, s * seg + i);
      for (Index i = 0; i < base; ++i) mean += x[static_cast<std::size_t>(i)];
      mean /= double(base);
      for (double& v : x) v -= mean;
      const double q1 = quantile_linear(x, 0.25);
      const double med = quantile_linear(x, 0.5);
      const double q3 = quantile_linear(x, 0.75);
      const double iqr = q3 - q1;
      const double scale = iqr > 1e-12 * std::max(1.0, std::abs(med)) ? 2.0 / iqr : 1.0;
      for (Index i = 0; i < seg; ++i) {
        const double y = std::clamp((x[static_cast<std::size_t>(i)] - med) * scale, -clamp, clamp);
        out.data(c, s * seg + i) = static_cast<float>(y);
      }
    }
  }
  std::erase_if(out.events, [&](const WordEvent& e) { return e.onset_s >= out.duration_s(); });
  return out;
}

Recording filter_and_resample(const Recording& r, const SignalConfig& cfg) {
  return resample(bandpass_filter(r, cfg.high_pass_hz, cfg.low_pass_hz), cfg.resample_hz);
}

Recording slice_samples(const Recording& r, Index start, Index len) {
  if (start < 0 || len <= 0 || start + len > r.samples()) throw Error("slice_samples: out of range");
  Recording out;
  out.data = r.data.middleCols(start, len);
  out.sample_rate_hz = r.sample_rate_hz;
  out.sensors = r.sensors;
  out.id = r.id;
  const double t0 = double(start) / r.sample_rate_hz;
  const double t1 = double(start + len) / r.sample_rate_hz;
  for (const auto& e : r.events)
    if (e.onset_s >= t0 && e.onset_s < t1) out.events.push_back({e.onset_s - t0, e.label, e.stimulus_id});
  return out;
}

}  // namespace megxl

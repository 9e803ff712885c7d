#include <doctest.h>

#include <complex>
#include <numbers>

#include "megxl/signal.hpp"
#include "oracles.hpp"

using namespace megxl;

namespace {

Recording make_recording(const MatrixF& data, double fs) {
  Recording r;
  r.data = data;
  r.sample_rate_hz = fs;
  return r;
}

MatrixF sine(double f, double fs, Index n, double amp = 1.0) {
  MatrixF x(1, n);
  for (Index t = 0; t < n; ++t) x(0, t) = float(amp * std::sin(2 * std::numbers::pi * f * double(t) / fs));
  return x;
}

// Amplitude of frequency f by a single-bin DFT over [lo, hi).
double tone_amplitude(const MatrixF& x, double f, double fs, Index lo, Index hi) {
  std::complex<double> acc = 0;
  for (Index t = lo; t < hi; ++t) acc += double(x(0, t)) * std::polar(1.0, -2 * std::numbers::pi * f * double(t) / fs);
  return 2 * std::abs(acc) / double(hi - lo);
}

}  // namespace

TEST_CASE("band-pass removes a DC offset") {
  const Recording r = make_recording(MatrixF::Constant(1, 20000, 5.0f), 250);
  const Recording y = bandpass_filter(r, 0.1, 40);
  CHECK(y.data.middleCols(5000, 10000).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("band-pass keeps 10 Hz and rejects 80 Hz") {
  const double fs = 1000;
  const Index n = 20000;
  const Recording in10 = make_recording(sine(10, fs, n), fs);
  const double a10 = tone_amplitude(bandpass_filter(in10, 0.1, 40).data, 10, fs, 2000, 18000);
  CHECK(a10 > 0.95);
  CHECK(a10 < 1.05);
  const Recording in80 = make_recording(sine(80, fs, n), fs);
  CHECK(tone_amplitude(bandpass_filter(in80, 0.1, 40).data, 80, fs, 2000, 18000) < 0.1);
}

TEST_CASE("band-pass design gains") {
  const double fs = 250;
  auto sos = butterworth_highpass(4, 0.1, fs);
  const auto lp = butterworth_lowpass(4, 40, fs);
  sos.insert(sos.end(), lp.begin(), lp.end());
  // Zero-phase filtering squares the single-pass response.
  const double mid = std::pow(sos_gain(sos, std::sqrt(0.1 * 40), fs), 2);
  CHECK(mid >= 0.9);
  CHECK(mid <= 1.0 + 1e-9);
  CHECK(std::pow(sos_gain(sos, 80, fs), 2) < 0.1);
}

TEST_CASE("band-pass rejects invalid cutoffs") {
  const Recording r = make_recording(MatrixF::Ones(1, 100), 100);
  CHECK_THROWS_AS(bandpass_filter(r, 0, 10), Error);
  CHECK_THROWS_AS(bandpass_filter(r, 20, 10), Error);
  CHECK_THROWS_AS(bandpass_filter(r, 1, 50), Error);
}

TEST_CASE("resample identity and length arithmetic") {
  std::mt19937_64 rng(1);
  Recording r = make_recording(oracle::randn(2, 300, rng).cast<float>(), 1000);
  r.events.push_back({0.1, 3, 0});
  const Recording same = resample(r, 1000);
  CHECK(same.data == r.data);
  const Recording longer = make_recording(MatrixF::Zero(1, 150000), 1000);
  CHECK(resample(longer, 50).samples() == 7500);
  const Recording down = resample(r, 50);
  CHECK(down.sample_rate_hz == 50);
  CHECK(down.events.size() == 1);
  CHECK(down.events[0].onset_s == 0.1);
}

TEST_CASE("resampled 5 Hz sine correlates with the analytic sine") {
  const Recording r = make_recording(sine(5, 1000, 10000), 1000);
  const Recording y = resample(r, 50);
  const MatrixF ref = sine(5, 50, y.samples());
  const Eigen::VectorXd a = y.data.row(0).middleCols(50, 400).cast<double>().transpose();
  const Eigen::VectorXd b = ref.row(0).middleCols(50, 400).cast<double>().transpose();
  const double corr = a.dot(b) / (a.norm() * b.norm());
  CHECK(corr > 0.99);
}

TEST_CASE("quantile_linear interpolates between order statistics") {
  CHECK(quantile_linear({4, 1, 3, 2}, 0.5) == 2.5);
  CHECK(quantile_linear({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
  CHECK(quantile_linear({7}, 0.9) == 7);
}

TEST_CASE("standardized segments have median 0 and interquartile range 2") {
  std::mt19937_64 rng(7);
  const double fs = 50;
  std::uniform_real_distribution<double> scale(0.1, 10), offset(-5, 5);
  MatrixF x(4, 25 * 150);
  for (Index s = 0; s < 25; ++s)
    for (Index c = 0; c < 4; ++c)
      x.block(c, s * 150, 1, 150) = ((oracle::randn(1, 150, rng) * scale(rng)).array() + offset(rng)).cast<float>().matrix();
  const Recording y = standardize_subsegments(make_recording(x, fs), 3.0, 0.5, 1e9);
  for (Index s = 0; s < 25; ++s)
    for (Index c = 0; c < 4; ++c) {
      std::vector<double> seg(150);
      for (Index i = 0; i < 150; ++i) seg[i] = y.data(c, s * 150 + i);
      CHECK(std::abs(quantile_linear(seg, 0.5)) < 1e-5);
      CHECK(quantile_linear(seg, 0.75) - quantile_linear(seg, 0.25) == doctest::Approx(2.0).epsilon(1e-5));
    }
}

TEST_CASE("symmetric segments land exactly on quartiles of +-1") {
  MatrixF x(1, 150);
  for (Index i = 0; i < 150; ++i) x(0, i) = float((i % 2 ? 1 : -1) * (1 + i / 2));
  const Recording y = standardize_subsegments(make_recording(x, 50), 3.0, 0.5, 1e9);
  std::vector<double> seg(y.data.data(), y.data.data() + 150);
  CHECK(quantile_linear(seg, 0.25) == doctest::Approx(-1).epsilon(1e-5));
  CHECK(quantile_linear(seg, 0.75) == doctest::Approx(1).epsilon(1e-5));
}

TEST_CASE("clamping, constant segments and dropped tails") {
  MatrixF x = MatrixF::Zero(2, 160);
  x.row(0).setConstant(3.0f);
  for (Index i = 0; i < 150; ++i) x(1, i) = float(i % 4) - 1.5f;
  x(1, 10) = 1000.0f;
  const Recording y = standardize_subsegments(make_recording(x, 50), 3.0, 0.5, 5.0);
  CHECK(y.samples() == 150);
  CHECK(y.data.row(0).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(y.data(1, 10) == 5.0f);
  CHECK(y.data.row(1).cwiseAbs().maxCoeff() <= 5.0f);
}

TEST_CASE("pipeline on Gaussian data is deterministic and rarely clamps") {
  std::mt19937_64 rng(9);
  const Recording r = make_recording(oracle::randn(3, 250 * 60, rng).cast<float>(), 250);
  const SignalConfig cfg;
  const Recording a = filter_and_resample(r, cfg);
  const Recording b = filter_and_resample(r, cfg);
  CHECK(a.data == b.data);
  const Recording s = standardize_subsegments(a, cfg.segment_s, cfg.baseline_s, cfg.clamp);
  const double clamped = (s.data.array().abs() >= float(cfg.clamp)).cast<double>().mean();
  CHECK(clamped < 0.01);
}

TEST_CASE("slice_samples re-bases events") {
  Recording r = make_recording(MatrixF::Zero(1, 1000), 100);
  r.events = {{1.0, 1, 0}, {5.5, 2, 0}, {9.0, 3, 1}};
  const Recording s = slice_samples(r, 200, 500);
  REQUIRE(s.events.size() == 1);
  CHECK(s.events[0].onset_s == doctest::Approx(3.5));
  CHECK(s.events[0].label == 2);
  CHECK_THROWS_AS(slice_samples(r, 900, 200), Error);
}

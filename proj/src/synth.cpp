#include "megxl/synth.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace megxl {

namespace {

enum class Stream : std::uint64_t { Story = 1, Templates, Rotation, Noise, Timing, Geometry, Vocab };

std::mt19937_64 stream_rng(std::uint64_t seed, Stream s, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

Index template_samples(const SynthConfig& cfg) {
  return static_cast<Index>(std::lround(cfg.template_s * cfg.sample_rate_hz));
}

/// Sum of Gaussian-windowed sinusoids, each with its own spatial pattern.
MatrixD random_pattern(int channels, Index len, double fs, std::mt19937_64& rng, int components) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  MatrixD out = MatrixD::Zero(channels, len);
  for (int m = 0; m < components; ++m) {
    Eigen::VectorXd spatial(channels);
    for (int c = 0; c < channels; ++c) spatial[c] = normal(rng);
    const double centre = 0.1 + 0.7 * uni(rng);
    const double width = 0.05 + 0.1 * uni(rng);
    const double freq = 2.0 + 8.0 * uni(rng);
    const double phase = 2.0 * std::numbers::pi * uni(rng);
    Eigen::RowVectorXd wave(len);
    for (Index i = 0; i < len; ++i) {
      const double t = double(i) / fs;
      const double g = (t - centre) / width;
      wave[i] = std::exp(-0.5 * g * g) * std::sin(2.0 * std::numbers::pi * freq * t + phase);
    }
    out += spatial * wave;
  }
  return out;
}

MatrixD unit_rms(MatrixD m) {
  const double rms = std::sqrt(m.squaredNorm() / double(m.size()));
  if (rms > 0) m /= rms;
  return m;
}

/// Approximately 1/f background: white noise through cascaded first-order
/// pole-zero sections with decade-spaced corners.
std::vector<double> pink_noise(Index n, double fs, std::mt19937_64& rng) {
  const Index burn = static_cast<Index>(20 * fs);
  std::normal_distribution<double> normal;
  std::vector<double> poles, zeros;
  for (double fp = 0.05; fp < fs / 2; fp *= 10) {
    poles.push_back(std::exp(-2 * std::numbers::pi * fp / fs));
    const double fz = fp * std::sqrt(10.0);
    zeros.push_back(fz < fs / 2 ? std::exp(-2 * std::numbers::pi * fz / fs) : 0.0);
  }
  std::vector<double> xprev(poles.size(), 0.0), yprev(poles.size(), 0.0), out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n + burn; ++i) {
    double x = normal(rng);
    for (std::size_t s = 0; s < poles.size(); ++s) {
      const double y = x - zeros[s] * xprev[s] + poles[s] * yprev[s];
      xprev[s] = x;
      yprev[s] = y;
      x = y;
    }
    if (i >= burn) out[static_cast<std::size_t>(i - burn)] = x;
  }
  return out;
}

void normalize_rows(MatrixD& m) {
  for (Index c = 0; c < m.rows(); ++c) {
    const double mean = m.row(c).mean();
    m.row(c).array() -= mean;
    const double sd = std::sqrt(m.row(c).squaredNorm() / double(m.cols()));
    if (sd > 0) m.row(c) /= sd;
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (n_subjects < 1 || channels < 1 || !(duration_s > 0) || !(sample_rate_hz > 0) || !(words_per_minute > 0) ||
      words_per_stimulus < 1 || d_emb < 1 || !(template_s > 0))
    throw Error("synth config: sizes must be positive");
  if (vocab_size < 2) throw Error("synth config: vocabulary needs at least two words");
  if (snr < 0 || subject_variability < 0 || shared_noise < 0 || shared_noise > 1 || latency_jitter_s < 0)
    throw Error("synth config: invalid amplitude parameters");
  if (60.0 / words_per_minute * 0.8 < template_s)
    throw Error("synth config: word rate too high for non-overlapping responses");
}

Vocabulary generate_vocab_embeddings(int vocab_size, int d_emb, std::uint64_t seed) {
  if (vocab_size < 1 || d_emb < 1) throw Error("vocab embeddings: sizes must be positive");
  auto rng = stream_rng(seed, Stream::Vocab);
  std::normal_distribution<double> normal;
  Vocabulary v;
  v.embeddings.resize(vocab_size, d_emb);
  for (Index i = 0; i < v.embeddings.size(); ++i) v.embeddings.data()[i] = normal(rng);
  v.embeddings.rowwise().normalize();
  v.counts.assign(static_cast<std::size_t>(vocab_size), 0);
  return v;
}

MatrixD subject_rotation(const SynthConfig& cfg, int subject) {
  auto rng = stream_rng(cfg.seed, Stream::Rotation, static_cast<std::uint64_t>(subject));
  std::normal_distribution<double> normal;
  MatrixD g(cfg.channels, cfg.channels);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  const MatrixD a = MatrixD::Identity(cfg.channels, cfg.channels) + cfg.subject_variability * g;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Fix column signs so the rotation is continuous in v (Q -> I as v -> 0).
  for (Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

MatrixD synth_template(const SynthConfig& cfg, int subject, int label) {
  if (label < 0 || label >= cfg.vocab_size) throw Error("synth template: label out of range");
  auto rng = stream_rng(cfg.seed, Stream::Templates, static_cast<std::uint64_t>(label) + 1);
  const MatrixD cls = unit_rms(random_pattern(cfg.channels, template_samples(cfg), cfg.sample_rate_hz, rng, 3));
  return subject_rotation(cfg, subject) * (cls * cfg.snr);
}

std::vector<int> synth_story(const SynthConfig& cfg, std::size_t n_words) {
  auto rng = stream_rng(cfg.seed, Stream::Story);
  std::vector<double> w(static_cast<std::size_t>(cfg.vocab_size));
  for (int k = 0; k < cfg.vocab_size; ++k) w[static_cast<std::size_t>(k)] = std::pow(double(k + 1), -cfg.zipf_exponent);
  std::discrete_distribution<int> zipf(w.begin(), w.end());
  std::vector<int> story(n_words);
  for (auto& y : story) y = zipf(rng);
  return story;
}

Recording generate_subject(const SynthConfig& cfg, int subject) {
  cfg.validate();
  const double fs = cfg.sample_rate_hz;
  const Index n = static_cast<Index>(std::lround(cfg.duration_s * fs));
  const std::uint64_t sub = static_cast<std::uint64_t>(subject);

  auto noise_rng = stream_rng(cfg.seed, Stream::Noise, sub);
  MatrixD indep(cfg.channels, n);
  for (int c = 0; c < cfg.channels; ++c) {
    const auto row = pink_noise(n, fs, noise_rng);
    indep.row(c) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), n);
  }
  normalize_rows(indep);
  const int n_common = 3;
  MatrixD common(n_common, n);
  for (int s = 0; s < n_common; ++s) {
    const auto row = pink_noise(n, fs, noise_rng);
    common.row(s) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), n);
  }
  normalize_rows(common);
  std::normal_distribution<double> normal;
  MatrixD mix(cfg.channels, n_common);
  for (Index i = 0; i < mix.size(); ++i) mix.data()[i] = normal(noise_rng);
  MatrixD shared = mix * common;
  normalize_rows(shared);
  MatrixD x = std::sqrt(1 - cfg.shared_noise) * indep + std::sqrt(cfg.shared_noise) * shared;

  auto timing = stream_rng(cfg.seed, Stream::Timing, sub);
  std::uniform_real_distribution<double> gap(0.8, 1.2);
  std::normal_distribution<double> jitter(0.0, std::max(cfg.latency_jitter_s, 1e-9));
  const double interval = 60.0 / cfg.words_per_minute;
  std::vector<double> onsets;
  for (double t = 1.0 + interval * gap(timing); t + 2.5 + 0.1 <= cfg.duration_s; t += interval * gap(timing))
    onsets.push_back(t);
  const std::vector<int> story = synth_story(cfg, onsets.size());

  std::vector<MatrixD> templates;
  for (int k = 0; k < cfg.vocab_size; ++k) templates.push_back(synth_template(cfg, subject, k));
  const Index len = template_samples(cfg);
  Recording rec;
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    const double lag = cfg.latency_jitter_s > 0 ? jitter(timing) : 0.0;
    const Index start = static_cast<Index>(std::lround((onsets[i] + lag) * fs));
    const Index m = std::min(len, n - start);
    if (start >= 0 && m > 0) x.middleCols(start, m) += templates[static_cast<std::size_t>(story[i])].leftCols(m);
    rec.events.push_back({onsets[i], story[i], static_cast<int>(i) / cfg.words_per_stimulus});
  }

  rec.data = x.cast<float>();
  rec.sample_rate_hz = fs;
  rec.id = "sub-" + std::string(subject < 10 ? "0" : "") + std::to_string(subject);

  auto geo = stream_rng(cfg.seed, Stream::Geometry, sub);
  rec.sensors.positions.resize(cfg.channels, 3);
  rec.sensors.orientations.resize(cfg.channels, 3);
  for (int c = 0; c < cfg.channels; ++c) {
    Eigen::Vector3d p(normal(geo), normal(geo), std::abs(normal(geo)));
    Eigen::Vector3d o(normal(geo), normal(geo), normal(geo));
    rec.sensors.positions.row(c) = p.normalized().transpose();
    rec.sensors.orientations.row(c) = o.normalized().transpose();
    rec.sensors.types.push_back(c % 3 == 2 ? SensorType::Magnetometer : SensorType::Gradiometer);
  }
  return rec;
}

SynthDataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.cfg = cfg;
  for (int s = 0; s < cfg.n_subjects; ++s) ds.recordings.push_back(generate_subject(cfg, s));
  ds.vocab = generate_vocab_embeddings(cfg.vocab_size, cfg.d_emb, cfg.seed);
  for (const auto& r : ds.recordings)
    for (const auto& e : r.events) ++ds.vocab.counts[static_cast<std::size_t>(e.label)];
  return ds;
}

OracleResult matched_filter_oracle(const SynthConfig& cfg, const std::vector<Recording>& raw,
                                   const std::vector<int>& subjects) {
  if (raw.size() != subjects.size()) throw Error("oracle: one subject index per recording");
  OracleResult res;
  std::size_t hits = 0;
  const Index len = template_samples(cfg);
  for (std::size_t r = 0; r < raw.size(); ++r) {
    std::vector<MatrixD> templates;
    std::vector<double> energy;
    for (int k = 0; k < cfg.vocab_size; ++k) {
      templates.push_back(synth_template(cfg, subjects[r], k));
      energy.push_back(templates.back().squaredNorm());
    }
    const MatrixD x = raw[r].data.cast<double>();
    for (const auto& e : raw[r].events) {
      const Index start = static_cast<Index>(std::lround(e.onset_s * raw[r].sample_rate_hz));
      if (start < 0 || start + len > x.cols()) continue;
      const auto seg = x.middleCols(start, len);
      int best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < cfg.vocab_size; ++k) {
        const double score = (seg.array() * templates[static_cast<std::size_t>(k)].array()).sum() -
                             0.5 * energy[static_cast<std::size_t>(k)];
        if (score > best_score) {
          best_score = score;
          best = k;
        }
      }
      hits += best == e.label;
      ++res.events;
    }
  }
  res.top1 = res.events ? double(hits) / double(res.events) : 0.0;
  return res;
}

}  // namespace megxl

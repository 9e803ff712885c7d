#pragma once

#include <cstdint>
#include <vector>

#include "megxl/decode.hpp"
#include "megxl/signal.hpp"

namespace megxl {

struct SynthConfig {
  int n_subjects = 10;
  int channels = 8;
  double duration_s = 600;
  double sample_rate_hz = 250;
  int vocab_size = 50;
  double words_per_minute = 40;
  double snr = 1.0;  // template RMS over unit-variance background
  std::uint64_t seed = 0;
  double zipf_exponent = 1.0;
  double subject_variability = 0.5;
  double shared_noise = 0.3;  // fraction of background variance from common sources
  double latency_jitter_s = 0.0;
  double template_s = 1.0;
  int words_per_stimulus = 50;
  int d_emb = 64;

  void validate() const;
};

struct SynthDataset {
  SynthConfig cfg;
  std::vector<Recording> recordings;  // raw, one per subject
  Vocabulary vocab;
};

/// Seeded unit-norm Gaussian rows.
Vocabulary generate_vocab_embeddings(int vocab_size, int d_emb, std::uint64_t seed);

/// Class response of one subject: the shared class pattern mixed across
/// channels by the subject's near-identity rotation. [C, template samples].
MatrixD synth_template(const SynthConfig& cfg, int subject, int label);

/// Subject-specific channel mix orth(I + v G).
MatrixD subject_rotation(const SynthConfig& cfg, int subject);

/// Word labels of the shared story (every subject hears the same
/// stimulus blocks in the same order).
std::vector<int> synth_story(const SynthConfig& cfg, std::size_t n_words);

Recording generate_subject(const SynthConfig& cfg, int subject);
SynthDataset generate_dataset(const SynthConfig& cfg);

struct OracleResult {
  double top1 = 0;
  std::size_t events = 0;
};

/// Classifies each event of raw recordings by the Gaussian log-likelihood
/// of the true subject templates at the true onset.
OracleResult matched_filter_oracle(const SynthConfig& cfg, const std::vector<Recording>& raw,
                                   const std::vector<int>& subjects);

}  // namespace megxl

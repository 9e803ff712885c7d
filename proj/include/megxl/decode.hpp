#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "megxl/model.hpp"
#include "megxl/optim.hpp"
#include "megxl/rvq.hpp"
#include "megxl/signal.hpp"

namespace megxl {

/// Target word embeddings, rows unit-norm, indices sorted by corpus
/// frequency (index 0 = most frequent).
struct Vocabulary {
  MatrixD embeddings;  // [K, d_emb]
  std::vector<long> counts;

  Index size() const { return embeddings.rows(); }
  Index dim() const { return embeddings.cols(); }
  void validate() const;
};

/// Word-locked epochs concatenated along time.
struct WordSequence {
  MatrixF signal;  // [C, N * w_samples]
  SensorArray sensors;
  std::vector<int> labels;
  std::vector<std::pair<Index, Index>> spans;  // token intervals
  int stimulus_id = -1;
  std::string recording_id;

  Index words() const { return static_cast<Index>(labels.size()); }
};

struct EpochWindow {
  double before_s = 0.5;
  double after_s = 2.5;
  double length_s() const { return before_s + after_s; }
};

/// token_spans[n] = [floor(n w / r), floor((n+1) w / r)).
std::vector<std::pair<Index, Index>> word_token_spans(Index n_words, Index w_samples, int downsample);

/// Slices one epoch per event (skipping events whose window leaves the
/// recording) until n_words are collected, then concatenates them.
WordSequence build_word_input(const Recording& rec, const std::vector<WordEvent>& events, int n_words,
                              int downsample, const EpochWindow& win = {});

/// One sequence per stimulus id with at least n_words usable events; each
/// epoch is standardized with its pre-onset baseline.
std::vector<WordSequence> word_sequences(const Recording& filtered, int n_words, int downsample,
                                         const SignalConfig& sig, const EpochWindow& win = {});

namespace ops {

/// Mean over each span of every valid channel's rows, concatenated across
/// valid channels: [C_max * T', d] -> [N, C * d].
template <typename Scalar>
Var<Scalar> pool_word_features(Var<Scalar> h, const std::vector<std::pair<Index, Index>>& spans,
                               const ChannelMask& mask, Index steps) {
  if (h.rows() != mask.capacity() * steps) throw Error("pool_word_features: shape mismatch");
  const std::vector<int> valid = mask.valid_indices();
  const Index d = h.cols();
  const Index n = static_cast<Index>(spans.size());
  Matrix<Scalar> v(n, static_cast<Index>(valid.size()) * d);
  for (Index w = 0; w < n; ++w) {
    const auto [lo, hi] = spans[static_cast<std::size_t>(w)];
    if (hi <= lo || lo < 0 || hi > steps) throw Error("pool_word_features: empty or out-of-range span");
    for (std::size_t ci = 0; ci < valid.size(); ++ci)
      v.block(w, static_cast<Index>(ci) * d, 1, d) =
          h.value().middleRows(valid[ci] * steps + lo, hi - lo).colwise().mean();
  }
  return h.tape->record(std::move(v), h.needs_grad(),
                        [h, spans, valid, steps, d](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                          Matrix<Scalar> dh = Matrix<Scalar>::Zero(h.rows(), d);
                          for (std::size_t w = 0; w < spans.size(); ++w) {
                            const auto [lo, hi] = spans[w];
                            const Scalar inv = Scalar(1) / Scalar(hi - lo);
                            for (std::size_t ci = 0; ci < valid.size(); ++ci)
                              dh.middleRows(valid[ci] * steps + lo, hi - lo).rowwise() +=
                                  g.row(static_cast<Index>(w)).segment(static_cast<Index>(ci) * d, d) * inv;
                          }
                          t.accumulate(h.id, dh);
                        });
}

/// Pairwise sigmoid contrastive loss with repeated-word exclusion:
/// z_ij = exp(log_t) cos(pred_i, target_j) + b, y_ii = 1, y_ij = -1, pairs
/// i != j with equal labels dropped, loss = -mean log sigmoid(y z).
template <typename Scalar>
Var<Scalar> dsiglip_loss(Var<Scalar> pred, const Matrix<Scalar>& targets, const std::vector<int>& labels,
                         Var<Scalar> log_t, Var<Scalar> bias) {
  const Index n = pred.rows();
  if (n < 2) throw Error("dsiglip: need at least two words");
  if (targets.rows() != n || targets.cols() != pred.cols() || static_cast<Index>(labels.size()) != n)
    throw Error("dsiglip: shape mismatch");
  const Scalar tiny = Scalar(1e-12);
  Vector<Scalar> pnorm = pred.value().rowwise().norm().cwiseMax(tiny);
  const Matrix<Scalar> phat = pred.value().array().colwise() / pnorm.array();
  const Matrix<Scalar> ghat = targets.array().colwise() / targets.rowwise().norm().cwiseMax(tiny).array();
  const Matrix<Scalar> cosm = phat * ghat.transpose();
  const Scalar temp = std::exp(log_t.value()(0, 0));
  const Scalar b = bias.value()(0, 0);
  Matrix<Scalar> dz = Matrix<Scalar>::Zero(n, n);
  Scalar total = 0;
  Index pairs = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      if (i != j && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) continue;
      const Scalar y = i == j ? Scalar(1) : Scalar(-1);
      const Scalar m = y * (temp * cosm(i, j) + b);
      // -log sigmoid(m) = softplus(-m), evaluated stably.
      total += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
      const Scalar sig_neg = m > 0 ? std::exp(-m) / (Scalar(1) + std::exp(-m)) : Scalar(1) / (Scalar(1) + std::exp(m));
      dz(i, j) = -y * sig_neg;
      ++pairs;
    }
  if (pairs == 0) throw Error("dsiglip: every pair excluded");
  const Scalar inv = Scalar(1) / Scalar(pairs);
  dz *= inv;
  const bool ng = any_grad({pred, log_t, bias});
  return pred.tape->record(
      Matrix<Scalar>::Constant(1, 1, total * inv), ng,
      [=](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const Matrix<Scalar> dzg = dz * g(0, 0);
        if (bias.needs_grad()) t.accumulate(bias.id, Matrix<Scalar>::Constant(1, 1, dzg.sum()));
        if (log_t.needs_grad())
          t.accumulate(log_t.id, Matrix<Scalar>::Constant(1, 1, temp * (dzg.array() * cosm.array()).sum()));
        if (pred.needs_grad()) {
          // d cos_ij / d p_i = (ghat_j - cos_ij phat_i) / |p_i|
          const Matrix<Scalar> dc = dzg * temp;
          Matrix<Scalar> dp = dc * ghat;
          dp -= (phat.array().colwise() * (dc.array() * cosm.array()).rowwise().sum()).matrix();
          dp = dp.array().colwise() / pnorm.array();
          t.accumulate(pred.id, dp);
        }
      });
}

}  // namespace ops

/// Per row of `pred`, the k vocabulary indices of highest cosine similarity
/// (ties to the lower index; a zero prediction scores 0 against all).
std::vector<std::vector<int>> retrieve_words(const MatrixD& pred, const MatrixD& vocab, int k);

/// Macro average over classes present in `labels` of top-k hit rate, x100.
double topk_balanced_accuracy(const std::vector<std::vector<int>>& rankings, const std::vector<int>& labels,
                              int vocab_size, int k);

/// Parameters of the word decoder: an MLP (hidden > 0) or an affine probe
/// (hidden == 0), plus contrastive temperature and bias.
struct HeadConfig {
  int hidden = 2048;
  double init_log_t = std::log(10.0);
  double init_bias = -10.0;
};

template <typename Scalar>
ParameterStore<Scalar> make_decode_head(Index in_dim, Index d_emb, const HeadConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore<Scalar> p;
  if (cfg.hidden > 0) {
    p.add("head.w1", trunc_normal<Scalar>(in_dim, cfg.hidden, 0.02, rng));
    p.add("head.b1", Matrix<Scalar>::Zero(1, cfg.hidden));
    p.add("head.w2", trunc_normal<Scalar>(cfg.hidden, d_emb, 0.02, rng));
    p.add("head.b2", Matrix<Scalar>::Zero(1, d_emb));
  } else {
    p.add("head.w", trunc_normal<Scalar>(in_dim, d_emb, 0.02, rng));
    p.add("head.b", Matrix<Scalar>::Zero(1, d_emb));
  }
  p.add("head.log_t", Matrix<Scalar>::Constant(1, 1, Scalar(cfg.init_log_t)));
  p.add("head.bias", Matrix<Scalar>::Constant(1, 1, Scalar(cfg.init_bias)));
  return p;
}

template <typename Scalar>
Var<Scalar> decode_head_forward(Tape<Scalar>& tape, ParameterStore<Scalar>& head, Var<Scalar> pooled) {
  if (head.contains("head.w1")) {
    auto hid = ops::selu(ops::linear(pooled, tape.leaf(head.at("head.w1")), tape.leaf(head.at("head.b1"))));
    return ops::linear(hid, tape.leaf(head.at("head.w2")), tape.leaf(head.at("head.b2")));
  }
  return ops::linear(pooled, tape.leaf(head.at("head.w")), tape.leaf(head.at("head.b")));
}

/// A sequence tokenized and laid out for the backbone.
struct SequenceInput {
  ModelInput input;
  std::vector<int> labels;
  std::vector<std::pair<Index, Index>> spans;
};

SequenceInput make_sequence_input(const Backbone<float>& bb, const RvqCodec& codec, const WordSequence& seq);

/// Steps [begin, begin + n) of a model input.
ModelInput slice_steps(const ModelInput& in, Index begin, Index n);

/// Backbone hidden states for a sequence. With chunk_steps > 0 the input is
/// split into chunks of that many steps, each encoded independently
/// (positions restart per chunk), and the outputs are re-joined in time.
template <typename Scalar>
Var<Scalar> sequence_hidden(Tape<Scalar>& tape, Backbone<Scalar>& bb, const ModelInput& in, Index chunk_steps = 0) {
  if (chunk_steps <= 0 || chunk_steps >= in.steps) return forward(tape, bb, in);
  const Index c_max = in.mask().capacity();
  std::vector<std::pair<Var<Scalar>, Index>> parts;
  for (Index b = 0; b < in.steps; b += chunk_steps) {
    const Index n = std::min(chunk_steps, in.steps - b);
    parts.emplace_back(forward(tape, bb, slice_steps(in, b, n)), n);
  }
  // Re-interleave chunk rows back into channel-major [C_max * T', d].
  Matrix<Scalar> v(c_max * in.steps, bb.cfg.d_model);
  bool ng = false;
  Index off = 0;
  for (const auto& [h, n] : parts) {
    for (Index c = 0; c < c_max; ++c) v.middleRows(c * in.steps + off, n) = h.value().middleRows(c * n, n);
    ng = ng || h.needs_grad();
    off += n;
  }
  const Index steps = in.steps;
  return tape.record(std::move(v), ng, [parts, c_max, steps](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Index o = 0;
    for (const auto& [h, n] : parts) {
      Matrix<Scalar> gh(c_max * n, g.cols());
      for (Index c = 0; c < c_max; ++c) gh.middleRows(c * n, n) = g.middleRows(c * steps + o, n);
      t.accumulate(h.id, gh);
      o += n;
    }
  });
}

struct FinetuneConfig {
  double lr_backbone = 1e-5;
  double lr_head = 1e-3;
  double weight_decay = 1e-4;
  double clip = 1.0;
  int max_epochs = 50;
  int patience = 10;
  int topk = 10;
  int eval_vocab = 50;  // retrieval set: the eval_vocab most frequent words
  double data_fraction = 1.0;
  HeadConfig head;
  bool train_backbone = true;
  Index chunk_steps = 0;  // 0 = full context
};

struct EpochMetric {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double topk_balanced = 0;
};

struct EvalResult {
  double loss = 0;
  double topk_balanced = 0;
  std::size_t words = 0;
};

struct DecodeSplits {
  std::vector<WordSequence> train, val, test;
};

struct FinetuneResult {
  Backbone<float> backbone;
  ParameterStore<float> head;
  int best_epoch = 0;
  int epochs_run = 0;
  double best_val = 0;
  EvalResult test;
  std::vector<EpochMetric> metrics;
};

/// Retrieval metric of backbone + head over sequences; only words inside
/// the retrieval set (label < eval_vocab) are scored.
EvalResult evaluate_decoder(Backbone<float>& bb, ParameterStore<float>& head, const RvqCodec& codec,
                            const std::vector<WordSequence>& seqs, const Vocabulary& vocab,
                            const FinetuneConfig& cfg);

/// End-to-end training with two learning-rate groups and early stopping
/// on validation top-k balanced accuracy.
FinetuneResult finetune_run(const Backbone<float>& init, const RvqCodec& codec, const DecodeSplits& data,
                            const Vocabulary& vocab, const FinetuneConfig& cfg, std::uint64_t seed,
                            const std::function<void(const EpochMetric&)>& on_metric = {});

/// Frozen backbone with an affine readout. Features are pooled once; the
/// backbone is returned untouched.
FinetuneResult linear_probe_run(const Backbone<float>& bb, const RvqCodec& codec, const DecodeSplits& data,
                                const Vocabulary& vocab, FinetuneConfig cfg, std::uint64_t seed,
                                const std::function<void(const EpochMetric&)>& on_metric = {});

}  // namespace megxl

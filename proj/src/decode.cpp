#include "megxl/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace megxl {

void Vocabulary::validate() const {
  if (size() < 2) throw Error("vocabulary: need at least two words");
  if (!counts.empty() && static_cast<Index>(counts.size()) != size())
    throw Error("vocabulary: count table size mismatch");
  for (Index i = 0; i < size(); ++i)
    if (std::abs(embeddings.row(i).norm() - 1.0) > 1e-6) throw Error("vocabulary: rows must be unit-norm");
}

std::vector<std::pair<Index, Index>> word_token_spans(Index n_words, Index w_samples, int downsample) {
  std::vector<std::pair<Index, Index>> spans;
  spans.reserve(static_cast<std::size_t>(n_words));
  for (Index n = 0; n < n_words; ++n)
    spans.emplace_back(n * w_samples / downsample, (n + 1) * w_samples / downsample);
  return spans;
}

namespace {

Index epoch_start(const Recording& rec, const WordEvent& e, const EpochWindow& win, Index w_samples) {
  const Index start = static_cast<Index>(std::lround((e.onset_s - win.before_s) * rec.sample_rate_hz));
  if (e.onset_s - win.before_s < -1e-9 || start < 0 || start + w_samples > rec.samples()) return -1;
  return start;
}

}  // namespace

WordSequence build_word_input(const Recording& rec, const std::vector<WordEvent>& events, int n_words,
                              int downsample, const EpochWindow& win) {
  if (n_words < 1) throw Error("build_word_input: n_words must be positive");
  const Index w = static_cast<Index>(std::lround(win.length_s() * rec.sample_rate_hz));
  WordSequence seq;
  seq.signal.resize(rec.channels(), w * n_words);
  seq.sensors = rec.sensors;
  seq.recording_id = rec.id;
  for (const WordEvent& e : events) {
    if (seq.words() == n_words) break;
    const Index start = epoch_start(rec, e, win, w);
    if (start < 0) continue;
    seq.signal.middleCols(seq.words() * w, w) = rec.data.middleCols(start, w);
    if (seq.labels.empty()) seq.stimulus_id = e.stimulus_id;
    seq.labels.push_back(e.label);
  }
  if (seq.words() < n_words) throw Error("build_word_input: too few usable word events");
  seq.spans = word_token_spans(n_words, w, downsample);
  return seq;
}

std::vector<WordSequence> word_sequences(const Recording& filtered, int n_words, int downsample,
                                         const SignalConfig& sig, const EpochWindow& win) {
  std::map<int, std::vector<WordEvent>> groups;
  for (const auto& e : filtered.events) groups[e.stimulus_id].push_back(e);
  const Index w = static_cast<Index>(std::lround(win.length_s() * filtered.sample_rate_hz));
  std::vector<WordSequence> out;
  for (auto& [id, evs] : groups) {
    const auto usable = std::count_if(evs.begin(), evs.end(),
                                      [&](const WordEvent& e) { return epoch_start(filtered, e, win, w) >= 0; });
    if (usable < n_words) continue;
    WordSequence seq = build_word_input(filtered, evs, n_words, downsample, win);
    Recording tmp;
    tmp.data = std::move(seq.signal);
    tmp.sample_rate_hz = filtered.sample_rate_hz;
    tmp.sensors = seq.sensors;
    seq.signal = standardize_subsegments(tmp, win.length_s(), win.before_s, sig.clamp).data;
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<std::vector<int>> retrieve_words(const MatrixD& pred, const MatrixD& vocab, int k) {
  if (k < 1 || k > vocab.rows()) throw Error("retrieve_words: k out of range");
  if (pred.cols() != vocab.cols()) throw Error("retrieve_words: embedding size mismatch");
  const Eigen::VectorXd vn = vocab.rowwise().norm();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(pred.rows()));
  std::vector<int> idx(static_cast<std::size_t>(vocab.rows()));
  for (Index i = 0; i < pred.rows(); ++i) {
    const double pn = pred.row(i).norm();
    Eigen::VectorXd cosv = Eigen::VectorXd::Zero(vocab.rows());
    if (pn > 0)
      for (Index j = 0; j < vocab.rows(); ++j)
        cosv[j] = vn[j] > 0 ? pred.row(i).dot(vocab.row(j)) / (pn * vn[j]) : 0.0;
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      return cosv[a] != cosv[b] ? cosv[a] > cosv[b] : a < b;
    });
    out[static_cast<std::size_t>(i)].assign(idx.begin(), idx.begin() + k);
  }
  return out;
}

double topk_balanced_accuracy(const std::vector<std::vector<int>>& rankings, const std::vector<int>& labels,
                              int vocab_size, int k) {
  if (labels.empty()) throw Error("topk_balanced_accuracy: empty input");
  if (rankings.size() != labels.size()) throw Error("topk_balanced_accuracy: size mismatch");
  std::vector<long> seen(static_cast<std::size_t>(vocab_size), 0), hit(static_cast<std::size_t>(vocab_size), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= vocab_size) throw Error("topk_balanced_accuracy: label out of range");
    ++seen[static_cast<std::size_t>(y)];
    const auto& r = rankings[i];
    const auto end = r.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(r.size()));
    if (std::find(r.begin(), end, y) != end) ++hit[static_cast<std::size_t>(y)];
  }
  double sum = 0;
  int classes = 0;
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] == 0) continue;
    sum += double(hit[c]) / double(seen[c]);
    ++classes;
  }
  return 100.0 * sum / classes;
}

SequenceInput make_sequence_input(const Backbone<float>& bb, const RvqCodec& codec, const WordSequence& seq) {
  SequenceInput si;
  const TokenGrid z = rvq_encode(codec, seq.signal);
  const PaddedSignal padded = pad_and_mask(seq.signal, bb.cfg.c_max);
  si.input = make_model_input(bb, codec, z, seq.sensors, padded.mask);
  si.labels = seq.labels;
  si.spans = seq.spans;
  if (si.spans.empty() || si.spans.back().second > z.steps) throw Error("sequence input: spans exceed token grid");
  return si;
}

ModelInput slice_steps(const ModelInput& in, Index begin, Index n) {
  if (begin < 0 || n <= 0 || begin + n > in.steps) throw Error("slice_steps: out of range");
  ModelInput out;
  out.sensors = in.sensors;
  out.steps = n;
  const Index c_max = in.mask().capacity();
  out.token_features.resize(c_max * n, in.token_features.cols());
  for (Index c = 0; c < c_max; ++c)
    out.token_features.middleRows(c * n, n) = in.token_features.middleRows(c * in.steps + begin, n);
  return out;
}

namespace {

template <typename Scalar>
Matrix<Scalar> target_rows(const Vocabulary& vocab, const std::vector<int>& labels) {
  Matrix<Scalar> t(static_cast<Index>(labels.size()), vocab.dim());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= vocab.size()) throw Error("decode: label outside the vocabulary");
    t.row(static_cast<Index>(i)) = vocab.embeddings.row(labels[i]).cast<Scalar>();
  }
  return t;
}

double joint_clip(ParameterStore<float>& a, ParameterStore<float>* b, double max_norm) {
  double sq = 0;
  for (auto& [_, p] : a) sq += double(p.grad.squaredNorm());
  if (b)
    for (auto& [_, p] : *b) sq += double(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const float s = float(max_norm / norm);
    for (auto& [_, p] : a) p.grad *= s;
    if (b)
      for (auto& [_, p] : *b) p.grad *= s;
  }
  return norm;
}

void check_labels(const DecodeSplits& data, const Vocabulary& vocab, const FinetuneConfig& cfg) {
  vocab.validate();
  if (cfg.eval_vocab < 2 || cfg.eval_vocab > vocab.size()) throw Error("decode: retrieval set larger than vocabulary");
  if (cfg.topk < 1 || cfg.topk > cfg.eval_vocab) throw Error("decode: k exceeds retrieval set");
  for (const auto* split : {&data.train, &data.val, &data.test})
    for (const auto& s : *split)
      for (int y : s.labels)
        if (y < 0 || y >= vocab.size()) throw Error("decode: vocabulary mismatch with dataset");
  if (data.train.empty() || data.val.empty()) throw Error("decode: empty train or validation split");
}

std::vector<std::size_t> train_subset(std::size_t n, double fraction, std::mt19937_64& rng) {
  if (!(fraction > 0 && fraction <= 1)) throw Error("decode: data fraction outside (0, 1]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * double(n))));
  idx.resize(std::min(keep, n));
  return idx;
}

/// Pooled features of one sequence on `tape`.
using PoolFn = std::function<Var<float>(Tape<float>&, std::size_t)>;

struct Scored {
  double loss = 0;
  std::vector<std::vector<int>> rankings;
  std::vector<int> labels;
};

Scored score_split(ParameterStore<float>& head, const PoolFn& pool, std::size_t count,
                   const std::vector<const std::vector<int>*>& labels, const Vocabulary& vocab,
                   const FinetuneConfig& cfg) {
  Scored s;
  const MatrixD retrieval = vocab.embeddings.topRows(cfg.eval_vocab);
  for (std::size_t i = 0; i < count; ++i) {
    Tape<float> tape;
    auto pred = decode_head_forward(tape, head, pool(tape, i));
    const auto& y = *labels[i];
    auto loss = ops::dsiglip_loss(pred, target_rows<float>(vocab, y), y, tape.leaf(head.at("head.log_t")),
                                  tape.leaf(head.at("head.bias")));
    s.loss += loss.value()(0, 0) / double(count);
    const MatrixD p = pred.value().cast<double>();
    std::vector<Index> rows;
    for (std::size_t n = 0; n < y.size(); ++n)
      if (y[n] < cfg.eval_vocab) rows.push_back(static_cast<Index>(n));
    if (rows.empty()) continue;
    MatrixD sel(static_cast<Index>(rows.size()), p.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      sel.row(static_cast<Index>(r)) = p.row(rows[r]);
      s.labels.push_back(y[static_cast<std::size_t>(rows[r])]);
    }
    auto ranks = retrieve_words(sel, retrieval, cfg.topk);
    s.rankings.insert(s.rankings.end(), ranks.begin(), ranks.end());
  }
  return s;
}

EvalResult to_eval(const Scored& s, const FinetuneConfig& cfg) {
  EvalResult r;
  r.loss = s.loss;
  r.words = s.labels.size();
  r.topk_balanced = s.labels.empty() ? 0.0 : topk_balanced_accuracy(s.rankings, s.labels, cfg.eval_vocab, cfg.topk);
  return r;
}

struct TrainSpec {
  Backbone<float>* backbone = nullptr;  // null when frozen
  ParameterStore<float>* head = nullptr;
  PoolFn train_pool, val_pool, test_pool;
  std::vector<const std::vector<int>*> train_labels, val_labels, test_labels;
};

FinetuneResult train_decoder(TrainSpec spec, const Vocabulary& vocab, const FinetuneConfig& cfg,
                             std::mt19937_64& rng, const std::function<void(const EpochMetric&)>& on_metric,
                             std::vector<std::size_t> train_idx) {
  AdamWHyper hb;
  hb.lr = cfg.lr_backbone;
  hb.weight_decay = cfg.weight_decay;
  AdamWHyper hh = hb;
  hh.lr = cfg.lr_head;
  AdamW<float> opt_backbone(hb), opt_head(hh);

  FinetuneResult res;
  res.best_val = -1;
  res.head = *spec.head;
  if (spec.backbone) res.backbone = *spec.backbone;
  auto emit = [&](const EpochMetric& m) {
    res.metrics.push_back(m);
    if (on_metric) on_metric(m);
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double train_loss = 0;
    for (std::size_t i : train_idx) {
      spec.head->zero_grad();
      if (spec.backbone) spec.backbone->params.zero_grad();
      Tape<float> tape;
      auto pred = decode_head_forward(tape, *spec.head, spec.train_pool(tape, i));
      const auto& y = *spec.train_labels[i];
      auto loss = ops::dsiglip_loss(pred, target_rows<float>(vocab, y), y, tape.leaf(spec.head->at("head.log_t")),
                                    tape.leaf(spec.head->at("head.bias")));
      if (!std::isfinite(loss.value()(0, 0))) throw Error("decode: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      train_loss += loss.value()(0, 0) / double(train_idx.size());
      joint_clip(*spec.head, spec.backbone ? &spec.backbone->params : nullptr, cfg.clip);
      opt_head.step(*spec.head);
      if (spec.backbone) opt_backbone.step(spec.backbone->params);
    }
    emit({epoch, "train", train_loss, 0.0});
    const EvalResult val = to_eval(score_split(*spec.head, spec.val_pool, spec.val_labels.size(), spec.val_labels,
                                               vocab, cfg), cfg);
    emit({epoch, "val", val.loss, val.topk_balanced});
    res.epochs_run = epoch;
    if (val.topk_balanced > res.best_val) {
      res.best_val = val.topk_balanced;
      res.best_epoch = epoch;
      res.head = *spec.head;
      if (spec.backbone) res.backbone = *spec.backbone;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }

  if (!spec.test_labels.empty()) {
    *spec.head = res.head;
    if (spec.backbone) spec.backbone->params = res.backbone.params;
    res.test = to_eval(score_split(*spec.head, spec.test_pool, spec.test_labels.size(), spec.test_labels, vocab, cfg),
                       cfg);
    emit({res.best_epoch, "test", res.test.loss, res.test.topk_balanced});
  }
  return res;
}

std::vector<const std::vector<int>*> label_ptrs(const std::vector<SequenceInput>& xs) {
  std::vector<const std::vector<int>*> out;
  for (const auto& x : xs) out.push_back(&x.labels);
  return out;
}

std::vector<SequenceInput> inputs_of(const Backbone<float>& bb, const RvqCodec& codec,
                                     const std::vector<WordSequence>& seqs) {
  std::vector<SequenceInput> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(make_sequence_input(bb, codec, s));
  return out;
}

Index pooled_dim(const Backbone<float>& bb, const std::vector<SequenceInput>& xs) {
  const Index c = xs.front().input.mask().count();
  for (const auto& x : xs)
    if (x.input.mask().count() != c) throw Error("decode: sequences differ in channel count");
  return c * bb.cfg.d_model;
}

}  // namespace

EvalResult evaluate_decoder(Backbone<float>& bb, ParameterStore<float>& head, const RvqCodec& codec,
                            const std::vector<WordSequence>& seqs, const Vocabulary& vocab,
                            const FinetuneConfig& cfg) {
  if (seqs.empty()) throw Error("evaluate_decoder: no sequences");
  const auto xs = inputs_of(bb, codec, seqs);
  PoolFn pool = [&](Tape<float>& tape, std::size_t i) {
    return ops::pool_word_features(sequence_hidden(tape, bb, xs[i].input, cfg.chunk_steps), xs[i].spans,
                                   xs[i].input.mask(), xs[i].input.steps);
  };
  return to_eval(score_split(head, pool, xs.size(), label_ptrs(xs), vocab, cfg), cfg);
}

FinetuneResult finetune_run(const Backbone<float>& init, const RvqCodec& codec, const DecodeSplits& data,
                            const Vocabulary& vocab, const FinetuneConfig& cfg, std::uint64_t seed,
                            const std::function<void(const EpochMetric&)>& on_metric) {
  check_labels(data, vocab, cfg);
  std::mt19937_64 rng(seed);
  Backbone<float> bb = init;
  const auto tr = inputs_of(bb, codec, data.train);
  const auto va = inputs_of(bb, codec, data.val);
  const auto te = inputs_of(bb, codec, data.test);
  ParameterStore<float> head = make_decode_head<float>(pooled_dim(bb, tr), vocab.dim(), cfg.head, rng());
  auto pool_of = [&](const std::vector<SequenceInput>& xs) -> PoolFn {
    return [&bb, &xs, &cfg](Tape<float>& tape, std::size_t i) {
      return ops::pool_word_features(sequence_hidden(tape, bb, xs[i].input, cfg.chunk_steps), xs[i].spans,
                                     xs[i].input.mask(), xs[i].input.steps);
    };
  };
  TrainSpec spec;
  spec.backbone = cfg.train_backbone ? &bb : nullptr;
  spec.head = &head;
  spec.train_pool = pool_of(tr);
  spec.val_pool = pool_of(va);
  spec.test_pool = pool_of(te);
  spec.train_labels = label_ptrs(tr);
  spec.val_labels = label_ptrs(va);
  spec.test_labels = label_ptrs(te);
  auto idx = train_subset(tr.size(), cfg.data_fraction, rng);
  FinetuneResult res = train_decoder(spec, vocab, cfg, rng, on_metric, std::move(idx));
  if (!cfg.train_backbone) res.backbone = bb;
  return res;
}

FinetuneResult linear_probe_run(const Backbone<float>& frozen, const RvqCodec& codec, const DecodeSplits& data,
                                const Vocabulary& vocab, FinetuneConfig cfg, std::uint64_t seed,
                                const std::function<void(const EpochMetric&)>& on_metric) {
  check_labels(data, vocab, cfg);
  cfg.head.hidden = 0;
  std::mt19937_64 rng(seed);
  Backbone<float> bb = frozen;
  for (auto& [_, p] : bb.params) p.trainable = false;

  auto features = [&](const std::vector<WordSequence>& seqs, std::vector<SequenceInput>& xs) {
    xs = inputs_of(bb, codec, seqs);
    std::vector<MatrixF> out;
    for (const auto& x : xs) {
      Tape<float> tape;
      auto pooled = ops::pool_word_features(sequence_hidden(tape, bb, x.input, cfg.chunk_steps), x.spans,
                                            x.input.mask(), x.input.steps);
      if (pooled.needs_grad()) throw Error("probe: backbone must be frozen");
      out.push_back(pooled.value());
    }
    return out;
  };
  std::vector<SequenceInput> tr, va, te;
  const auto ftr = features(data.train, tr);
  const auto fva = features(data.val, va);
  const auto fte = features(data.test, te);
  ParameterStore<float> head = make_decode_head<float>(pooled_dim(bb, tr), vocab.dim(), cfg.head, rng());
  auto pool_of = [](const std::vector<MatrixF>& f) -> PoolFn {
    return [&f](Tape<float>& tape, std::size_t i) { return tape.constant(f[i]); };
  };
  TrainSpec spec;
  spec.head = &head;
  spec.train_pool = pool_of(ftr);
  spec.val_pool = pool_of(fva);
  spec.test_pool = pool_of(fte);
  spec.train_labels = label_ptrs(tr);
  spec.val_labels = label_ptrs(va);
  spec.test_labels = label_ptrs(te);
  auto idx = train_subset(tr.size(), cfg.data_fraction, rng);
  FinetuneResult res = train_decoder(spec, vocab, cfg, rng, on_metric, std::move(idx));
  if (global_grad_norm(bb.params) != 0.0) throw Error("probe: backbone received gradient");
  res.backbone = frozen;
  return res;
}

}  // namespace megxl

#include "megxl/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace megxl {

std::vector<std::pair<Index, Index>> block_grid(Index steps, int n_blocks) {
  if (n_blocks < 1 || steps < n_blocks) throw Error("block grid: need at least one step per block");
  std::vector<std::pair<Index, Index>> out;
  out.reserve(static_cast<std::size_t>(n_blocks));
  for (int b = 0; b < n_blocks; ++b)
    out.emplace_back(Index(b) * steps / n_blocks, Index(b + 1) * steps / n_blocks);
  return out;
}

MaskPlan block_mask(Index steps, int n_blocks, std::vector<int> chosen) {
  MaskPlan plan;
  plan.blocks = block_grid(steps, n_blocks);
  std::sort(chosen.begin(), chosen.end());
  chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
  for (int b : chosen) {
    if (b < 0 || b >= n_blocks) throw Error("block mask: block index out of range");
    const auto [lo, hi] = plan.blocks[static_cast<std::size_t>(b)];
    for (Index t = lo; t < hi; ++t) plan.masked_steps.push_back(t);
  }
  plan.chosen = std::move(chosen);
  return plan;
}

MaskPlan sample_block_mask(Index steps, int n_blocks, int n_masked, std::uint64_t seed) {
  if (n_masked < 0 || n_masked > n_blocks) throw Error("block mask: cannot mask more blocks than exist");
  std::vector<int> ids(static_cast<std::size_t>(n_blocks));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first n_masked entries are a uniform subset.
  for (int i = 0; i < n_masked; ++i) {
    std::uniform_int_distribution<int> pick(i, n_blocks - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(n_masked));
  MaskPlan plan = block_mask(steps, n_blocks, std::move(ids));
  plan.seed = seed;
  return plan;
}

int PretrainConfig::n_blocks() const { return static_cast<int>(std::lround(sample_len_s / block_s)); }

int PretrainConfig::n_blocks_masked() const {
  return static_cast<int>(std::lround(mask_fraction * n_blocks()));
}

void PretrainConfig::validate() const {
  if (!(block_s > 0) || !(sample_len_s >= block_s)) throw Error("pretrain config: window shorter than a block");
  if (!(mask_fraction > 0 && mask_fraction <= 1)) throw Error("pretrain config: mask fraction outside (0, 1]");
  if (n_blocks_masked() < 1 || n_blocks_masked() > n_blocks())
    throw Error("pretrain config: masked block count out of range");
  if (steps < 0 || batch < 1 || warmup < 0 || !(lr > 0)) throw Error("pretrain config: invalid schedule");
}

MaskedTargets masked_targets(const TokenGrid& z, const MaskPlan& plan, const ChannelMask& mask) {
  if (z.channels != mask.count()) throw Error("masked targets: channel count mismatch");
  MaskedTargets mt;
  mt.per_level.resize(static_cast<std::size_t>(z.levels));
  Index src = 0;
  for (Index c = 0; c < mask.capacity(); ++c) {
    if (!mask.valid[static_cast<std::size_t>(c)]) continue;
    for (Index t : plan.masked_steps) {
      if (t < 0 || t >= z.steps) throw Error("masked targets: step out of range");
      mt.rows.push_back(c * z.steps + t);
      for (int q = 0; q < z.levels; ++q) mt.per_level[static_cast<std::size_t>(q)].push_back(z.at(src, t, q));
    }
    ++src;
  }
  return mt;
}

TokenWindow make_window(const Recording& filtered, Index start, Index len, const RvqCodec& codec,
                        const SignalConfig& sig, Index c_max) {
  if (filtered.channels() > c_max) throw Error("make_window: recording has more channels than C_max");
  const Recording w = standardize_subsegments(slice_samples(filtered, start, len), sig.segment_s,
                                              sig.baseline_s, sig.clamp);
  TokenWindow out;
  out.codes = rvq_encode(codec, w.data);
  out.sensors = w.sensors;
  out.mask = pad_and_mask(w.data, c_max).mask;
  return out;
}

namespace {

Index window_samples(double seconds, double rate) { return static_cast<Index>(std::lround(seconds * rate)); }

void check_rates(const std::vector<Recording>& recs, double rate) {
  if (recs.empty()) throw Error("pretrain: empty dataset");
  for (const auto& r : recs)
    if (std::abs(r.sample_rate_hz - rate) > 1e-9) throw Error("pretrain: recording " + r.id + " not at target rate");
}

}  // namespace

PretrainResult pretrain_run(const std::vector<Recording>& filtered, const RvqCodec& codec,
                            const BackboneConfig& bcfg, const PretrainConfig& cfg, std::uint64_t seed,
                            const std::function<void(const StepMetric&)>& on_metric,
                            const Backbone<float>* init) {
  cfg.validate();
  check_rates(filtered, cfg.signal.resample_hz);
  const Index len = window_samples(cfg.sample_len_s, cfg.signal.resample_hz);
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < filtered.size(); ++i)
    if (filtered[i].samples() >= len) usable.push_back(i);
  if (usable.empty()) throw Error("pretrain: no recording is as long as the context window");
  const Index steps_per_window = len / codec.downsample;
  const int n_blocks = cfg.n_blocks();
  const int n_masked = cfg.n_blocks_masked();

  PretrainResult res;
  res.last = init ? *init : Backbone<float>::create(bcfg, seed);
  res.best = res.last;
  res.best_loss = std::numeric_limits<double>::infinity();

  AdamWHyper hyper;
  hyper.lr = cfg.lr;
  hyper.weight_decay = cfg.weight_decay;
  AdamW<float> opt(hyper);
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dull);
  std::uniform_int_distribution<std::size_t> pick_rec(0, usable.size() - 1);

  double smoothed = 0;
  for (long step = 1; step <= cfg.steps; ++step) {
    auto& bb = res.last;
    bb.params.zero_grad();
    double loss = 0;
    std::size_t hits = 0, preds = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Recording& rec = filtered[usable[pick_rec(rng)]];
      std::uniform_int_distribution<Index> pick_start(0, rec.samples() - len);
      const TokenWindow w = make_window(rec, pick_start(rng), len, codec, cfg.signal, bcfg.c_max);
      const ModelInput in = make_model_input(bb, codec, w.codes, w.sensors, w.mask);
      const MaskPlan plan = sample_block_mask(steps_per_window, n_blocks, n_masked, rng());
      Tape<float> tape;
      StepLoss<float> sl = pretrain_loss(tape, bb, in, w.codes, plan);
      auto scaled = ops::scale(sl.loss, 1.0f / float(cfg.batch));
      const double v = sl.loss.value()(0, 0);
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "pretrain: non-finite loss at step " << step << " (recording " << rec.id << ")";
        throw Error(msg.str());
      }
      tape.backward(scaled);
      loss += v / cfg.batch;
      hits += sl.hits;
      preds += sl.predictions;
    }
    clip_global_norm(bb.params, cfg.clip);
    const double scale = warmup_lr(1.0, step, cfg.warmup);
    opt.step(bb.params, scale);

    const StepMetric m{step, loss, double(hits) / double(preds), cfg.lr * scale};
    res.metrics.push_back(m);
    if (on_metric) on_metric(m);
    smoothed = step == 1 ? loss : 0.95 * smoothed + 0.05 * loss;
    if (smoothed < res.best_loss) {
      res.best_loss = smoothed;
      res.best = bb;
    }
  }
  return res;
}

ZeroShotResult zero_shot_masked_accuracy(const Backbone<float>& model, const RvqCodec& codec,
                                         const std::vector<Recording>& filtered, double context_s,
                                         double block_s, int n_windows, const SignalConfig& sig,
                                         std::uint64_t seed) {
  check_rates(filtered, sig.resample_hz);
  const Index len = window_samples(context_s, sig.resample_hz);
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < filtered.size(); ++i)
    if (filtered[i].samples() >= len) usable.push_back(i);
  if (usable.empty()) throw Error("zero-shot: no recording is as long as the context window");
  const Index steps = len / codec.downsample;
  const int n_blocks = static_cast<int>(std::lround(context_s / block_s));
  const MaskPlan plan = block_mask(steps, n_blocks, {n_blocks / 2});

  Backbone<float> bb = model;
  ZeroShotResult res;
  std::mt19937_64 rng(seed);
  for (int w = 0; w < n_windows; ++w) {
    const Recording& rec = filtered[usable[static_cast<std::size_t>(w) % usable.size()]];
    std::uniform_int_distribution<Index> pick_start(0, rec.samples() - len);
    const TokenWindow win = make_window(rec, pick_start(rng), len, codec, sig, bb.cfg.c_max);
    const ModelInput in = make_model_input(bb, codec, win.codes, win.sensors, win.mask);
    Tape<float> tape;
    auto h = forward(tape, bb, in, &plan.masked_steps);
    const MaskedTargets mt = masked_targets(win.codes, plan, in.mask());
    auto logits = logits_heads(tape, bb, ops::gather_rows(h, mt.rows));
    for (std::size_t q = 0; q < logits.size(); ++q) {
      const auto& lv = logits[q].value();
      for (Index i = 0; i < lv.rows(); ++i) {
        Index arg = 0;
        lv.row(i).maxCoeff(&arg);
        res.predicted.push_back(static_cast<int>(arg));
        res.target.push_back(mt.per_level[q][static_cast<std::size_t>(i)]);
      }
    }
  }
  res.predictions = res.predicted.size();
  if (res.predictions == 0) throw Error("zero-shot: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < res.predictions; ++i) hits += res.predicted[i] == res.target[i];
  res.accuracy = double(hits) / double(res.predictions);
  res.over_chance = res.accuracy * codec.vocab;
  res.standard_error = std::sqrt(res.accuracy * (1 - res.accuracy) / double(res.predictions));
  return res;
}

}  // namespace megxl

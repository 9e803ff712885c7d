#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "megxl/model.hpp"
#include "megxl/optim.hpp"
#include "megxl/rvq.hpp"
#include "megxl/signal.hpp"

namespace megxl {

/// Temporal block mask over token steps: a union of whole grid blocks,
/// shared by every channel.
struct MaskPlan {
  std::vector<Index> masked_steps;             // sorted
  std::vector<std::pair<Index, Index>> blocks;  // grid intervals [begin, end)
  std::vector<int> chosen;                      // sorted block indices
  std::uint64_t seed = 0;

  double fraction(Index steps) const { return double(masked_steps.size()) / double(steps); }
};

/// Block grid with boundaries floor(b * steps / n_blocks).
std::vector<std::pair<Index, Index>> block_grid(Index steps, int n_blocks);

/// Draws n_masked distinct grid blocks uniformly without replacement.
MaskPlan sample_block_mask(Index steps, int n_blocks, int n_masked, std::uint64_t seed);

/// Plan that masks the given block indices.
MaskPlan block_mask(Index steps, int n_blocks, std::vector<int> chosen);

struct PretrainConfig {
  double sample_len_s = 150;
  double block_s = 3;
  double mask_fraction = 0.4;
  long steps = 35000;
  double lr = 1e-4;
  long warmup = 250;
  double weight_decay = 1e-4;
  double clip = 1.0;
  int batch = 1;
  SignalConfig signal;

  int n_blocks() const;
  int n_blocks_masked() const;
  void validate() const;
};

/// Rows (valid channel, masked step) in padded layout, plus each row's
/// targets per level.
struct MaskedTargets {
  std::vector<Index> rows;
  std::vector<std::vector<int>> per_level;  // [Q][rows]
};

MaskedTargets masked_targets(const TokenGrid& z, const MaskPlan& plan, const ChannelMask& mask);

/// -(1 / (|M| C Q)) sum over masked steps, valid channels and levels of
/// log p(z); `logits` holds one [C_max * T', V] matrix per level.
template <typename Scalar>
Var<Scalar> masked_ce_loss(std::span<const Var<Scalar>> logits, const TokenGrid& z, const MaskPlan& plan,
                           const ChannelMask& mask) {
  if (plan.masked_steps.empty()) throw Error("masked_ce_loss: empty mask");
  if (static_cast<int>(logits.size()) != z.levels) throw Error("masked_ce_loss: level count mismatch");
  const MaskedTargets mt = masked_targets(z, plan, mask);
  const Scalar scale = Scalar(1.0 / double(mt.rows.size() * logits.size()));
  std::vector<Var<Scalar>> terms;
  for (int q = 0; q < z.levels; ++q) {
    if (logits[q].rows() != mask.capacity() * z.steps) throw Error("masked_ce_loss: logits shape mismatch");
    terms.push_back(ops::softmax_cross_entropy(ops::gather_rows(logits[q], mt.rows), mt.per_level[q], scale));
  }
  return ops::sum_scalars(std::span<const Var<Scalar>>(terms));
}

/// Loss and masked-token hit count for one window. Heads only see the
/// gathered masked rows, which is the same quantity as masked_ce_loss over
/// full logits.
template <typename Scalar>
struct StepLoss {
  Var<Scalar> loss;
  std::size_t hits = 0;
  std::size_t predictions = 0;
};

template <typename Scalar>
StepLoss<Scalar> pretrain_loss(Tape<Scalar>& tape, Backbone<Scalar>& bb, const ModelInput& in,
                               const TokenGrid& z, const MaskPlan& plan) {
  if (plan.masked_steps.empty()) throw Error("pretrain_loss: empty mask");
  auto h = forward(tape, bb, in, &plan.masked_steps);
  const MaskedTargets mt = masked_targets(z, plan, in.mask());
  auto hm = ops::gather_rows(h, mt.rows);
  auto logits = logits_heads(tape, bb, hm);
  const Scalar scale = Scalar(1.0 / double(mt.rows.size() * logits.size()));
  StepLoss<Scalar> out;
  std::vector<Var<Scalar>> terms;
  for (std::size_t q = 0; q < logits.size(); ++q) {
    terms.push_back(ops::softmax_cross_entropy(logits[q], mt.per_level[q], scale));
    const auto& lv = logits[q].value();
    for (Index i = 0; i < lv.rows(); ++i) {
      Index arg = 0;
      lv.row(i).maxCoeff(&arg);
      out.hits += arg == mt.per_level[q][static_cast<std::size_t>(i)];
    }
    out.predictions += static_cast<std::size_t>(lv.rows());
  }
  out.loss = ops::sum_scalars(std::span<const Var<Scalar>>(terms));
  return out;
}

/// A preprocessed, tokenized window ready for the backbone.
struct TokenWindow {
  TokenGrid codes;
  SensorArray sensors;
  ChannelMask mask;
};

/// Slices `len` samples at `start`, standardizes per segment and encodes.
TokenWindow make_window(const Recording& filtered, Index start, Index len, const RvqCodec& codec,
                        const SignalConfig& sig, Index c_max);

struct StepMetric {
  long step = 0;
  double loss = 0;
  double masked_acc = 0;
  double lr = 0;
};

struct PretrainResult {
  Backbone<float> last;
  Backbone<float> best;  // lowest exponentially smoothed training loss
  double best_loss = 0;
  std::vector<StepMetric> metrics;
};

/// Runs masked-token pretraining on recordings already band-passed and
/// resampled. `on_metric` sees every step (e.g. to append to a log file).
PretrainResult pretrain_run(const std::vector<Recording>& filtered, const RvqCodec& codec,
                            const BackboneConfig& bcfg, const PretrainConfig& cfg, std::uint64_t seed,
                            const std::function<void(const StepMetric&)>& on_metric = {},
                            const Backbone<float>* init = nullptr);

struct ZeroShotResult {
  double accuracy = 0;
  double over_chance = 0;
  double standard_error = 0;
  std::size_t predictions = 0;
  std::vector<int> predicted;
  std::vector<int> target;
};

/// Masks only the central block of each window and scores top-1 token
/// accuracy over masked (valid channel, step, level) positions.
ZeroShotResult zero_shot_masked_accuracy(const Backbone<float>& bb, const RvqCodec& codec,
                                         const std::vector<Recording>& filtered, double context_s,
                                         double block_s, int n_windows, const SignalConfig& sig,
                                         std::uint64_t seed);

}  // namespace megxl

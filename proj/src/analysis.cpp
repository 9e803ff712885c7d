#include "megxl/analysis.hpp"

#include <cmath>
#include <random>

#include "megxl/pretrain.hpp"

namespace megxl {

void check_row_stochastic(const MatrixD& a, double tol) {
  if (a.size() == 0) throw Error("attention matrix is empty");
  if ((a.array() < 0).any()) throw Error("attention matrix has negative entries");
  for (Index i = 0; i < a.rows(); ++i)
    if (std::abs(a.row(i).sum() - 1.0) > tol) throw Error("attention matrix row is not stochastic");
}

double mean_attention_distance(const MatrixD& a, double seconds_per_step) {
  check_row_stochastic(a);
  double total = 0;
  for (Index t = 0; t < a.rows(); ++t)
    for (Index k = 0; k < a.cols(); ++k) total += a(t, k) * std::abs(double(t - k));
  return total / double(a.rows()) * seconds_per_step;
}

double attention_entropy(const MatrixD& a) {
  check_row_stochastic(a);
  double total = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double p = a.data()[i];
    if (p > 0) total -= p * std::log(p);
  }
  return total / double(a.rows());
}

namespace {

struct Moments {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / double(n) : 0.0; }
  double stderr_() const {
    if (n < 2) return 0.0;
    const double var = (sq - sum * sum / double(n)) / double(n - 1);
    return std::sqrt(std::max(0.0, var) / double(n));
  }
};

}  // namespace

std::vector<LayerProfile> layer_attention_profile(const Backbone<float>& model, const RvqCodec& codec,
                                                  const std::vector<Recording>& filtered, double context_s,
                                                  int n_segments, const std::vector<std::uint64_t>& seeds,
                                                  const SignalConfig& sig) {
  const Index len = static_cast<Index>(std::lround(context_s * sig.resample_hz));
  std::vector<const Recording*> usable;
  for (const auto& r : filtered)
    if (r.samples() >= len) usable.push_back(&r);
  if (usable.empty()) throw Error("analysis: no recording is as long as the context window");
  const double sps = seconds_per_step(codec.downsample, sig.resample_hz);
  const int layers = model.cfg.layers;
  Backbone<float> bb = model;
  std::vector<Moments> mad(static_cast<std::size_t>(layers)), ent(static_cast<std::size_t>(layers));

  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_rec(0, usable.size() - 1);
    for (int s = 0; s < n_segments; ++s) {
      const Recording& rec = *usable[pick_rec(rng)];
      std::uniform_int_distribution<Index> pick_start(0, rec.samples() - len);
      const TokenWindow w = make_window(rec, pick_start(rng), len, codec, sig, bb.cfg.c_max);
      const ModelInput in = make_model_input(bb, codec, w.codes, w.sensors, w.mask);
      AttentionCapture cap;
      Tape<float> tape;
      forward(tape, bb, in, nullptr, &cap);
      std::vector<Moments> seg_mad(static_cast<std::size_t>(layers)), seg_ent(static_cast<std::size_t>(layers));
      for (const auto& m : cap.temporal_maps) {
        seg_mad[static_cast<std::size_t>(m.layer)].add(mean_attention_distance(m.weights, sps));
        seg_ent[static_cast<std::size_t>(m.layer)].add(attention_entropy(m.weights));
      }
      for (int l = 0; l < layers; ++l) {
        mad[static_cast<std::size_t>(l)].add(seg_mad[static_cast<std::size_t>(l)].mean());
        ent[static_cast<std::size_t>(l)].add(seg_ent[static_cast<std::size_t>(l)].mean());
      }
    }
  }
  std::vector<LayerProfile> out;
  for (int l = 0; l < layers; ++l) {
    const auto& m = mad[static_cast<std::size_t>(l)];
    const auto& e = ent[static_cast<std::size_t>(l)];
    out.push_back({l + 1, m.mean(), m.stderr_(), e.mean(), e.stderr_(), m.n});
  }
  return out;
}

}  // namespace megxl

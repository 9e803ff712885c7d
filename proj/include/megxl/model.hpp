#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "megxl/attention.hpp"
#include "megxl/autodiff.hpp"
#include "megxl/rvq.hpp"
#include "megxl/sensors.hpp"

namespace megxl {

struct BackboneConfig {
  int layers = 8;
  int d_model = 512;
  int heads = 8;
  int ffn_mult = 4;
  int levels = 6;
  int vocab = 256;
  int d_codebook = 16;
  int c_max = 64;
  int d_fourier = 256;
  double sigma_position = 1.8;
  double sigma_orientation = 1.0;

  void validate() const {
    if (layers < 1 || d_model < 2 || heads < 1 || ffn_mult < 1 || levels < 1 || vocab < 1 ||
        d_codebook < 1 || c_max < 1 || d_fourier < 2)
      throw Error("backbone config: sizes must be positive");
    if (d_model % 2 != 0) throw Error("backbone config: d_model must be even");
    if ((d_model / 2) % heads != 0) throw Error("backbone config: d_model/2 must be divisible by heads");
    if (((d_model / 2) / heads) % 2 != 0) throw Error("backbone config: head dim must be even for RoPE");
  }
  int d_half() const { return d_model / 2; }
};

/// Truncated normal (2 sigma) initializer.
template <typename Scalar>
Matrix<Scalar> trunc_normal(Index rows, Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double v = normal(rng);
    while (std::abs(v) > 2.0) v = normal(rng);
    m.data()[i] = Scalar(v * std);
  }
  return m;
}

inline std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

/// Criss-cross transformer backbone with sensor embeddings and per-level
/// token heads.
template <typename Scalar>
struct Backbone {
  BackboneConfig cfg;
  FourierMap position_map;
  FourierMap orientation_map;
  ParameterStore<Scalar> params;

  static Backbone create(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone b;
    b.cfg = cfg;
    b.position_map = FourierMap(cfg.d_fourier, cfg.sigma_position, seed ^ 0x9e3779b97f4a7c15ull);
    b.orientation_map = FourierMap(cfg.d_fourier, cfg.sigma_orientation, seed ^ 0xc2b2ae3d27d4eb4full);
    std::mt19937_64 rng(seed);
    const Index d = cfg.d_model, dh = cfg.d_half(), df = cfg.d_fourier, dff = cfg.ffn_mult * cfg.d_model;
    auto& p = b.params;
    p.add("embed.w_proj", trunc_normal<Scalar>(cfg.levels * cfg.d_codebook, d, 0.02, rng));
    p.add("embed.mask", trunc_normal<Scalar>(1, d, 0.02, rng));
    p.add("sensor.w_pos", trunc_normal<Scalar>(df, d, 0.02, rng));
    p.add("sensor.w_ori", trunc_normal<Scalar>(df, d, 0.02, rng));
    p.add("sensor.type", trunc_normal<Scalar>(kSensorTypeCount, d, 0.02, rng));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string pre = layer_prefix(l);
      p.add(pre + "norm1", Matrix<Scalar>::Ones(1, d));
      for (const char* part : {"spatial.", "temporal."})
        for (const char* w : {"wq", "wk", "wv", "wo"})
          p.add(pre + part + w, trunc_normal<Scalar>(dh, dh, 0.02, rng));
      p.add(pre + "norm2", Matrix<Scalar>::Ones(1, d));
      p.add(pre + "ffn.w1", trunc_normal<Scalar>(d, dff, 0.02, rng));
      p.add(pre + "ffn.b1", Matrix<Scalar>::Zero(1, dff));
      p.add(pre + "ffn.w2", trunc_normal<Scalar>(dff, d, 0.02, rng));
      p.add(pre + "ffn.b2", Matrix<Scalar>::Zero(1, d));
    }
    for (int q = 0; q < cfg.levels; ++q) {
      p.add("heads." + std::to_string(q) + ".w", trunc_normal<Scalar>(d, cfg.vocab, 0.02, rng));
      p.add("heads." + std::to_string(q) + ".b", Matrix<Scalar>::Zero(1, cfg.vocab));
    }
    return b;
  }

  template <typename Other>
  Backbone<Other> cast() const {
    Backbone<Other> out;
    out.cfg = cfg;
    out.position_map = position_map;
    out.orientation_map = orientation_map;
    out.params = params.template cast<Other>();
    return out;
  }

  std::size_t parameter_count() const { return params.scalar_count(); }
};

/// Inputs that do not depend on trainable parameters: concatenated frozen
/// codebook rows per token and precomputed sensor geometry features.
struct ModelInput {
  MatrixF token_features;  // [C_max * steps, Q * d_codebook]; padded rows zero
  SensorFeatures sensors;
  Index steps = 0;

  const ChannelMask& mask() const { return sensors.mask; }
};

/// Builds the input for `z` (codes of the valid channels, in mask order).
template <typename Scalar>
ModelInput make_model_input(const Backbone<Scalar>& bb, const RvqCodec& codec, const TokenGrid& z,
                            const SensorArray& sensors, const ChannelMask& mask) {
  if (mask.capacity() != bb.cfg.c_max) throw Error("model input: mask capacity differs from C_max");
  if (z.channels != mask.count() || sensors.count() != mask.count())
    throw Error("model input: channel count mismatch");
  if (z.levels != bb.cfg.levels || codec.d_codebook != bb.cfg.d_codebook)
    throw Error("model input: codec does not match backbone config");
  ModelInput in;
  in.steps = z.steps;
  in.sensors = make_sensor_features(sensors, bb.position_map, bb.orientation_map, mask);
  const MatrixF feats = codebook_features(codec, z);
  in.token_features = MatrixF::Zero(mask.capacity() * z.steps, feats.cols());
  Index src = 0;
  for (Index c = 0; c < mask.capacity(); ++c) {
    if (!mask.valid[static_cast<std::size_t>(c)]) continue;
    in.token_features.middleRows(c * z.steps, z.steps) = feats.middleRows(src * z.steps, z.steps);
    ++src;
  }
  return in;
}

/// Rows (c * steps + t) of every channel at the given timesteps.
inline std::vector<Index> rows_at_steps(const std::vector<Index>& steps_set, Index channels, Index steps) {
  std::vector<Index> rows;
  rows.reserve(steps_set.size() * static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c)
    for (Index t : steps_set) rows.push_back(c * steps + t);
  return rows;
}

/// Replaces token embeddings at the masked timesteps, for all channels, by
/// the learnable mask embedding.
template <typename Scalar>
Var<Scalar> apply_mask(Var<Scalar> tokens, const std::vector<Index>& masked_steps, Index channels,
                       Index steps, Var<Scalar> mask_embedding) {
  if (masked_steps.empty()) return tokens;
  for (Index t : masked_steps)
    if (t < 0 || t >= steps) throw Error("apply_mask: timestep out of range");
  return ops::replace_rows(tokens, rows_at_steps(masked_steps, channels, steps), mask_embedding);
}

template <typename Scalar>
Vector<Scalar> row_keep_mask(const ChannelMask& mask, Index steps) {
  Vector<Scalar> keep(mask.capacity() * steps);
  for (Index c = 0; c < mask.capacity(); ++c)
    keep.segment(c * steps, steps).setConstant(mask.valid[static_cast<std::size_t>(c)] ? Scalar(1) : Scalar(0));
  return keep;
}

/// h0 = W_proj [e1; ...; eQ] (mask embedding at masked steps) + sensor
/// embedding; padded channels are zero.
template <typename Scalar>
Var<Scalar> embed_tokens(Tape<Scalar>& tape, Backbone<Scalar>& bb, const ModelInput& in,
                         const std::vector<Index>* masked_steps = nullptr) {
  const Index c_max = bb.cfg.c_max;
  if (in.token_features.rows() != c_max * in.steps ||
      in.token_features.cols() != bb.cfg.levels * bb.cfg.d_codebook)
    throw Error("embed_tokens: shape mismatch");
  auto& p = bb.params;
  auto feats = tape.constant(in.token_features.template cast<Scalar>());
  auto tok = ops::matmul(feats, tape.leaf(p.at("embed.w_proj")));
  if (masked_steps) tok = apply_mask(tok, *masked_steps, c_max, in.steps, tape.leaf(p.at("embed.mask")));
  auto sensor = sensor_embedding(tape, in.sensors, tape.leaf(p.at("sensor.w_pos")),
                                 tape.leaf(p.at("sensor.w_ori")), tape.leaf(p.at("sensor.type")));
  auto h = ops::add_block_rows(tok, sensor, in.steps);
  return ops::mask_rows(h, row_keep_mask<Scalar>(in.mask(), in.steps));
}

/// One pre-norm block: spatial attention on the first half of the features,
/// temporal attention (RoPE) on the second half, then a SELU FFN.
template <typename Scalar>
Var<Scalar> criss_cross_layer(Tape<Scalar>& tape, Backbone<Scalar>& bb, int layer, Var<Scalar> h,
                              const ChannelMask& mask, Index steps, AttentionCapture* capture = nullptr) {
  const auto& cfg = bb.cfg;
  if (h.cols() != cfg.d_model || h.rows() != mask.capacity() * steps)
    throw Error("criss_cross_layer: shape mismatch");
  const std::vector<int> valid = mask.valid_indices();
  if (valid.empty()) throw Error("criss_cross_layer: all channels invalid");
  auto& p = bb.params;
  const std::string pre = layer_prefix(layer);
  auto w = [&](const std::string& name) { return tape.leaf(p.at(pre + name)); };
  const Index dh = cfg.d_half();
  if (capture) capture->current_layer = layer;

  auto n1 = ops::rms_norm(h, w("norm1"));
  auto xs = ops::slice_cols(n1, 0, dh);
  auto xt = ops::slice_cols(n1, dh, dh);
  auto s = spatial_attention(ops::matmul(xs, w("spatial.wq")), ops::matmul(xs, w("spatial.wk")),
                             ops::matmul(xs, w("spatial.wv")), steps, cfg.heads, valid, capture);
  auto t = temporal_attention(ops::matmul(xt, w("temporal.wq")), ops::matmul(xt, w("temporal.wk")),
                              ops::matmul(xt, w("temporal.wv")), steps, cfg.heads, valid, capture);
  h = ops::add(h, ops::hcat(ops::matmul(s, w("spatial.wo")), ops::matmul(t, w("temporal.wo"))));

  auto n2 = ops::rms_norm(h, w("norm2"));
  auto f = ops::linear(ops::selu(ops::linear(n2, w("ffn.w1"), w("ffn.b1"))), w("ffn.w2"), w("ffn.b2"));
  return ops::mask_rows(ops::add(h, f), row_keep_mask<Scalar>(mask, steps));
}

/// embed_tokens followed by all layers: final hidden states [C_max*T', d].
template <typename Scalar>
Var<Scalar> forward(Tape<Scalar>& tape, Backbone<Scalar>& bb, const ModelInput& in,
                    const std::vector<Index>* masked_steps = nullptr, AttentionCapture* capture = nullptr) {
  auto h = embed_tokens(tape, bb, in, masked_steps);
  for (int l = 0; l < bb.cfg.layers; ++l) h = criss_cross_layer(tape, bb, l, h, in.mask(), in.steps, capture);
  return h;
}

/// Q independent affine heads over hidden rows: one [rows, V] logit matrix
/// per level. Softmax is applied only by the losses and metrics.
template <typename Scalar>
std::vector<Var<Scalar>> logits_heads(Tape<Scalar>& tape, Backbone<Scalar>& bb, Var<Scalar> h) {
  std::vector<Var<Scalar>> out;
  for (int q = 0; q < bb.cfg.levels; ++q) {
    const std::string name = "heads." + std::to_string(q);
    out.push_back(ops::linear(h, tape.leaf(bb.params.at(name + ".w")), tape.leaf(bb.params.at(name + ".b"))));
  }
  return out;
}

enum class AttentionMode { Dense, Factorized };

/// Analytic attention score/mix cost: dense (C T')^2 d versus factorized
/// (C T'^2 + T' C^2) d / 2.
inline double attention_cost_estimate(double channels, double steps, double d_model, AttentionMode mode) {
  if (!(channels > 0) || !(steps > 0) || !(d_model > 0)) throw Error("attention cost: sizes must be positive");
  if (mode == AttentionMode::Dense) return (channels * steps) * (channels * steps) * d_model;
  return (channels * steps * steps + steps * channels * channels) * d_model / 2;
}

}  // namespace megxl

#pragma once

#include <random>

#include "megxl/model.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace megxl;

inline SensorArray random_sensors(Index c, std::mt19937_64& rng) {
  SensorArray a;
  a.positions = oracle::randn(c, 3, rng, 0.1);
  a.orientations = oracle::randn(c, 3, rng);
  a.orientations.rowwise().normalize();
  for (Index i = 0; i < c; ++i) a.types.push_back(i % 2 ? SensorType::Magnetometer : SensorType::Gradiometer);
  return a;
}

inline ChannelMask first_valid(Index c, Index c_max) {
  ChannelMask m;
  m.valid.assign(static_cast<std::size_t>(c_max), false);
  for (Index i = 0; i < c; ++i) m.valid[static_cast<std::size_t>(i)] = true;
  return m;
}

template <typename Scalar>
ModelInput random_input(const Backbone<Scalar>& bb, const ChannelMask& mask, Index steps, std::mt19937_64& rng) {
  ModelInput in;
  in.steps = steps;
  in.sensors = make_sensor_features(random_sensors(mask.count(), rng), bb.position_map, bb.orientation_map, mask);
  in.token_features =
      oracle::randn(mask.capacity() * steps, bb.cfg.levels * bb.cfg.d_codebook, rng).template cast<float>();
  for (Index c = 0; c < mask.capacity(); ++c)
    if (!mask.valid[static_cast<std::size_t>(c)]) in.token_features.middleRows(c * steps, steps).setZero();
  return in;
}

/// Replaces every parameter by N(0, std^2) draws (gains around 1) so that
/// oracle comparisons exercise non-trivial magnitudes.
template <typename Scalar>
void randomize(Backbone<Scalar>& bb, std::mt19937_64& rng, double std) {
  for (auto& [name, p] : bb.params) {
    const bool gain = name.find("norm") != std::string::npos;
    Matrix<Scalar> v = oracle::randn(p.value.rows(), p.value.cols(), rng, std).template cast<Scalar>();
    if (gain) v.array() += Scalar(1);
    p.value = v;
  }
}

inline BackboneConfig micro_config(int c_max = 2) {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.levels = 2;
  cfg.vocab = 8;
  cfg.d_codebook = 3;
  cfg.c_max = c_max;
  cfg.d_fourier = 8;
  return cfg;
}

}  // namespace fixture

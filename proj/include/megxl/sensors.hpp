#pragma once

#include <cstdint>
#include <vector>

#include "megxl/autodiff.hpp"
#include "megxl/tensor.hpp"

namespace megxl {

enum class SensorType : std::uint8_t { Gradiometer = 0, Magnetometer = 1 };
inline constexpr int kSensorTypeCount = 2;

/// Sensor geometry in the head frame: positions in meters, unit orientations.
struct SensorArray {
  MatrixD positions;     // [C, 3]
  MatrixD orientations;  // [C, 3]
  std::vector<SensorType> types;

  Index count() const { return positions.rows(); }
  void validate() const;
  /// Rows reordered by `perm` (new row i = old row perm[i]).
  SensorArray permuted(const std::vector<int>& perm) const;
};

/// Frozen Gaussian Fourier feature map gamma(v) = [cos(2 pi B v); sin(2 pi B v)].
struct FourierMap {
  MatrixD frequencies;  // [d_fourier/2, 3]
  double sigma = 1.0;

  FourierMap() = default;
  FourierMap(int d_fourier, double sigma, std::uint64_t seed);
  int dim() const { return static_cast<int>(2 * frequencies.rows()); }
};

Eigen::VectorXd fourier_features(const FourierMap& map, const Eigen::Vector3d& v);

/// Fourier features for every row of `points` ([C, 3] -> [C, d_fourier]).
MatrixD fourier_features(const FourierMap& map, const MatrixD& points);

/// Channel validity after padding to C_max channels.
struct ChannelMask {
  std::vector<bool> valid;

  Index capacity() const { return static_cast<Index>(valid.size()); }
  Index count() const;
  std::vector<int> valid_indices() const;
};

struct PaddedSignal {
  MatrixF data;  // [C_max, T]
  ChannelMask mask;
};

PaddedSignal pad_and_mask(const MatrixF& data, Index c_max);

/// Geometry inputs of the sensor embedding, precomputed once per array.
struct SensorFeatures {
  MatrixD position_features;     // [C_max, d_fourier], padded rows zero
  MatrixD orientation_features;  // [C_max, d_fourier]
  std::vector<int> type_index;   // [C_max], -1 for padded rows
  ChannelMask mask;
};

SensorFeatures make_sensor_features(const SensorArray& arr, const FourierMap& pos_map,
                                    const FourierMap& ori_map, const ChannelMask& mask);

/// proj_pos(gamma_pos(p)) + proj_ori(gamma_ori(o)) + type_embed(type) per
/// channel, zero for padded rows. Parameters: w_pos [d_fourier, d_model],
/// w_ori [d_fourier, d_model], type_table [2, d_model].
template <typename Scalar>
Var<Scalar> sensor_embedding(Tape<Scalar>& tape, const SensorFeatures& f, Var<Scalar> w_pos,
                             Var<Scalar> w_ori, Var<Scalar> type_table) {
  const Index c_max = f.mask.capacity();
  if (f.position_features.rows() != c_max || f.orientation_features.rows() != c_max ||
      static_cast<Index>(f.type_index.size()) != c_max)
    throw Error("sensor_embedding: mask/geometry length mismatch");
  auto pos = tape.constant(f.position_features.template cast<Scalar>());
  auto ori = tape.constant(f.orientation_features.template cast<Scalar>());
  std::vector<Index> type_rows(static_cast<std::size_t>(c_max));
  Vector<Scalar> keep(c_max);
  for (Index c = 0; c < c_max; ++c) {
    const bool valid = f.mask.valid[static_cast<std::size_t>(c)];
    type_rows[static_cast<std::size_t>(c)] = valid ? f.type_index[static_cast<std::size_t>(c)] : 0;
    keep[c] = valid ? Scalar(1) : Scalar(0);
  }
  auto types = ops::gather_rows(type_table, std::move(type_rows));
  auto sum = ops::add(ops::add(ops::matmul(pos, w_pos), ops::matmul(ori, w_ori)), types);
  return ops::mask_rows(sum, std::move(keep));
}

}  // namespace megxl

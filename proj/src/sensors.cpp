#include "megxl/sensors.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace megxl {

void SensorArray::validate() const {
  if (positions.cols() != 3 || orientations.cols() != 3 || orientations.rows() != positions.rows() ||
      static_cast<Index>(types.size()) != positions.rows())
    throw Error("sensor array: inconsistent geometry shapes");
  for (Index c = 0; c < orientations.rows(); ++c)
    if (std::abs(orientations.row(c).norm() - 1.0) > 1e-4)
      throw Error("sensor array: orientation rows must be unit-norm");
}

SensorArray SensorArray::permuted(const std::vector<int>& perm) const {
  SensorArray out;
  out.positions.resize(positions.rows(), 3);
  out.orientations.resize(orientations.rows(), 3);
  out.types.resize(types.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.positions.row(static_cast<Index>(i)) = positions.row(perm[i]);
    out.orientations.row(static_cast<Index>(i)) = orientations.row(perm[i]);
    out.types[i] = types[static_cast<std::size_t>(perm[i])];
  }
  return out;
}

FourierMap::FourierMap(int d_fourier, double sigma_, std::uint64_t seed) : sigma(sigma_) {
  if (d_fourier <= 0 || d_fourier % 2 != 0) throw Error("fourier map: d_fourier must be even");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  frequencies.resize(d_fourier / 2, 3);
  // Stored at float precision so checkpoints (f32 payload) restore them exactly.
  for (Index i = 0; i < frequencies.size(); ++i) frequencies.data()[i] = double(float(normal(rng)));
}

Eigen::VectorXd fourier_features(const FourierMap& map, const Eigen::Vector3d& v) {
  const Eigen::VectorXd angle = 2.0 * std::numbers::pi * (map.frequencies * v);
  Eigen::VectorXd out(2 * angle.size());
  out << angle.array().cos().matrix(), angle.array().sin().matrix();
  return out;
}

MatrixD fourier_features(const FourierMap& map, const MatrixD& points) {
  MatrixD out(points.rows(), map.dim());
  for (Index c = 0; c < points.rows(); ++c)
    out.row(c) = fourier_features(map, Eigen::Vector3d(points.row(c).transpose())).transpose();
  return out;
}

Index ChannelMask::count() const {
  Index n = 0;
  for (bool v : valid) n += v ? 1 : 0;
  return n;
}

std::vector<int> ChannelMask::valid_indices() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < valid.size(); ++c)
    if (valid[c]) out.push_back(static_cast<int>(c));
  return out;
}

PaddedSignal pad_and_mask(const MatrixF& data, Index c_max) {
  if (data.rows() > c_max) throw Error("pad_and_mask: more channels than C_max");
  PaddedSignal out;
  out.data = MatrixF::Zero(c_max, data.cols());
  out.data.topRows(data.rows()) = data;
  out.mask.valid.assign(static_cast<std::size_t>(c_max), false);
  for (Index c = 0; c < data.rows(); ++c) out.mask.valid[static_cast<std::size_t>(c)] = true;
  return out;
}

SensorFeatures make_sensor_features(const SensorArray& arr, const FourierMap& pos_map,
                                    const FourierMap& ori_map, const ChannelMask& mask) {
  if (arr.count() != mask.count()) throw Error("sensor features: mask/geometry length mismatch");
  const Index c_max = mask.capacity();
  SensorFeatures f;
  f.mask = mask;
  f.position_features = MatrixD::Zero(c_max, pos_map.dim());
  f.orientation_features = MatrixD::Zero(c_max, ori_map.dim());
  f.type_index.assign(static_cast<std::size_t>(c_max), -1);
  const MatrixD pos = fourier_features(pos_map, arr.positions);
  const MatrixD ori = fourier_features(ori_map, arr.orientations);
  Index src = 0;
  for (Index c = 0; c < c_max; ++c) {
    if (!mask.valid[static_cast<std::size_t>(c)]) continue;
    f.position_features.row(c) = pos.row(src);
    f.orientation_features.row(c) = ori.row(src);
    f.type_index[static_cast<std::size_t>(c)] = static_cast<int>(arr.types[static_cast<std::size_t>(src)]);
    ++src;
  }
  return f;
}

}  // namespace megxl

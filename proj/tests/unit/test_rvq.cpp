#include <doctest.h>

#include <limits>

#include "megxl/rvq.hpp"
#include "oracles.hpp"

using namespace megxl;

namespace {

// Identity frame maps (d == r) with the given codebooks.
RvqCodec identity_codec(int r, std::vector<MatrixF> codebooks) {
  RvqCodec c;
  c.downsample = r;
  c.d_codebook = r;
  c.levels = static_cast<int>(codebooks.size());
  c.vocab = static_cast<int>(codebooks.front().rows());
  c.encoder = MatrixF::Identity(r, r);
  c.decoder = MatrixF::Identity(r, r);
  c.encoder_bias = RowVector<float>::Zero(r);
  c.decoder_bias = RowVector<float>::Zero(r);
  c.codebooks = std::move(codebooks);
  c.validate();
  return c;
}

std::vector<MatrixF> corpus_of(const MatrixF& x) { return {x}; }

RvqTrainConfig small_cfg(int levels, int vocab, int r, int d) {
  RvqTrainConfig cfg;
  cfg.levels = levels;
  cfg.vocab = vocab;
  cfg.downsample = r;
  cfg.d_codebook = d;
  cfg.kmeans_iters = 8;
  cfg.ema_epochs = 3;
  cfg.max_frames = 4000;
  return cfg;
}

}  // namespace

TEST_CASE("token count for 306 channels of 7500 samples at r=12") {
  std::mt19937_64 rng(0);
  RvqCodec c;
  c.downsample = 12;
  c.d_codebook = 4;
  c.levels = 1;
  c.vocab = 4;
  c.encoder = oracle::randn(12, 4, rng).cast<float>();
  c.encoder_bias = RowVector<float>::Zero(4);
  c.decoder = oracle::randn(4, 12, rng).cast<float>();
  c.decoder_bias = RowVector<float>::Zero(12);
  c.codebooks = {oracle::randn(4, 4, rng).cast<float>()};
  const TokenGrid z = rvq_encode(c, MatrixF::Zero(306, 7500 + 5));
  CHECK(z.steps == 625);
  CHECK(z.token_positions() == 191250);
  CHECK_THROWS_AS(rvq_encode(c, MatrixF::Zero(1, 11)), Error);
}

TEST_CASE("decoding a known code grid re-encodes to the same codes") {
  MatrixF cb0(4, 2), cb1(4, 2);
  cb0 << 0, 0, 16, 0, 0, 16, 16, 16;
  cb1 << 0, 0, 1, 0, 0, 1, 2, 2;
  const RvqCodec c = identity_codec(2, {cb0, cb1});
  TokenGrid z(3, 10, 2, 4, 2);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 3);
  for (auto& v : z.codes) v = static_cast<std::uint16_t>(u(rng));
  const TokenGrid back = rvq_encode(c, rvq_decode(c, z));
  CHECK(back.codes == z.codes);
  CHECK(reconstruction_error(c, rvq_decode(c, z)) == 0.0);
}

TEST_CASE("tiny codec codes equal an exhaustive nearest-neighbour oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const RvqCodec c = identity_codec(2, {oracle::randn(4, 2, rng).cast<float>(), oracle::randn(4, 2, rng).cast<float>()});
    const MatrixF x = oracle::randn(3, 41, rng).cast<float>();
    const TokenGrid z = rvq_encode(c, x);
    for (Index ch = 0; ch < 3; ++ch)
      for (Index t = 0; t < 20; ++t) {
        double res[2] = {x(ch, 2 * t), x(ch, 2 * t + 1)};
        for (int q = 0; q < 2; ++q) {
          int best = -1;
          double best_d = std::numeric_limits<double>::infinity();
          for (int k = 0; k < 4; ++k) {
            const double a = res[0] - c.codebooks[q](k, 0), b = res[1] - c.codebooks[q](k, 1);
            if (a * a + b * b < best_d) best_d = a * a + b * b, best = k;
          }
          CHECK(z.at(ch, t, q) == best);
          res[0] -= c.codebooks[q](best, 0);
          res[1] -= c.codebooks[q](best, 1);
        }
      }
  }
}

TEST_CASE("zero rows decode to a zero signal and bad codes are rejected") {
  std::mt19937_64 rng(2);
  MatrixF cb = oracle::randn(3, 2, rng).cast<float>();
  cb.row(0).setZero();
  const RvqCodec c = identity_codec(2, {cb, cb});
  TokenGrid z(2, 5, 2, 3, 2);
  CHECK(rvq_decode(c, z).cwiseAbs().maxCoeff() == 0.0f);
  z.codes[3] = 3;
  CHECK_THROWS_AS(rvq_decode(c, z), Error);
}

TEST_CASE("codec validation") {
  MatrixF cb = MatrixF::Zero(2, 2);
  RvqCodec c = identity_codec(2, {cb});
  c.codebooks[0](0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(c.validate(), Error);
  c.codebooks[0] = MatrixF::Zero(3, 2);
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("constant corpus is reconstructed almost exactly") {
  const MatrixF x = MatrixF::Constant(2, 12 * 400, 0.7f);
  const auto res = rvq_train(corpus_of(x), small_cfg(2, 8, 12, 4));
  CHECK(reconstruction_error(res.codec, x) < 1e-6);
  const TokenGrid z = rvq_encode(res.codec, x);
  const MatrixF lat = codebook_features(res.codec, z);
  const MatrixD frame = MatrixD::Constant(1, 12, 0.7);
  const MatrixD latent = (frame * res.codec.encoder.cast<double>()).rowwise() + res.codec.encoder_bias.cast<double>();
  const MatrixD sum = lat.row(0).leftCols(4).cast<double>() + lat.row(0).rightCols(4).cast<double>();
  CHECK((sum - latent).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("one level with V=1 reproduces the mean frame") {
  std::mt19937_64 rng(4);
  const MatrixF x = oracle::randn(1, 3 * 200, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(1, 1, 3, 3));
  const MatrixD frames = frames_of(x, 0, 3);
  const RowVector<double> mean = frames.colwise().mean();
  const MatrixF y = rvq_decode(res.codec, rvq_encode(res.codec, x));
  for (Index t = 0; t < 200; ++t)
    for (int i = 0; i < 3; ++i) CHECK(y(0, t * 3 + i) == doctest::Approx(mean[i]).epsilon(1e-5));
  const double variance = (frames.rowwise() - mean).squaredNorm() / double(frames.size());
  CHECK(reconstruction_error(res.codec, x) == doctest::Approx(variance).epsilon(1e-5));
}

TEST_CASE("training MSE is non-increasing and stops with too little data") {
  std::mt19937_64 rng(5);
  const MatrixF x = oracle::randn(2, 12 * 1500, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(3, 32, 12, 8));
  REQUIRE(res.mse_history.size() == 4);
  for (std::size_t i = 1; i < res.mse_history.size(); ++i) CHECK(res.mse_history[i] <= res.mse_history[i - 1] + 1e-6);
  CHECK_THROWS_AS(rvq_train(corpus_of(MatrixF::Zero(1, 12 * 100)), small_cfg(1, 32, 12, 8)), Error);
}

TEST_CASE("more levels never raise reconstruction error") {
  std::mt19937_64 rng(6);
  const MatrixF x = oracle::randn(3, 12 * 1200, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(6, 16, 12, 8));
  double prev = std::numeric_limits<double>::infinity();
  for (int q : {1, 3, 6}) {
    RvqCodec c = res.codec;
    c.levels = q;
    c.codebooks.resize(static_cast<std::size_t>(q));
    const double mse = reconstruction_error(c, x);
    CHECK(mse <= prev);
    prev = mse;
  }
}

TEST_CASE("residual norms shrink level by level on every frame") {
  std::mt19937_64 rng(7);
  const MatrixF x = oracle::randn(2, 12 * 1000, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(6, 16, 12, 8));
  const MatrixD frames = frames_of(x, 1, 12);
  const MatrixD lat = (frames * res.codec.encoder.cast<double>()).rowwise() + res.codec.encoder_bias.cast<double>();
  MatrixD norms;
  quantize_latents(res.codec, lat, &norms);
  for (int q = 1; q <= 6; ++q) CHECK(((norms.col(q) - norms.col(q - 1)).array() <= 1e-12).all());
}

TEST_CASE("encoding is channel-permutation equivariant") {
  std::mt19937_64 rng(8);
  const MatrixF x = oracle::randn(4, 12 * 300, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(2, 16, 12, 8));
  const std::vector<int> perm{2, 0, 3, 1};
  MatrixF xp(4, x.cols());
  for (int i = 0; i < 4; ++i) xp.row(i) = x.row(perm[i]);
  const TokenGrid a = rvq_encode(res.codec, x), b = rvq_encode(res.codec, xp);
  for (int i = 0; i < 4; ++i)
    for (Index t = 0; t < a.steps; ++t)
      for (int q = 0; q < 2; ++q) CHECK(b.at(i, t, q) == a.at(perm[i], t, q));
}

TEST_CASE("reconstruction error matches a 64-bit recomputation") {
  std::mt19937_64 rng(9);
  const MatrixF x = oracle::randn(2, 12 * 400 + 7, rng).cast<float>();
  const auto res = rvq_train(corpus_of(x), small_cfg(2, 16, 12, 4));
  const MatrixF y = rvq_decode(res.codec, rvq_encode(res.codec, x));
  double sq = 0;
  for (Index c = 0; c < 2; ++c)
    for (Index t = 0; t < y.cols(); ++t) sq += std::pow(double(x(c, t)) - double(y(c, t)), 2);
  CHECK(reconstruction_error(res.codec, x) == doctest::Approx(sq / double(y.size())).epsilon(1e-6));
}

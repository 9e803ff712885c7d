// Analytic, oracle-equivalence and format criteria.
#include <Eigen/LU>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "acceptance.hpp"
#include "corpus.hpp"
#include "files.hpp"
#include "fixtures.hpp"
#include "megxl/analysis.hpp"
#include "megxl/gradcheck.hpp"
#include "megxl/io.hpp"
#include "model_oracle.hpp"

namespace acceptance {
namespace {

using namespace megxl;
namespace fs = std::filesystem;

TokenGrid random_codes(Index channels, Index steps, int levels, int vocab, std::mt19937_64& rng) {
  TokenGrid z(channels, steps, levels, vocab, 12);
  std::uniform_int_distribution<int> u(0, vocab - 1);
  for (auto& c : z.codes) c = static_cast<std::uint16_t>(u(rng));
  return z;
}

// ---------------------------------------------------------------- 1
Outcome gradient_correctness() {
  double worst_pre = 0, worst_ft = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const BackboneConfig cfg = fixture::micro_config(3);
    auto bb = Backbone<double>::create(cfg, seed);
    fixture::randomize(bb, rng, 0.3);
    const Index steps = 24;
    const ModelInput in = fixture::random_input(bb, fixture::first_valid(2, 3), steps, rng);
    const TokenGrid z = random_codes(2, steps, cfg.levels, cfg.vocab, rng);
    const MaskPlan plan = sample_block_mask(steps, 8, 3, seed);
    // Step refinement keeps central differences from straddling the SELU kink at 0.
    const GradCheckOptions opt{1e-4, 64, seed, 3};

    auto pre = [&](bool grad) {
      Tape<double> t;
      auto l = pretrain_loss(t, bb, in, z, plan).loss;
      if (grad) t.backward(l);
      return l.value()(0, 0);
    };
    worst_pre = std::max(worst_pre, finite_diff_check(bb.params, pre, opt));

    // Backbone and decoder head share one store so both get checked.
    HeadConfig hc;
    hc.hidden = 8;
    hc.init_bias = -2;
    for (auto& [name, p] : make_decode_head<double>(2 * cfg.d_model, 6, hc, seed + 100))
      bb.params.add(name, p.value + oracle::randn(p.value.rows(), p.value.cols(), rng, 0.2));
    const auto spans = word_token_spans(4, 72, 12);
    const MatrixD targets = oracle::randn(4, 6, rng);
    const std::vector<int> labels{0, 1, 0, 2};
    auto ft = [&](bool grad) {
      Tape<double> t;
      auto pooled = ops::pool_word_features(forward(t, bb, in), spans, in.mask(), steps);
      auto pred = decode_head_forward(t, bb.params, pooled);
      auto l = ops::dsiglip_loss(pred, targets, labels, t.leaf(bb.params.at("head.log_t")),
                                 t.leaf(bb.params.at("head.bias")));
      if (grad) t.backward(l);
      return l.value()(0, 0);
    };
    worst_ft = std::max(worst_ft, finite_diff_check(bb.params, ft, opt));
  }
  return {worst_pre < 1e-3 && worst_ft < 1e-3,
          cat("max rel err pretrain ", worst_pre, ", d-siglip ", worst_ft, " (10 seeds, limit 1e-3)")};
}

// ---------------------------------------------------------------- 2
Outcome objective_calibration() {
  BackboneConfig cfg;  // full-size defaults except the channel capacity
  cfg.c_max = 8;
  const Index steps = 50, channels = 6;
  const double ln_v = std::log(256.0);
  const ChannelMask mask = fixture::first_valid(channels, cfg.c_max);

  // Real tokens from a codec fitted to a synthetic recording.
  const fixture::World w = [&] {
    SynthConfig sc;
    sc.n_subjects = 1;
    sc.channels = int(channels);
    sc.duration_s = 120;
    sc.seed = 11;
    return fixture::make_world(sc, cfg.levels, cfg.vocab, cfg.d_codebook);
  }();
  const TokenWindow win = make_window(w.filtered[0], 0, steps * 12, w.codec, w.signal, cfg.c_max);

  std::mt19937_64 rng(2);
  RvqCodec rand_codec = w.codec;
  for (auto& cb : rand_codec.codebooks) cb = oracle::randn(cb.rows(), cb.cols(), rng, 3).cast<float>();
  TokenGrid constant = win.codes;
  std::fill(constant.codes.begin(), constant.codes.end(), 0);

  struct Case {
    const char* name;
    const RvqCodec* codec;
    TokenGrid z;
  };
  const std::vector<Case> cases{{"codec tokens", &w.codec, win.codes},
                                {"random codes, wide codebooks", &rand_codec, random_codes(channels, steps, 6, 256, rng)},
                                {"constant code", &w.codec, constant}};
  const MaskPlan plan = sample_block_mask(steps, 4, 2, 1);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::uint64_t seed = 0;
  for (const auto& c : cases) {
    auto bb = Backbone<float>::create(cfg, ++seed);
    const ModelInput in = make_model_input(bb, *c.codec, c.z, win.sensors, mask);
    Tape<float> t;
    const double l = pretrain_loss(t, bb, in, c.z, plan).loss.value()(0, 0);
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  return {lo >= 0.95 * ln_v && hi <= 1.05 * ln_v,
          cat("initial loss in [", lo, ", ", hi, "], ln 256 = ", ln_v, " (8 layers, d=512, 3 inputs)")};
}

// ---------------------------------------------------------------- 3
Outcome masking_arithmetic() {
  const PretrainConfig pc;
  const Index steps = 625;
  const int nb = pc.n_blocks(), nm = pc.n_blocks_masked();
  const auto grid = block_grid(steps, nb);
  const ChannelMask mask = fixture::first_valid(5, 8);
  std::mt19937_64 rng(0);
  const TokenGrid z = random_codes(5, steps, 1, 4, rng);
  double sum = 0;
  bool blocks_ok = true, rank_ok = true;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const MaskPlan plan = sample_block_mask(steps, nb, nm, s);
    sum += plan.fraction(steps);
    std::vector<Index> from_blocks;
    for (int b : plan.chosen)
      for (Index t = grid[b].first; t < grid[b].second; ++t) from_blocks.push_back(t);
    std::sort(from_blocks.begin(), from_blocks.end());
    blocks_ok = blocks_ok && int(plan.chosen.size()) == nm && from_blocks == plan.masked_steps;

    // Channel x time indicator of positions the loss is taken over.
    MatrixD m = MatrixD::Zero(8, steps);
    for (Index r : masked_targets(z, plan, mask).rows) m(r / steps, r % steps) = 1;
    const auto valid = mask.valid_indices();
    MatrixD mv(static_cast<Index>(valid.size()), steps);
    for (std::size_t i = 0; i < valid.size(); ++i) mv.row(Index(i)) = m.row(valid[i]);
    rank_ok = rank_ok && Eigen::FullPivLU<MatrixD>(mv).rank() == 1 && m.bottomRows(3).isZero();
  }
  const double frac = sum / 1000;
  return {std::abs(frac - 0.4) <= 0.002 && blocks_ok && rank_ok,
          cat("mean fraction ", frac, " (", nm, "/", nb, " blocks), block unions ", blocks_ok ? "ok" : "BROKEN",
              ", rank-1 ", rank_ok ? "ok" : "BROKEN")};
}

// ---------------------------------------------------------------- 4
Outcome chance_levels() {
  // (a) untrained masked prediction.
  SynthConfig sc;
  sc.n_subjects = 2;
  sc.channels = 8;
  sc.duration_s = 240;
  sc.seed = 4;
  const fixture::World w = fixture::make_world(sc, 2, 256, 8);
  BackboneConfig bc;
  bc.layers = 2;
  bc.d_model = 32;
  bc.heads = 2;
  bc.levels = 2;
  bc.vocab = 256;
  bc.d_codebook = 8;
  bc.c_max = 8;
  bc.d_fourier = 16;
  const auto bb = Backbone<float>::create(bc, 4);
  const ZeroShotResult zs = zero_shot_masked_accuracy(bb, w.codec, w.filtered, 9, 3, 40, w.signal, 4);
  const double p0 = 1.0 / 256, se0 = std::sqrt(p0 * (1 - p0) / double(zs.predictions));
  const bool a_ok = std::abs(zs.accuracy - p0) <= 3 * se0;

  // (b) random predictions against K unit-norm word vectors.
  std::string detail = cat("(a) acc ", zs.accuracy, " vs ", p0, " +- 3*", se0, " over ", zs.predictions);
  bool b_ok = true;
  for (int k : {50, 250}) {
    const Vocabulary v = generate_vocab_embeddings(k, 64, 7);
    std::mt19937_64 rng{static_cast<std::uint64_t>(k)};
    const Index n = 5000;
    const MatrixD pred = oracle::randn(n, 64, rng);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) labels[std::size_t(i)] = int(i % k);
    const double acc = topk_balanced_accuracy(retrieve_words(pred, v.embeddings, 10), labels, k, 10);
    const double p = 10.0 / k;
    // Balanced classes: the macro average has the binomial standard error.
    const double se = 100 * std::sqrt(p * (1 - p) / double(n));
    b_ok = b_ok && std::abs(acc - 100 * p) <= 3 * se;
    detail += cat("; (b) K=", k, " top-10 ", acc, "% vs ", 100 * p, " +- 3*", se);
  }
  return {a_ok && b_ok, detail};
}

// ---------------------------------------------------------------- 5
Outcome factorized_attention() {
  std::mt19937_64 rng(5);
  const Index c = 3, steps = 4, dh = 4;
  const MatrixD q = oracle::randn(c * steps, dh, rng), k = oracle::randn(c * steps, dh, rng),
                v = oracle::randn(c * steps, dh, rng);
  Tape<double> t;
  const MatrixD got = temporal_attention(t.constant(q), t.constant(k), t.constant(v), steps, 1, {0, 1, 2}).value();
  double gap = 0;
  for (Index ch = 0; ch < c; ++ch) {
    const MatrixD want = oracle::attention(q.middleRows(ch * steps, steps), k.middleRows(ch * steps, steps),
                                           v.middleRows(ch * steps, steps), true);
    gap = std::max(gap, (got.middleRows(ch * steps, steps) - want).cwiseAbs().maxCoeff());
  }

  // Wall time of one full layer at fixed C as T' doubles.
  BackboneConfig cfg = fixture::micro_config(8);
  cfg.layers = 1;
  cfg.heads = 4;
  auto bb = Backbone<float>::create(cfg, 5);
  const ChannelMask mask = fixture::first_valid(8, 8);
  std::vector<double> ts, secs;
  for (Index tp : {64, 128, 256, 512}) {
    const MatrixF h = oracle::randn(8 * tp, cfg.d_model, rng).cast<float>();
    double best = std::numeric_limits<double>::infinity();
    const int reps = tp <= 128 ? 9 : 5;
    for (int r = 0; r < reps; ++r) {
      Tape<float> tape;
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = criss_cross_layer(tape, bb, 0, tape.constant(h), mask, tp);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (!out.value().allFinite()) throw Error("non-finite layer output");
    }
    ts.push_back(double(tp));
    secs.push_back(best);
  }
  const double slope = loglog_slope(ts, secs);
  std::string times;
  for (std::size_t i = 0; i < ts.size(); ++i) times += cat(i ? ", " : "", ts[i], ":", secs[i] * 1e3, "ms");
  return {gap < 1e-5 && std::abs(slope - 2.0) <= 0.3,
          cat("temporal vs dense gap ", gap, "; time exponent ", slope, " (", times, ")")};
}

// ---------------------------------------------------------------- 6
Outcome padded_channel_independence() {
  BackboneConfig cfg = fixture::micro_config(6);
  cfg.layers = 8;
  double worst_out = 0, worst_loss = 0, worst_grad = 0, padded_out = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto bb = Backbone<double>::create(cfg, seed);
    std::mt19937_64 rng(seed);
    fixture::randomize(bb, rng, 0.2);
    const Index steps = 12, valid = 3;
    const ModelInput in = fixture::random_input(bb, fixture::first_valid(valid, 6), steps, rng);
    ModelInput noisy = in;
    const Index pad_rows = (6 - valid) * steps;
    noisy.token_features.bottomRows(pad_rows) =
        oracle::randn(pad_rows, noisy.token_features.cols(), rng, 50).cast<float>();
    noisy.sensors.position_features.bottomRows(3) = oracle::randn(3, cfg.d_fourier, rng, 9);
    noisy.sensors.orientation_features.bottomRows(3) = oracle::randn(3, cfg.d_fourier, rng, 9);
    for (Index c = valid; c < 6; ++c) noisy.sensors.type_index[std::size_t(c)] = int(c % 2);
    const TokenGrid z = random_codes(valid, steps, cfg.levels, cfg.vocab, rng);
    const MaskPlan plan = sample_block_mask(steps, 4, 2, seed);

    auto run = [&](const ModelInput& x, MatrixD& out, std::vector<MatrixD>& grads) {
      bb.params.zero_grad();
      Tape<double> t;
      auto h = forward(t, bb, x, &plan.masked_steps);
      out = h.value();
      Tape<double> t2;
      auto l = pretrain_loss(t2, bb, x, z, plan).loss;
      t2.backward(l);
      for (const auto& [_, p] : bb.params) grads.push_back(p.grad);
      return l.value()(0, 0);
    };
    MatrixD a, b;
    std::vector<MatrixD> ga, gb;
    const double la = run(in, a, ga), lb = run(noisy, b, gb);
    worst_out = std::max(worst_out, (a - b).topRows(valid * steps).cwiseAbs().maxCoeff());
    padded_out = std::max(padded_out, b.bottomRows(pad_rows).cwiseAbs().maxCoeff());
    worst_loss = std::max(worst_loss, std::abs(la - lb));
    for (std::size_t i = 0; i < ga.size(); ++i)
      worst_grad = std::max(worst_grad, (ga[i] - gb[i]).cwiseAbs().maxCoeff());
  }
  return {worst_out <= 1e-6 && worst_loss <= 1e-6 && worst_grad <= 1e-6 && padded_out == 0,
          cat("8 layers: max valid-output change ", worst_out, ", loss change ", worst_loss, ", grad change ",
              worst_grad, ", padded output ", padded_out)};
}

// ---------------------------------------------------------------- 7
Outcome rvq_properties() {
  SynthConfig sc;
  sc.n_subjects = 2;
  sc.channels = 4;
  sc.duration_s = 240;
  sc.seed = 7;
  fixture::World w = fixture::make_world(sc, 6, 32, 8);
  std::vector<MatrixF> corpus;
  for (const auto& r : w.filtered)
    corpus.push_back(standardize_subsegments(r, w.signal.segment_s, w.signal.baseline_s, w.signal.clamp).data);

  std::size_t frames = 0, bad_frames = 0;
  const MatrixD enc = w.codec.encoder.cast<double>();
  const RowVector<double> enc_b = w.codec.encoder_bias.cast<double>();
  for (const auto& x : corpus)
    for (Index c = 0; c < x.rows(); ++c) {
      const MatrixD lat = (frames_of(x, c, w.codec.downsample) * enc).rowwise() + enc_b;
      MatrixD norms;
      quantize_latents(w.codec, lat, &norms);
      for (Index i = 0; i < norms.rows(); ++i) {
        ++frames;
        for (int q = 1; q <= 6; ++q)
          if (norms(i, q) > norms(i, q - 1) + 1e-12) {
            ++bad_frames;
            break;
          }
      }
    }

  bool mse_ok = true;
  std::string mses;
  double prev = std::numeric_limits<double>::infinity();
  for (int q = 1; q <= 6; ++q) {
    RvqCodec c = w.codec;
    c.levels = q;
    c.codebooks.resize(std::size_t(q));
    double mse = 0;
    for (const auto& x : corpus) mse += reconstruction_error(c, x) / double(corpus.size());
    mse_ok = mse_ok && mse <= prev;
    mses += cat(q > 1 ? " " : "", mse);
    prev = mse;
  }

  // Tiny codec against per-level exhaustive nearest-neighbour search.
  RvqTrainConfig tc;
  tc.downsample = 3;
  tc.levels = 2;
  tc.vocab = 4;
  tc.d_codebook = 2;
  tc.kmeans_iters = 5;
  tc.ema_epochs = 1;
  tc.max_frames = 5000;
  const RvqCodec tiny = rvq_train(corpus, tc).codec;
  std::size_t mismatches = 0, checked = 0;
  const MatrixF& x = corpus[0];
  const TokenGrid z = rvq_encode(tiny, x);
  for (Index c = 0; c < x.rows(); ++c) {
    const MatrixD fr = frames_of(x, c, 3);
    for (Index t = 0; t < fr.rows(); ++t) {
      std::vector<double> res(2);
      for (int j = 0; j < 2; ++j) {
        res[std::size_t(j)] = tiny.encoder_bias(j);
        for (int i = 0; i < 3; ++i) res[std::size_t(j)] += fr(t, i) * double(tiny.encoder(i, j));
      }
      for (int q = 0; q < 2; ++q) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 4; ++k) {
          double d = 0;
          for (int j = 0; j < 2; ++j) d += std::pow(res[std::size_t(j)] - tiny.codebooks[q](k, j), 2);
          if (d < best_d) best_d = d, best = k;
        }
        mismatches += z.at(c, t, q) != best;
        ++checked;
        for (int j = 0; j < 2; ++j) res[std::size_t(j)] -= tiny.codebooks[q](best, j);
      }
    }
  }
  return {bad_frames == 0 && mse_ok && mismatches == 0,
          cat(bad_frames, "/", frames, " frames with a rising residual; MSE by Q: ", mses, "; tiny codec ",
              mismatches, "/", checked, " codes off the exhaustive oracle")};
}

// ---------------------------------------------------------------- 10
double brute_mad(const MatrixD& a) {
  double total = 0;
  for (Index t = 0; t < a.rows(); ++t)
    for (Index k = 0; k < a.cols(); ++k) total += a(t, k) * std::abs(double(t - k));
  return total / double(a.rows());
}

double brute_entropy(const MatrixD& a) {
  double total = 0;
  for (Index t = 0; t < a.rows(); ++t)
    for (Index k = 0; k < a.cols(); ++k)
      if (a(t, k) > 0) total -= a(t, k) * std::log(a(t, k));
  return total / double(a.rows());
}

Outcome attention_analysis_oracle() {
  const double sps = seconds_per_step(RvqCodec{}.downsample, SignalConfig{}.resample_hz);
  auto bb = Backbone<double>::create(fixture::micro_config(4), 10);
  std::mt19937_64 rng(10);
  fixture::randomize(bb, rng, 0.5);
  AttentionCapture cap;
  cap.spatial = true;
  const Index steps = 64;
  const ModelInput in = fixture::random_input(bb, fixture::first_valid(3, 4), steps, rng);
  Tape<double> t;
  forward(t, bb, in, nullptr, &cap);
  double worst = 0;
  std::size_t maps = 0;
  bool sizes_ok = true;
  for (const auto* set : {&cap.temporal_maps, &cap.spatial_maps})
    for (const auto& m : *set) {
      sizes_ok = sizes_ok && m.weights.rows() <= 64 && m.weights.cols() <= 64;
      worst = std::max(worst, std::abs(mean_attention_distance(m.weights, sps) - sps * brute_mad(m.weights)));
      worst = std::max(worst, std::abs(attention_entropy(m.weights) - brute_entropy(m.weights)));
      ++maps;
    }
  const bool ok = sps == 0.24 && worst <= 1e-9 && sizes_ok && maps == cap.temporal_maps.size() + cap.spatial_maps.size() &&
                  !cap.temporal_maps.empty() && !cap.spatial_maps.empty();
  return {ok, cat(maps, " maps (", cap.temporal_maps.size(), " temporal 64x64), max gap ", worst,
                  ", seconds/step ", sps)};
}

// ---------------------------------------------------------------- 11
std::string without_timing(const std::string& bench_csv) {
  // Drop the wall-time column (5th field) of the data row.
  std::istringstream in(bench_csv);
  std::string header, row, out;
  std::getline(in, header);
  std::getline(in, row);
  std::vector<std::string> f;
  std::stringstream ss(row);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  if (f.size() != 6) throw Error("unexpected bench output: " + bench_csv);
  f.erase(f.begin() + 4);
  for (const auto& x : f) out += x + ",";
  return header + "\n" + out;
}

Outcome reproducibility_and_formats() {
  fixture::ScratchDir dir("acc11");
  const std::string model = " --layers 1 --d-model 16 --heads 2 --c-max 4 --d-fourier 8";
  const std::vector<std::pair<std::string, std::string>> steps{
      {"synth --out data --subjects 3 --channels 4 --duration-s 760 --snr 2 --seed 3", "synth.log"},
      {"train-codec --data data --out codec.ckpt --levels 2 --vocab 16 --d-codebook 4 --max-frames 4000",
       "codec.log"},
      {"pretrain --data data --codec codec.ckpt --out model.ckpt --context-s 9 --steps 4 --seed 5 --metrics "
       "pretrain.csv" + model,
       "pretrain.log"},
      {"finetune --data data --init model.ckpt --out dec.ckpt --epochs 2 --patience 2 --hidden 16 --seed 2"
       " --metrics ft.csv",
       "ft.log"},
      {"finetune --data data --init random --codec codec.ckpt --epochs 2 --hidden 16 --seed 2"
       " --data-fraction 0.5 --metrics ft_random.csv" + model,
       "ft_random.log"},
      {"probe --data data --init model.ckpt --mode full --epochs 2 --seed 1 --metrics probe_full.csv",
       "probe_full.log"},
      {"probe --data data --init model.ckpt --mode matched --epochs 2 --seed 1 --metrics probe_matched.csv",
       "probe_matched.log"},
      {"eval --data data --ckpt dec.ckpt --split test", "eval.log"},
      {"zeroshot --data data --ckpt model.ckpt --windows 3 --seed 1 --metrics zs.csv", "zs.log"},
      {"analyze --data data --ckpt model.ckpt --segments 2 --seeds 2 --metrics an.csv", "an.log"},
      {"bench-attention --channels 4 --tokens 32 --d-model 16 --heads 2 --repeats 1", "bench.log"},
      {"plot-data --figure generalisation --metrics ft.csv ft_random.csv", "plot_gen.log"},
      {"plot-data --figure context --metrics zs.csv", "plot_ctx.log"},
      {"plot-data --figure attention --metrics an.csv", "plot_att.log"},
  };
  std::string failures;
  for (const std::string tag : {"a", "b"}) {
    const fs::path d = dir / tag;
    fs::create_directories(d);
    for (const auto& [args, log] : steps)
      if (fixture::run_cli(args, d, log) != 0) failures += cat(" [", tag, "] '", args, "' failed;");
    progress("cli run " + tag + " done");
  }
  if (!failures.empty()) return {false, failures};

  // Every output file except the timed benchmark must match byte for byte.
  const fs::path a = dir / "a", b = dir / "b";
  const std::string bench_a = without_timing(fixture::slurp(a / "bench.log"));
  const std::string bench_b = without_timing(fixture::slurp(b / "bench.log"));
  fs::remove(a / "bench.log");
  fs::remove(b / "bench.log");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) files += e.is_regular_file();
  const bool same = fixture::same_tree(a, b) && bench_a == bench_b;

  // Checkpoint round trip.
  std::size_t ckpts = 0, ck_bad = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".ckpt") continue;
    ++ckpts;
    const fs::path copy = dir / ("rt-" + e.path().filename().string());
    write_checkpoint(read_checkpoint(e.path()), copy);
    ck_bad += fixture::slurp(copy) != fixture::slurp(e.path());
  }

  // Stimulus-id split hygiene over the decoding sequences.
  const DatasetReader ds(a / "data");
  const SignalConfig sig;
  std::vector<int> ids;
  std::vector<std::vector<int>> per_subject;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    per_subject.emplace_back();
    for (const auto& s : word_sequences(filter_and_resample(ds.load(i), sig), 50, 12, sig)) {
      ids.push_back(s.stimulus_id);
      per_subject.back().push_back(s.stimulus_id);
    }
  }
  const auto split = split_by_stimulus(ids);
  std::map<Split, std::set<int>> members;
  bool hygiene = true;
  for (const auto& sub : per_subject) {
    const auto own = split_by_stimulus(sub);
    for (int id : sub) {
      members[split.at(id)].insert(id);
      hygiene = hygiene && own.at(id) == split.at(id);
    }
  }
  for (const auto& [s1, m1] : members)
    for (const auto& [s2, m2] : members)
      if (s1 != s2)
        for (int id : m1) hygiene = hygiene && !m2.count(id);
  hygiene = hygiene && members.size() == 3;

  return {same && ck_bad == 0 && ckpts >= 4 && hygiene,
          cat(steps.size(), " commands x2, ", files, " files ", same ? "identical" : "DIFFER", "; ", ckpts,
              " checkpoints, ", ck_bad, " changed on re-save; ", ids.size(), " sequences over ", members[Split::Train].size(),
              "/", members[Split::Val].size(), "/", members[Split::Test].size(), " stimulus ids, split hygiene ",
              hygiene ? "ok" : "BROKEN")};
}

}  // namespace

std::vector<Criterion> exact_criteria() {
  return {
      {1, "gradient correctness (finite differences)", gradient_correctness},
      {2, "initial loss near ln 256", objective_calibration},
      {3, "masking arithmetic", masking_arithmetic},
      {4, "chance levels", chance_levels},
      {5, "factorized attention equivalence and cost", factorized_attention},
      {6, "padded channels are inert", padded_channel_independence},
      {7, "residual quantizer properties", rvq_properties},
      {10, "attention analysis oracle", attention_analysis_oracle},
      {11, "reproducibility and formats", reproducibility_and_formats},
  };
}

}  // namespace acceptance

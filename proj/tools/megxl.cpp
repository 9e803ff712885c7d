// Command-line driver for codec training, pretraining, decoding and
// attention analysis on dataset directories.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "megxl/analysis.hpp"
#include "megxl/decode.hpp"
#include "megxl/io.hpp"
#include "megxl/pretrain.hpp"
#include "megxl/rvq.hpp"
#include "megxl/synth.hpp"

namespace fs = std::filesystem;
using namespace megxl;
using nlohmann::json;

namespace {

/// Delimited text sink that truncates on open, so reruns reproduce files.
class MetricsFile {
 public:
  explicit MetricsFile(const std::string& path) {
    if (path.empty()) return;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw Error("cannot write metrics file " + path);
    out_ << std::setprecision(9);
  }
  template <typename... Ts>
  void row(const Ts&... xs) {
    std::ostringstream line;
    line << std::setprecision(9);
    int i = 0;
    ((line << (i++ ? "," : "") << xs), ...);
    if (out_.is_open()) out_ << line.str() << '\n' << std::flush;
    std::cout << line.str() << '\n';
  }
  void comment(const std::string& s) {
    if (out_.is_open()) out_ << "# " << s << '\n';
  }

 private:
  std::ofstream out_;
};

std::string rng_state(std::uint64_t seed) {
  std::ostringstream s;
  s << std::mt19937_64(seed);
  return s.str();
}

std::vector<Recording> load_filtered(const DatasetReader& ds, const std::string& range, const SignalConfig& sig) {
  std::vector<Recording> out;
  for (std::size_t i : ds.select(range)) out.push_back(filter_and_resample(ds.load(i), sig));
  return out;
}

struct LoadedModel {
  Checkpoint ck;
  RvqCodec codec;
  Backbone<float> backbone;
  json config;
};

LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  m.ck = read_checkpoint(path);
  m.config = m.ck.config_json();
  m.codec = unpack_codec(m.ck);
  m.backbone = unpack_backbone(m.ck);
  return m;
}

double checkpoint_context(const json& cfg, double fallback) {
  if (cfg.contains("pretrain") && cfg["pretrain"].contains("sample_len_s")) return cfg["pretrain"]["sample_len_s"].get<double>();
  return fallback;
}

DecodeSplits decode_splits(const std::vector<Recording>& filtered, const AppConfig& app, int downsample) {
  std::vector<WordSequence> all;
  for (const auto& r : filtered) {
    if (r.events.empty()) continue;
    auto seqs = word_sequences(r, app.data.n_words, downsample, app.signal);
    all.insert(all.end(), std::make_move_iterator(seqs.begin()), std::make_move_iterator(seqs.end()));
  }
  if (all.empty()) throw Error("no recording has enough word events for decoding");
  std::vector<int> ids;
  for (const auto& s : all) ids.push_back(s.stimulus_id);
  const auto split = split_by_stimulus(ids, app.data.train_fraction, app.data.val_fraction, app.data.split_salt);
  DecodeSplits d;
  for (auto& s : all) {
    switch (split.at(s.stimulus_id)) {
      case Split::Train: d.train.push_back(std::move(s)); break;
      case Split::Val: d.val.push_back(std::move(s)); break;
      case Split::Test: d.test.push_back(std::move(s)); break;
    }
  }
  return d;
}

Index matched_chunk_steps(double context_s, const SignalConfig& sig, int downsample) {
  return static_cast<Index>(std::lround(context_s * sig.resample_hz / downsample));
}

void write_decoder_checkpoint(const std::string& path, const RvqCodec& codec, const FinetuneResult& res,
                              const json& extra, std::uint64_t seed) {
  Checkpoint ck;
  ck.config = extra.dump();
  ck.rng_state = rng_state(seed);
  pack_codec(ck, codec);
  pack_backbone(ck, res.backbone);
  pack_head(ck, res.head);
  write_checkpoint(ck, path);
}

void emit_epochs(MetricsFile& mf, const EpochMetric& m) { mf.row(m.epoch, m.split, m.loss, m.topk_balanced); }

// ------------------------------------------------------------------ plot-data

struct MetricsTable {
  std::map<std::string, std::string> meta;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

MetricsTable read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file " + path);
  MetricsTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      std::stringstream ss(line.substr(2));
      std::string kv;
      while (ss >> kv) {
        const auto eq = kv.find('=');
        if (eq != std::string::npos) t.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
    } else if (t.header.empty()) {
      t.header = split(line);
    } else {
      t.rows.push_back(split(line));
    }
  }
  return t;
}

struct Accum {
  double sum = 0, sq = 0;
  int n = 0;
  void add(double x) {
    sum += x;
    sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / n : 0; }
  double se() const { return n > 1 ? std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1)) / n) : 0; }
};

int column(const MetricsTable& t, const std::string& name) {
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == name) return static_cast<int>(i);
  throw Error("metrics file lacks column " + name);
}

void plot_data(const std::vector<std::string>& files, const std::string& figure) {
  std::map<std::string, Accum> groups;
  std::map<std::string, std::map<int, std::pair<Accum, Accum>>> layers;
  for (const auto& f : files) {
    const MetricsTable t = read_metrics(f);
    auto meta = [&](const std::string& k) { return t.meta.count(k) ? t.meta.at(k) : std::string("?"); };
    if (figure == "generalisation") {
      const int split = column(t, "split"), acc = column(t, "topk_balanced");
      for (const auto& r : t.rows)
        if (r[static_cast<std::size_t>(split)] == "test")
          groups[meta("init") + "," + meta("data_fraction")].add(std::stod(r[static_cast<std::size_t>(acc)]));
    } else if (figure == "context") {
      const int metric = column(t, "metric"), value = column(t, "value"), ctx = column(t, "train_context_s");
      for (const auto& r : t.rows)
        groups[r[static_cast<std::size_t>(ctx)] + "," + r[static_cast<std::size_t>(metric)]].add(
            std::stod(r[static_cast<std::size_t>(value)]));
    } else if (figure == "attention") {
      const int layer = column(t, "layer"), mad = column(t, "mad_seconds"), ent = column(t, "entropy_nats");
      for (const auto& r : t.rows) {
        auto& cell = layers[meta("context_s")][std::stoi(r[static_cast<std::size_t>(layer)])];
        cell.first.add(std::stod(r[static_cast<std::size_t>(mad)]));
        cell.second.add(std::stod(r[static_cast<std::size_t>(ent)]));
      }
    } else {
      throw Error("unknown figure " + figure);
    }
  }
  std::cout << std::setprecision(9);
  if (figure == "generalisation") {
    std::cout << "init,data_fraction,mean_topk_balanced,stderr,runs\n";
    for (const auto& [k, a] : groups) std::cout << k << ',' << a.mean() << ',' << a.se() << ',' << a.n << '\n';
  } else if (figure == "context") {
    std::cout << "train_context_s,metric,mean,stderr,runs\n";
    for (const auto& [k, a] : groups) std::cout << k << ',' << a.mean() << ',' << a.se() << ',' << a.n << '\n';
  } else {
    std::cout << "context_s,layer,mad_seconds,mad_stderr,entropy_nats,entropy_stderr,runs\n";
    for (const auto& [ctx, ls] : layers)
      for (const auto& [l, c] : ls)
        std::cout << ctx << ',' << l << ',' << c.first.mean() << ',' << c.first.se() << ',' << c.second.mean() << ','
                  << c.second.se() << ',' << c.first.n << '\n';
  }
}

std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") return argv[i + 1];
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  AppConfig app;
  try {
    if (const std::string path = find_config_arg(argc, argv); !path.empty()) app = load_config(path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  CLI::App cli{"MEG token models: codec, masked pretraining, word decoding, attention analysis"};
  cli.require_subcommand(1);
  std::string config_path;
  cli.add_option("--config", config_path, "JSON config (sections: data, signal, codec, model, pretrain, finetune, analysis)");
  std::uint64_t seed = 0;
  std::string data_dir, out_path, metrics_path;
  std::string& subjects = app.data.subjects;

  // synth
  SynthConfig synth;
  auto* c_synth = cli.add_subcommand("synth", "write a seeded synthetic dataset directory");
  c_synth->add_option("--out", out_path)->required();
  c_synth->add_option("--subjects", synth.n_subjects);
  c_synth->add_option("--channels", synth.channels);
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--duration-s", synth.duration_s);
  c_synth->add_option("--rate", synth.sample_rate_hz);
  c_synth->add_option("--vocab", synth.vocab_size);
  c_synth->add_option("--wpm", synth.words_per_minute);
  c_synth->add_option("--snr", synth.snr);
  c_synth->add_option("--variability", synth.subject_variability);
  c_synth->add_option("--d-emb", synth.d_emb);

  // train-codec
  auto* c_codec = cli.add_subcommand("train-codec", "fit the residual vector quantizer");
  c_codec->add_option("--data", data_dir)->required();
  c_codec->add_option("--out", out_path)->required();
  c_codec->add_option("--levels", app.codec.levels);
  c_codec->add_option("--vocab", app.codec.vocab);
  c_codec->add_option("--downsample", app.codec.downsample);
  c_codec->add_option("--d-codebook", app.codec.d_codebook);
  c_codec->add_option("--max-frames", app.codec.max_frames);
  c_codec->add_option("--subjects", subjects, "recording range BEGIN:END");
  c_codec->add_option("--seed", app.codec.seed);

  // pretrain
  std::string codec_path;
  auto* c_pre = cli.add_subcommand("pretrain", "masked token pretraining");
  c_pre->add_option("--data", data_dir)->required();
  c_pre->add_option("--codec", codec_path)->required();
  c_pre->add_option("--out", out_path)->required();
  c_pre->add_option("--context-s", app.pretrain.sample_len_s);
  c_pre->add_option("--steps", app.pretrain.steps);
  c_pre->add_option("--seed", seed);
  c_pre->add_option("--subjects", subjects);
  c_pre->add_option("--metrics", metrics_path);
  c_pre->add_option("--lr", app.pretrain.lr);
  c_pre->add_option("--warmup", app.pretrain.warmup);
  c_pre->add_option("--layers", app.model.layers);
  c_pre->add_option("--d-model", app.model.d_model);
  c_pre->add_option("--heads", app.model.heads);
  c_pre->add_option("--c-max", app.model.c_max);
  c_pre->add_option("--d-fourier", app.model.d_fourier);

  // finetune
  std::string init_path;
  auto* c_ft = cli.add_subcommand("finetune", "end-to-end word decoding");
  c_ft->add_option("--data", data_dir)->required();
  c_ft->add_option("--init", init_path, "checkpoint or 'random'")->required();
  c_ft->add_option("--codec", codec_path, "codec checkpoint (needed with --init random)");
  c_ft->add_option("--vocab-k", app.finetune.eval_vocab);
  c_ft->add_option("--data-fraction", app.finetune.data_fraction);
  c_ft->add_option("--out", out_path);
  c_ft->add_option("--seed", seed);
  c_ft->add_option("--subjects", subjects);
  c_ft->add_option("--metrics", metrics_path);
  c_ft->add_option("--epochs", app.finetune.max_epochs);
  c_ft->add_option("--patience", app.finetune.patience);
  c_ft->add_option("--hidden", app.finetune.head.hidden);
  c_ft->add_option("--lr-backbone", app.finetune.lr_backbone);
  c_ft->add_option("--lr-head", app.finetune.lr_head);
  c_ft->add_option("--layers", app.model.layers);
  c_ft->add_option("--d-model", app.model.d_model);
  c_ft->add_option("--heads", app.model.heads);
  c_ft->add_option("--c-max", app.model.c_max);
  c_ft->add_option("--d-fourier", app.model.d_fourier);

  // probe
  std::string mode = "full";
  double context_s = 0;
  auto* c_probe = cli.add_subcommand("probe", "linear probe on a frozen backbone");
  c_probe->add_option("--data", data_dir)->required();
  c_probe->add_option("--init", init_path)->required();
  c_probe->add_option("--mode", mode)->check(CLI::IsMember({"full", "matched"}));
  c_probe->add_option("--context-s", context_s, "matched-mode chunk length (default: pretraining context)");
  c_probe->add_option("--vocab-k", app.finetune.eval_vocab);
  c_probe->add_option("--seed", seed);
  c_probe->add_option("--subjects", subjects);
  c_probe->add_option("--metrics", metrics_path);
  c_probe->add_option("--epochs", app.finetune.max_epochs);

  // eval
  std::string metric = "topk-balanced", ckpt_path;
  int k = 10;
  std::string split_sel = "test";
  auto* c_eval = cli.add_subcommand("eval", "score a decoder checkpoint");
  c_eval->add_option("--data", data_dir)->required();
  c_eval->add_option("--ckpt", ckpt_path)->required();
  c_eval->add_option("--metric", metric)->check(CLI::IsMember({"topk-balanced"}));
  c_eval->add_option("--k", k);
  c_eval->add_option("--vocab-k", app.finetune.eval_vocab);
  c_eval->add_option("--split", split_sel)->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_option("--subjects", subjects);

  // zeroshot
  int windows = 200;
  auto* c_zs = cli.add_subcommand("zeroshot", "central-block masked token accuracy");
  c_zs->add_option("--data", data_dir)->required();
  c_zs->add_option("--ckpt", ckpt_path)->required();
  c_zs->add_option("--context-s", context_s, "input length (default: pretraining context)");
  c_zs->add_option("--windows", windows);
  c_zs->add_option("--seed", seed);
  c_zs->add_option("--subjects", subjects);
  c_zs->add_option("--metrics", metrics_path);

  // analyze
  auto* c_an = cli.add_subcommand("analyze", "temporal attention distance and entropy per layer");
  c_an->add_option("--data", data_dir)->required();
  c_an->add_option("--ckpt", ckpt_path)->required();
  c_an->add_option("--segments", app.analysis.segments);
  c_an->add_option("--seeds", app.analysis.seeds);
  c_an->add_option("--context-s", app.analysis.context_s);
  c_an->add_option("--subjects", subjects);
  c_an->add_option("--metrics", metrics_path);

  // bench-attention
  int channels = 8, tokens = 128, repeats = 3;
  std::string bench_mode = "factorized";
  auto* c_bench = cli.add_subcommand("bench-attention", "wall time and analytic cost of one attention layer");
  c_bench->add_option("--channels", channels);
  c_bench->add_option("--tokens", tokens);
  c_bench->add_option("--mode", bench_mode)->check(CLI::IsMember({"dense", "factorized"}));
  c_bench->add_option("--d-model", app.model.d_model);
  c_bench->add_option("--heads", app.model.heads);
  c_bench->add_option("--repeats", repeats);

  // plot-data
  std::vector<std::string> metric_files;
  std::string figure;
  auto* c_plot = cli.add_subcommand("plot-data", "aggregate metrics files into plot-ready tables");
  c_plot->add_option("--metrics", metric_files)->required();
  c_plot->add_option("--figure", figure)->required()->check(CLI::IsMember({"generalisation", "context", "attention"}));

  CLI11_PARSE(cli, argc, argv);

  try {
    if (c_synth->parsed()) {
      const SynthDataset ds = generate_dataset(synth);
      write_dataset(out_path, ds);
      const OracleResult o = matched_filter_oracle(synth, ds.recordings, [&] {
        std::vector<int> s(ds.recordings.size());
        std::iota(s.begin(), s.end(), 0);
        return s;
      }());
      std::cout << "wrote " << ds.recordings.size() << " recordings to " << out_path << "; matched-filter top-1 "
                << o.top1 << " over " << o.events << " events\n";
    } else if (c_codec->parsed()) {
      const DatasetReader ds(data_dir);
      std::vector<MatrixF> corpus;
      for (const auto& r : load_filtered(ds, subjects, app.signal))
        corpus.push_back(standardize_subsegments(r, app.signal.segment_s, app.signal.baseline_s, app.signal.clamp).data);
      const RvqTrainResult res = rvq_train(corpus, app.codec);
      Checkpoint ck;
      ck.config = json{{"kind", "codec"}, {"signal", app.signal}, {"codec_train", app.codec}}.dump();
      ck.rng_state = rng_state(app.codec.seed);
      pack_codec(ck, res.codec);
      write_checkpoint(ck, out_path);
      for (std::size_t i = 0; i < res.mse_history.size(); ++i) std::cout << "mse[" << i << "]," << res.mse_history[i] << '\n';
    } else if (c_pre->parsed()) {
      const DatasetReader ds(data_dir);
      const RvqCodec codec = unpack_codec(read_checkpoint(codec_path));
      BackboneConfig bcfg = app.model;
      bcfg.levels = codec.levels;
      bcfg.vocab = codec.vocab;
      bcfg.d_codebook = codec.d_codebook;
      app.pretrain.signal = app.signal;
      const auto filtered = load_filtered(ds, subjects, app.signal);
      MetricsFile mf(metrics_path);
      mf.comment("context_s=" + std::to_string(app.pretrain.sample_len_s) + " seed=" + std::to_string(seed));
      mf.row("step", "loss", "masked_acc", "lr");
      const PretrainResult res = pretrain_run(filtered, codec, bcfg, app.pretrain, seed,
                                              [&](const StepMetric& m) { mf.row(m.step, m.loss, m.masked_acc, m.lr); });
      json cfg{{"kind", "pretrain"}, {"pretrain", app.pretrain}, {"seed", seed}, {"signal", app.signal}};
      for (const auto* which : {"last", "best"}) {
        Checkpoint ck;
        ck.config = cfg.dump();
        ck.rng_state = rng_state(seed);
        pack_codec(ck, codec);
        pack_backbone(ck, std::string(which) == "last" ? res.last : res.best);
        fs::path p(out_path);
        if (std::string(which) == "best") p.replace_filename(p.stem().string() + ".best" + p.extension().string());
        write_checkpoint(ck, p);
      }
    } else if (c_ft->parsed()) {
      const DatasetReader ds(data_dir);
      RvqCodec codec;
      Backbone<float> init;
      if (init_path == "random") {
        if (codec_path.empty()) throw Error("--init random needs --codec");
        codec = unpack_codec(read_checkpoint(codec_path));
        BackboneConfig bcfg = app.model;
        bcfg.levels = codec.levels;
        bcfg.vocab = codec.vocab;
        bcfg.d_codebook = codec.d_codebook;
        init = Backbone<float>::create(bcfg, seed);
      } else {
        LoadedModel m = load_model(init_path);
        codec = m.codec;
        init = std::move(m.backbone);
      }
      if (ds.vocab().size() == 0) throw Error("dataset has no vocab.json");
      const DecodeSplits splits = decode_splits(load_filtered(ds, subjects, app.signal), app, codec.downsample);
      MetricsFile mf(metrics_path);
      std::ostringstream meta;
      meta << "init=" << (init_path == "random" ? "random" : "pretrained") << " data_fraction=" << app.finetune.data_fraction
           << " vocab_k=" << app.finetune.eval_vocab << " seed=" << seed;
      mf.comment(meta.str());
      mf.row("epoch", "split", "loss", "topk_balanced");
      const FinetuneResult res = finetune_run(init, codec, splits, ds.vocab(), app.finetune, seed,
                                              [&](const EpochMetric& m) { emit_epochs(mf, m); });
      if (!out_path.empty())
        write_decoder_checkpoint(out_path, codec, res,
                                 json{{"kind", "decoder"}, {"finetune", app.finetune}, {"seed", seed}, {"signal", app.signal}},
                                 seed);
    } else if (c_probe->parsed()) {
      const DatasetReader ds(data_dir);
      LoadedModel m = load_model(init_path);
      FinetuneConfig fc = app.finetune;
      const double ctx = context_s > 0 ? context_s : checkpoint_context(m.config, 0);
      if (mode == "matched") {
        if (!(ctx > 0)) throw Error("matched mode needs --context-s or a pretraining checkpoint");
        fc.chunk_steps = matched_chunk_steps(ctx, app.signal, m.codec.downsample);
      }
      const DecodeSplits splits = decode_splits(load_filtered(ds, subjects, app.signal), app, m.codec.downsample);
      MetricsFile mf(metrics_path);
      mf.comment("mode=" + mode + " context_s=" + std::to_string(ctx) + " seed=" + std::to_string(seed));
      mf.row("epoch", "split", "loss", "topk_balanced");
      linear_probe_run(m.backbone, m.codec, splits, ds.vocab(), fc, seed, [&](const EpochMetric& e) { emit_epochs(mf, e); });
    } else if (c_eval->parsed()) {
      const DatasetReader ds(data_dir);
      LoadedModel m = load_model(ckpt_path);
      ParameterStore<float> head = unpack_head(m.ck);
      FinetuneConfig fc = app.finetune;
      fc.topk = k;
      const DecodeSplits splits = decode_splits(load_filtered(ds, subjects, app.signal), app, m.codec.downsample);
      const auto& seqs = split_sel == "train" ? splits.train : split_sel == "val" ? splits.val : splits.test;
      const EvalResult r = evaluate_decoder(m.backbone, head, m.codec, seqs, ds.vocab(), fc);
      std::cout << "split,k,vocab_k,words,loss,topk_balanced\n"
                << split_sel << ',' << k << ',' << fc.eval_vocab << ',' << r.words << ',' << r.loss << ','
                << r.topk_balanced << '\n';
    } else if (c_zs->parsed()) {
      const DatasetReader ds(data_dir);
      LoadedModel m = load_model(ckpt_path);
      const double ctx = context_s > 0 ? context_s : checkpoint_context(m.config, app.pretrain.sample_len_s);
      const ZeroShotResult r = zero_shot_masked_accuracy(m.backbone, m.codec, load_filtered(ds, subjects, app.signal), ctx,
                                                         app.pretrain.block_s, windows, app.signal, seed);
      MetricsFile mf(metrics_path);
      mf.comment("ckpt=" + ckpt_path);
      mf.row("context_s", "train_context_s", "metric", "value");
      const double trained = checkpoint_context(m.config, 0);
      mf.row(ctx, trained, "accuracy", r.accuracy);
      mf.row(ctx, trained, "over_chance", r.over_chance);
      mf.row(ctx, trained, "stderr", r.standard_error);
      mf.row(ctx, trained, "predictions", r.predictions);
    } else if (c_an->parsed()) {
      const DatasetReader ds(data_dir);
      LoadedModel m = load_model(ckpt_path);
      const double ctx = app.analysis.context_s > 0 ? app.analysis.context_s : checkpoint_context(m.config, app.pretrain.sample_len_s);
      std::vector<std::uint64_t> seeds;
      for (int s = 0; s < app.analysis.seeds; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
      const auto prof = layer_attention_profile(m.backbone, m.codec, load_filtered(ds, subjects, app.signal), ctx,
                                                app.analysis.segments, seeds, app.signal);
      MetricsFile mf(metrics_path);
      mf.comment("context_s=" + std::to_string(checkpoint_context(m.config, ctx)));
      mf.row("layer", "mad_seconds", "mad_stderr", "entropy_nats", "entropy_stderr", "segments");
      for (const auto& p : prof) mf.row(p.layer, p.mad_seconds, p.mad_stderr, p.entropy_nats, p.entropy_stderr, p.segments);
    } else if (c_bench->parsed()) {
      const int d = app.model.d_model, heads = app.model.heads;
      std::mt19937_64 rng(seed);
      std::normal_distribution<float> normal;
      auto randm = [&](Index r, Index c) {
        MatrixF m(r, c);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
        return m;
      };
      const Index rows = Index(channels) * tokens;
      double best = std::numeric_limits<double>::infinity();
      for (int rep = 0; rep < repeats; ++rep) {
        const MatrixF q = randm(rows, d), kk = randm(rows, d), v = randm(rows, d);
        const auto t0 = std::chrono::steady_clock::now();
        if (bench_mode == "dense") {
          const MatrixF out = dense_attention<float>(q, kk, v, heads);
          if (!out.allFinite()) throw Error("bench: non-finite output");
        } else {
          Tape<float> tape;
          std::vector<int> all(static_cast<std::size_t>(channels));
          std::iota(all.begin(), all.end(), 0);
          const Index h = d / 2;
          auto s = spatial_attention(tape.constant(q.leftCols(h)), tape.constant(kk.leftCols(h)), tape.constant(v.leftCols(h)),
                                     tokens, heads, all);
          auto t = temporal_attention(tape.constant(q.rightCols(h)), tape.constant(kk.rightCols(h)),
                                      tape.constant(v.rightCols(h)), tokens, heads, all);
          if (!s.value().allFinite() || !t.value().allFinite()) throw Error("bench: non-finite output");
        }
        best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
      const auto m = bench_mode == "dense" ? AttentionMode::Dense : AttentionMode::Factorized;
      std::cout << "mode,channels,tokens,d_model,seconds,analytic_cost\n"
                << bench_mode << ',' << channels << ',' << tokens << ',' << d << ',' << best << ','
                << attention_cost_estimate(channels, tokens, d, m) << '\n';
    } else if (c_plot->parsed()) {
      plot_data(metric_files, figure);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

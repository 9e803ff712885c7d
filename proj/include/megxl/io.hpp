#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "megxl/decode.hpp"
#include "megxl/model.hpp"
#include "megxl/pretrain.hpp"
#include "megxl/rvq.hpp"
#include "megxl/signal.hpp"
#include "megxl/synth.hpp"

namespace megxl {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SignalConfig, high_pass_hz, low_pass_hz, resample_hz, segment_s,
                                                baseline_s, clamp)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RvqTrainConfig, downsample, levels, vocab, d_codebook, kmeans_iters,
                                                ema_epochs, ema_decay, max_frames, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneConfig, layers, d_model, heads, ffn_mult, levels, vocab,
                                                d_codebook, c_max, d_fourier, sigma_position, sigma_orientation)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, sample_len_s, block_s, mask_fraction, steps, lr,
                                                warmup, weight_decay, clip, batch, signal)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HeadConfig, hidden, init_log_t, init_bias)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneConfig, lr_backbone, lr_head, weight_decay, clip,
                                                max_epochs, patience, topk, eval_vocab, data_fraction, head,
                                                train_backbone, chunk_steps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_subjects, channels, duration_s, sample_rate_hz,
                                                vocab_size, words_per_minute, snr, seed, zipf_exponent,
                                                subject_variability, shared_noise, latency_jitter_s, template_s,
                                                words_per_stimulus, d_emb)

struct DataSection {
  std::string subjects;  // "BEGIN:END" half-open range of recordings, empty = all
  int n_words = 50;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  std::uint64_t split_salt = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSection, subjects, n_words, train_fraction, val_fraction,
                                                split_salt)

struct AnalysisSection {
  int segments = 100;
  int seeds = 5;
  double context_s = 0;  // 0 = the checkpoint's pretraining context
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnalysisSection, segments, seeds, context_s)

/// Whole-run configuration; every section is optional in the file.
struct AppConfig {
  DataSection data;
  SignalConfig signal;
  RvqTrainConfig codec;
  BackboneConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  AnalysisSection analysis;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AppConfig, data, signal, codec, model, pretrain, finetune, analysis)

AppConfig load_config(const std::filesystem::path& path);

// ---- dataset directory ----

inline constexpr std::size_t kSignalHeaderBytes = 32;

void write_signal(const std::filesystem::path& path, const MatrixF& data, double sample_rate_hz);
/// Reads [C, T] and the sample rate; validates magic and payload size.
std::pair<MatrixF, double> read_signal(const std::filesystem::path& path);

void write_vocab(const std::filesystem::path& path, const Vocabulary& v);
Vocabulary read_vocab(const std::filesystem::path& path);

void write_recording(const std::filesystem::path& dir, const Recording& r);
Recording read_recording(const std::filesystem::path& dir, Index vocab_size = -1);

/// Writes dataset.json (recording list and generator settings), vocab.json
/// and one directory per recording.
void write_dataset(const std::filesystem::path& dir, const SynthDataset& ds);

enum class Split { Train, Val, Test };
const char* split_name(Split s);

/// Stimulus ids ordered by a salted hash and cut at the train and
/// train+val quantiles, so an id maps to exactly one split.
std::map<int, Split> split_by_stimulus(std::vector<int> ids, double train_fraction = 0.8,
                                       double val_fraction = 0.1, std::uint64_t salt = 0);

/// Dataset directory opened for on-demand recording loads.
class DatasetReader {
 public:
  explicit DatasetReader(std::filesystem::path dir);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Vocabulary& vocab() const { return vocab_; }
  const nlohmann::json& meta() const { return meta_; }
  std::optional<SynthConfig> synth_config() const;

  Recording load(std::size_t i) const;
  /// Recordings [begin, end) parsed from "BEGIN:END" (empty = all).
  std::vector<std::size_t> select(const std::string& range) const;

 private:
  std::filesystem::path dir_;
  std::vector<std::string> ids_;
  Vocabulary vocab_;
  nlohmann::json meta_;
};

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  MatrixF value;
};

/// Container of named f32 tensors plus a verbatim config snapshot and a
/// serialized RNG state.
struct Checkpoint {
  std::string config;  // JSON text
  std::string rng_state;
  std::vector<NamedTensor> tensors;

  const MatrixF& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void put(std::string name, MatrixF value);
  nlohmann::json config_json() const { return config.empty() ? nlohmann::json::object() : nlohmann::json::parse(config); }
};

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
/// Verifies magic, version, table bounds and the payload CRC32 before
/// returning anything.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Tensor groups: "codec.", "backbone.", "head.", "optim.".
void pack_codec(Checkpoint& ck, const RvqCodec& codec);
RvqCodec unpack_codec(const Checkpoint& ck);
bool has_codec(const Checkpoint& ck);

void pack_backbone(Checkpoint& ck, const Backbone<float>& bb);
/// Restores the backbone; `expect` (if given) must equal the stored config.
Backbone<float> unpack_backbone(const Checkpoint& ck, const BackboneConfig* expect = nullptr);
bool has_backbone(const Checkpoint& ck);

void pack_head(Checkpoint& ck, const ParameterStore<float>& head);
ParameterStore<float> unpack_head(const Checkpoint& ck);

}  // namespace megxl

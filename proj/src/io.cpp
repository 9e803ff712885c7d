#include "megxl/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace megxl {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t& pos, const char* what) {
  if (pos + sizeof(T) > buf.size()) throw Error(std::string("truncated ") + what);
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

json matrix_json(const MatrixD& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

MatrixD matrix_from_json(const json& j, Index cols, const char* what) {
  if (!j.is_array()) throw Error(std::string(what) + ": expected an array of rows");
  MatrixD m(static_cast<Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || static_cast<Index>(j[i].size()) != cols) throw Error(std::string(what) + ": bad row");
    for (Index c = 0; c < cols; ++c) m(static_cast<Index>(i), c) = j[i][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

AppConfig load_config(const fs::path& path) {
  try {
    return json::parse(read_file(path)).get<AppConfig>();
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- signal

void write_signal(const fs::path& path, const MatrixF& data, double sample_rate_hz) {
  std::string buf;
  buf.reserve(kSignalHeaderBytes + static_cast<std::size_t>(data.size()) * 4);
  buf.append("MEGXLSIG", 8);
  put(buf, static_cast<std::uint32_t>(data.rows()));
  put(buf, static_cast<std::uint32_t>(data.cols()));
  put(buf, sample_rate_hz);
  buf.append(kSignalHeaderBytes - buf.size(), '\0');
  buf.append(reinterpret_cast<const char*>(data.data()), static_cast<std::size_t>(data.size()) * sizeof(float));
  write_file(path, buf);
}

std::pair<MatrixF, double> read_signal(const fs::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < kSignalHeaderBytes || buf.compare(0, 8, "MEGXLSIG") != 0)
    throw Error(path.string() + ": malformed signal header");
  std::size_t pos = 8;
  const auto c = get<std::uint32_t>(buf, pos, "signal header");
  const auto t = get<std::uint32_t>(buf, pos, "signal header");
  const auto rate = get<double>(buf, pos, "signal header");
  const std::size_t expect = kSignalHeaderBytes + std::size_t(c) * t * sizeof(float);
  if (buf.size() != expect) throw Error(path.string() + ": header sizes do not match payload");
  if (!(rate > 0)) throw Error(path.string() + ": non-positive sample rate");
  MatrixF m(c, t);
  std::memcpy(m.data(), buf.data() + kSignalHeaderBytes, std::size_t(c) * t * sizeof(float));
  return {std::move(m), rate};
}

// ---------------------------------------------------------------- vocab

void write_vocab(const fs::path& path, const Vocabulary& v) {
  json j;
  j["size"] = v.size();
  j["dim"] = v.dim();
  j["counts"] = v.counts;
  j["embeddings"] = matrix_json(v.embeddings);
  write_file(path, j.dump(1) + "\n");
}

Vocabulary read_vocab(const fs::path& path) {
  const json j = json::parse(read_file(path));
  Vocabulary v;
  v.embeddings = matrix_from_json(j.at("embeddings"), j.at("dim").get<Index>(), "vocab embeddings");
  v.counts = j.at("counts").get<std::vector<long>>();
  v.validate();
  return v;
}

// ---------------------------------------------------------------- recording

namespace {

const char* type_name(SensorType t) { return t == SensorType::Magnetometer ? "mag" : "grad"; }

SensorType type_from(const std::string& s) {
  if (s == "mag") return SensorType::Magnetometer;
  if (s == "grad") return SensorType::Gradiometer;
  throw Error("unknown sensor type: " + s);
}

}  // namespace

void write_recording(const fs::path& dir, const Recording& r) {
  r.validate();
  fs::create_directories(dir);
  write_signal(dir / "signal.f32", r.data, r.sample_rate_hz);
  json s;
  s["positions"] = matrix_json(r.sensors.positions);
  s["orientations"] = matrix_json(r.sensors.orientations);
  json types = json::array();
  for (auto t : r.sensors.types) types.push_back(type_name(t));
  s["types"] = types;
  write_file(dir / "sensors.json", s.dump(1) + "\n");
  json ev = json::array();
  for (const auto& e : r.events) ev.push_back({{"onset_s", e.onset_s}, {"label", e.label}, {"stimulus_id", e.stimulus_id}});
  write_file(dir / "events.json", ev.dump(1) + "\n");
}

Recording read_recording(const fs::path& dir, Index vocab_size) {
  Recording r;
  auto [data, rate] = read_signal(dir / "signal.f32");
  r.data = std::move(data);
  r.sample_rate_hz = rate;
  r.id = dir.filename().string();
  const json s = json::parse(read_file(dir / "sensors.json"));
  r.sensors.positions = matrix_from_json(s.at("positions"), 3, "sensor positions");
  r.sensors.orientations = matrix_from_json(s.at("orientations"), 3, "sensor orientations");
  for (const auto& t : s.at("types")) r.sensors.types.push_back(type_from(t.get<std::string>()));
  if (r.sensors.count() != r.channels()) throw Error(r.id + ": sensor count differs from signal channels");
  const fs::path ev_path = dir / "events.json";
  if (fs::exists(ev_path)) {
    for (const auto& e : json::parse(read_file(ev_path))) {
      WordEvent w{e.at("onset_s").get<double>(), e.at("label").get<int>(), e.value("stimulus_id", -1)};
      if (w.label < 0 || (vocab_size > 0 && w.label >= vocab_size))
        throw Error(r.id + ": label " + std::to_string(w.label) + " outside the vocabulary");
      r.events.push_back(w);
    }
  }
  r.validate();
  return r;
}

void write_dataset(const fs::path& dir, const SynthDataset& ds) {
  fs::create_directories(dir);
  json meta;
  json ids = json::array();
  for (const auto& r : ds.recordings) {
    write_recording(dir / r.id, r);
    ids.push_back(r.id);
  }
  meta["recordings"] = ids;
  meta["synth"] = ds.cfg;
  write_file(dir / "dataset.json", meta.dump(1) + "\n");
  write_vocab(dir / "vocab.json", ds.vocab);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::map<int, Split> split_by_stimulus(std::vector<int> ids, double train_fraction, double val_fraction,
                                       std::uint64_t salt) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1)
    throw Error("split: fractions must be nonnegative and sum to at most 1");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  auto mix = [salt](int id) {
    // splitmix64 finalizer
    std::uint64_t z = static_cast<std::uint64_t>(static_cast<std::int64_t>(id)) + salt + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::sort(ids.begin(), ids.end(), [&](int a, int b) { return mix(a) != mix(b) ? mix(a) < mix(b) : a < b; });
  const auto n = ids.size();
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * double(n)));
  const auto n_val = static_cast<std::size_t>(std::lround((train_fraction + val_fraction) * double(n))) - n_train;
  std::map<int, Split> out;
  for (std::size_t i = 0; i < n; ++i)
    out[ids[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
  return out;
}

DatasetReader::DatasetReader(fs::path dir) : dir_(std::move(dir)) {
  const fs::path meta_path = dir_ / "dataset.json";
  if (fs::exists(meta_path)) {
    meta_ = json::parse(read_file(meta_path));
    ids_ = meta_.at("recordings").get<std::vector<std::string>>();
  } else {
    for (const auto& e : fs::directory_iterator(dir_))
      if (e.is_directory() && fs::exists(e.path() / "signal.f32")) ids_.push_back(e.path().filename().string());
    std::sort(ids_.begin(), ids_.end());
  }
  if (ids_.empty()) throw Error(dir_.string() + ": no recordings");
  if (fs::exists(dir_ / "vocab.json")) vocab_ = read_vocab(dir_ / "vocab.json");
}

std::optional<SynthConfig> DatasetReader::synth_config() const {
  if (!meta_.contains("synth")) return std::nullopt;
  return meta_.at("synth").get<SynthConfig>();
}

Recording DatasetReader::load(std::size_t i) const {
  return read_recording(dir_ / ids_.at(i), vocab_.size() > 0 ? vocab_.size() : -1);
}

std::vector<std::size_t> DatasetReader::select(const std::string& range) const {
  std::size_t begin = 0, end = size();
  if (!range.empty()) {
    const auto colon = range.find(':');
    if (colon == std::string::npos) throw Error("subject range must be BEGIN:END");
    const std::string a = range.substr(0, colon), b = range.substr(colon + 1);
    if (!a.empty()) begin = std::stoul(a);
    if (!b.empty()) end = std::stoul(b);
  }
  if (begin >= end || end > size()) throw Error("subject range out of bounds: " + range);
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------- checkpoint

const MatrixF& Checkpoint::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw Error("checkpoint: missing tensor " + name);
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
}

void Checkpoint::put(std::string name, MatrixF value) {
  for (auto& t : tensors)
    if (t.name == name) {
      t.value = std::move(value);
      return;
    }
  tensors.push_back({std::move(name), std::move(value)});
}

namespace {

constexpr std::array<const char*, 4> kTensorGroups{"codec.", "backbone.", "head.", "optim."};

bool known_group(const std::string& name) {
  return std::any_of(kTensorGroups.begin(), kTensorGroups.end(),
                     [&](const char* g) { return name.rfind(g, 0) == 0; });
}

constexpr char kMagic[] = "MEGXLCKPT";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

}  // namespace

void write_checkpoint(const Checkpoint& ck, const fs::path& path) {
  std::string payload;
  json table = json::array();
  for (const auto& t : ck.tensors) {
    if (!known_group(t.name)) throw Error("checkpoint: unknown tensor group for " + t.name);
    table.push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(t.value.data()), static_cast<std::size_t>(t.value.size()) * sizeof(float));
  }
  const std::string header = json{{"config", ck.config}, {"rng", ck.rng_state}, {"tensors", table}}.dump();
  std::string buf(kMagic, kMagicLen);
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(header.size()));
  buf += header;
  put(buf, static_cast<std::uint64_t>(payload.size()));
  buf += payload;
  put(buf, crc32_of(payload.data(), payload.size()));
  write_file(path, buf);
}

Checkpoint read_checkpoint(const fs::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < kMagicLen || buf.compare(0, kMagicLen, kMagic) != 0) throw Error(path.string() + ": not a checkpoint");
  std::size_t pos = kMagicLen;
  const auto version = get<std::uint32_t>(buf, pos, "checkpoint header");
  if (version != kCheckpointVersion)
    throw Error(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported");
  const auto header_len = get<std::uint64_t>(buf, pos, "checkpoint header");
  if (pos + header_len > buf.size()) throw Error(path.string() + ": truncated checkpoint header");
  const std::string header = buf.substr(pos, header_len);
  pos += header_len;
  const auto payload_len = get<std::uint64_t>(buf, pos, "checkpoint payload");
  if (pos + payload_len + sizeof(std::uint32_t) != buf.size()) throw Error(path.string() + ": truncated payload");
  const char* payload = buf.data() + pos;
  pos += payload_len;
  const auto crc = get<std::uint32_t>(buf, pos, "checkpoint checksum");
  if (crc != crc32_of(payload, payload_len)) throw Error(path.string() + ": checksum failure");

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": malformed checkpoint header: " + e.what());
  }
  Checkpoint ck;
  ck.config = h.at("config").get<std::string>();
  ck.rng_state = h.at("rng").get<std::string>();
  std::set<std::string> seen;
  for (const auto& t : h.at("tensors")) {
    NamedTensor nt;
    nt.name = t.at("name").get<std::string>();
    if (!known_group(nt.name)) throw Error(path.string() + ": unknown tensor " + nt.name);
    if (!seen.insert(nt.name).second) throw Error(path.string() + ": duplicate tensor " + nt.name);
    if (t.at("dtype").get<std::string>() != "f32") throw Error(path.string() + ": unsupported dtype");
    const auto shape = t.at("shape").get<std::vector<Index>>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw Error(path.string() + ": bad shape for " + nt.name);
    const std::uint64_t bytes = std::uint64_t(shape[0]) * std::uint64_t(shape[1]) * sizeof(float);
    if (offset + bytes > payload_len) throw Error(path.string() + ": tensor " + nt.name + " exceeds payload");
    nt.value.resize(shape[0], shape[1]);
    std::memcpy(nt.value.data(), payload + offset, bytes);
    ck.tensors.push_back(std::move(nt));
  }
  return ck;
}

namespace {

void set_config_key(Checkpoint& ck, const std::string& key, json value) {
  json cfg = ck.config_json();
  cfg[key] = std::move(value);
  ck.config = cfg.dump();
}

}  // namespace

void pack_codec(Checkpoint& ck, const RvqCodec& codec) {
  codec.validate();
  set_config_key(ck, "codec", {{"downsample", codec.downsample}, {"levels", codec.levels}, {"vocab", codec.vocab},
                               {"d_codebook", codec.d_codebook}});
  ck.put("codec.encoder", codec.encoder);
  ck.put("codec.encoder_bias", codec.encoder_bias);
  ck.put("codec.decoder", codec.decoder);
  ck.put("codec.decoder_bias", codec.decoder_bias);
  for (int q = 0; q < codec.levels; ++q) ck.put("codec.codebook." + std::to_string(q), codec.codebooks[static_cast<std::size_t>(q)]);
}

bool has_codec(const Checkpoint& ck) { return ck.config_json().contains("codec"); }

RvqCodec unpack_codec(const Checkpoint& ck) {
  const json cfg = ck.config_json();
  if (!cfg.contains("codec")) throw Error("checkpoint has no codec");
  const json& c = cfg.at("codec");
  RvqCodec codec;
  codec.downsample = c.at("downsample").get<int>();
  codec.levels = c.at("levels").get<int>();
  codec.vocab = c.at("vocab").get<int>();
  codec.d_codebook = c.at("d_codebook").get<int>();
  codec.encoder = ck.at("codec.encoder");
  codec.encoder_bias = ck.at("codec.encoder_bias");
  codec.decoder = ck.at("codec.decoder");
  codec.decoder_bias = ck.at("codec.decoder_bias");
  for (int q = 0; q < codec.levels; ++q) codec.codebooks.push_back(ck.at("codec.codebook." + std::to_string(q)));
  std::size_t n = 0;
  for (const auto& t : ck.tensors) n += t.name.rfind("codec.", 0) == 0;
  if (n != 4 + codec.codebooks.size()) throw Error("checkpoint: unexpected codec tensors");
  codec.validate();
  return codec;
}

void pack_backbone(Checkpoint& ck, const Backbone<float>& bb) {
  set_config_key(ck, "model", bb.cfg);
  ck.put("backbone.fourier.position", bb.position_map.frequencies.cast<float>());
  ck.put("backbone.fourier.orientation", bb.orientation_map.frequencies.cast<float>());
  for (const auto& [name, p] : bb.params) ck.put("backbone." + name, p.value);
}

bool has_backbone(const Checkpoint& ck) { return ck.config_json().contains("model"); }

namespace {

std::string describe_mismatch(const BackboneConfig& stored, const BackboneConfig& want) {
  const json a = stored, b = want;
  std::ostringstream msg;
  for (auto it = a.begin(); it != a.end(); ++it)
    if (b.at(it.key()) != it.value()) msg << ' ' << it.key() << " (checkpoint " << it.value() << ", run " << b.at(it.key()) << ")";
  return msg.str();
}

}  // namespace

Backbone<float> unpack_backbone(const Checkpoint& ck, const BackboneConfig* expect) {
  const json cfg = ck.config_json();
  if (!cfg.contains("model")) throw Error("checkpoint has no backbone");
  const BackboneConfig stored = cfg.at("model").get<BackboneConfig>();
  if (expect) {
    const std::string diff = describe_mismatch(stored, *expect);
    if (!diff.empty()) throw Error("checkpoint config mismatch:" + diff);
  }
  Backbone<float> bb = Backbone<float>::create(stored, 0);
  bb.position_map.frequencies = ck.at("backbone.fourier.position").cast<double>();
  bb.orientation_map.frequencies = ck.at("backbone.fourier.orientation").cast<double>();
  std::size_t matched = 2;
  for (auto& [name, p] : bb.params) {
    const MatrixF& v = ck.at("backbone." + name);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) throw Error("checkpoint: shape mismatch for " + name);
    p.value = v;
    ++matched;
  }
  std::size_t stored_count = 0;
  for (const auto& t : ck.tensors) stored_count += t.name.rfind("backbone.", 0) == 0;
  if (stored_count != matched) throw Error("checkpoint: unknown backbone tensors");
  return bb;
}

void pack_head(Checkpoint& ck, const ParameterStore<float>& head) {
  for (const auto& [name, p] : head) {
    if (name.rfind("head.", 0) != 0) throw Error("checkpoint: head parameter without head. prefix: " + name);
    ck.put(name, p.value);
  }
}

ParameterStore<float> unpack_head(const Checkpoint& ck) {
  ParameterStore<float> head;
  for (const auto& t : ck.tensors)
    if (t.name.rfind("head.", 0) == 0) head.add(t.name, t.value);
  if (head.size() == 0) throw Error("checkpoint has no decoder head");
  const bool mlp = head.contains("head.w1") && head.contains("head.b1") && head.contains("head.w2") && head.contains("head.b2");
  const bool affine = head.contains("head.w") && head.contains("head.b");
  if ((mlp == affine) || !head.contains("head.log_t") || !head.contains("head.bias") || head.size() != (mlp ? 6u : 4u))
    throw Error("checkpoint: unexpected decoder head tensors");
  return head;
}

}  // namespace megxl

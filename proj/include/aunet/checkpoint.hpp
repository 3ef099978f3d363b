#pragma once

// Binary weight checkpoint.
//
//   "AUNETCKP"            8-byte magic
//   u32 version           currently 1
//   config record         u32 depth, base_channels, n_classes, n_gates,
//                         in_channels, gate_reduction; u8 deep_supervision,
//                         u8 attention_enabled
//   u64 step, u64 epoch   optimizer progress
//   u32 blob_count
//   blob*                 u32 name_len, name bytes, u32 rank, u64 dims[rank],
//                         f64 values (little-endian)
//
// Blobs cover every named parameter, every batch-norm buffer and, when an
// optimizer state is stored, "adam.m/<param>" and "adam.v/<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aunet/unet.hpp"

namespace aunet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'A', 'U', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Optimizer progress stored alongside the weights.
struct TrainingProgress {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::vector<std::vector<double>> adam_m;  // aligned with named_parameters(); empty if absent
  std::vector<std::vector<double>> adam_v;
};

namespace detail {

struct Blob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <class T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <class T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + ": truncated checkpoint");
  }

 private:
  std::ifstream& in_;
  std::string path_;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, Network& net, const TrainingProgress& progress = {}) {
  std::vector<detail::Blob> blobs;
  const auto params = net.named_parameters();
  for (const auto& [name, t] : params) blobs.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  for (const auto& [name, b] : net.named_buffers()) blobs.push_back({name, Shape{b->size()}, *b});
  if (!progress.adam_m.empty()) {
    if (progress.adam_m.size() != params.size() || progress.adam_v.size() != params.size()) {
      throw ContractError("save_checkpoint: optimizer moments do not match parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      blobs.push_back({"adam.m/" + params[i].first, params[i].second.shape(), progress.adam_m[i]});
      blobs.push_back({"adam.v/" + params[i].first, params[i].second.shape(), progress.adam_v[i]});
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  detail::Writer w(out);
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  const ModelConfig& c = net.config();
  for (std::size_t v : {c.depth, c.base_channels, c.n_classes, c.n_gates, c.in_channels, c.gate_reduction}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint8_t>(c.deep_supervision ? 1 : 0);
  w.put<std::uint8_t>(c.attention_enabled ? 1 : 0);
  w.put<std::uint64_t>(progress.step);
  w.put<std::uint64_t>(progress.epoch);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.bytes(b.name.data(), b.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) w.put<std::uint64_t>(d);
    w.bytes(b.values.data(), b.values.size() * sizeof(double));
  }
  if (!out) throw IoError("write failed for " + path);
}

struct LoadedCheckpoint {
  Network net;
  TrainingProgress progress;
};

inline ModelConfig read_checkpoint_config(detail::Reader& r, const std::string& path) {
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.depth = r.get<std::uint32_t>();
  c.base_channels = r.get<std::uint32_t>();
  c.n_classes = r.get<std::uint32_t>();
  c.n_gates = r.get<std::uint32_t>();
  c.in_channels = r.get<std::uint32_t>();
  c.gate_reduction = r.get<std::uint32_t>();
  c.deep_supervision = r.get<std::uint8_t>() != 0;
  c.attention_enabled = r.get<std::uint8_t>() != 0;
  return c;
}

/// Model configuration stored in a checkpoint header.
inline ModelConfig peek_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  detail::Reader r(in, path);
  return read_checkpoint_config(r, path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  detail::Reader r(in, path);
  ModelConfig cfg = read_checkpoint_config(r, path);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid model record: " + e.what());
  }
  LoadedCheckpoint lc;
  lc.progress.step = r.get<std::uint64_t>();
  lc.progress.epoch = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, detail::Blob> blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    detail::Blob b;
    const auto len = r.get<std::uint32_t>();
    if (len > 4096) throw FormatError(path + ": implausible blob name length");
    b.name.resize(len);
    r.bytes(b.name.data(), len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError(path + ": implausible blob rank for " + b.name);
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(b.shape);
    if (n > (std::size_t{1} << 32)) throw FormatError(path + ": implausible blob size for " + b.name);
    b.values.resize(n);
    r.bytes(b.values.data(), n * sizeof(double));
    std::string key = b.name;
    blobs.emplace(std::move(key), std::move(b));
  }
  lc.net = Network::build(cfg, 0);
  auto take = [&](const std::string& name, std::size_t n) -> const std::vector<double>& {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw FormatError(path + ": missing blob " + name);
    if (it->second.values.size() != n) {
      throw FormatError(path + ": blob " + name + " has " + std::to_string(it->second.values.size()) +
                        " values, expected " + std::to_string(n));
    }
    return it->second.values;
  };
  const auto params = lc.net.named_parameters();
  for (auto [name, t] : params) {
    const auto& v = take(name, t.numel());
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  for (auto& [name, b] : lc.net.named_buffers()) *b = take(name, b->size());
  if (blobs.count("adam.m/" + params.front().first)) {
    for (const auto& [name, t] : params) {
      lc.progress.adam_m.push_back(take("adam.m/" + name, t.numel()));
      lc.progress.adam_v.push_back(take("adam.v/" + name, t.numel()));
    }
  }
  return lc;
}

}  // namespace aunet

#pragma once

// Run configuration: one versioned JSON document covering model, training,
// synthetic data and paths, plus `--section.key value` overrides.

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aunet/benchmark.hpp"
#include "aunet/errors.hpp"
#include "aunet/synthetic.hpp"
#include "aunet/training.hpp"
#include "aunet/unet.hpp"

namespace aunet {

inline constexpr int kConfigVersion = 1;

struct Paths {
  std::string data_dir = "data";        // synth output, train/eval input
  std::string run_dir = "run";          // checkpoints, logs, reports
  std::string checkpoint;               // eval / export input
  std::string checkpoint_b;             // optional second model for paired evaluation
  std::string volume;                   // export-attention input stem
  std::string labels;                   // optional label stem for the export ratio
  std::string output;                   // export-attention output directory
};

struct RunConfig {
  std::uint64_t seed = 1;
  Paths paths;
  ModelConfig model;
  TrainConfig train;
  std::size_t val_count = 4;  // training volumes held out for checkpoint selection
  std::size_t n_train = 20;
  std::size_t n_test = 10;
  SyntheticSpec synth;
  std::size_t target_class = 2;

  void validate() const {
    model.validate();
    train.validate();
    synth.validate();
    if (synth.n_classes != model.n_classes) {
      throw ConfigError("synth.n_classes (" + std::to_string(synth.n_classes) + ") differs from model.n_classes (" +
                        std::to_string(model.n_classes) + ")");
    }
    if (target_class == 0 || target_class >= model.n_classes) {
      throw ConfigError("eval.target_class must lie in [1, model.n_classes)");
    }
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t e = train.crop[a] == 0 ? synth.dims[a] : train.crop[a];
      if (e % model.spatial_multiple() != 0) {
        throw ConfigError("training extent " + std::to_string(e) + " is not divisible by 2^(depth-1) = " +
                          std::to_string(model.spatial_multiple()));
      }
    }
  }

  BenchmarkSpec benchmark() const {
    BenchmarkSpec b;
    b.n_train = n_train;
    b.n_test = n_test;
    b.synth = synth;
    b.model = model;
    b.train = train;
    b.target_class = target_class;
    return b;
  }
};

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

// Every key present in `given` must exist in `schema`; objects recurse.
inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& schema, const std::string& where) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    if (schema.at(it.key()).is_object()) {
      if (!it.value().is_object()) throw ConfigError(path + ": expected an object");
      reject_unknown(it.value(), schema.at(it.key()), path);
    }
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& s = c.synth;
  return json{
      {"version", kConfigVersion},
      {"seed", c.seed},
      {"paths",
       {{"data_dir", c.paths.data_dir},
        {"run_dir", c.paths.run_dir},
        {"checkpoint", c.paths.checkpoint},
        {"checkpoint_b", c.paths.checkpoint_b},
        {"volume", c.paths.volume},
        {"labels", c.paths.labels},
        {"output", c.paths.output}}},
      {"model",
       {{"depth", m.depth},
        {"base_channels", m.base_channels},
        {"n_classes", m.n_classes},
        {"n_gates", m.n_gates},
        {"deep_supervision", m.deep_supervision},
        {"attention_enabled", m.attention_enabled},
        {"in_channels", m.in_channels},
        {"gate_reduction", m.gate_reduction}}},
      {"train",
       {{"batch_size", t.batch_size},
        {"accumulation_steps", t.accumulation_steps},
        {"epochs", t.epochs},
        {"learning_rate", t.learning_rate},
        {"crop", t.crop},
        {"augment", t.augment},
        {"max_rotation_deg", t.ranges.max_rotation_deg},
        {"min_scale", t.ranges.min_scale},
        {"max_scale", t.ranges.max_scale},
        {"flip_probability", t.ranges.flip_probability},
        {"val_every", t.val_every},
        {"val_count", c.val_count}}},
      {"synth",
       {{"n_train", c.n_train},
        {"n_test", c.n_test},
        {"dims", s.dims},
        {"spacing", s.spacing},
        {"n_classes", s.n_classes},
        {"class_intensity", s.class_intensity},
        {"noise_sigma", s.noise_sigma},
        {"large_radius", s.large_radius},
        {"small_radius", s.small_radius},
        {"large_lobe_amplitude", s.large_lobe_amplitude},
        {"small_lobe_amplitude", s.small_lobe_amplitude},
        {"distractor_count", s.distractor_count}}},
      {"eval", {{"target_class", c.target_class}}},
  };
}

inline RunConfig from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const RunConfig defaults;
  detail::reject_unknown(j, to_json(defaults), "");
  if (j.contains("version") && j.at("version") != kConfigVersion) {
    throw ConfigError("unsupported config version " + j.at("version").dump() + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  }
  RunConfig c = defaults;
  detail::read_field(j, "seed", c.seed, "config");
  const nlohmann::json empty = nlohmann::json::object();
  auto sec = [&](const char* k) -> const nlohmann::json& { return j.contains(k) ? j.at(k) : empty; };
  {
    const auto& p = sec("paths");
    detail::read_field(p, "data_dir", c.paths.data_dir, "paths");
    detail::read_field(p, "run_dir", c.paths.run_dir, "paths");
    detail::read_field(p, "checkpoint", c.paths.checkpoint, "paths");
    detail::read_field(p, "checkpoint_b", c.paths.checkpoint_b, "paths");
    detail::read_field(p, "volume", c.paths.volume, "paths");
    detail::read_field(p, "labels", c.paths.labels, "paths");
    detail::read_field(p, "output", c.paths.output, "paths");
  }
  {
    const auto& m = sec("model");
    detail::read_field(m, "depth", c.model.depth, "model");
    detail::read_field(m, "base_channels", c.model.base_channels, "model");
    detail::read_field(m, "n_classes", c.model.n_classes, "model");
    detail::read_field(m, "n_gates", c.model.n_gates, "model");
    detail::read_field(m, "deep_supervision", c.model.deep_supervision, "model");
    detail::read_field(m, "attention_enabled", c.model.attention_enabled, "model");
    detail::read_field(m, "in_channels", c.model.in_channels, "model");
    detail::read_field(m, "gate_reduction", c.model.gate_reduction, "model");
  }
  {
    const auto& t = sec("train");
    detail::read_field(t, "batch_size", c.train.batch_size, "train");
    detail::read_field(t, "accumulation_steps", c.train.accumulation_steps, "train");
    detail::read_field(t, "epochs", c.train.epochs, "train");
    detail::read_field(t, "learning_rate", c.train.learning_rate, "train");
    detail::read_field(t, "crop", c.train.crop, "train");
    detail::read_field(t, "augment", c.train.augment, "train");
    detail::read_field(t, "max_rotation_deg", c.train.ranges.max_rotation_deg, "train");
    detail::read_field(t, "min_scale", c.train.ranges.min_scale, "train");
    detail::read_field(t, "max_scale", c.train.ranges.max_scale, "train");
    detail::read_field(t, "flip_probability", c.train.ranges.flip_probability, "train");
    detail::read_field(t, "val_every", c.train.val_every, "train");
    detail::read_field(t, "val_count", c.val_count, "train");
  }
  {
    const auto& s = sec("synth");
    detail::read_field(s, "n_train", c.n_train, "synth");
    detail::read_field(s, "n_test", c.n_test, "synth");
    detail::read_field(s, "dims", c.synth.dims, "synth");
    detail::read_field(s, "spacing", c.synth.spacing, "synth");
    detail::read_field(s, "n_classes", c.synth.n_classes, "synth");
    detail::read_field(s, "class_intensity", c.synth.class_intensity, "synth");
    detail::read_field(s, "noise_sigma", c.synth.noise_sigma, "synth");
    detail::read_field(s, "large_radius", c.synth.large_radius, "synth");
    detail::read_field(s, "small_radius", c.synth.small_radius, "synth");
    detail::read_field(s, "large_lobe_amplitude", c.synth.large_lobe_amplitude, "synth");
    detail::read_field(s, "small_lobe_amplitude", c.synth.small_lobe_amplitude, "synth");
    detail::read_field(s, "distractor_count", c.synth.distractor_count, "synth");
  }
  detail::read_field(sec("eval"), "target_class", c.target_class, "eval");
  c.train.seed = c.seed;
  return c;
}

/// Parse "a.b=value" style overrides (already split into key and value) into
/// the JSON document. Values are read as JSON when they parse, otherwise as
/// plain strings, so `--paths.run_dir out` and `--model.depth 3` both work.
inline void apply_override(nlohmann::json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) throw ConfigError("empty override key");
  nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  nlohmann::json* node = &doc;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ConfigError("malformed override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = v;
      return;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override '" + key + "': '" + part + "' is not a section");
    pos = dot + 1;
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j = nlohmann::json::parse(ss.str(), nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  return j;
}

/// Config file (optional) merged with overrides, validated.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json doc = path.empty() ? nlohmann::json::object() : read_json_file(path);
  for (const auto& [k, v] : overrides) apply_override(doc, k, v);
  RunConfig c = from_json(doc);
  c.validate();
  return c;
}

}  // namespace aunet

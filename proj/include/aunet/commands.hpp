#pragma once

// Subcommand bodies of the `aunet` tool. Each takes a validated RunConfig and
// works only through the filesystem paths it names.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aunet/benchmark.hpp"
#include "aunet/checkpoint.hpp"
#include "aunet/config.hpp"
#include "aunet/metrics.hpp"
#include "aunet/stats.hpp"
#include "aunet/verify/suite.hpp"
#include "aunet/volume.hpp"

namespace aunet::cmd {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;
inline constexpr int kExitVerify = 5;

struct Manifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string());
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

inline fs::path image_stem(const fs::path& dir, const std::string& name) { return dir / (name + "_image"); }
inline fs::path label_stem(const fs::path& dir, const std::string& name) { return dir / (name + "_label"); }

inline Manifest read_manifest(const fs::path& data_dir) {
  const fs::path p = data_dir / "manifest.json";
  nlohmann::json j;
  try {
    j = read_json_file(p.string());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  Manifest m;
  try {
    m.train = j.at("train").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(p.string() + ": missing or malformed train/test lists");
  }
  return m;
}

inline Dataset load_samples(const fs::path& dir, std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  Dataset d;
  for (const auto& n : names) {
    d.push_back({n, read_volume(image_stem(dir, n).string()), read_labels(label_stem(dir, n).string())});
  }
  return d;
}

// ---------------------------------------------------------------------------

/// Writes data_dir/{train,test}/<name>_{image,label}.{raw,json} and a
/// manifest. The creation time is the only non-deterministic byte range.
inline Manifest synth(const RunConfig& c) {
  const fs::path root(c.paths.data_dir);
  ensure_dir(root / "train");
  ensure_dir(root / "test");
  BenchmarkSpec spec = c.benchmark();
  auto [train, test] = benchmark_data(spec, c.seed);
  Manifest m;
  for (auto& [set, dir, names] : {std::tuple{&train, root / "train", &m.train}, std::tuple{&test, root / "test", &m.test}}) {
    for (const auto& s : *set) {
      write_volume(image_stem(dir, s.name).string(), s.image);
      write_labels(label_stem(dir, s.name).string(), s.labels);
      names->push_back(s.name);
    }
  }
  nlohmann::json j;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["synth"] = to_json(c)["synth"];
  j["train"] = m.train;
  j["test"] = m.test;
  j["created"] = utc_timestamp();
  write_file(root / "manifest.json", j.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------

struct TrainSummary {
  std::size_t epochs_run = 0;
  std::size_t last_epoch = 0;
  std::uint64_t step = 0;
  std::size_t best_epoch = 0;
  double best_score = -1.0;
};

/// Deterministic split of the training names into (fit, validation).
inline std::pair<std::vector<std::string>, std::vector<std::string>> validation_split(std::vector<std::string> names,
                                                                                     std::size_t val_count,
                                                                                     std::uint64_t seed) {
  std::sort(names.begin(), names.end());
  if (val_count >= names.size() && !names.empty()) {
    throw ConfigError("train.val_count (" + std::to_string(val_count) + ") leaves no training volumes out of " +
                      std::to_string(names.size()));
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  std::shuffle(names.begin(), names.end(), rng);
  std::vector<std::string> val(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(val_count));
  std::vector<std::string> fit(names.begin() + static_cast<std::ptrdiff_t>(val_count), names.end());
  std::sort(val.begin(), val.end());
  std::sort(fit.begin(), fit.end());
  return {fit, val};
}

/// Trains until `train.epochs` total epochs; `resume` continues from
/// run_dir/last.ckpt including the optimizer moments and step counter.
inline TrainSummary train_cmd(const RunConfig& c, bool resume, std::ostream& log = std::cerr) {
  const fs::path run(c.paths.run_dir), data(c.paths.data_dir);
  ensure_dir(run);
  const Manifest m = read_manifest(data);
  auto [fit_names, val_names] = validation_split(m.train, c.val_count, c.seed);
  const Dataset fit = load_samples(data / "train", fit_names);
  const Dataset val = load_samples(data / "train", val_names);
  for (const auto& s : fit) {
    if (s.labels.dims != fit.front().labels.dims) throw ConfigError("train: volumes have differing dims");
  }

  Network net = Network::build(c.model, c.seed);
  std::optional<AdamState> opt;
  std::size_t start = 0;
  double best_score = -1.0;
  std::size_t best_epoch = 0;
  const fs::path last = run / "last.ckpt", best = run / "best.ckpt", best_meta = run / "best.json",
                 log_path = run / "train_log.jsonl";
  if (resume) {
    LoadedCheckpoint lc = load_checkpoint(last.string());
    if (!(lc.net.config() == c.model)) throw ConfigError("resume: " + last.string() + " was trained with a different model config");
    net = std::move(lc.net);
    AdamState st;
    st.learning_rate = c.train.learning_rate;
    st.step = lc.progress.step;
    st.m = std::move(lc.progress.adam_m);
    st.v = std::move(lc.progress.adam_v);
    opt = std::move(st);
    start = lc.progress.epoch;
    if (fs::exists(best_meta)) {
      const auto j = read_json_file(best_meta.string());
      best_score = j.value("score", -1.0);
      best_epoch = j.value("epoch", std::size_t{0});
    }
  }
  TrainSummary sum;
  sum.last_epoch = start;
  sum.best_epoch = best_epoch;
  sum.best_score = best_score;
  if (start >= c.train.epochs) {
    log << "nothing to do: checkpoint is at epoch " << start << " of " << c.train.epochs << "\n";
    sum.step = opt ? opt->step : 0;
    return sum;
  }
  TrainConfig tc = c.train;
  tc.epochs = c.train.epochs - start;
  tc.seed = c.seed;

  std::ofstream log_file(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log_file) throw IoError("cannot open " + log_path.string());
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log_file << TrainingLog::to_line(r) << "\n";
    log_file.flush();
    log << "epoch " << r.epoch << " loss " << r.loss;
    if (!r.val_dsc.empty()) {
      log << " val_dsc";
      for (double v : r.val_dsc) log << " " << v;
    }
    log << "\n";
  };
  TrainResult res = train(net, fit, tc, val.empty() ? nullptr : &val, opt, start, hooks);
  sum.epochs_run = res.log.epochs.size();
  sum.last_epoch = start + sum.epochs_run;
  sum.step = res.optimizer.step;
  save_checkpoint(last.string(), net, {res.optimizer.step, sum.last_epoch, res.optimizer.m, res.optimizer.v});

  const bool improved = res.best && res.best_score > best_score;
  if (improved) {
    sum.best_epoch = res.best_epoch;
    sum.best_score = res.best_score;
    const NetworkState final_state = snapshot(net);
    restore(net, *res.best);
    save_checkpoint(best.string(), net, {0, res.best_epoch, {}, {}});
    restore(net, final_state);
  } else if (val.empty()) {
    // without validation the final weights are the selection
    sum.best_epoch = sum.last_epoch;
    save_checkpoint(best.string(), net, {0, sum.last_epoch, {}, {}});
  }
  nlohmann::json meta{{"epoch", sum.best_epoch}, {"score", sum.best_score}, {"validation", val_names}};
  write_file(best_meta, meta.dump(2) + "\n");
  return sum;
}

// ---------------------------------------------------------------------------

/// Names the first differing field, or empty when equal.
inline std::string model_config_diff(const ModelConfig& a, const ModelConfig& b, bool ignore_attention = false) {
  const nlohmann::json ja = to_json(RunConfig{.model = a})["model"], jb = to_json(RunConfig{.model = b})["model"];
  for (auto it = ja.begin(); it != ja.end(); ++it) {
    if (ignore_attention && it.key() == "attention_enabled") continue;
    if (it.value() != jb.at(it.key())) {
      return "model." + it.key() + " (config " + it.value().dump() + ", checkpoint " + jb.at(it.key()).dump() + ")";
    }
  }
  return {};
}

struct EvalResult {
  std::vector<std::string> lines;  // JSONL records, in output order
  std::map<std::string, std::vector<double>> target_dsc;  // per model tag
};

inline EvalResult evaluate_models(const RunConfig& c, std::vector<std::pair<std::string, Network*>> models,
                                  const Dataset& test) {
  EvalResult r;
  const std::size_t nc = c.model.n_classes;
  auto finite_or_null = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  std::map<std::string, std::vector<std::vector<double>>> dsc_by_class;
  for (auto& [tag, net] : models) {
    std::vector<std::vector<ClassMetrics>> per_volume;
    for (const auto& s : test) {
      const LabelVolume p = predict(*net, s.image);
      per_volume.push_back(evaluate_all(p, s.labels, nc));
      for (std::size_t k = 1; k < nc; ++k) {
        const ClassMetrics& cm = per_volume.back()[k];
        nlohmann::json j{{"type", "volume"}, {"model", tag},          {"volume", s.name},
                         {"class", k},       {"dsc", cm.dsc},         {"precision", cm.precision},
                         {"recall", cm.recall}, {"surface_distance_mm", finite_or_null(cm.s2s_mm)}};
        r.lines.push_back(j.dump());
      }
    }
    auto& byc = dsc_by_class[tag];
    byc.assign(nc, {});
    for (std::size_t k = 1; k < nc; ++k) {
      std::vector<double> d, pr, rc, sd;
      for (const auto& v : per_volume) {
        d.push_back(v[k].dsc);
        pr.push_back(v[k].precision);
        rc.push_back(v[k].recall);
        if (v[k].s2s_mm) sd.push_back(*v[k].s2s_mm);
      }
      byc[k] = d;
      auto ms = [](const std::vector<double>& v) -> nlohmann::json {
        if (v.empty()) return nullptr;
        const MeanStd m = mean_std(v);
        return {{"mean", m.mean}, {"std", m.std}};
      };
      nlohmann::json j{{"type", "summary"},   {"model", tag},         {"class", k},
                       {"volumes", test.size()}, {"dsc", ms(d)},        {"precision", ms(pr)},
                       {"recall", ms(rc)},    {"surface_distance_mm", ms(sd)},
                       {"surface_distance_defined", sd.size()}};
      r.lines.push_back(j.dump());
    }
    r.target_dsc[tag] = byc[c.target_class];
  }
  if (models.size() == 2) {
    const auto& a = dsc_by_class[models[0].first];
    const auto& b = dsc_by_class[models[1].first];
    for (std::size_t k = 1; k < nc; ++k) {
      const WilcoxonResult w = wilcoxon_signed_rank(b[k], a[k]);
      double diff = 0.0;
      for (std::size_t i = 0; i < a[k].size(); ++i) diff += b[k][i] - a[k][i];
      diff /= static_cast<double>(std::max<std::size_t>(1, a[k].size()));
      nlohmann::json j{{"type", "paired_test"},
                       {"test", "wilcoxon_signed_rank"},
                       {"metric", "dsc"},
                       {"class", k},
                       {"a", models[0].first},
                       {"b", models[1].first},
                       {"mean_difference_b_minus_a", diff},
                       {"statistic", w.statistic},
                       {"n_nonzero", w.n_used},
                       {"exact", w.exact},
                       {"p_value", w.p_value}};
      r.lines.push_back(j.dump());
    }
  }
  return r;
}

/// Evaluates paths.checkpoint (and paths.checkpoint_b when set) on the test
/// split; writes run_dir/eval_report.jsonl.
inline EvalResult eval_cmd(const RunConfig& c) {
  if (c.paths.checkpoint.empty()) throw ConfigError("eval: paths.checkpoint is required");
  LoadedCheckpoint a = load_checkpoint(c.paths.checkpoint);
  if (const auto d = model_config_diff(c.model, a.net.config()); !d.empty()) {
    throw ConfigError("eval: " + c.paths.checkpoint + " does not match the config: " + d);
  }
  std::optional<LoadedCheckpoint> b;
  if (!c.paths.checkpoint_b.empty()) {
    b = load_checkpoint(c.paths.checkpoint_b);
    if (const auto d = model_config_diff(c.model, b->net.config(), true); !d.empty()) {
      throw ConfigError("eval: " + c.paths.checkpoint_b + " does not match the config: " + d);
    }
  }
  const fs::path data(c.paths.data_dir);
  const Dataset test = load_samples(data / "test", read_manifest(data).test);
  std::vector<std::pair<std::string, Network*>> models{{"A", &a.net}};
  if (b) models.emplace_back("B", &b->net);
  EvalResult r = evaluate_models(c, models, test);
  ensure_dir(c.paths.run_dir);
  std::string text;
  for (const auto& l : r.lines) text += l + "\n";
  write_file(fs::path(c.paths.run_dir) / "eval_report.jsonl", text);
  return r;
}

// ---------------------------------------------------------------------------

struct ExportedMap {
  std::string stem;
  std::size_t scale = 0;
  std::size_t sub_gate = 0;
  std::optional<double> fg_bg_ratio;
};

/// One volume per gate and sub-gate, named gate_s<scale>_g<k>, on the skip grid.
inline std::vector<ExportedMap> export_attention_cmd(const RunConfig& c) {
  if (c.paths.checkpoint.empty()) throw ConfigError("export-attention: paths.checkpoint is required");
  if (c.paths.volume.empty()) throw ConfigError("export-attention: paths.volume is required");
  if (c.paths.output.empty()) throw ConfigError("export-attention: paths.output is required");
  LoadedCheckpoint lc = load_checkpoint(c.paths.checkpoint);
  const Volume img = read_volume(c.paths.volume);
  const std::size_t mult = lc.net.config().spatial_multiple();
  for (std::size_t a = 0; a < 3; ++a) {
    if (img.dims[a] % mult != 0) {
      throw DimensionError("export-attention: volume extent " + std::to_string(img.dims[a]) +
                           " is not divisible by " + std::to_string(mult));
    }
  }
  std::optional<LabelVolume> labels;
  if (!c.paths.labels.empty()) labels = read_labels(c.paths.labels);
  ForwardOutput fo;
  predict(lc.net, img, &fo);
  ensure_dir(c.paths.output);
  std::vector<ExportedMap> out;
  std::map<std::size_t, std::size_t> seen;
  for (std::size_t i = 0; i < fo.attention_maps.size(); ++i) {
    const Tensor& a = fo.attention_maps[i];
    ExportedMap em;
    em.scale = fo.attention_scales[i];
    em.sub_gate = seen[em.scale]++;
    em.stem = (fs::path(c.paths.output) / ("gate_s" + std::to_string(em.scale) + "_g" + std::to_string(em.sub_gate))).string();
    const Dims3 d{a.dim(2), a.dim(3), a.dim(4)};
    Spacing3 sp;
    for (std::size_t k = 0; k < 3; ++k) sp[k] = img.spacing[k] * static_cast<double>(img.dims[k]) / static_cast<double>(d[k]);
    Volume v(d, sp);
    std::copy(a.data().begin(), a.data().end(), v.data.begin());
    nlohmann::json extra{{"gate_scale", em.scale}, {"sub_gate", em.sub_gate}};
    if (labels) {
      try {
        em.fg_bg_ratio = attention_ratio(a, *labels, c.target_class);
        extra["fg_bg_ratio"] = *em.fg_bg_ratio;
        extra["fg_class"] = c.target_class;
      } catch (const UndefinedMetricError&) {
        extra["fg_bg_ratio"] = nullptr;
      }
    }
    write_volume(em.stem, v, "attention", extra);
    out.push_back(em);
  }
  return out;
}

// ---------------------------------------------------------------------------

inline verify::Report verify_cmd(const RunConfig& c) {
  return verify::run_all(fs::path(c.paths.run_dir) / "verify");
}

}  // namespace aunet::cmd
